//! Hermite functions, generalized Laguerre polynomials, the Laguerre
//! connection for STFTs of Hermite pairs, and incomplete gamma helpers.
//!
//! Hermite functions are normalized in L²(ℝ) with the Gaussian e^{−πt²},
//! so h_0(t) = 2^{1/4} e^{−πt²}. All factorial ratios go through
//! [`ln_factorial`].

use std::f64::consts::PI;
use std::sync::OnceLock;

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Default largest admissible Hermite index.
pub const DEFAULT_MAX_INDEX: usize = 64;

/// Values whose magnitude falls below this are returned as exact zero.
pub const UNDERFLOW_CLAMP: f64 = 1e-300;

const RESCALE: f64 = 1e150;

/// Index of a Hermite function h_n, checked against a maximum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HermiteIndex {
    n: usize,
}

impl HermiteIndex {
    pub fn new(n: usize) -> Result<Self> {
        Self::with_max(n, DEFAULT_MAX_INDEX)
    }

    pub fn with_max(n: usize, max: usize) -> Result<Self> {
        if n > max {
            return Err(Error::IndexOverflow { index: n, max });
        }
        Ok(Self { n })
    }

    pub fn get(self) -> usize {
        self.n
    }
}

/// Degree `k` and order `alpha` of L_k^α. Negative orders are evaluated
/// through the reflection identity and need `k + alpha >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LaguerreIndex {
    pub k: usize,
    pub alpha: i64,
}

impl LaguerreIndex {
    pub fn new(k: usize, alpha: i64) -> Self {
        Self { k, alpha }
    }
}

/// ln(n!) accurate to a few ulps of the result.
pub fn ln_factorial(n: usize) -> f64 {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let mut out = Vec::with_capacity(171);
        let mut f = 1.0f64;
        out.push(0.0);
        for k in 1..=170usize {
            f *= k as f64;
            out.push(f.ln());
        }
        out
    });
    if n <= 170 {
        return table[n];
    }
    // Stirling series for ln Γ(x), x = n + 1 > 171.
    let x = n as f64 + 1.0;
    let x2 = x * x;
    (x - 0.5) * x.ln() - x + 0.5 * (2.0 * PI).ln() + 1.0 / (12.0 * x) - 1.0 / (360.0 * x * x2)
        + 1.0 / (1260.0 * x * x2 * x2)
        - 1.0 / (1680.0 * x * x2 * x2 * x2)
}

fn check_finite(t: f64) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("non-finite argument {t}")))
    }
}

/// h_n(t) by the three-term recurrence.
pub fn hermite_eval(n: HermiteIndex, t: f64) -> Result<f64> {
    check_finite(t)?;
    let mut buf = vec![0.0; n.get() + 1];
    hermite_all(t, &mut buf);
    Ok(buf[n.get()])
}

/// Fills `out[j] = h_j(t)` for `j < out.len()`.
pub fn hermite_all(t: f64, out: &mut [f64]) {
    if out.is_empty() {
        return;
    }
    let c = 2.0 * PI.sqrt() * t;
    out[0] = 2f64.powf(0.25) * (-PI * t * t).exp();
    if out.len() > 1 {
        out[1] = c * out[0];
    }
    for n in 1..out.len() - 1 {
        let nf = n as f64;
        out[n + 1] = (c * out[n] - nf.sqrt() * out[n - 1]) / (nf + 1.0).sqrt();
    }
}

/// L_k^α(t).
pub fn laguerre_eval(idx: LaguerreIndex, t: f64) -> Result<f64> {
    check_finite(t)?;
    if t < 0.0 {
        return Err(Error::Domain(format!("Laguerre argument {t} < 0")));
    }
    if idx.alpha >= 0 {
        return Ok(laguerre_nonneg(idx.k, idx.alpha as usize, t));
    }
    let n = idx.k as i64 + idx.alpha;
    if n < 0 {
        return Err(Error::Domain(format!(
            "L_{}^{} needs k + alpha >= 0 for the reflection identity",
            idx.k, idx.alpha
        )));
    }
    // (−t)^n/n! L_k^{n−k}(t) = (−t)^k/k! L_n^{k−n}(t)
    let n = n as usize;
    let d = idx.k - n;
    let inner = laguerre_nonneg(n, d, t);
    let sign = if d % 2 == 0 { 1.0 } else { -1.0 };
    let mag = (ln_factorial(n) - ln_factorial(idx.k)).exp() * t.powi(d as i32);
    Ok(sign * mag * inner)
}

fn laguerre_nonneg(k: usize, alpha: usize, t: f64) -> f64 {
    let a = alpha as f64;
    let mut prev = 1.0;
    if k == 0 {
        return prev;
    }
    let mut cur = 1.0 + a - t;
    for j in 1..k {
        let jf = j as f64;
        let next = ((2.0 * jf + 1.0 + a - t) * cur - (jf + a) * prev) / (jf + 1.0);
        prev = cur;
        cur = next;
    }
    cur
}

/// Orthonormal Laguerre functions
/// ψ_k^d(t) = √(k!/(k+d)!) t^{d/2} L_k^d(t) e^{−t/2}, for k = 0..out.len().
///
/// Runs the symmetric recurrence
/// √((k+1)(k+1+d)) ψ_{k+1} = (2k+1+d−t) ψ_k − √(k(k+d)) ψ_{k−1}
/// with a running log-scale so that neither the polynomial nor the
/// Gaussian factor over- or underflows on its own.
pub fn laguerre_functions(d: usize, t: f64, out: &mut [f64]) {
    if out.is_empty() {
        return;
    }
    if t == 0.0 {
        let v = if d == 0 { 1.0 } else { 0.0 };
        out.iter_mut().for_each(|o| *o = v);
        return;
    }
    let df = d as f64;
    let mut log_scale = 0.5 * df * t.ln() - 0.5 * t - 0.5 * ln_factorial(d);
    let mut prev = 0.0f64;
    let mut cur = 1.0f64;
    out[0] = descale(cur, log_scale);
    for k in 0..out.len() - 1 {
        let kf = k as f64;
        let next = ((2.0 * kf + 1.0 + df - t) * cur - (kf * (kf + df)).sqrt() * prev)
            / ((kf + 1.0) * (kf + 1.0 + df)).sqrt();
        prev = cur;
        cur = next;
        let big = cur.abs().max(prev.abs());
        if big > RESCALE {
            cur /= RESCALE;
            prev /= RESCALE;
            log_scale += RESCALE.ln();
        } else if big < 1.0 / RESCALE && big > 0.0 {
            cur *= RESCALE;
            prev *= RESCALE;
            log_scale -= RESCALE.ln();
        }
        out[k + 1] = descale(cur, log_scale);
    }
}

fn descale(v: f64, log_scale: f64) -> f64 {
    if v == 0.0 {
        return 0.0;
    }
    let out = v.signum() * (v.abs().ln() + log_scale).exp();
    if out.abs() < UNDERFLOW_CLAMP {
        0.0
    } else {
        out
    }
}

/// V_{h_k} h_n(z) = ⟨h_n, π(z) h_k⟩ with π(x,ω)g(t) = g(t−x)e^{2πiωt}.
pub fn stft_hermite(n: HermiteIndex, k: HermiteIndex, z: (f64, f64)) -> Complex64 {
    let (n, k) = (n.get(), k.get());
    let (x, w) = z;
    let t = PI * (x * x + w * w);
    let theta = w.atan2(x);
    let (lo, d) = if n >= k { (k, n - k) } else { (n, k - n) };
    let mut col = vec![0.0; lo + 1];
    laguerre_functions(d, t, &mut col);
    let mut sigma = col[lo];
    if n < k && d % 2 == 1 {
        sigma = -sigma;
    }
    let phase = (k as f64 - n as f64) * theta - PI * x * w;
    Complex64::from_polar(sigma, phase)
}

/// Fills `out[n * functions + m] = V_{h_n} h_m(z)` for window indices
/// `n < windows` and function indices `m < functions`.
pub fn stft_table(z: (f64, f64), windows: usize, functions: usize, out: &mut [Complex64]) {
    debug_assert!(out.len() >= windows * functions);
    let (x, w) = z;
    let t = PI * (x * x + w * w);
    let theta = w.atan2(x);
    let chirp = Complex64::from_polar(1.0, -PI * x * w);
    let rot = Complex64::from_polar(1.0, theta);
    let mut col = vec![0.0; windows.min(functions).max(1)];
    let mut rot_d = Complex64::new(1.0, 0.0);
    for d in 0..windows.max(functions) {
        let up = windows.min(functions.saturating_sub(d));
        let down = if d == 0 {
            0
        } else {
            functions.min(windows.saturating_sub(d))
        };
        let len = up.max(down);
        if len > 0 {
            laguerre_functions(d, t, &mut col[..len]);
            // m = n + d: phase e^{-i d θ}
            let ph_up = chirp * rot_d.conj();
            for k in 0..up {
                out[k * functions + k + d] = ph_up * col[k];
            }
            // n = m + d: sign (−1)^d, phase e^{i d θ}
            let sign = if d % 2 == 0 { 1.0 } else { -1.0 };
            let ph_down = chirp * rot_d * sign;
            for k in 0..down {
                out[(k + d) * functions + k] = ph_down * col[k];
            }
        }
        rot_d *= rot;
    }
}

/// Real table `out[n * functions + m] = V_{h_n} h_m((r, 0))`; the modulus of
/// V_{h_n} h_m depends only on |z| and these values carry the relative signs.
pub fn radial_table(r: f64, windows: usize, functions: usize, out: &mut [f64]) {
    debug_assert!(out.len() >= windows * functions);
    let t = PI * r * r;
    let mut col = vec![0.0; windows.min(functions).max(1)];
    for d in 0..windows.max(functions) {
        let up = windows.min(functions.saturating_sub(d));
        let down = if d == 0 {
            0
        } else {
            functions.min(windows.saturating_sub(d))
        };
        let len = up.max(down);
        if len == 0 {
            continue;
        }
        laguerre_functions(d, t, &mut col[..len]);
        for k in 0..up {
            out[k * functions + k + d] = col[k];
        }
        let sign = if d % 2 == 0 { 1.0 } else { -1.0 };
        for k in 0..down {
            out[(k + d) * functions + k] = sign * col[k];
        }
    }
}

/// Γ(m, t) = (m−1)! e^{−t} Σ_{k<m} t^k/k!.
pub fn upper_incomplete_gamma(m: usize, t: f64) -> Result<f64> {
    check_gamma_args(m, t)?;
    Ok((ln_factorial(m - 1) + log_poisson_cdf(m, t)).exp())
}

/// Regularized upper incomplete gamma Q(m, t) = Γ(m, t)/(m−1)!.
pub fn gamma_q(m: usize, t: f64) -> Result<f64> {
    check_gamma_args(m, t)?;
    if t < m as f64 {
        Ok(1.0 - lower_series(m, t))
    } else {
        Ok(log_poisson_cdf(m, t).exp())
    }
}

/// Regularized lower incomplete gamma P(m, t) = γ(m, t)/(m−1)!.
pub fn gamma_p(m: usize, t: f64) -> Result<f64> {
    check_gamma_args(m, t)?;
    if t < m as f64 {
        Ok(lower_series(m, t))
    } else {
        Ok(1.0 - log_poisson_cdf(m, t).exp())
    }
}

fn check_gamma_args(m: usize, t: f64) -> Result<()> {
    check_finite(t)?;
    if m == 0 {
        return Err(Error::Domain("incomplete gamma needs m >= 1".into()));
    }
    if t < 0.0 {
        return Err(Error::Domain(format!("incomplete gamma argument {t} < 0")));
    }
    Ok(())
}

/// ln(e^{−t} Σ_{k<m} t^k/k!) by log-sum-exp.
fn log_poisson_cdf(m: usize, t: f64) -> f64 {
    if t == 0.0 {
        return 0.0;
    }
    let lt = t.ln();
    let logs: Vec<f64> = (0..m)
        .map(|k| k as f64 * lt - t - ln_factorial(k))
        .collect();
    let mx = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    mx + logs.iter().map(|l| (l - mx).exp()).sum::<f64>().ln()
}

/// e^{−t} Σ_{k≥m} t^k/k! for t < m, where terms decrease monotonically.
fn lower_series(m: usize, t: f64) -> f64 {
    if t == 0.0 {
        return 0.0;
    }
    let lead = (m as f64 * t.ln() - t - ln_factorial(m)).exp();
    let mut sum = 1.0;
    let mut term = 1.0;
    let mut k = m;
    loop {
        k += 1;
        term *= t / k as f64;
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
    }
    lead * sum
}

/// Gauss–Legendre nodes and weights on [−1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut x = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = nf * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}
