//! Concentration constants C_{n,m}, A_m, B for disks and radial shadows,
//! and the large-sieve type bounds built from them.

use std::f64::consts::PI;
use std::sync::OnceLock;

use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::opstft::{PolyradialWindow, WindowKind};
use crate::phasespace::{correlate_fft, disk_rect_moments, nyquist_density, Descriptor, Disk, DomainMask};
use crate::specialfn::{gamma_p, gauss_legendre, laguerre_functions, ln_factorial, radial_table};

/// Largest n+m evaluated by the incomplete-gamma expansion.
pub const EXPANSION_LIMIT: usize = 120;

/// Rank limit of the operator-norm kernel mode.
pub const OP_RANK_LIMIT: usize = 8;

/// B below this is treated as zero.
pub const DEGENERATE_B: f64 = 1e-14;

const GL_ORDER: usize = 16;
const GL_PANEL: f64 = 0.5;

fn gl16() -> &'static (Vec<f64>, Vec<f64>) {
    static GL: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    GL.get_or_init(|| gauss_legendre(GL_ORDER))
}

/// ∫_0^{t0} ψ_k^d(t)² dt for k = 0..=kmax by composite Gauss–Legendre.
/// Beyond t = 2(2kmax+d)+80 the integrands are negligible.
pub fn c_quadrature_column(d: usize, kmax: usize, t0: f64) -> Vec<f64> {
    let upper = t0.min(2.0 * (2 * kmax + d) as f64 + 80.0);
    let mut acc = vec![0.0; kmax + 1];
    if !(upper > 0.0) {
        return acc;
    }
    let (x, w) = gl16();
    let panels = (upper / GL_PANEL).ceil().max(1.0) as usize;
    let width = upper / panels as f64;
    let mut buf = vec![0.0; kmax + 1];
    for p in 0..panels {
        let a = p as f64 * width;
        for (xi, wi) in x.iter().zip(w) {
            let t = a + 0.5 * width * (xi + 1.0);
            laguerre_functions(d, t, &mut buf);
            let wt = 0.5 * width * wi;
            for (s, v) in acc.iter_mut().zip(&buf) {
                *s += wt * v * v;
            }
        }
    }
    acc
}

/// Incomplete-gamma expansion of C for k = min(n,m), d = |n−m|; `None`
/// when out of range or too ill-conditioned for 1e−13 absolute accuracy.
fn c_expansion(k: usize, d: usize, t0: f64) -> Option<f64> {
    if 2 * k + d > EXPANSION_LIMIT {
        return None;
    }
    // P(s, t0) for s = d+1 ..= 2k+d+1
    let p: Vec<f64> = (0..=2 * k)
        .map(|s| gamma_p(s + d + 1, t0).unwrap_or(f64::NAN))
        .collect();
    if p.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let base = ln_factorial(k) - ln_factorial(k + d);
    let lnc: Vec<f64> = (0..=k)
        .map(|j| ln_factorial(k + d) - ln_factorial(k - j) - ln_factorial(d + j) - ln_factorial(j))
        .collect();
    let (mut sum, mut sabs, mut terms) = (0.0, 0.0, 0usize);
    for j in 0..=k {
        for l in j..=k {
            let lw = base + lnc[j] + lnc[l] + ln_factorial(j + l + d);
            let term = lw.exp() * p[j + l];
            let mult = if j == l { 1.0 } else { 2.0 };
            let signed = if (j + l) % 2 == 0 { term } else { -term };
            sum += mult * signed;
            sabs += mult * term;
            terms += 1;
        }
    }
    if sabs * terms as f64 * f64::EPSILON <= 1e-13 {
        Some(sum)
    } else {
        None
    }
}

/// C_{n,m} over the disk of area t0 = πR² (t0 may be +∞).
pub fn c_nm_area(n: usize, m: usize, t0: f64) -> Result<f64> {
    if t0.is_nan() || t0 < 0.0 {
        return Err(Error::Domain(format!("disk area {t0} must be non-negative")));
    }
    if t0 == 0.0 {
        return Ok(0.0);
    }
    if t0.is_infinite() {
        return Ok(1.0);
    }
    let (k, d) = (n.min(m), n.abs_diff(m));
    if let Some(v) = c_expansion(k, d, t0) {
        return Ok(v.clamp(0.0, 1.0));
    }
    Ok(c_quadrature_column(d, k, t0)[k].clamp(0.0, 1.0))
}

/// C_{n,m}(D_R(0)) = ∫_{D_R(0)} |V_{h_n}h_m(z)|² dz.
pub fn c_nm_disk(n: usize, m: usize, r: f64) -> Result<f64> {
    if !(r > 0.0) || r.is_nan() {
        return Err(Error::Domain(format!("disk radius {r} must be positive")));
    }
    c_nm_area(n, m, PI * r * r)
}

/// C_{n,m} over the radial shadow ∪[r0, r1]; r1 may be +∞.
pub fn c_nm_shadow(n: usize, m: usize, intervals: &[(f64, f64)]) -> Result<f64> {
    let mut s = 0.0;
    for &(a, b) in intervals {
        if !(a >= 0.0 && b > a) {
            return Err(Error::Domain(format!("radial interval [{a}, {b}] is invalid")));
        }
        s += c_nm_area(n, m, PI * b * b)? - c_nm_area(n, m, PI * a * a)?;
    }
    Ok(s)
}

/// Full matrix C_{n,m}(D) for n, m < size over the disk of area t0.
pub fn c_matrix(size: usize, t0: f64) -> Result<Vec<f64>> {
    if t0.is_nan() || t0 < 0.0 {
        return Err(Error::Domain(format!("disk area {t0} must be non-negative")));
    }
    let mut c = vec![0.0; size * size];
    if t0 == 0.0 || size == 0 {
        return Ok(c);
    }
    for d in 0..size {
        let kmax = size - 1 - d;
        let mut missing = Vec::new();
        for k in 0..=kmax {
            let v = if t0.is_infinite() {
                Some(1.0)
            } else {
                c_expansion(k, d, t0)
            };
            match v {
                Some(v) => {
                    c[k * size + k + d] = v.clamp(0.0, 1.0);
                    c[(k + d) * size + k] = v.clamp(0.0, 1.0);
                }
                None => missing.push(k),
            }
        }
        if let Some(&top) = missing.last() {
            let col = c_quadrature_column(d, top, t0);
            for k in missing {
                let v = col[k].clamp(0.0, 1.0);
                c[k * size + k + d] = v;
                c[(k + d) * size + k] = v;
            }
        }
    }
    Ok(c)
}

/// Σ_n C_{m,n}(D) summed until the terms fall below 1e−18; equals the
/// disk area in the limit.
pub fn c_row_sum(m: usize, t0: f64) -> Result<f64> {
    let mut s = 0.0;
    let mut n = 0;
    let mut quiet = 0;
    loop {
        let v = c_nm_area(m, n, t0)?;
        s += v;
        if n > m && (n as f64) > t0 && v < 1e-18 {
            quiet += 1;
            if quiet >= 5 {
                break;
            }
        } else {
            quiet = 0;
        }
        n += 1;
        if n > 4 * EXPANSION_LIMIT {
            break;
        }
    }
    Ok(s)
}

/// A_m(D_R(0)) = Σ_n |λ_n|² C_{m,n}(D_R(0)) for m = 0..=N.
pub fn a_coefficients(gamma: &PolyradialWindow, r: f64) -> Result<Vec<f64>> {
    if !(r > 0.0) || r.is_nan() {
        return Err(Error::Domain(format!("disk radius {r} must be positive")));
    }
    let size = gamma.len();
    let c = c_matrix(size, PI * r * r)?;
    let w = gamma.weights();
    Ok((0..size)
        .map(|m| (0..size).map(|n| w[n] * c[m * size + n]).sum())
        .collect())
}

/// C, A, B and θ ≤ 1/B for a polyradial window and Δ = D_R(0).
#[derive(Debug, Clone, Serialize)]
pub struct ConcentrationConstants {
    pub radius: f64,
    /// Row-major (N+1)×(N+1) matrix C_{n,m}.
    pub c: Vec<f64>,
    pub size: usize,
    pub a: Vec<f64>,
    pub b: f64,
    pub theta_upper: f64,
}

impl ConcentrationConstants {
    pub fn c(&self, n: usize, m: usize) -> f64 {
        self.c[n * self.size + m]
    }
}

pub fn concentration_constants(gamma: &PolyradialWindow, r: f64) -> Result<ConcentrationConstants> {
    if !(r > 0.0) || r.is_nan() {
        return Err(Error::Domain(format!("disk radius {r} must be positive")));
    }
    let size = gamma.len();
    let c = c_matrix(size, PI * r * r)?;
    let w = gamma.weights();
    let a: Vec<f64> = (0..size)
        .map(|m| (0..size).map(|n| w[n] * c[m * size + n]).sum())
        .collect();
    let b = (0..size)
        .filter(|&m| w[m] > 0.0)
        .map(|m| a[m])
        .fold(f64::INFINITY, f64::min);
    if !(b >= DEGENERATE_B) {
        return Err(Error::DegenerateWindow { b: if b.is_finite() { b } else { 0.0 } });
    }
    Ok(ConcentrationConstants {
        radius: r,
        c,
        size,
        a,
        b,
        theta_upper: 1.0 / b,
    })
}

/// Which estimate produced a bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BoundMethod {
    FaberKrahn,
    RFK,
    Theorem1,
    Theorem2Kernel,
    Theorem2Closed,
    KernelSup,
    MaxNyquist,
}

/// An upper bound on the concentration Φ with its certificate flag
/// (value < 1/2).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SieveBound {
    pub method: BoundMethod,
    pub value: f64,
    pub certificate: bool,
    pub params: Value,
}

impl SieveBound {
    pub fn new(method: BoundMethod, value: f64, params: Value) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::Domain(format!("{method:?} bound is not finite")));
        }
        let value = value.max(0.0);
        Ok(Self {
            method,
            value,
            certificate: value < 0.5,
            params,
        })
    }
}

/// 1 − e^{−p·area/2}.
pub fn faber_krahn_bound(area: f64, p: f64) -> Result<SieveBound> {
    if !(area >= 0.0) || !(p >= 1.0) {
        return Err(Error::Precondition(format!("Faber-Krahn needs area >= 0 and p >= 1, got {area}, {p}")));
    }
    SieveBound::new(
        BoundMethod::FaberKrahn,
        -(-p * area / 2.0).exp_m1(),
        json!({ "area": area, "p": p }),
    )
}

/// 2(1 − e^{−ν/2}) / (1 − e^{−πR²}).
pub fn rfk_bound(nu: f64, r: f64) -> Result<SieveBound> {
    if !(nu >= 0.0) || !(r > 0.0) {
        return Err(Error::Precondition(format!("RFK needs nu >= 0 and R > 0, got {nu}, {r}")));
    }
    let v = 2.0 * (-nu / 2.0).exp_m1() / (-PI * r * r).exp_m1();
    SieveBound::new(BoundMethod::RFK, v, json!({ "nu": nu, "R": r }))
}

/// 1 − (α^{2N}/2) e^{N(2−α)}.
pub fn theorem1_denominator(n: usize, alpha: f64) -> f64 {
    let nf = n as f64;
    1.0 - (2.0 * nf * alpha.ln() + nf * (2.0 - alpha) - 2f64.ln()).exp()
}

/// ν(Ω,R) / (1 − α^{2N} e^{N(2−α)−log 2}) with πR² = αN.
pub fn theorem1_bound(nu: f64, n: usize, alpha: f64) -> Result<SieveBound> {
    if !(alpha >= 5.0) {
        return Err(Error::Precondition(format!("Theorem 1 needs alpha >= 5, got {alpha}")));
    }
    if n == 0 || !(nu >= 0.0) {
        return Err(Error::Precondition(format!("Theorem 1 needs N >= 1 and nu >= 0, got {n}, {nu}")));
    }
    let den = theorem1_denominator(n, alpha);
    if !(den > 0.0) {
        return Err(Error::Precondition(format!(
            "Theorem 1 denominator {den:e} is not positive for N = {n}, alpha = {alpha}"
        )));
    }
    SieveBound::new(
        BoundMethod::Theorem1,
        nu / den,
        json!({ "nu": nu, "N": n, "alpha": alpha, "denominator": den }),
    )
}

/// ν / B(D_R(0)) for the supplied window with πR² = αN.
pub fn theorem1_direct(nu: f64, n: usize, alpha: f64, gamma: &PolyradialWindow) -> Result<SieveBound> {
    if n == 0 || !(alpha > 0.0) || !(nu >= 0.0) {
        return Err(Error::Precondition(format!("need N >= 1, alpha > 0, nu >= 0, got {n}, {alpha}, {nu}")));
    }
    let r = (alpha * n as f64 / PI).sqrt();
    let cc = concentration_constants(gamma, r)?;
    SieveBound::new(
        BoundMethod::Theorem1,
        nu * cc.theta_upper,
        json!({ "nu": nu, "N": n, "alpha": alpha, "B": cc.b, "direct": true }),
    )
}

/// Evaluation of the thermal Gaussian bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Theorem2Form {
    KernelSup,
    Closed,
}

/// Largest radial-kernel correlation h² max_w Σ coverage(z) k(|z−w|) over
/// grid centres, by FFT; returns the value and the centre index.
fn radial_sup(mask: &DomainMask, support: Option<i64>, k: &(dyn Fn(i64, i64) -> f64 + Sync)) -> (f64, usize) {
    let field = correlate_fft(mask, support, k);
    let (v, i) = field
        .iter()
        .enumerate()
        .fold((f64::NEG_INFINITY, 0), |acc, (i, &v)| if v > acc.0 { (v, i) } else { acc });
    (v * mask.grid().weight(), i)
}

fn on_outer_ring(mask: &DomainMask, idx: usize) -> bool {
    let n = mask.grid().n();
    let (ix, iy) = (idx % n, idx / n);
    ix == 0 || iy == 0 || ix == n - 1 || iy == n - 1
}

/// Thermal-window bound: KernelSup evaluates
/// (1+2a)^{−1/2} sup_w ∫_Ω e^{−π|z−w|²/(2(1+2a))} dz on the grid, Closed
/// uses 2√(1+2a)(1 − e^{−|Ω|/(2(1+2a))}). a = 0 is the Gaussian window.
pub fn theorem2_bound(mask: &DomainMask, a: f64, form: Theorem2Form) -> Result<SieveBound> {
    if !(a >= 0.0) || !a.is_finite() {
        return Err(Error::Precondition(format!("thermal parameter must be >= 0, got {a}")));
    }
    let s = 2.0 * (1.0 + 2.0 * a);
    let pre = (1.0 + 2.0 * a).sqrt().recip();
    let area = mask.measure();
    let (method, value) = match form {
        Theorem2Form::Closed => (BoundMethod::Theorem2Closed, 2.0 * (1.0 + 2.0 * a).sqrt() * -(-area / s).exp_m1()),
        Theorem2Form::KernelSup => {
            if mask.is_empty() {
                (BoundMethod::Theorem2Kernel, 0.0)
            } else {
                let h = mask.grid().spacing();
                let k = |dx: i64, dy: i64| pre * (-PI * ((dx * dx + dy * dy) as f64) * h * h / s).exp();
                let (v, idx) = radial_sup(mask, None, &k);
                if on_outer_ring(mask, idx) {
                    return Err(Error::WindowTooSmall(
                        "Gaussian sup-integral is attained on the window boundary".into(),
                    ));
                }
                (BoundMethod::Theorem2Kernel, v)
            }
        }
    };
    SieveBound::new(method, value, json!({ "a": a, "area": area, "form": form }))
}

/// Norm used for the kernel K_γ(z,w) = γ*π(z)*π(w)γ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum KernelNorm {
    HS,
    Op,
}

/// ‖K_γ(z,w)‖_{S²} at |z−w| = r:
/// √(Σ_{m,n} |λ_n|²|λ_m|² |V_{h_m}h_n(u)|²).
pub fn hs_profile(gamma: &PolyradialWindow, r: f64) -> f64 {
    let n = gamma.len();
    let mut t = vec![0.0; n * n];
    radial_table(r, n, n, &mut t);
    let w = gamma.weights();
    let mut s = 0.0;
    for i in 0..n {
        if w[i] == 0.0 {
            continue;
        }
        for j in 0..n {
            s += w[i] * w[j] * t[i * n + j] * t[i * n + j];
        }
    }
    s.sqrt()
}

/// ‖K_γ(z,w)‖_op at |z−w| = r; the phases of K are a diagonal unitary
/// conjugation of the real matrix |λ_i||λ_j| V_{h_j}h_i((r,0)).
pub fn op_profile(gamma: &PolyradialWindow, r: f64) -> Result<f64> {
    let n = gamma.len();
    if gamma.max_index() > OP_RANK_LIMIT {
        return Err(Error::RankTooLarge {
            rank: gamma.max_index(),
            limit: OP_RANK_LIMIT,
        });
    }
    let mut t = vec![0.0; n * n];
    radial_table(r, n, n, &mut t);
    let l: Vec<f64> = gamma.lambda().iter().map(|c| c.norm()).collect();
    let m = DMatrix::from_fn(n, n, |i, j| l[i] * l[j] * t[j * n + i]);
    Ok(m.singular_values().max())
}

/// Radial kernel tabulated on integer offsets (dx, dy), 0 ≤ dy ≤ dx < n.
struct OffsetTable {
    n: usize,
    v: Vec<f64>,
}

impl OffsetTable {
    fn build(n: usize, h: f64, f: &(dyn Fn(f64) -> f64 + Sync)) -> Self {
        use rayon::prelude::*;
        let mut v = vec![0.0; n * n];
        v.par_chunks_mut(n).enumerate().for_each(|(a, row)| {
            for (b, o) in row.iter_mut().enumerate().take(a + 1) {
                *o = f(h * ((a * a + b * b) as f64).sqrt());
            }
        });
        Self { n, v }
    }

    fn get(&self, dx: i64, dy: i64) -> f64 {
        let (a, b) = (dx.unsigned_abs() as usize, dy.unsigned_abs() as usize);
        let (a, b) = if a >= b { (a, b) } else { (b, a) };
        if a >= self.n {
            0.0
        } else {
            self.v[a * self.n + b]
        }
    }
}

/// Radial profile as a lookup: exact evaluation for small ranks, cubic
/// interpolation on a fine radial grid otherwise.
fn profile_fn(gamma: &PolyradialWindow, norm: KernelNorm, r_max: f64, h: f64) -> Result<Box<dyn Fn(f64) -> f64 + Sync>> {
    if norm == KernelNorm::Op {
        op_profile(gamma, 0.0)?;
    }
    let g = gamma.clone();
    let eval = move |r: f64| match norm {
        KernelNorm::HS => hs_profile(&g, r),
        KernelNorm::Op => op_profile(&g, r).unwrap_or(f64::NAN),
    };
    if gamma.len() <= 16 {
        return Ok(Box::new(eval));
    }
    let step = (h / 8.0).min(0.01);
    let count = (r_max / step).ceil() as usize + 3;
    let vals: Vec<f64> = {
        use rayon::prelude::*;
        (0..count).into_par_iter().map(|i| eval(i as f64 * step)).collect()
    };
    Ok(Box::new(move |r: f64| {
        let x = r / step;
        let i = (x.floor() as usize).min(count - 3);
        let f = x - i as f64;
        let p0 = if i == 0 { vals[1] } else { vals[i - 1] }; // profile is even in r
        let (p1, p2, p3) = (vals[i], vals[i + 1], vals[i + 2]);
        // Catmull–Rom
        0.5 * (2.0 * p1
            + (-p0 + p2) * f
            + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * f * f
            + (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * f * f * f)
    }))
}

/// sup_w ∫_Ω ‖K_γ(z,w)‖ dz by grid correlation of the coverage with the
/// radial kernel profile.
pub fn kernel_sup_integral(mask: &DomainMask, gamma: &PolyradialWindow, norm: KernelNorm) -> Result<f64> {
    if norm == KernelNorm::Op && gamma.max_index() > OP_RANK_LIMIT {
        return Err(Error::RankTooLarge {
            rank: gamma.max_index(),
            limit: OP_RANK_LIMIT,
        });
    }
    if mask.is_empty() {
        return Ok(0.0);
    }
    let grid = mask.grid();
    let n = grid.n();
    let h = grid.spacing();
    let prof = profile_fn(gamma, norm, 2.0 * n as f64 * h, h)?;
    let table = OffsetTable::build(n, h, &*prof);
    let k = |dx: i64, dy: i64| table.get(dx, dy);
    Ok(radial_sup(mask, None, &k).0)
}

/// θ · ν(Ω, R) together with the sharper windowed kernel integrals
/// θ · sup_z ∫_{Ω∩D_R(z)} ‖K_γ‖ in both norms.
#[derive(Debug, Clone, Serialize)]
pub struct MaxNyquistReport {
    pub bound: SieveBound,
    pub nu: f64,
    pub theta: f64,
    pub restricted_hs: f64,
    /// Present for windows with N ≤ 8.
    pub restricted_op: Option<f64>,
}

pub fn max_nyquist_bound(mask: &DomainMask, gamma: &PolyradialWindow, r: f64) -> Result<MaxNyquistReport> {
    if matches!(gamma.kind(), WindowKind::Thermal { .. }) {
        return Err(Error::Precondition(
            "maximum Nyquist bound needs a finite-rank window; use the Gaussian kernel bound for thermal windows".into(),
        ));
    }
    let cc = concentration_constants(gamma, r)?;
    let nu = nyquist_density(mask, r)?;
    let theta = cc.theta_upper;
    let params = json!({ "R": r, "nu": nu.value, "theta": theta, "B": cc.b });
    if mask.is_empty() {
        return Ok(MaxNyquistReport {
            bound: SieveBound::new(BoundMethod::MaxNyquist, 0.0, params)?,
            nu: 0.0,
            theta,
            restricted_hs: 0.0,
            restricted_op: Some(0.0).filter(|_| gamma.max_index() <= OP_RANK_LIMIT),
        });
    }
    let grid = mask.grid();
    let h = grid.spacing();
    let rc = (r / h).ceil() as i64 + 1;
    let disk = Disk::new(0.0, 0.0, r);
    let side = (2 * rc + 1) as usize;
    let mut cover = vec![0.0; side * side];
    for dy in -rc..=rc {
        for dx in -rc..=rc {
            let (x, y) = (dx as f64 * h, dy as f64 * h);
            cover[((dy + rc) as usize) * side + (dx + rc) as usize] =
                disk_rect_moments(&disk, x - 0.5 * h, x + 0.5 * h, y - 0.5 * h, y + 0.5 * h).area / (h * h);
        }
    }
    let cov = |dx: i64, dy: i64| {
        if dx.abs() > rc || dy.abs() > rc {
            0.0
        } else {
            cover[((dy + rc) as usize) * side + (dx + rc) as usize]
        }
    };
    let restricted = |norm: KernelNorm| -> Result<f64> {
        let prof = profile_fn(gamma, norm, r + 2.0 * h, h)?;
        let table = OffsetTable::build(rc as usize + 1, h, &*prof);
        let k = |dx: i64, dy: i64| cov(dx, dy) * table.get(dx, dy);
        Ok(theta * radial_sup(mask, Some(rc), &k).0)
    };
    let restricted_hs = restricted(KernelNorm::HS)?;
    let restricted_op = if gamma.max_index() <= OP_RANK_LIMIT {
        Some(restricted(KernelNorm::Op)?)
    } else {
        None
    };
    Ok(MaxNyquistReport {
        bound: SieveBound::new(BoundMethod::MaxNyquist, theta * nu.value, params)?,
        nu: nu.value,
        theta,
        restricted_hs,
        restricted_op,
    })
}

/// Outcome of the projection-window search for fixed R.
#[derive(Debug, Clone, Serialize)]
pub struct ProjectionSearch {
    /// Number of Hermite functions N in γ = N^{−1/2} Σ_{n<N} h_n⊗h_n.
    pub n: usize,
    /// max_{m<N} ∫_{D_R} Σ_{n≥N} |V_{h_m}h_n|².
    pub worst_tail: f64,
    /// πR²/(2N).
    pub b_lower: f64,
    /// B(D_R(0)) of the projection window, computed exactly.
    pub b_exact: f64,
}

/// Smallest N ≤ `max_n` with ∫_{D_R}Σ_{n≥N}|V_{h_m}h_n|² ≤ πR²/2 for all
/// m < N, scanning N upward from 1.
pub fn projection_window_search(r: f64, max_n: usize) -> Result<ProjectionSearch> {
    if !(r > 0.0) || r.is_nan() {
        return Err(Error::Domain(format!("disk radius {r} must be positive")));
    }
    let t0 = PI * r * r;
    let row: Vec<f64> = (0..max_n).map(|m| c_row_sum(m, t0)).collect::<Result<_>>()?;
    let c = c_matrix(max_n, t0)?;
    for n in 1..=max_n {
        let worst = (0..n)
            .map(|m| row[m] - (0..n).map(|k| c[m * max_n + k]).sum::<f64>())
            .fold(0.0, f64::max);
        if worst <= t0 / 2.0 {
            let gamma = PolyradialWindow::projection(n - 1)?;
            let b_exact = concentration_constants(&gamma, r)?.b;
            return Ok(ProjectionSearch {
                n,
                worst_tail: worst,
                b_lower: t0 / (2.0 * n as f64),
                b_exact,
            });
        }
    }
    Err(Error::Precondition(format!(
        "no projection window with N <= {max_n} meets the tail condition at R = {r}"
    )))
}

/// C_{n,m} over the mask's radial shadow, when it has one.
pub fn c_nm_mask(n: usize, m: usize, mask: &DomainMask) -> Result<f64> {
    match mask.descriptor() {
        Some(Descriptor::RadialShadow(iv)) => c_nm_shadow(n, m, iv),
        _ => Err(Error::Precondition("mask is not a radial shadow".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phasespace::{make_disk_union, make_rsparse, PhaseGrid};
    use num_complex::Complex64;

    fn ln_binom(a: usize, b: usize) -> f64 {
        ln_factorial(a) - ln_factorial(b) - ln_factorial(a - b)
    }

    /// Independent oracle: Simpson's rule on the polynomial form
    /// (k!/(k+d)!) t^d L_k^d(t)² e^{−t}, with L from its explicit sum.
    fn simpson_c(n: usize, m: usize, t0: f64) -> f64 {
        let (k, d) = (n.min(m), n.abs_diff(m));
        let f = |t: f64| {
            let mut l = 0.0;
            for j in 0..=k {
                let s = if j % 2 == 0 { 1.0 } else { -1.0 };
                l += s * (ln_binom(k + d, k - j)).exp() * t.powi(j as i32) / ln_factorial(j).exp();
            }
            (ln_factorial(k) - ln_factorial(k + d)).exp() * t.powi(d as i32) * l * l * (-t).exp()
        };
        let steps = 20000;
        let hh = t0 / steps as f64;
        let mut s = f(0.0) + f(t0);
        for i in 1..steps {
            s += f(i as f64 * hh) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * hh / 3.0
    }

    #[test]
    fn c_nm_examples() {
        for i in 1..=20 {
            let r = 0.05 * i as f64;
            let want = -(-PI * r * r).exp_m1();
            assert!((c_nm_disk(0, 0, r).unwrap() - want).abs() < 1e-12);
        }
        let r = (2.0 / PI).sqrt();
        let e2 = (-2.0f64).exp();
        assert!((c_nm_disk(0, 1, r).unwrap() - (1.0 - 3.0 * e2)).abs() < 1e-14);
        assert!((c_nm_disk(1, 1, r).unwrap() - (1.0 - 5.0 * e2)).abs() < 1e-14);
        assert!((c_nm_disk(1, 1, r).unwrap() - simpson_c(1, 1, 2.0)).abs() < 1e-12);
        assert!(c_nm_disk(0, 0, 0.0).is_err());
    }

    #[test]
    fn expansion_matches_oracle_and_quadrature() {
        for &(n, m, t0) in &[(0, 3, 1.5), (2, 5, 4.0), (4, 4, 7.0), (3, 9, 12.0), (6, 2, 0.3)] {
            let v = c_nm_area(n, m, t0).unwrap();
            assert!((v - simpson_c(n, m, t0)).abs() < 1e-10, "{n} {m} {t0}");
            let (k, d) = (n.min(m), n.abs_diff(m));
            let q = c_quadrature_column(d, k, t0)[k];
            assert!((v - q).abs() < 1e-13, "{n} {m} {t0} {v} {q}");
        }
    }

    #[test]
    fn large_indices_fall_back_to_quadrature() {
        // ill-conditioned expansion; both routes through quadrature and the
        // row-sum identity must stay consistent
        let t0 = 30.0;
        let v = c_nm_area(40, 45, t0).unwrap();
        assert!((0.0..=1.0).contains(&v));
        assert!(c_expansion(40, 5, t0).is_none());
        let col = c_quadrature_column(5, 40, 1e9);
        for v in col {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn c_matrix_symmetric_and_bounded() {
        let c = c_matrix(30, 10.0).unwrap();
        for n in 0..30 {
            for m in 0..30 {
                let v = c[n * 30 + m];
                assert!((0.0..=1.0).contains(&v));
                assert_eq!(v, c[m * 30 + n]);
                assert!((v - c_nm_area(n, m, 10.0).unwrap()).abs() < 1e-13);
            }
        }
        let big = c_matrix(6, 50.0).unwrap();
        assert!(big.iter().all(|&v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn shadow_examples() {
        let r = 0.8;
        assert!((c_nm_shadow(1, 3, &[(0.0, r)]).unwrap() - c_nm_disk(1, 3, r).unwrap()).abs() < 1e-15);
        let full = (50.0 / PI).sqrt();
        let v = c_nm_shadow(2, 2, &[(0.0, f64::INFINITY)]).unwrap();
        assert_eq!(v, 1.0);
        let v = c_nm_shadow(0, 0, &[(0.0, full)]).unwrap();
        assert!((v - 1.0).abs() < 1e-15 * 1e6);
        let (a, b) = ((1.0 / PI).sqrt(), (2.0 / PI).sqrt());
        let v = c_nm_shadow(0, 0, &[(a, b)]).unwrap();
        assert!((v - ((-1.0f64).exp() - (-2.0f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn rank_two_constants() {
        for &t0 in &[0.5, 1.0, 2.0, 3.0, 5.0] {
            let r = (t0 / PI).sqrt();
            let cc = concentration_constants(&PolyradialWindow::rank_two(), r).unwrap();
            let e = (-t0).exp();
            let a0 = 1.0 - (2.0 + t0) * e / 2.0;
            let a1 = 1.0 - (2.0 + t0 + t0 * t0) * e / 2.0;
            assert!((cc.a[0] - a0).abs() < 1e-12);
            assert!((cc.a[1] - a1).abs() < 1e-12);
            assert_eq!(cc.b, cc.a[1]);
            assert!((cc.theta_upper * cc.b - 1.0).abs() < 1e-15);
            assert!((cc.a[0] - cc.a[1] - t0 * t0 * e / 2.0).abs() < 1e-12);
        }
        let cc = concentration_constants(&PolyradialWindow::gaussian(), 0.7).unwrap();
        assert!((cc.b - c_nm_disk(0, 0, 0.7).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn degenerate_window() {
        let w = PolyradialWindow::hermite(30).unwrap();
        assert!(matches!(
            concentration_constants(&w, 1e-9),
            Err(Error::DegenerateWindow { .. })
        ));
    }

    #[test]
    fn simple_bounds() {
        let fk = faber_krahn_bound(2.0 * 2f64.ln(), 1.0).unwrap();
        assert!((fk.value - 0.5).abs() < 1e-15);
        assert_eq!(faber_krahn_bound(0.0, 1.0).unwrap().value, 0.0);
        assert!((faber_krahn_bound(1.3, 2.0).unwrap().value - (1.0 - (-1.3f64).exp())).abs() < 1e-15);
        assert_eq!(rfk_bound(0.0, 0.3).unwrap().value, 0.0);
        let r: f64 = 0.1;
        let t = PI * r * r;
        let v = rfk_bound(t / 4.0, r).unwrap();
        assert!((v.value - 2.0 * (1.0 - (-t / 8.0).exp()) / (1.0 - (-t).exp())).abs() < 1e-12);
        assert!(v.certificate);
        let big = rfk_bound(PI * 36.0, 6.0).unwrap();
        assert!((big.value - 2.0).abs() < 1e-12);
    }

    #[test]
    fn theorem1_examples() {
        let b = theorem1_bound(0.1, 1, 5.0).unwrap();
        // 1 − 25e^{−3}/2 by direct evaluation
        let den = 1.0 - 12.5 * (-3.0f64).exp();
        assert!((b.value - 0.1 / den).abs() < 1e-14);
        assert!((den - 0.377_661_0).abs() < 1e-6);
        assert_eq!(theorem1_bound(0.0, 3, 6.0).unwrap().value, 0.0);
        assert!((theorem1_denominator(2, 5.0) - (1.0 - 312.5 * (-6.0f64).exp())).abs() < 1e-14);
        assert!(matches!(theorem1_bound(0.1, 1, 4.9), Err(Error::Precondition(_))));
        let w = PolyradialWindow::projection(2).unwrap();
        let d = theorem1_direct(0.1, 2, 6.0, &w).unwrap();
        assert!(d.value <= theorem1_bound(0.1, 2, 6.0).unwrap().value);
    }

    #[test]
    fn theorem2_examples() {
        let g = PhaseGrid::new(4.0, 0.02).unwrap();
        let d = make_disk_union(&[(0.0, 0.0)], &[1.0], g).unwrap();
        let ks = theorem2_bound(&d, 1.0, Theorem2Form::KernelSup).unwrap();
        let cl = theorem2_bound(&d, 1.0, Theorem2Form::Closed).unwrap();
        let exact = 2.0 * 3f64.sqrt() * (1.0 - (-PI / 6.0).exp());
        assert!((cl.value - exact).abs() < 1e-12);
        // node rule, O(h²)
        assert!((ks.value - exact).abs() < 1e-3, "{}", ks.value);
        assert!(ks.value <= cl.value + 1e-12);
        let area = d.measure();
        let c0 = theorem2_bound(&d, 0.0, Theorem2Form::Closed).unwrap();
        assert!((c0.value - 2.0 * (1.0 - (-area / 2.0).exp())).abs() < 1e-15);
        let e = DomainMask::empty(g);
        assert_eq!(theorem2_bound(&e, 0.5, Theorem2Form::KernelSup).unwrap().value, 0.0);
        assert_eq!(theorem2_bound(&e, 0.5, Theorem2Form::Closed).unwrap().value, 0.0);
    }

    #[test]
    fn thermal_profile_matches_closed_form() {
        for &a in &[0.5, 1.0, 2.0] {
            let w = PolyradialWindow::thermal(a).unwrap();
            for i in 0..=40 {
                let r = 0.1 * i as f64;
                let want = (1.0 + 2.0 * a).sqrt().recip() * (-PI * r * r / (2.0 * (1.0 + 2.0 * a))).exp();
                assert!((hs_profile(&w, r) - want).abs() < 1e-8, "{a} {r}");
            }
        }
    }

    #[test]
    fn gaussian_norms_coincide() {
        let g = PolyradialWindow::gaussian();
        for &r in &[0.0, 0.3, 1.1] {
            let want = (-PI * r * r / 2.0).exp();
            assert!((hs_profile(&g, r) - want).abs() < 1e-15);
            assert!((op_profile(&g, r).unwrap() - want).abs() < 1e-15);
        }
        let grid = PhaseGrid::new(3.0, 0.03).unwrap();
        let m = make_disk_union(&[(0.4, 0.1), (-0.6, -0.3)], &[0.5, 0.3], grid).unwrap();
        let hs = kernel_sup_integral(&m, &g, KernelNorm::HS).unwrap();
        let op = kernel_sup_integral(&m, &g, KernelNorm::Op).unwrap();
        assert!((hs - op).abs() < 1e-12);
        let t2 = theorem2_bound(&m, 0.0, Theorem2Form::KernelSup).unwrap().value;
        assert!((hs - t2).abs() < 1e-12);
        assert_eq!(kernel_sup_integral(&DomainMask::empty(grid), &g, KernelNorm::HS).unwrap(), 0.0);
        let big = PolyradialWindow::projection(9).unwrap();
        assert!(matches!(
            kernel_sup_integral(&m, &big, KernelNorm::Op),
            Err(Error::RankTooLarge { .. })
        ));
    }

    #[test]
    fn op_norm_at_most_hs_norm() {
        let w = PolyradialWindow::normalized(vec![Complex64::new(0.5, 0.2), Complex64::new(0.0, 0.0), Complex64::new(-0.3, 0.6)]).unwrap();
        for i in 0..30 {
            let r = 0.1 * i as f64;
            let (o, h) = (op_profile(&w, r).unwrap(), hs_profile(&w, r));
            assert!(o <= h + 1e-15 && h <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn max_nyquist_examples() {
        let grid = PhaseGrid::new(3.0, 0.02).unwrap();
        let r = (2.0 / PI).sqrt();
        let s = make_rsparse(r, 2, grid).unwrap();
        let rep = max_nyquist_bound(&s, &PolyradialWindow::rank_two(), r).unwrap();
        let a1 = 1.0 - 4.0 * (-2.0f64).exp();
        assert!((rep.theta - 1.0 / a1).abs() < 1e-12);
        assert!((rep.bound.value - rep.nu / a1).abs() < 1e-12);
        let op = rep.restricted_op.unwrap();
        assert!(op <= rep.restricted_hs + 1e-12 && rep.restricted_hs <= rep.bound.value + 1e-12);
        let g = max_nyquist_bound(&s, &PolyradialWindow::gaussian(), r).unwrap();
        assert!((g.bound.value - g.nu / (1.0 - (-2.0f64).exp())).abs() < 1e-12);
        let e = max_nyquist_bound(&DomainMask::empty(grid), &PolyradialWindow::gaussian(), r).unwrap();
        assert_eq!(e.bound.value, 0.0);
        assert!(max_nyquist_bound(&s, &PolyradialWindow::thermal(1.0).unwrap(), r).is_err());
    }

    #[test]
    fn row_sums_equal_area() {
        for m in 0..=4 {
            for &t0 in &[1.0, 2.0, 4.0] {
                assert!((c_row_sum(m, t0).unwrap() - t0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn projection_search() {
        let r = (1.0 / PI).sqrt();
        let p = projection_window_search(r, 40).unwrap();
        assert_eq!(p.n, 1);
        assert!(p.worst_tail <= 0.5);
        assert!(p.b_exact >= p.b_lower - 1e-12, "{p:?}");
        // for πR² ≥ 2 the worst tail stays above πR²/2 for every tested N
        assert!(projection_window_search((7.0 / PI).sqrt(), 40).is_err());
    }
}
