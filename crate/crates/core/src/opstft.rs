//! Operator STFTs 𝔙_γρ(z) = γ*π(z)*ρ for polyradial windows γ and
//! operators ρ given as truncated Hermite matrices.
//!
//! With γ = Σ λ_n h_n⊗h_n the matrix of 𝔙_γρ(z) in the Hermite basis is
//! M_{nk}(z) = conj(λ_n) Σ_m ρ_{mk} V_{h_n}h_m(z), an (N+1)×M block.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::phasespace::{disk_rule, PhaseGrid};
use crate::specialfn::{stft_table, DEFAULT_MAX_INDEX};

/// Largest Hermite index kept by thermal windows.
pub const THERMAL_MAX_INDEX: usize = 128;

/// Thermal windows are cut once the tail mass drops below this.
pub const THERMAL_TAIL: f64 = 1e-20;

/// Largest number of complex entries a field may hold.
pub const FIELD_BUDGET: usize = 1 << 27;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// Provenance of a window's coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WindowKind {
    Custom,
    Gaussian,
    Hermite { n: usize },
    RankTwo,
    Projection { n: usize },
    Thermal { a: f64 },
}

/// γ = Σ_{n≤N} λ_n h_n⊗h_n.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyradialWindow {
    lambda: Vec<Complex64>,
    normalized: bool,
    tail: f64,
    kind: WindowKind,
}

impl PolyradialWindow {
    fn build(lambda: Vec<Complex64>, tail: f64, kind: WindowKind, max: usize) -> Result<Self> {
        if lambda.is_empty() {
            return Err(Error::InvalidConfig("window needs at least one coefficient".into()));
        }
        if lambda.len() - 1 > max {
            return Err(Error::IndexOverflow {
                index: lambda.len() - 1,
                max,
            });
        }
        if lambda.iter().any(|l| !l.re.is_finite() || !l.im.is_finite()) {
            return Err(Error::InvalidConfig("window coefficients must be finite".into()));
        }
        let mass: f64 = lambda.iter().map(|l| l.norm_sqr()).sum();
        Ok(Self {
            normalized: (mass + tail - 1.0).abs() < 1e-12,
            lambda,
            tail,
            kind,
        })
    }

    /// Window with the given coefficients, used as is.
    pub fn new(lambda: Vec<Complex64>) -> Result<Self> {
        Self::build(lambda, 0.0, WindowKind::Custom, DEFAULT_MAX_INDEX)
    }

    /// Window with the given coefficients rescaled to Σ|λ_n|² = 1.
    pub fn normalized(lambda: Vec<Complex64>) -> Result<Self> {
        let mass: f64 = lambda.iter().map(|l| l.norm_sqr()).sum();
        if !(mass > 0.0) {
            return Err(Error::ZeroNorm("window coefficients".into()));
        }
        let s = mass.sqrt().recip();
        Self::new(lambda.into_iter().map(|l| l * s).collect())
    }

    /// h_0⊗h_0.
    pub fn gaussian() -> Self {
        Self::build(vec![Complex64::new(1.0, 0.0)], 0.0, WindowKind::Gaussian, 0).unwrap()
    }

    /// h_n⊗h_n.
    pub fn hermite(n: usize) -> Result<Self> {
        let mut l = vec![ZERO; n + 1];
        l[n] = Complex64::new(1.0, 0.0);
        Self::build(l, 0.0, WindowKind::Hermite { n }, DEFAULT_MAX_INDEX)
    }

    /// (h_0⊗h_0 + h_1⊗h_1)/√2.
    pub fn rank_two() -> Self {
        let s = Complex64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
        Self::build(vec![s, s], 0.0, WindowKind::RankTwo, 1).unwrap()
    }

    /// Normalized projection onto span{h_0, …, h_n}.
    pub fn projection(n: usize) -> Result<Self> {
        let v = Complex64::new(((n + 1) as f64).sqrt().recip(), 0.0);
        Self::build(vec![v; n + 1], 0.0, WindowKind::Projection { n }, DEFAULT_MAX_INDEX)
    }

    /// Square root of a thermal state, λ_n = (1+a)^{−1/2} (a/(1+a))^{n/2},
    /// cut at [`THERMAL_TAIL`] or [`THERMAL_MAX_INDEX`].
    pub fn thermal(a: f64) -> Result<Self> {
        Self::thermal_with_max(a, THERMAL_MAX_INDEX)
    }

    pub fn thermal_with_max(a: f64, max: usize) -> Result<Self> {
        if !(a > 0.0 && a.is_finite()) {
            return Err(Error::InvalidConfig(format!("thermal parameter must be positive, got {a}")));
        }
        let q = a / (1.0 + a);
        let c = (1.0 + a).recip();
        let mut lambda = Vec::new();
        let mut w = c; // |λ_n|² = (1+a)^{−1} q^n
        let mut tail = 1.0;
        for _ in 0..=max {
            lambda.push(Complex64::new(w.sqrt(), 0.0));
            tail = q * tail; // Σ_{k>n} |λ_k|² = q^{n+1}
            w *= q;
            if tail < THERMAL_TAIL {
                break;
            }
        }
        Self::build(lambda, tail, WindowKind::Thermal { a }, max)
    }

    pub fn lambda(&self) -> &[Complex64] {
        &self.lambda
    }

    /// Number of coefficients N+1.
    pub fn len(&self) -> usize {
        self.lambda.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambda.is_empty()
    }

    /// Largest index N.
    pub fn max_index(&self) -> usize {
        self.lambda.len() - 1
    }

    /// Number of nonzero coefficients.
    pub fn rank(&self) -> usize {
        self.lambda.iter().filter(|l| l.norm_sqr() > 0.0).count()
    }

    /// |λ_n|².
    pub fn weights(&self) -> Vec<f64> {
        self.lambda.iter().map(|l| l.norm_sqr()).collect()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Σ_{n>N} |λ_n|² dropped by truncation.
    pub fn tail_mass(&self) -> f64 {
        self.tail
    }

    pub fn kind(&self) -> WindowKind {
        self.kind
    }

    /// ‖γ‖_{S²} of the retained part.
    pub fn hs_norm(&self) -> f64 {
        self.lambda.iter().map(|l| l.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn op_norm(&self) -> f64 {
        self.lambda.iter().map(|l| l.norm()).fold(0.0, f64::max)
    }

    /// True when γ is a multiple of h_0⊗h_0.
    pub fn is_gaussian(&self) -> bool {
        self.lambda.iter().skip(1).all(|l| l.norm_sqr() == 0.0) && self.lambda[0].norm_sqr() > 0.0
    }
}

/// A window coefficient in JSON: a real number or `[re, im]`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LambdaEntry {
    Real(f64),
    Complex([f64; 2]),
}

/// JSON window: `{"lambda":[..]}` or `{"thermal":a}`, optionally with
/// `"normalize":true`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<Vec<LambdaEntry>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thermal: Option<f64>,
    #[serde(default)]
    pub normalize: bool,
}

impl WindowSpec {
    pub fn build(&self) -> Result<PolyradialWindow> {
        match (&self.lambda, self.thermal) {
            (Some(l), None) => {
                let v: Vec<Complex64> = l
                    .iter()
                    .map(|e| match *e {
                        LambdaEntry::Real(x) => Complex64::new(x, 0.0),
                        LambdaEntry::Complex([a, b]) => Complex64::new(a, b),
                    })
                    .collect();
                let w = if self.normalize {
                    PolyradialWindow::normalized(v)?
                } else {
                    PolyradialWindow::new(v)?
                };
                Ok(if w.is_gaussian() && w.is_normalized() && w.len() == 1 {
                    PolyradialWindow::gaussian()
                } else {
                    w
                })
            }
            (None, Some(a)) => PolyradialWindow::thermal(a),
            _ => Err(Error::InvalidConfig(
                "window needs exactly one of \"lambda\" or \"thermal\"".into(),
            )),
        }
    }
}

/// Operator ρ given by its M×M Hermite matrix, ρ h_n = Σ_m ρ_{mn} h_m.
#[derive(Debug, Clone, PartialEq)]
pub struct HermiteOperator {
    coeff: DMatrix<Complex64>,
    self_adjoint: bool,
    positive: bool,
}

fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let a: f64 = rng.sample(StandardNormal);
    let b: f64 = rng.sample(StandardNormal);
    Complex64::new(a, b) * std::f64::consts::FRAC_1_SQRT_2
}

impl HermiteOperator {
    /// Wraps a square matrix; self-adjointness and positivity are detected.
    pub fn new(coeff: DMatrix<Complex64>) -> Result<Self> {
        if coeff.nrows() != coeff.ncols() || coeff.nrows() == 0 {
            return Err(Error::InvalidConfig(format!(
                "operator matrix must be square and nonempty, got {}x{}",
                coeff.nrows(),
                coeff.ncols()
            )));
        }
        if coeff.nrows() - 1 > DEFAULT_MAX_INDEX {
            return Err(Error::IndexOverflow {
                index: coeff.nrows() - 1,
                max: DEFAULT_MAX_INDEX,
            });
        }
        if coeff.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::InvalidConfig("operator entries must be finite".into()));
        }
        let scale = coeff.norm().max(1.0);
        let skew = (&coeff - coeff.adjoint()).iter().map(|c| c.norm()).fold(0.0, f64::max);
        let self_adjoint = skew <= 1e-12 * scale;
        let positive = self_adjoint && {
            let herm = (&coeff + coeff.adjoint()) * Complex64::new(0.5, 0.0);
            herm.symmetric_eigen().eigenvalues.iter().all(|&e| e >= -1e-10)
        };
        Ok(Self {
            coeff,
            self_adjoint,
            positive,
        })
    }

    pub fn zeros(m: usize) -> Result<Self> {
        Self::new(DMatrix::zeros(m, m))
    }

    /// f⊗g : h ↦ ⟨h, g⟩ f, padded to the longer length.
    pub fn rank_one(f: &[Complex64], g: &[Complex64]) -> Result<Self> {
        let m = f.len().max(g.len());
        let at = |v: &[Complex64], i: usize| v.get(i).copied().unwrap_or(ZERO);
        Self::new(DMatrix::from_fn(m, m, |i, j| at(f, i) * at(g, j).conj()))
    }

    /// Σ_{k<rank} u_k⊗v_k with complex Gaussian vectors.
    pub fn random<R: Rng + ?Sized>(m: usize, rank: usize, rng: &mut R) -> Result<Self> {
        let u = DMatrix::from_fn(m, rank, |_, _| complex_gaussian(rng));
        let v = DMatrix::from_fn(m, rank, |_, _| complex_gaussian(rng));
        Self::new(&u * v.adjoint())
    }

    /// Random B B* of the given rank, normalized to trace one.
    pub fn random_positive<R: Rng + ?Sized>(m: usize, rank: usize, rng: &mut R) -> Result<Self> {
        let b = DMatrix::from_fn(m, rank, |_, _| complex_gaussian(rng));
        let mut c = &b * b.adjoint();
        let tr = c.trace().re;
        c /= Complex64::new(tr, 0.0);
        // exact Hermitian symmetry
        let c = (&c + c.adjoint()) * Complex64::new(0.5, 0.0);
        Self::new(c)
    }

    /// Hermitian matrix with complex Gaussian entries, symmetrized.
    pub fn random_hermitian<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Result<Self> {
        let a = DMatrix::from_fn(m, m, |_, _| complex_gaussian(rng));
        Self::new((&a + a.adjoint()) * Complex64::new(0.5, 0.0))
    }

    pub fn coeff(&self) -> &DMatrix<Complex64> {
        &self.coeff
    }

    /// Truncation M.
    pub fn dim(&self) -> usize {
        self.coeff.nrows()
    }

    pub fn is_self_adjoint(&self) -> bool {
        self.self_adjoint
    }

    pub fn is_positive(&self) -> bool {
        self.positive
    }

    /// Hilbert–Schmidt norm (Frobenius norm of the matrix).
    pub fn hs_norm(&self) -> f64 {
        self.coeff.norm()
    }

    pub fn trace(&self) -> Complex64 {
        self.coeff.trace()
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(&self.coeff * Complex64::new(c, 0.0))
    }

    /// π(z0)ρ truncated to an m_out×m_out block (m_out ≥ M).
    pub fn translated(&self, z0: (f64, f64), m_out: usize) -> Result<Self> {
        let m = self.dim();
        let m_out = m_out.max(m);
        let mut t = vec![ZERO; m * m_out];
        stft_table(z0, m, m_out, &mut t);
        // ⟨π(z0)h_j, h_i⟩ = conj(V_{h_j}h_i(z0))
        let shift = DMatrix::from_fn(m_out, m, |i, j| t[j * m_out + i].conj());
        let prod = shift * &self.coeff;
        let mut out = DMatrix::zeros(m_out, m_out);
        out.view_mut((0, 0), (m_out, m)).copy_from(&prod);
        Self::new(out)
    }
}

/// Hermite coefficients of π(z0)f, truncated to m_out entries.
pub fn shift_coefficients(f: &[Complex64], z0: (f64, f64), m_out: usize) -> Vec<Complex64> {
    let m = f.len();
    let mut t = vec![ZERO; m * m_out];
    stft_table(z0, m, m_out, &mut t);
    (0..m_out)
        .map(|i| (0..m).map(|j| t[j * m_out + i].conj() * f[j]).sum())
        .collect()
}

fn check_operator_index(rho: &HermiteOperator) -> Result<()> {
    if rho.dim() - 1 > DEFAULT_MAX_INDEX {
        return Err(Error::Truncation(format!(
            "operator truncation {} exceeds the Hermite index limit {DEFAULT_MAX_INDEX}",
            rho.dim()
        )));
    }
    Ok(())
}

/// M(z) for window coefficients `lambda` into `out` ((N+1)×M, row-major);
/// `table` is scratch of the same size.
fn stft_block(lambda: &[Complex64], rho: &DMatrix<Complex64>, z: (f64, f64), table: &mut [Complex64], out: &mut [Complex64]) {
    let rows = lambda.len();
    let m = rho.nrows();
    stft_table(z, rows, m, table);
    for n in 0..rows {
        let ln = lambda[n].conj();
        let trow = &table[n * m..(n + 1) * m];
        let orow = &mut out[n * m..(n + 1) * m];
        if ln.norm_sqr() == 0.0 {
            orow.fill(ZERO);
            continue;
        }
        for (k, o) in orow.iter_mut().enumerate() {
            let col = rho.column(k);
            let mut s = ZERO;
            for (tm, rm) in trow.iter().zip(col.iter()) {
                s += tm * rm;
            }
            *o = ln * s;
        }
    }
}

/// The (N+1)×M matrix of 𝔙_γρ(z), row-major.
pub fn opstft_at(gamma: &PolyradialWindow, rho: &HermiteOperator, z: (f64, f64)) -> Result<Vec<Complex64>> {
    check_operator_index(rho)?;
    let size = gamma.len() * rho.dim();
    let mut table = vec![ZERO; size];
    let mut out = vec![ZERO; size];
    stft_block(gamma.lambda(), rho.coeff(), z, &mut table, &mut out);
    Ok(out)
}

/// Per-node operator STFT matrices on a grid.
#[derive(Debug, Clone)]
pub struct StftField {
    grid: PhaseGrid,
    rows: usize,
    cols: usize,
    values: Vec<Complex64>,
    hs_norm: Vec<f64>,
}

impl StftField {
    /// Field from raw per-node blocks (node order iy outer, ix inner).
    pub fn from_parts(grid: PhaseGrid, rows: usize, cols: usize, values: Vec<Complex64>) -> Result<Self> {
        if values.len() != grid.len() * rows * cols {
            return Err(Error::InvalidConfig(format!(
                "field has {} entries, expected {} nodes of {rows}x{cols}",
                values.len(),
                grid.len()
            )));
        }
        let block = rows * cols;
        let hs_norm = values
            .par_chunks(block.max(1))
            .map(|b| b.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt())
            .collect();
        Ok(Self {
            grid,
            rows,
            cols,
            values,
            hs_norm,
        })
    }

    pub fn grid(&self) -> &PhaseGrid {
        &self.grid
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    /// Row-major block of node `idx`.
    pub fn node(&self, idx: usize) -> &[Complex64] {
        let b = self.rows * self.cols;
        &self.values[idx * b..(idx + 1) * b]
    }

    /// Frobenius norm ‖M(z)‖ per node.
    pub fn hs_norm(&self) -> &[f64] {
        &self.hs_norm
    }

    /// CSV with columns x, y, hs_norm.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let rows = (0..self.grid.len()).map(|i| {
            let (x, y) = self.grid.node(i);
            vec![x, y, self.hs_norm[i]]
        });
        crate::output::write_csv(w, &["x", "y", "hs_norm"], rows)
    }

    /// Per node: u32 rows, u32 cols (little endian), then rows·cols
    /// complex entries as (f64 re, f64 im), row-major.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        let mut buf = Vec::with_capacity(8 + 16 * self.rows * self.cols);
        for idx in 0..self.grid.len() {
            buf.clear();
            buf.extend_from_slice(&(self.rows as u32).to_le_bytes());
            buf.extend_from_slice(&(self.cols as u32).to_le_bytes());
            for c in self.node(idx) {
                buf.extend_from_slice(&c.re.to_le_bytes());
                buf.extend_from_slice(&c.im.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    /// Reads a dump written by [`StftField::write_binary`] for `grid`.
    pub fn read_binary<R: Read>(mut r: R, grid: PhaseGrid) -> Result<Self> {
        let mut head = [0u8; 8];
        let mut values = Vec::new();
        let (mut rows, mut cols) = (0usize, 0usize);
        for idx in 0..grid.len() {
            r.read_exact(&mut head)
                .map_err(|e| Error::InvalidConfig(format!("field dump truncated at node {idx}: {e}")))?;
            let nr = u32::from_le_bytes(head[..4].try_into().unwrap()) as usize;
            let nc = u32::from_le_bytes(head[4..].try_into().unwrap()) as usize;
            if idx == 0 {
                (rows, cols) = (nr, nc);
                if grid.len().saturating_mul(rows * cols) > FIELD_BUDGET {
                    return Err(Error::Budget {
                        needed: grid.len() * rows * cols,
                        budget: FIELD_BUDGET,
                    });
                }
                values.reserve(grid.len() * rows * cols);
            } else if (nr, nc) != (rows, cols) {
                return Err(Error::InvalidConfig(format!(
                    "node {idx} has a {nr}x{nc} block, expected {rows}x{cols}"
                )));
            }
            let mut body = vec![0u8; 16 * rows * cols];
            r.read_exact(&mut body)
                .map_err(|e| Error::InvalidConfig(format!("field dump truncated at node {idx}: {e}")))?;
            for c in body.chunks_exact(16) {
                values.push(Complex64::new(
                    f64::from_le_bytes(c[..8].try_into().unwrap()),
                    f64::from_le_bytes(c[8..].try_into().unwrap()),
                ));
            }
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(Error::InvalidConfig("field dump has trailing data".into()));
        }
        Self::from_parts(grid, rows, cols, values)
    }
}

/// 𝔙_γρ at every grid node.
pub fn opstft_field(gamma: &PolyradialWindow, rho: &HermiteOperator, grid: PhaseGrid) -> Result<StftField> {
    if !gamma.is_normalized() {
        return Err(Error::Precondition("window must satisfy Σ|λ_n|² = 1".into()));
    }
    check_operator_index(rho)?;
    let (rows, cols) = (gamma.len(), rho.dim());
    let block = rows * cols;
    let needed = grid.len().saturating_mul(block);
    if needed > FIELD_BUDGET {
        return Err(Error::Budget {
            needed,
            budget: FIELD_BUDGET,
        });
    }
    let mut values = vec![ZERO; needed];
    let lambda = gamma.lambda();
    let coeff = rho.coeff();
    values
        .par_chunks_mut(block)
        .enumerate()
        .for_each_init(
            || vec![ZERO; block],
            |table, (idx, out)| stft_block(lambda, coeff, grid.node(idx), table, out),
        );
    StftField::from_parts(grid, rows, cols, values)
}

/// |h²Σ‖M(z)‖² − ‖γ‖²‖ρ‖²| / (‖γ‖²‖ρ‖²).
pub fn moyal_defect(field: &StftField, gamma: &PolyradialWindow, rho: &HermiteOperator) -> Result<f64> {
    let target = gamma.hs_norm().powi(2) * rho.hs_norm().powi(2);
    if !(target > 0.0) {
        return Err(Error::ZeroNorm("Moyal defect needs nonzero γ and ρ".into()));
    }
    let hs = field.hs_norm();
    let sum = par::sum(hs.len(), |i| hs[i] * hs[i]);
    Ok((field.grid().weight() * sum - target).abs() / target)
}

/// Matrix of α_z(γγ*) = π(z)γγ*π(z)* on span{h_0..h_{m−1}}:
/// entries Σ_n |λ_n|² conj(V_{h_n}h_i(z)) V_{h_n}h_j(z).
pub fn alpha_matrix(gamma: &PolyradialWindow, z: (f64, f64), m: usize) -> DMatrix<Complex64> {
    let rows = gamma.len();
    let mut t = vec![ZERO; rows * m];
    stft_table(z, rows, m, &mut t);
    let w = gamma.weights();
    DMatrix::from_fn(m, m, |i, j| {
        (0..rows)
            .filter(|&n| w[n] > 0.0)
            .map(|n| w[n] * t[n * m + i].conj() * t[n * m + j])
            .sum()
    })
}

/// |‖𝔙_γρ(z)‖_{S²} − √tr(ρρ* α_z(γγ*))|.
pub fn lemma_identity_defect(gamma: &PolyradialWindow, rho: &HermiteOperator, z: (f64, f64)) -> Result<f64> {
    let lhs = opstft_at(gamma, rho, z)?.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    let a = alpha_matrix(gamma, z, rho.dim());
    let rr = rho.coeff() * rho.coeff().adjoint();
    let rhs = (rr * a).trace().re.max(0.0).sqrt();
    Ok((lhs - rhs).abs())
}

/// Reproducing kernel K_γ(z,w) = γ*π(z)*π(w)γ as an (N+1)×(N+1)
/// row-major matrix: conj(λ_i) λ_j ⟨π(w)h_j, π(z)h_i⟩.
pub fn kernel_matrix(gamma: &PolyradialWindow, z: (f64, f64), w: (f64, f64)) -> Vec<Complex64> {
    let n = gamma.len();
    let mut t = vec![ZERO; n * n];
    kernel_into(gamma.lambda(), z, w, &mut t);
    t
}

fn kernel_into(lambda: &[Complex64], z: (f64, f64), w: (f64, f64), out: &mut [Complex64]) {
    let n = lambda.len();
    let u = (w.0 - z.0, w.1 - z.1);
    stft_table(u, n, n, out);
    // π(z)*π(w) = e^{2πi(η−ω)x} π(w−z)
    let phase = Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * (w.1 - z.1) * z.0);
    // ⟨π(u)h_j, h_i⟩ = conj(V_{h_j}h_i(u)) = conj(out[j][i])
    let mut k = vec![ZERO; n * n];
    for i in 0..n {
        for j in 0..n {
            k[i * n + j] = lambda[i].conj() * lambda[j] * phase * out[j * n + i].conj();
        }
    }
    out.copy_from_slice(&k);
}

/// Frobenius norm of ∫_{z+D_R} K_γ(z,w) 𝔙_γρ(w) dw − 𝔙_{γ̃}ρ(z), with
/// γ̃ = Σ λ_m A_m(D_R) h_m⊗h_m; the integral uses the centroid rule on
/// the cells of `grid`.
pub fn local_reproduce_defect(
    gamma: &PolyradialWindow,
    rho: &HermiteOperator,
    r: f64,
    z: (f64, f64),
    grid: &PhaseGrid,
) -> Result<f64> {
    check_operator_index(rho)?;
    let rule = disk_rule(grid, z, r, 1)?;
    let a = crate::sieve::a_coefficients(gamma, r)?;
    let rows = gamma.len();
    let m = rho.dim();
    let lambda = gamma.lambda();
    let coeff = rho.coeff();
    let parts = par::chunked(
        rule.len(),
        || (vec![ZERO; rows * rows], vec![ZERO; rows * m], vec![ZERO; rows * m], vec![ZERO; rows * m]),
        |(k, table, v, acc), q| {
            let (w, wt) = (rule.points[q], rule.weights[q]);
            kernel_into(lambda, z, w, k);
            stft_block(lambda, coeff, w, table, v);
            for i in 0..rows {
                for p in 0..rows {
                    let kip = k[i * rows + p] * wt;
                    if kip.norm_sqr() == 0.0 {
                        continue;
                    }
                    for c in 0..m {
                        acc[i * m + c] += kip * v[p * m + c];
                    }
                }
            }
        },
    );
    let lhs = par::add_all(parts.iter().map(|p| p.3.as_slice()), rows * m);
    let tilde: Vec<Complex64> = lambda.iter().zip(&a).map(|(l, &am)| l * am).collect();
    let mut table = vec![ZERO; rows * m];
    let mut rhs = vec![ZERO; rows * m];
    stft_block(&tilde, coeff, z, &mut table, &mut rhs);
    Ok(lhs
        .iter()
        .zip(&rhs)
        .map(|(x, y)| (x - y).norm_sqr())
        .sum::<f64>()
        .sqrt())
}

/// ρ ≈ ‖γ‖^{−2} ∫ π(z)γ 𝔙_γρ(z) dz by the node rule; the result has the
/// field's column count as truncation.
pub fn invert_field(field: &StftField, gamma: &PolyradialWindow) -> Result<HermiteOperator> {
    let rows = field.rows();
    let m = field.cols();
    if rows != gamma.len() {
        return Err(Error::InvalidConfig(format!(
            "field has {rows} window rows, window has {}",
            gamma.len()
        )));
    }
    let norm2 = gamma.hs_norm().powi(2);
    if !(norm2 > 0.0) {
        return Err(Error::ZeroNorm("window".into()));
    }
    let grid = *field.grid();
    let lambda = gamma.lambda();
    let parts = par::chunked(
        grid.len(),
        || (vec![ZERO; rows * m], vec![ZERO; m * m]),
        |(t, acc), idx| {
            stft_table(grid.node(idx), rows, m, t);
            let blk = field.node(idx);
            for n in 0..rows {
                if lambda[n].norm_sqr() == 0.0 {
                    continue;
                }
                for i in 0..m {
                    let f = lambda[n] * t[n * m + i].conj();
                    for k in 0..m {
                        acc[i * m + k] += f * blk[n * m + k];
                    }
                }
            }
        },
    );
    let acc = par::add_all(parts.iter().map(|p| p.1.as_slice()), m * m);
    let s = Complex64::new(grid.weight() / norm2, 0.0);
    HermiteOperator::new(DMatrix::from_fn(m, m, |i, k| acc[i * m + k] * s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::specialfn::hermite_all;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    #[test]
    fn window_constructors() {
        let g = PolyradialWindow::gaussian();
        assert!(g.is_normalized() && g.is_gaussian() && g.rank() == 1);
        let r2 = PolyradialWindow::rank_two();
        assert!(r2.is_normalized() && !r2.is_gaussian());
        let p = PolyradialWindow::projection(4).unwrap();
        assert!(p.is_normalized() && p.len() == 5);
        let h = PolyradialWindow::hermite(3).unwrap();
        assert_eq!(h.rank(), 1);
        assert!(PolyradialWindow::hermite(DEFAULT_MAX_INDEX + 1).is_err());
        for &a in &[0.5, 1.0, 2.0] {
            let t = PolyradialWindow::thermal(a).unwrap();
            assert!(t.is_normalized(), "{a}");
            let mass: f64 = t.weights().iter().sum();
            assert!((mass + t.tail_mass() - 1.0).abs() < 1e-14);
        }
        assert!(PolyradialWindow::thermal(0.0).is_err());
        assert!(PolyradialWindow::normalized(vec![ZERO]).is_err());
        let n = PolyradialWindow::normalized(vec![c(3.0), Complex64::new(0.0, 4.0)]).unwrap();
        assert!(n.is_normalized());
    }

    #[test]
    fn window_json() {
        let spec: WindowSpec = serde_json::from_str(r#"{"lambda":[0.6,[0.0,0.8]]}"#).unwrap();
        let w = spec.build().unwrap();
        assert!(w.is_normalized());
        assert_eq!(w.lambda()[1], Complex64::new(0.0, 0.8));
        let spec: WindowSpec = serde_json::from_str(r#"{"thermal":1.0}"#).unwrap();
        assert!(matches!(spec.build().unwrap().kind(), WindowKind::Thermal { .. }));
        let spec: WindowSpec = serde_json::from_str(r#"{"lambda":[1.0]}"#).unwrap();
        assert!(spec.build().unwrap().is_gaussian());
        assert!(serde_json::from_str::<WindowSpec>(r#"{"lam":[1]}"#).is_err());
    }

    #[test]
    fn operator_flags() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = HermiteOperator::random_positive(6, 3, &mut rng).unwrap();
        assert!(p.is_self_adjoint() && p.is_positive());
        assert!((p.trace().re - 1.0).abs() < 1e-14);
        let h = HermiteOperator::random_hermitian(6, &mut rng).unwrap();
        assert!(h.is_self_adjoint() && !h.is_positive());
        let r = HermiteOperator::random(6, 2, &mut rng).unwrap();
        assert!(!r.is_self_adjoint());
        let one = HermiteOperator::rank_one(&[c(0.0), c(1.0)], &[c(1.0)]).unwrap();
        assert_eq!(one.coeff()[(1, 0)], c(1.0));
        assert_eq!(one.hs_norm(), 1.0);
    }

    #[test]
    fn gaussian_field_examples() {
        let grid = PhaseGrid::new(3.0, 0.1).unwrap();
        let g = PolyradialWindow::gaussian();
        let rho = HermiteOperator::rank_one(&[c(1.0)], &[c(1.0)]).unwrap();
        let f = opstft_field(&g, &rho, grid).unwrap();
        for (i, &v) in f.hs_norm().iter().enumerate() {
            let (x, y) = grid.node(i);
            assert!((v - (-PI * (x * x + y * y) / 2.0).exp()).abs() < 1e-13);
        }
        let rho = HermiteOperator::rank_one(&[c(0.0), c(1.0)], &[c(1.0)]).unwrap();
        let f = opstft_field(&g, &rho, grid).unwrap();
        for (i, &v) in f.hs_norm().iter().enumerate() {
            let (x, y) = grid.node(i);
            let r2 = x * x + y * y;
            assert!((v - (PI * r2).sqrt() * (-PI * r2 / 2.0).exp()).abs() < 1e-13);
        }
        let zero = HermiteOperator::zeros(4).unwrap();
        let f = opstft_field(&PolyradialWindow::rank_two(), &zero, grid).unwrap();
        assert!(f.values().iter().all(|v| *v == ZERO));
        assert!(matches!(
            moyal_defect(&f, &PolyradialWindow::rank_two(), &zero),
            Err(Error::ZeroNorm(_))
        ));
    }

    #[test]
    fn field_requires_normalized_window() {
        let w = PolyradialWindow::new(vec![c(2.0)]).unwrap();
        let rho = HermiteOperator::zeros(2).unwrap();
        assert!(matches!(
            opstft_field(&w, &rho, PhaseGrid::new(1.0, 0.5).unwrap()),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn moyal_identity() {
        let grid = PhaseGrid::new(6.0, 0.02).unwrap();
        let g = PolyradialWindow::gaussian();
        let rho = HermiteOperator::rank_one(&[c(1.0)], &[c(1.0)]).unwrap();
        let f = opstft_field(&g, &rho, grid).unwrap();
        assert!(moyal_defect(&f, &g, &rho).unwrap() < 1e-6);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rho = HermiteOperator::random(8, 3, &mut rng).unwrap();
        let g = PolyradialWindow::rank_two();
        let coarse = PhaseGrid::new(6.0, 0.1).unwrap();
        let d1 = moyal_defect(&opstft_field(&g, &rho, coarse).unwrap(), &g, &rho).unwrap();
        let d2 = moyal_defect(&opstft_field(&g, &rho, coarse.refined()).unwrap(), &g, &rho).unwrap();
        assert!(d1 < 1e-4 && d2 < 1e-4, "{d1} {d2}");
        // the node rule is spectrally accurate here, so refinement can only help
        assert!(d2 <= d1.max(1e-12), "{d1} {d2}");
    }

    #[test]
    fn lemma_identity() {
        let g = PolyradialWindow::gaussian();
        let rho = HermiteOperator::rank_one(&[c(1.0)], &[c(1.0)]).unwrap();
        for &z in &[(0.0, 0.0), (0.3, -0.7), (1.2, 0.4)] {
            assert!(lemma_identity_defect(&g, &rho, z).unwrap() < 1e-10);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let gamma = PolyradialWindow::normalized(vec![c(0.8), ZERO, Complex64::new(0.3, 0.5)]).unwrap();
        let rho = HermiteOperator::random(7, 3, &mut rng).unwrap();
        for _ in 0..20 {
            let z = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            assert!(lemma_identity_defect(&gamma, &rho, z).unwrap() < 1e-6);
        }
        // z = 0, γ = ρ = h_0⊗h_0: both sides equal one
        let lhs = opstft_at(&g, &HermiteOperator::rank_one(&[c(1.0)], &[c(1.0)]).unwrap(), (0.0, 0.0)).unwrap();
        assert!((lhs[0].norm() - 1.0).abs() < 1e-14);
    }

    /// ⟨π(w)h_j, π(z)h_i⟩ by time-domain quadrature, π(z)g(t) = e^{2πiωt}g(t−x).
    fn shifted_inner(i: usize, j: usize, z: (f64, f64), w: (f64, f64)) -> Complex64 {
        let n = i.max(j) + 1;
        let (a, b, steps) = (-9.0, 9.0, 9000);
        let dt = (b - a) / steps as f64;
        let (mut hz, mut hw) = (vec![0.0; n], vec![0.0; n]);
        let mut s = ZERO;
        for k in 0..=steps {
            let t = a + k as f64 * dt;
            hermite_all(t - z.0, &mut hz);
            hermite_all(t - w.0, &mut hw);
            let ph = Complex64::from_polar(1.0, 2.0 * PI * (w.1 - z.1) * t);
            s += ph * hw[j] * hz[i] * dt;
        }
        s
    }

    #[test]
    fn kernel_matches_time_domain() {
        let gamma = PolyradialWindow::normalized(vec![c(0.5), Complex64::new(0.1, 0.7), c(-0.4)]).unwrap();
        let z = (0.4, -0.3);
        let w = (-0.2, 0.5);
        let k = kernel_matrix(&gamma, z, w);
        let l = gamma.lambda();
        for i in 0..3 {
            for j in 0..3 {
                let want = l[i].conj() * l[j] * shifted_inner(i, j, z, w);
                assert!((k[i * 3 + j] - want).norm() < 1e-10, "{i}{j} {} {want}", k[i * 3 + j]);
            }
        }
    }

    #[test]
    fn local_reproducing_formula_gaussian() {
        let grid = PhaseGrid::new(3.0, 0.02).unwrap();
        let g = PolyradialWindow::gaussian();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rho = HermiteOperator::random(6, 3, &mut rng).unwrap();
        let r = (2.0 / PI).sqrt();
        let d = local_reproduce_defect(&g, &rho, r, (0.1, -0.2), &grid).unwrap();
        assert!(d < 1e-3 * rho.hs_norm(), "{d}");
        let d2 = local_reproduce_defect(&g, &rho, r, (0.1, -0.2), &grid.refined()).unwrap();
        assert!(d2 * 3.0 <= d, "{d} {d2}");
        assert!(local_reproduce_defect(&g, &rho, 2.0, (1.5, 0.0), &grid).is_err());
    }

    #[test]
    fn inversion_recovers_operator() {
        let grid = PhaseGrid::new(6.0, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gamma = PolyradialWindow::rank_two();
        let rho = HermiteOperator::random(8, 3, &mut rng).unwrap();
        let f = opstft_field(&gamma, &rho, grid).unwrap();
        let back = invert_field(&f, &gamma).unwrap();
        assert!((back.coeff() - rho.coeff()).norm() < 1e-4);
    }

    #[test]
    fn covariance_under_shifts() {
        let grid = PhaseGrid::new(4.0, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gamma = PolyradialWindow::rank_two();
        let rho = HermiteOperator::random(4, 2, &mut rng).unwrap();
        let z0 = (0.2, -0.3);
        let moved = rho.translated(z0, 40).unwrap();
        let f = opstft_field(&gamma, &rho, grid).unwrap();
        let g = opstft_field(&gamma, &moved, grid).unwrap();
        let n = grid.n();
        let (sx, sy) = (2usize, 3usize);
        for iy in sy..n {
            for ix in 0..n - sx {
                // node (ix + sx, iy − sy) sits at z + z0
                let a = f.hs_norm()[iy * n + ix];
                let b = g.hs_norm()[(iy - sy) * n + ix + sx];
                assert!((a - b).abs() < 1e-9, "{a} {b}");
            }
        }
    }

    #[test]
    fn binary_and_csv_round_trip() {
        let grid = PhaseGrid::new(1.0, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rho = HermiteOperator::random(3, 1, &mut rng).unwrap();
        let f = opstft_field(&PolyradialWindow::rank_two(), &rho, grid).unwrap();
        let mut buf = Vec::new();
        f.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), grid.len() * (8 + 16 * 6));
        assert_eq!(&buf[..8], &[2, 0, 0, 0, 3, 0, 0, 0]);
        let back = StftField::read_binary(&buf[..], grid).unwrap();
        assert_eq!(back.values(), f.values());
        assert!(StftField::read_binary(&buf[..buf.len() - 1], grid).is_err());
        let mut csv = Vec::new();
        f.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("x,y,hs_norm\n"));
        assert_eq!(text.lines().count(), grid.len() + 1);
    }

    #[test]
    fn shifted_gaussian_coefficients() {
        // π(z0)h_0 has coefficients conj(V_{h_0}h_i(z0)) with |·|² Poisson(π|z0|²)
        let z0 = (0.5, 0.25);
        let v = shift_coefficients(&[c(1.0)], z0, 30);
        let t = PI * (z0.0 * z0.0 + z0.1 * z0.1);
        for (i, ci) in v.iter().enumerate().take(6) {
            let ln_p = -t + i as f64 * t.ln() - crate::specialfn::ln_factorial(i);
            assert!((ci.norm_sqr() - ln_p.exp()).abs() < 1e-14);
        }
        let total: f64 = v.iter().map(|c| c.norm_sqr()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
