//! Mixed-state localization operators A_Ω = ∫_Ω π(z)γγ*π(z)* dz as
//! truncated Hermite matrices, their spectra, and the Husimi and Cohen
//! class fields.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::par;
use crate::opstft::{alpha_matrix, HermiteOperator, PolyradialWindow};
use crate::phasespace::{DomainMask, PhaseGrid, QuadratureRule, DEFAULT_SUBDIVISION};
use crate::sieve::{kernel_sup_integral, KernelNorm, OP_RANK_LIMIT};
use crate::specialfn::{stft_table, DEFAULT_MAX_INDEX};

/// Largest window tail mass accepted when building localization matrices.
pub const WINDOW_TAIL_LIMIT: f64 = 1e-10;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// ⟨A_Ω h_j, h_i⟩ for i, j < M.
#[derive(Debug, Clone)]
pub struct LocalizationMatrix {
    entries: DMatrix<Complex64>,
    step: f64,
    omega_measure: f64,
    gamma_len: usize,
}

impl LocalizationMatrix {
    pub fn entries(&self) -> &DMatrix<Complex64> {
        &self.entries
    }

    pub fn truncation(&self) -> usize {
        self.entries.nrows()
    }

    /// Grid spacing of the quadrature.
    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn omega_measure(&self) -> f64 {
        self.omega_measure
    }

    pub fn window_len(&self) -> usize {
        self.gamma_len
    }

    pub fn trace(&self) -> f64 {
        self.entries.trace().re
    }

    /// Eigenvalues in descending order.
    pub fn spectrum(&self) -> Vec<f64> {
        let mut e: Vec<f64> = hermitian_part(&self.entries).symmetric_eigen().eigenvalues.iter().copied().collect();
        e.sort_by(|a, b| b.partial_cmp(a).unwrap());
        e
    }

    /// CSV with columns index, eigenvalue.
    pub fn write_spectrum_csv<W: Write>(&self, w: W) -> Result<()> {
        let rows = self.spectrum().into_iter().enumerate().map(|(i, e)| vec![i as f64, e]);
        crate::output::write_csv(w, &["index", "eigenvalue"], rows)
    }
}

fn hermitian_part(m: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    (m + m.adjoint()) * Complex64::new(0.5, 0.0)
}

/// Σ_q w_q Σ_n |λ_n|² conj(V_{h_n}h_i(z_q)) V_{h_n}h_j(z_q) over a rule.
fn gram_over_rule(gamma: &PolyradialWindow, rule: &QuadratureRule, m: usize) -> DMatrix<Complex64> {
    let rows = gamma.len();
    let wts = gamma.weights();
    let parts = par::chunked(
        rule.len(),
        || (vec![ZERO; rows * m], vec![ZERO; m * m]),
        |(t, acc), q| {
            let (z, wq) = (rule.points[q], rule.weights[q]);
            stft_table(z, rows, m, t);
            for n in 0..rows {
                let w = wq * wts[n];
                if w == 0.0 {
                    continue;
                }
                let row = &t[n * m..(n + 1) * m];
                for i in 0..m {
                    let ci = row[i].conj() * w;
                    for j in i..m {
                        acc[i * m + j] += ci * row[j];
                    }
                }
            }
        },
    );
    let acc = par::add_all(parts.iter().map(|p| p.1.as_slice()), m * m);
    DMatrix::from_fn(m, m, |i, j| if i <= j { acc[i * m + j] } else { acc[j * m + i].conj() })
}

/// Hermite matrix of A_Ω^{γγ*} by centroid quadrature over Ω with
/// [`DEFAULT_SUBDIVISION`] subcells per axis.
pub fn build_localization_matrix(mask: &DomainMask, gamma: &PolyradialWindow, m: usize) -> Result<LocalizationMatrix> {
    build_localization_matrix_with(mask, gamma, m, DEFAULT_SUBDIVISION)
}

pub fn build_localization_matrix_with(
    mask: &DomainMask,
    gamma: &PolyradialWindow,
    m: usize,
    subdivision: usize,
) -> Result<LocalizationMatrix> {
    if m == 0 || m - 1 > DEFAULT_MAX_INDEX {
        return Err(Error::IndexOverflow {
            index: m.saturating_sub(1),
            max: DEFAULT_MAX_INDEX,
        });
    }
    if gamma.tail_mass() > WINDOW_TAIL_LIMIT {
        return Err(Error::Truncation(format!(
            "window tail mass {:e} exceeds {WINDOW_TAIL_LIMIT:e}",
            gamma.tail_mass()
        )));
    }
    let rule = mask.quadrature(subdivision);
    Ok(LocalizationMatrix {
        entries: gram_over_rule(gamma, &rule, m),
        step: mask.grid().spacing(),
        omega_measure: mask.measure(),
        gamma_len: gamma.len(),
    })
}

/// Largest eigenvalue and a unit eigenvector whose first non-negligible
/// component is real and positive. Ties go to the lowest eigen-index.
pub fn top_eigenvalue(matrix: &LocalizationMatrix) -> (f64, DVector<Complex64>) {
    top_eigenpair(matrix.entries())
}

pub(crate) fn top_eigenpair(a: &DMatrix<Complex64>) -> (f64, DVector<Complex64>) {
    let eig = hermitian_part(a).symmetric_eigen();
    let mut best = 0;
    for (i, &e) in eig.eigenvalues.iter().enumerate() {
        if e > eig.eigenvalues[best] {
            best = i;
        }
    }
    let mut v: DVector<Complex64> = eig.eigenvectors.column(best).into_owned();
    let norm = v.norm();
    if norm > 0.0 {
        v /= Complex64::new(norm, 0.0);
    }
    let big = v.iter().map(|c| c.norm()).fold(0.0, f64::max);
    if let Some(c) = v.iter().find(|c| c.norm() > 1e-8 * big).copied() {
        let phase = c.conj() / c.norm();
        v *= phase;
    }
    (eig.eigenvalues[best], v)
}

/// ⟨Aρ, ρ⟩_{S²} / ‖ρ‖²_{S²} with A acting on columns.
pub fn s2_quotient(a: &DMatrix<Complex64>, rho: &DMatrix<Complex64>) -> f64 {
    let num = (rho.adjoint() * a * rho).trace().re;
    num / rho.norm_squared()
}

/// Outcome of the S² = L² spectral check.
#[derive(Debug, Clone, Serialize)]
pub struct S2Report {
    pub lambda1: f64,
    /// Largest quotient over the random operators alone.
    pub max_random_quotient: f64,
    /// Largest quotient over all sampled operators, rank-one f₁⊗g included.
    pub max_quotient: f64,
    /// Quotient of the rank-one attainer f₁⊗f₁.
    pub attained: f64,
    /// max |quotient(f₁⊗g) − λ₁| over the random g.
    pub rank_one_deviation: f64,
    pub trials: usize,
    pub passed: bool,
}

/// Samples `trials` random operators and 5 rank-one operators f₁⊗g and
/// compares their S² Rayleigh quotients with λ₁.
pub fn s2_equals_l2_check<R: Rng + ?Sized>(
    mask: &DomainMask,
    gamma: &PolyradialWindow,
    m: usize,
    trials: usize,
    rng: &mut R,
) -> Result<S2Report> {
    let loc = build_localization_matrix(mask, gamma, m)?;
    let a = hermitian_part(loc.entries());
    let (lambda1, f1) = top_eigenpair(&a);
    let mut max_random = f64::NEG_INFINITY;
    for _ in 0..trials {
        let rho = HermiteOperator::random(m, m, rng)?;
        max_random = max_random.max(s2_quotient(&a, rho.coeff()));
    }
    let mut dev: f64 = 0.0;
    let mut max_rank_one = f64::NEG_INFINITY;
    for _ in 0..5 {
        let g = HermiteOperator::random(m, 1, rng)?;
        let gv: Vec<Complex64> = g.coeff().column(0).iter().copied().collect();
        let fv: Vec<Complex64> = f1.iter().copied().collect();
        let r1 = HermiteOperator::rank_one(&fv, &gv)?;
        let q = s2_quotient(&a, r1.coeff());
        dev = dev.max((q - lambda1).abs());
        max_rank_one = max_rank_one.max(q);
    }
    let fv: Vec<Complex64> = f1.iter().copied().collect();
    let attained = s2_quotient(&a, HermiteOperator::rank_one(&fv, &fv)?.coeff());
    let max_quotient = max_random.max(max_rank_one).max(attained);
    let passed = max_random <= lambda1 + 1e-8
        && (max_quotient - lambda1).abs() <= 1e-8
        && (attained - lambda1).abs() <= 1e-8
        && dev <= 1e-10;
    Ok(S2Report {
        lambda1,
        max_random_quotient: max_random,
        max_quotient,
        attained,
        rank_one_deviation: dev,
        trials,
        passed,
    })
}

/// What a scalar field holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FieldKind {
    Husimi,
    Cohen,
}

/// Real values per grid node.
#[derive(Debug, Clone)]
pub struct ScalarField {
    grid: PhaseGrid,
    values: Vec<f64>,
    kind: FieldKind,
}

impl ScalarField {
    pub fn grid(&self) -> &PhaseGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    /// h² Σ values.
    pub fn integral(&self) -> f64 {
        self.grid.weight() * self.values.iter().sum::<f64>()
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// CSV with columns x, y, value.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let rows = (0..self.grid.len()).map(|i| {
            let (x, y) = self.grid.node(i);
            vec![x, y, self.values[i]]
        });
        crate::output::write_csv(w, &["x", "y", "value"], rows)
    }
}

/// H_ρ(z) = a(z)* ρ a(z) with a_n(z) = ⟨π(z)h_0, h_n⟩.
pub fn husimi_at(rho: &HermiteOperator, z: (f64, f64)) -> f64 {
    let m = rho.dim();
    let mut t = vec![ZERO; m];
    stft_table(z, 1, m, &mut t);
    let c = rho.coeff();
    let mut s = ZERO;
    for n in 0..m {
        // conj(a_n) = V_{h_0}h_n(z)
        let an_bar = t[n];
        for k in 0..m {
            s += an_bar * c[(n, k)] * t[k].conj();
        }
    }
    s.re
}

fn require_positive(rho: &HermiteOperator) -> Result<()> {
    if rho.is_positive() {
        Ok(())
    } else {
        Err(Error::NotPositive)
    }
}

/// Husimi function of a positive operator on every grid node.
pub fn husimi_field(rho: &HermiteOperator, grid: PhaseGrid) -> Result<ScalarField> {
    require_positive(rho)?;
    let values = (0..grid.len()).into_par_iter().map(|i| husimi_at(rho, grid.node(i))).collect();
    Ok(ScalarField {
        grid,
        values,
        kind: FieldKind::Husimi,
    })
}

/// ∫_Ω H_ρ by the mask's centroid rule.
pub fn husimi_integral(rho: &HermiteOperator, mask: &DomainMask) -> Result<f64> {
    require_positive(rho)?;
    let rule = mask.quadrature(DEFAULT_SUBDIVISION);
    Ok(par::sum(rule.len(), |q| rule.weights[q] * husimi_at(rho, rule.points[q])))
}

/// Q(z) = Σ_n |λ_n|² |Σ_m f_m V_{h_n}h_m(z)|².
pub fn cohen_at(gamma: &PolyradialWindow, f: &[Complex64], z: (f64, f64)) -> f64 {
    let rows = gamma.len();
    let m = f.len();
    let mut t = vec![ZERO; rows * m];
    stft_table(z, rows, m, &mut t);
    let w = gamma.weights();
    (0..rows)
        .filter(|&n| w[n] > 0.0)
        .map(|n| {
            let s: Complex64 = (0..m).map(|k| f[k] * t[n * m + k]).sum();
            w[n] * s.norm_sqr()
        })
        .sum()
}

/// Cohen class distribution ‖𝔙_γ f(z)‖² of a Hermite coefficient vector.
pub fn cohen_field(gamma: &PolyradialWindow, f: &[Complex64], grid: PhaseGrid) -> Result<ScalarField> {
    if f.is_empty() || f.len() - 1 > DEFAULT_MAX_INDEX {
        return Err(Error::IndexOverflow {
            index: f.len().saturating_sub(1),
            max: DEFAULT_MAX_INDEX,
        });
    }
    let values = (0..grid.len())
        .into_par_iter()
        .map(|i| cohen_at(gamma, f, grid.node(i)))
        .collect();
    Ok(ScalarField {
        grid,
        values,
        kind: FieldKind::Cohen,
    })
}

/// Input of the uncertainty check.
#[derive(Debug, Clone)]
pub enum UncertaintyInput {
    Function(Vec<Complex64>),
    Operator(HermiteOperator),
}

/// 1 − ε ≤ sup_w ∫_Ω ‖√η π(z)*π(w)√η‖_op ≤ ‖η‖_op|Ω| ≤ |Ω| for η = γγ*.
#[derive(Debug, Clone, Serialize)]
pub struct UncertaintyReport {
    pub p: f64,
    /// ∫_Ω Q^{p/2} / ∫ Q^{p/2}.
    pub concentration: f64,
    /// Kernel sup-integral (operator norm, or HS majorant above rank 8).
    pub kernel_sup: f64,
    pub kernel_norm: KernelNorm,
    pub op_area: f64,
    pub area: f64,
    pub holds: bool,
}

pub fn uncertainty_check(
    mask: &DomainMask,
    gamma: &PolyradialWindow,
    input: &UncertaintyInput,
    p: f64,
) -> Result<UncertaintyReport> {
    if !(p >= 1.0) || !p.is_finite() {
        return Err(Error::Precondition(format!("p must be >= 1, got {p}")));
    }
    let rho = match input {
        UncertaintyInput::Function(f) => HermiteOperator::rank_one(f, f)?,
        UncertaintyInput::Operator(r) => {
            require_positive(r)?;
            r.clone()
        }
    };
    let m = rho.dim();
    let q_at = |z: (f64, f64)| -> f64 {
        let a = alpha_matrix(gamma, z, m);
        (rho.coeff() * a).trace().re.max(0.0).powf(p / 2.0)
    };
    let grid = *mask.grid();
    let total = grid.weight() * par::sum(grid.len(), |i| q_at(grid.node(i)));
    if !(total > 0.0) {
        return Err(Error::ZeroNorm("Cohen distribution".into()));
    }
    let rule = mask.quadrature(DEFAULT_SUBDIVISION);
    let inside = par::sum(rule.len(), |q| rule.weights[q] * q_at(rule.points[q]));
    let kernel_norm = if gamma.max_index() <= OP_RANK_LIMIT {
        KernelNorm::Op
    } else {
        KernelNorm::HS
    };
    let kernel_sup = kernel_sup_integral(mask, gamma, kernel_norm)?;
    let area = mask.measure();
    let eta_op = gamma.op_norm().powi(2);
    let op_area = eta_op * area;
    let concentration = inside / total;
    let slack = 1e-9;
    let holds = concentration <= kernel_sup + slack && kernel_sup <= op_area + slack && op_area <= area + slack;
    Ok(UncertaintyReport {
        p,
        concentration,
        kernel_sup,
        kernel_norm,
        op_area,
        area,
        holds,
    })
}
