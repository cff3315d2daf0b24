//! Operator recovery from incomplete or corrupted phase-space data by
//! group-L1 minimization over Hermite coefficients.
//!
//! The discretized objective is Σ_z h²‖M(z)‖_F over grid nodes. Programs are
//! solved by a primal-dual hybrid gradient iteration whose dual step is a
//! per-node projection onto Frobenius balls.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::opstft::{HermiteOperator, PolyradialWindow, StftField, WindowSpec, FIELD_BUDGET};
use crate::phasespace::{nyquist_density, DomainMask, DomainSpec, PhaseGrid};
use crate::sieve::{faber_krahn_bound, kernel_sup_integral, max_nyquist_bound, rfk_bound, KernelNorm, OP_RANK_LIMIT};
use crate::specialfn::stft_table;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// Radii swept by the certificate's maximum Nyquist candidates.
/// Reweighted least-squares steps tried at each gap evaluation.
const POLISH_STEPS: usize = 20;

pub const CERTIFICATE_RADII: [f64; 6] = [0.25, 0.5, 0.75, 1.0, 1.5, 2.0];

/// Discretized 𝔙_γ restricted to a node subset: σ ↦ (B(z)σ)_z with
/// B(z)_{nj} = conj(λ_n) V_{h_n}h_j(z). The per-node blocks B(z) are cached;
/// the (nodes·rows·M) × M² matrix of the map itself is never formed.
#[derive(Debug, Clone)]
pub struct ForwardMap {
    grid: PhaseGrid,
    rows: usize,
    m: usize,
    nodes: Vec<usize>,
    blocks: Vec<Complex64>,
    gamma_norm2: f64,
}

impl ForwardMap {
    /// Map onto every grid node.
    pub fn new(gamma: &PolyradialWindow, grid: PhaseGrid, m: usize) -> Result<Self> {
        Self::on_nodes(gamma, grid, m, (0..grid.len()).collect())
    }

    /// Map onto the listed node indices.
    pub fn on_nodes(gamma: &PolyradialWindow, grid: PhaseGrid, m: usize, nodes: Vec<usize>) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidConfig("truncation M must be positive".into()));
        }
        let rows = gamma.len();
        let block = rows * m;
        let needed = nodes.len().saturating_mul(block);
        if needed > FIELD_BUDGET {
            return Err(Error::Budget {
                needed,
                budget: FIELD_BUDGET,
            });
        }
        if let Some(&bad) = nodes.iter().find(|&&i| i >= grid.len()) {
            return Err(Error::InvalidConfig(format!("node index {bad} outside the grid")));
        }
        let lambda = gamma.lambda();
        let mut blocks = vec![ZERO; needed];
        blocks.par_chunks_mut(block).zip(nodes.par_iter()).for_each(|(b, &idx)| {
            stft_table(grid.node(idx), rows, m, b);
            for n in 0..rows {
                let l = lambda[n].conj();
                for v in &mut b[n * m..(n + 1) * m] {
                    *v *= l;
                }
            }
        });
        Ok(Self {
            grid,
            rows,
            m,
            nodes,
            blocks,
            gamma_norm2: gamma.hs_norm().powi(2),
        })
    }

    pub fn grid(&self) -> &PhaseGrid {
        &self.grid
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn truncation(&self) -> usize {
        self.m
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    /// Length of a field vector: nodes × rows × M.
    pub fn field_len(&self) -> usize {
        self.blocks.len()
    }

    fn block(&self, i: usize) -> &[Complex64] {
        let b = self.rows * self.m;
        &self.blocks[i * b..(i + 1) * b]
    }

    /// Per node the rows×M block B(z)σ, row-major.
    pub fn apply(&self, sigma: &DMatrix<Complex64>) -> Vec<Complex64> {
        let (rows, m) = (self.rows, self.m);
        assert_eq!(sigma.shape(), (m, m), "coefficient matrix must be M×M");
        let mut out = vec![ZERO; self.field_len()];
        out.par_chunks_mut(rows * m).enumerate().for_each(|(i, o)| {
            let b = self.block(i);
            for n in 0..rows {
                let brow = &b[n * m..(n + 1) * m];
                for k in 0..m {
                    o[n * m + k] = (0..m).map(|j| brow[j] * sigma[(j, k)]).sum();
                }
            }
        });
        out
    }

    /// Σ_z B(z)* F(z), the adjoint for the plain ℓ² inner products.
    pub fn adjoint(&self, field: &[Complex64]) -> DMatrix<Complex64> {
        let (rows, m) = (self.rows, self.m);
        assert_eq!(field.len(), self.field_len(), "field length mismatch");
        let bl = rows * m;
        let parts = par::chunked(
            self.nodes.len(),
            || vec![ZERO; m * m],
            |acc, i| {
                let (b, f) = (self.block(i), &field[i * bl..(i + 1) * bl]);
                for n in 0..rows {
                    for j in 0..m {
                        let c = b[n * m + j].conj();
                        if c == ZERO {
                            continue;
                        }
                        for k in 0..m {
                            acc[j * m + k] += c * f[n * m + k];
                        }
                    }
                }
            },
        );
        let acc = par::add_all(parts.iter().map(Vec::as_slice), m * m);
        DMatrix::from_row_slice(m, m, &acc)
    }

    /// Inversion quadrature ‖γ‖^{−2} h² Σ_z B(z)* F(z).
    pub fn invert(&self, field: &[Complex64]) -> DMatrix<Complex64> {
        self.adjoint(field) * Complex64::new(self.grid.weight() / self.gamma_norm2, 0.0)
    }

    /// Σ_z B(z)*B(z), the M×M Gram acting on each coefficient column.
    pub fn gram(&self) -> DMatrix<Complex64> {
        self.weighted_gram(None)
    }

    /// Σ_z w_z B(z)*B(z), with unit weights when `w` is `None`.
    fn weighted_gram(&self, w: Option<&[f64]>) -> DMatrix<Complex64> {
        let (rows, m) = (self.rows, self.m);
        let parts = par::chunked(
            self.nodes.len(),
            || vec![ZERO; m * m],
            |acc, i| {
                let b = self.block(i);
                let wi = w.map_or(1.0, |w| w[i]);
                for n in 0..rows {
                    let r = &b[n * m..(n + 1) * m];
                    for j in 0..m {
                        let c = r[j].conj() * wi;
                        for k in 0..m {
                            acc[j * m + k] += c * r[k];
                        }
                    }
                }
            },
        );
        let acc = par::add_all(parts.iter().map(Vec::as_slice), m * m);
        let g = DMatrix::from_row_slice(m, m, &acc);
        (&g + g.adjoint()) * Complex64::new(0.5, 0.0)
    }

    /// h² Σ_z ‖F(z)‖_F.
    pub fn l1_norm(&self, field: &[Complex64]) -> f64 {
        let bl = self.rows * self.m;
        self.grid.weight() * par::sum(field.len() / bl.max(1), |i| frob(&field[i * bl..(i + 1) * bl]))
    }

    /// Observed blocks of `field` on this map's nodes.
    pub fn gather(&self, field: &StftField) -> Result<Vec<Complex64>> {
        if field.rows() != self.rows || field.cols() != self.m || field.grid() != &self.grid {
            return Err(Error::InvalidConfig(format!(
                "field of {}x{} blocks does not match the forward map ({}x{})",
                field.rows(),
                field.cols(),
                self.rows,
                self.m
            )));
        }
        Ok(self.nodes.iter().flat_map(|&i| field.node(i).iter().copied()).collect())
    }
}

fn frob(b: &[Complex64]) -> f64 {
    b.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
}

fn inner(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    par::csum(a.len(), |i| a[i] * b[i].conj())
}

/// Which program to solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// min ‖𝔙_γσ‖₁ subject to 𝔙_γσ = G on Ω^c.
    #[serde(rename = "logan")]
    Logan,
    /// min ‖𝔙_γσ − G‖₁ with G observed everywhere.
    #[serde(rename = "noisy")]
    NoisySupported,
    /// min ‖χ_{Ω^c}(𝔙_γσ − G)‖₁, data on Ω lost.
    #[serde(rename = "missing")]
    MissingData,
}

impl Variant {
    /// Certificate threshold: α(Ω) must stay below it.
    pub fn threshold(self) -> f64 {
        match self {
            Variant::Logan | Variant::NoisySupported => 0.5,
            Variant::MissingData => 1.0,
        }
    }
}

/// A recovery instance on the grid of `omega`.
#[derive(Debug, Clone)]
pub struct RecoveryProblem {
    pub gamma: PolyradialWindow,
    pub omega: DomainMask,
    pub observed: StftField,
    pub epsilon: f64,
    pub variant: Variant,
}

impl RecoveryProblem {
    pub fn new(
        gamma: PolyradialWindow,
        omega: DomainMask,
        observed: StftField,
        epsilon: f64,
        variant: Variant,
    ) -> Result<Self> {
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(Error::InvalidConfig(format!("noise budget must be finite and >= 0, got {epsilon}")));
        }
        if observed.grid() != omega.grid() {
            return Err(Error::InvalidConfig("observed field and domain use different grids".into()));
        }
        if observed.rows() != gamma.len() {
            return Err(Error::InvalidConfig(format!(
                "observed field has {} window rows, window has {}",
                observed.rows(),
                gamma.len()
            )));
        }
        if !gamma.is_normalized() {
            return Err(Error::Precondition("window must satisfy Σ|λ_n|² = 1".into()));
        }
        Ok(Self {
            gamma,
            omega,
            observed,
            epsilon,
            variant,
        })
    }

    pub fn grid(&self) -> &PhaseGrid {
        self.omega.grid()
    }

    /// Hermite truncation M of the unknown.
    pub fn truncation(&self) -> usize {
        self.observed.cols()
    }

    fn nodes(&self, inside: bool) -> Vec<usize> {
        let r = self.omega.raster();
        (0..r.len()).filter(|&i| r[i] == inside).collect()
    }

    /// Loads `{"variant","gamma","omega","epsilon","observed"}`; the
    /// observed path is relative to the JSON file. `grid` overrides the
    /// domain's own grid.
    pub fn load(path: &Path, grid: Option<PhaseGrid>) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        let spec: ProblemSpec =
            serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("problem JSON: {e}")))?;
        let base = path.parent().unwrap_or(Path::new("."));
        spec.build(base, grid)
    }
}

/// JSON form of a [`RecoveryProblem`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub variant: Variant,
    pub gamma: WindowSpec,
    pub omega: DomainSpec,
    #[serde(default)]
    pub epsilon: f64,
    pub observed: PathBuf,
}

impl ProblemSpec {
    pub fn build(&self, base: &Path, grid: Option<PhaseGrid>) -> Result<RecoveryProblem> {
        let gamma = self.gamma.build()?;
        let omega = self.omega.build(grid)?;
        let path = base.join(&self.observed);
        let file = std::fs::File::open(&path)
            .map_err(|e| Error::InvalidConfig(format!("cannot open field dump {}: {e}", path.display())))?;
        let observed = StftField::read_binary(std::io::BufReader::new(file), *omega.grid())?;
        RecoveryProblem::new(gamma, omega, observed, self.epsilon, self.variant)
    }
}

/// Stopping rules of the primal-dual iteration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Relative primal-dual gap at which to stop.
    pub tol: f64,
    pub max_iter: usize,
    /// Iterations between gap evaluations.
    pub check_every: usize,
    /// Relative residual above which Logan constraints are infeasible.
    pub feasibility_tol: f64,
    /// Step safety factor: τ = σ = factor / ‖K‖ after the isometric
    /// change of variables (factor / ‖K‖ without it).
    pub step_factor: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 50_000,
            check_every: 10,
            feasibility_tol: 1e-6,
            step_factor: 0.95,
        }
    }
}

/// α(Ω) together with how it was obtained.
#[derive(Debug, Clone, Serialize)]
pub struct Certificate {
    /// Tightest available upper bound on the L¹ concentration of Ω.
    pub alpha: f64,
    pub threshold: f64,
    pub certified: bool,
    /// Name of the winning candidate.
    pub source: String,
    pub candidates: Vec<(String, f64)>,
}

/// α(Ω): the smallest of the reproducing-kernel sup-integral, the
/// windowed maximum Nyquist integrals over [`CERTIFICATE_RADII`] and, for
/// the Gaussian window, the Faber–Krahn and RFK bounds at p = 1.
pub fn certificate(problem: &RecoveryProblem) -> Result<Certificate> {
    certificate_for(&problem.omega, &problem.gamma, problem.variant)
}

pub fn certificate_for(omega: &DomainMask, gamma: &PolyradialWindow, variant: Variant) -> Result<Certificate> {
    let threshold = variant.threshold();
    if omega.is_empty() {
        return Ok(Certificate {
            alpha: 0.0,
            threshold,
            certified: true,
            source: "empty".into(),
            candidates: vec![("empty".into(), 0.0)],
        });
    }
    let mut cands: Vec<(String, f64)> = Vec::new();
    let norm = if gamma.max_index() <= OP_RANK_LIMIT {
        KernelNorm::Op
    } else {
        KernelNorm::HS
    };
    cands.push((format!("kernel_sup_{norm:?}"), kernel_sup_integral(omega, gamma, norm)?));
    let finite_rank = !matches!(gamma.kind(), crate::opstft::WindowKind::Thermal { .. });
    for &r in &CERTIFICATE_RADII {
        if finite_rank {
            if let Ok(rep) = max_nyquist_bound(omega, gamma, r) {
                let v = rep.restricted_op.unwrap_or(rep.restricted_hs);
                cands.push((format!("max_nyquist_R{r}"), v));
            }
        }
        if gamma.is_gaussian() {
            if let Ok(nu) = nyquist_density(omega, r) {
                cands.push((format!("rfk_R{r}"), rfk_bound(nu.value, r)?.value));
            }
        }
    }
    if gamma.is_gaussian() {
        cands.push(("faber_krahn".into(), faber_krahn_bound(omega.measure(), 1.0)?.value));
    }
    let (source, alpha) = cands
        .iter()
        .cloned()
        .fold((String::new(), f64::INFINITY), |best, c| if c.1 < best.1 { c } else { best });
    Ok(Certificate {
        alpha,
        threshold,
        certified: alpha < threshold,
        source,
        candidates: cands,
    })
}

/// A-priori bound on ‖𝔙_γρ − β(G)‖₁: 2ε/(1−2α) for Logan and noisy
/// support, 2ε/(1−α) for missing data; `None` when α is not below the
/// variant's threshold.
pub fn error_bound(variant: Variant, epsilon: f64, alpha: f64) -> Option<f64> {
    let d = match variant {
        Variant::Logan | Variant::NoisySupported => 1.0 - 2.0 * alpha,
        Variant::MissingData => 1.0 - alpha,
    };
    if d > 0.0 {
        Some(2.0 * epsilon / d)
    } else {
        None
    }
}

/// Outcome of [`solve`].
#[derive(Debug, Clone, Serialize)]
pub struct RecoveryReport {
    pub variant: Variant,
    #[serde(serialize_with = "serialize_operator")]
    pub solution: HermiteOperator,
    /// Σ_z h²‖·‖_F objective of the solved program.
    pub objective: f64,
    /// h² Σ_{z∈Ω^c} ‖𝔙_γσ(z) − G(z)‖_F.
    pub residual_l1: f64,
    pub certificate_value: f64,
    pub certificate_threshold: f64,
    pub certified: bool,
    /// A-priori error bound; `None` when the certificate fails.
    pub guaranteed_error: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub relative_gap: f64,
    /// Relative residual of the Logan equality constraints.
    pub feasibility: f64,
    /// Dimension of the coefficient space left free by the constraints.
    pub free_dimension: usize,
    /// Objective at each gap evaluation.
    pub objective_trace: Vec<f64>,
}

fn serialize_operator<S: serde::Serializer>(op: &HermiteOperator, s: S) -> std::result::Result<S::Ok, S::Error> {
    let c = op.coeff();
    let rows: Vec<Vec<[f64; 2]>> = (0..c.nrows())
        .map(|i| (0..c.ncols()).map(|j| [c[(i, j)].re, c[(i, j)].im]).collect())
        .collect();
    rows.serialize(s)
}

/// min_x Σ_{z∈S} h²‖B(z)(σ₀ + Zx) − t_z‖_F over x ∈ C^{q×M}.
struct GroupL1<'a> {
    map: &'a ForwardMap,
    sigma0: DMatrix<Complex64>,
    basis: DMatrix<Complex64>,
    target: Vec<Complex64>,
}

struct PdhgResult {
    x: DMatrix<Complex64>,
    objective: f64,
    gap: f64,
    iterations: usize,
    converged: bool,
    trace: Vec<f64>,
}

impl GroupL1<'_> {
    fn sigma(&self, x: &DMatrix<Complex64>) -> DMatrix<Complex64> {
        &self.sigma0 + &self.basis * x
    }

    fn solve(&self, x0: DMatrix<Complex64>, cfg: &SolverConfig) -> Result<PdhgResult> {
        let map = self.map;
        let h = map.grid().spacing();
        let hc = Complex64::new(h, 0.0);
        let block = map.rows() * map.truncation();
        // K x = h B Z x, g = h (t − B σ₀)
        let b0 = map.apply(&self.sigma0);
        let g: Vec<Complex64> = self.target.iter().zip(&b0).map(|(t, b)| (t - b) * hc).collect();
        let k_apply = |x: &DMatrix<Complex64>| -> Vec<Complex64> {
            let mut v = map.apply(&(&self.basis * x));
            v.par_iter_mut().for_each(|c| *c *= hc);
            v
        };
        let k_adj = |p: &[Complex64]| -> DMatrix<Complex64> { self.basis.adjoint() * map.adjoint(p) * hc };
        let kk = self.basis.adjoint() * map.gram() * &self.basis * Complex64::new(h * h, 0.0);
        let kk = (&kk + kk.adjoint()) * Complex64::new(0.5, 0.0);
        let knorm = kk.clone().symmetric_eigen().eigenvalues.iter().copied().fold(0.0, f64::max).sqrt();
        let primal = |kx: &[Complex64]| -> f64 {
            h * par::sum(g.len() / block, |i| {
                let (a, b) = (&kx[i * block..(i + 1) * block], &g[i * block..(i + 1) * block]);
                a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt()
            })
        };
        let p0_obj = primal(&vec![ZERO; g.len()]);
        if knorm == 0.0 || p0_obj == 0.0 {
            let obj = primal(&k_apply(&x0));
            return Ok(PdhgResult {
                x: x0,
                objective: obj,
                gap: 0.0,
                iterations: 0,
                converged: true,
                trace: vec![obj],
            });
        }
        let chol = kk.clone().cholesky();
        // with K*K = LL* the substitution x = L^{-*}y makes the operator an
        // isometry, so PDHG runs with unit step bounds
        let lower = chol.as_ref().map(|c| c.l());
        let to_x = |y: &DMatrix<Complex64>| -> DMatrix<Complex64> {
            match &lower {
                Some(l) => l.adjoint().solve_upper_triangular(y).unwrap_or_else(|| y.clone()),
                None => y.clone(),
            }
        };
        let adj_y = |u: DMatrix<Complex64>| -> DMatrix<Complex64> {
            match &lower {
                Some(l) => l.solve_lower_triangular(&u).unwrap_or(u),
                None => u,
            }
        };
        let step = cfg.step_factor / if lower.is_some() { 1.0 } else { knorm };
        let stepc = Complex64::new(step, 0.0);
        let dual = |p: &[Complex64]| -> f64 {
            // project onto ker K*, then rescale into the product of h-balls
            let u = k_adj(p);
            let w = match &chol {
                Some(c) => c.solve(&u),
                None => kk.clone().pseudo_inverse(1e-12).map(|pi| pi * &u).unwrap_or(u),
            };
            let kw = k_apply(&w);
            let q: Vec<Complex64> = p.iter().zip(&kw).map(|(a, b)| a - b).collect();
            let mx = q.par_chunks(block).map(frob).reduce(|| 0.0, f64::max);
            let s = if mx > h { h / mx } else { 1.0 };
            -s * inner(&q, &g).re
        };
        let mut y = match &lower {
            Some(l) => l.adjoint() * &x0,
            None => x0,
        };
        let mut y_bar = y.clone();
        let mut p = vec![ZERO; g.len()];
        let mut trace = Vec::new();
        let mut gap = f64::INFINITY;
        let mut obj = f64::INFINITY;
        let mut it = 0;
        while it < cfg.max_iter {
            it += 1;
            let kxb = k_apply(&to_x(&y_bar));
            p.par_chunks_mut(block)
                .zip(kxb.par_chunks(block))
                .zip(g.par_chunks(block))
                .for_each(|((pz, kz), gz)| {
                    for ((pv, kv), gv) in pz.iter_mut().zip(kz).zip(gz) {
                        *pv += stepc * (kv - gv);
                    }
                    let nz = frob(pz);
                    if nz > h {
                        let s = Complex64::new(h / nz, 0.0);
                        pz.iter_mut().for_each(|v| *v *= s);
                    }
                });
            let y_new = &y - adj_y(k_adj(&p)) * stepc;
            y_bar = &y_new * Complex64::new(2.0, 0.0) - &y;
            y = y_new;
            if it % cfg.check_every == 0 || it == cfg.max_iter {
                let mut kx = k_apply(&to_x(&y));
                obj = primal(&kx);
                // reweighted least-squares polish, kept while it lowers the objective
                let mut polished = None;
                for _ in 0..POLISH_STEPS {
                    let Some(xr) = self.reweighted_step(&kx, &g, h) else { break };
                    let kr = k_apply(&xr);
                    let or = primal(&kr);
                    if !(or < obj) {
                        break;
                    }
                    polished = Some(xr);
                    kx = kr;
                    obj = or;
                }
                if let Some(xr) = polished {
                    y = match &lower {
                        Some(l) => l.adjoint() * &xr,
                        None => xr,
                    };
                    y_bar = y.clone();
                }
                let d = dual(&p).max(dual(&subgradient(&kx, &g, &p, block, h)));
                gap = (obj - d).max(0.0) / obj.abs().max(d.abs()).max(1e-9 * p0_obj);
                trace.push(obj);
                if gap < cfg.tol {
                    return Ok(PdhgResult {
                        x: to_x(&y),
                        objective: obj,
                        gap,
                        iterations: it,
                        converged: true,
                        trace,
                    });
                }
            }
        }
        let x = to_x(&y);
        Ok(PdhgResult {
            x,
            objective: obj,
            gap,
            iterations: it,
            converged: false,
            trace,
        })
    }
}

impl GroupL1<'_> {
    /// argmin_x Σ_z w_z‖K_z x − g_z‖² with w_z = 1/‖K_z x₀ − g_z‖, the
    /// Weiszfeld-type step for the group-L1 objective at x₀.
    fn reweighted_step(&self, kx: &[Complex64], g: &[Complex64], h: f64) -> Option<DMatrix<Complex64>> {
        let block = self.map.rows() * self.map.truncation();
        let nodes = g.len() / block;
        let norms: Vec<f64> = (0..nodes)
            .map(|i| {
                let (a, b) = (&kx[i * block..(i + 1) * block], &g[i * block..(i + 1) * block]);
                a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt()
            })
            .collect();
        let top = norms.iter().copied().fold(0.0, f64::max);
        if top == 0.0 {
            return None;
        }
        let w: Vec<f64> = norms.iter().map(|&r| 1.0 / r.max(1e-12 * top)).collect();
        let hc = Complex64::new(h, 0.0);
        let a = self.basis.adjoint() * self.map.weighted_gram(Some(&w)) * &self.basis * (hc * hc);
        let wg: Vec<Complex64> = g.iter().enumerate().map(|(k, v)| v * w[k / block]).collect();
        let rhs = self.basis.adjoint() * self.map.adjoint(&wg) * hc;
        let a = (&a + a.adjoint()) * Complex64::new(0.5, 0.0);
        a.cholesky().map(|c| c.solve(&rhs))
    }
}

/// h r_z/‖r_z‖ with r = Kx − g on nodes with a resolvable residual, `p`
/// elsewhere.
fn subgradient(kx: &[Complex64], g: &[Complex64], p: &[Complex64], block: usize, h: f64) -> Vec<Complex64> {
    let mut out = p.to_vec();
    let norms: Vec<f64> = kx
        .par_chunks(block)
        .zip(g.par_chunks(block))
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt())
        .collect();
    let floor = 1e-12 * norms.iter().copied().fold(0.0, f64::max);
    out.par_chunks_mut(block).enumerate().for_each(|(i, pz)| {
        if norms[i] > floor {
            let s = Complex64::new(h / norms[i], 0.0);
            for (k, v) in pz.iter_mut().enumerate() {
                *v = (kx[i * block + k] - g[i * block + k]) * s;
            }
        }
    });
    out
}

/// Least-squares start (Z*GZ)^{-1} Z*B*(t − Bσ₀) for a group-L1 program.
fn least_squares_start(prog: &GroupL1<'_>) -> DMatrix<Complex64> {
    let b0 = prog.map.apply(&prog.sigma0);
    let r: Vec<Complex64> = prog.target.iter().zip(&b0).map(|(t, b)| t - b).collect();
    let rhs = prog.basis.adjoint() * prog.map.adjoint(&r);
    let g = prog.basis.adjoint() * prog.map.gram() * &prog.basis;
    match g.clone().cholesky() {
        Some(c) => c.solve(&rhs),
        None => DMatrix::zeros(prog.basis.ncols(), prog.map.truncation()),
    }
}

/// Solves the variant's program. Non-convergence is reported through
/// `converged = false`, not as an error.
pub fn solve(problem: &RecoveryProblem, cfg: &SolverConfig) -> Result<RecoveryReport> {
    let m = problem.truncation();
    let grid = *problem.grid();
    let inside = problem.nodes(true);
    let outside = problem.nodes(false);
    let cert = certificate(problem)?;
    let out_map = ForwardMap::on_nodes(&problem.gamma, grid, m, outside)?;
    let g_out = out_map.gather(&problem.observed)?;
    let identity = DMatrix::<Complex64>::identity(m, m);
    let zeros = DMatrix::<Complex64>::zeros(m, m);
    let (sigma, res, feasibility, free_dimension) = match problem.variant {
        Variant::Logan => {
            // affine set {σ : Bσ = G on Ω^c} = σ₀ + span(null columns)
            let gram = out_map.gram();
            let eig = gram.clone().symmetric_eigen();
            let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
            let cut = 1e-9 * top.max(1.0 / grid.weight());
            let rhs = out_map.adjoint(&g_out);
            let mut sigma0 = DMatrix::<Complex64>::zeros(m, m);
            let mut null_cols = Vec::new();
            for (i, &mu) in eig.eigenvalues.iter().enumerate() {
                let v = eig.eigenvectors.column(i);
                if mu > cut {
                    let coef = v.adjoint() * &rhs / Complex64::new(mu, 0.0);
                    sigma0 += v * coef;
                } else {
                    null_cols.push(v.into_owned());
                }
            }
            let fit = out_map.apply(&sigma0);
            let num: f64 = fit.iter().zip(&g_out).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
            let den: f64 = g_out.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
            let feasibility = if den > 0.0 { num / den } else { num };
            if feasibility > cfg.feasibility_tol {
                return Err(Error::Infeasible { residual: feasibility });
            }
            if null_cols.is_empty() {
                (sigma0, None, feasibility, 0)
            } else {
                let basis = DMatrix::from_columns(&null_cols);
                let in_map = ForwardMap::on_nodes(&problem.gamma, grid, m, inside)?;
                let target = vec![ZERO; in_map.field_len()];
                let prog = GroupL1 {
                    map: &in_map,
                    sigma0,
                    basis,
                    target,
                };
                let x0 = DMatrix::zeros(null_cols.len(), m);
                let r = prog.solve(x0, cfg)?;
                let q = null_cols.len();
                (prog.sigma(&r.x), Some(r), feasibility, q * m)
            }
        }
        Variant::NoisySupported => {
            let all = ForwardMap::new(&problem.gamma, grid, m)?;
            let target = all.gather(&problem.observed)?;
            let prog = GroupL1 {
                map: &all,
                sigma0: zeros,
                basis: identity,
                target,
            };
            let r = prog.solve(least_squares_start(&prog), cfg)?;
            (prog.sigma(&r.x), Some(r), 0.0, m * m)
        }
        Variant::MissingData => {
            let prog = GroupL1 {
                map: &out_map,
                sigma0: zeros,
                basis: identity,
                target: g_out.clone(),
            };
            let r = prog.solve(least_squares_start(&prog), cfg)?;
            (prog.sigma(&r.x), Some(r), 0.0, m * m)
        }
    };
    let fit = out_map.apply(&sigma);
    let diff: Vec<Complex64> = fit.iter().zip(&g_out).map(|(a, b)| a - b).collect();
    let residual_l1 = out_map.l1_norm(&diff);
    let objective = match (&res, problem.variant) {
        (Some(r), _) => r.objective,
        (None, _) => {
            let all = ForwardMap::new(&problem.gamma, grid, m)?;
            all.l1_norm(&all.apply(&sigma))
        }
    };
    let (iterations, converged, relative_gap, trace) = match res {
        Some(r) => (r.iterations, r.converged, r.gap, r.trace),
        None => (0, true, 0.0, vec![objective]),
    };
    Ok(RecoveryReport {
        variant: problem.variant,
        solution: HermiteOperator::new(sigma)?,
        objective,
        residual_l1,
        certificate_value: cert.alpha,
        certificate_threshold: cert.threshold,
        certified: cert.certified,
        guaranteed_error: if cert.certified {
            error_bound(problem.variant, problem.epsilon, cert.alpha)
        } else {
            None
        },
        iterations,
        converged,
        relative_gap,
        feasibility,
        free_dimension,
        objective_trace: trace,
    })
}

/// ‖𝔙_γ(a − b)‖₁ on the whole grid.
pub fn field_l1_distance(gamma: &PolyradialWindow, grid: PhaseGrid, a: &HermiteOperator, b: &HermiteOperator) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::InvalidConfig("operators have different truncations".into()));
    }
    let map = ForwardMap::new(gamma, grid, a.dim())?;
    Ok(map.l1_norm(&map.apply(&(a.coeff() - b.coeff()))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::opstft::opstft_field;
    use crate::phasespace::{make_disk_union, make_rsparse};
    use crate::specialfn::stft_table;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn cn<R: Rng>(rng: &mut R) -> Complex64 {
        Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
    }

    fn problem(
        gamma: &PolyradialWindow,
        omega: &DomainMask,
        rho: &HermiteOperator,
        variant: Variant,
        noise: impl Fn(usize, &mut [Complex64]),
        eps: f64,
    ) -> RecoveryProblem {
        let field = opstft_field(gamma, rho, *omega.grid()).unwrap();
        let (rows, cols) = (field.rows(), field.cols());
        let mut v = field.values().to_vec();
        for (i, b) in v.chunks_mut(rows * cols).enumerate() {
            noise(i, b);
        }
        let obs = StftField::from_parts(*omega.grid(), rows, cols, v).unwrap();
        RecoveryProblem::new(gamma.clone(), omega.clone(), obs, eps, variant).unwrap()
    }

    #[test]
    fn forward_map_basics() {
        let grid = PhaseGrid::new(4.0, 0.1).unwrap();
        let g = PolyradialWindow::rank_two();
        let map = ForwardMap::new(&g, grid, 3).unwrap();
        let mut e00 = DMatrix::<Complex64>::zeros(3, 3);
        e00[(0, 0)] = Complex64::new(1.0, 0.0);
        let f = map.apply(&e00);
        let mut t = vec![ZERO; 6];
        let idx = 1234;
        stft_table(grid.node(idx), 2, 3, &mut t);
        let blk = &f[idx * 6..idx * 6 + 6];
        for n in 0..2 {
            let want = g.lambda()[n].conj() * t[n * 3];
            assert!((blk[n * 3] - want).norm() < 1e-15);
            assert_eq!(blk[n * 3 + 1], ZERO);
        }
        // dot-product test
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = DMatrix::from_fn(3, 3, |_, _| cn(&mut rng));
        let y: Vec<Complex64> = (0..map.field_len()).map(|_| cn(&mut rng)).collect();
        let lhs = inner(&map.apply(&x), &y);
        let ay = map.adjoint(&y);
        let rhs: Complex64 = x.iter().zip(ay.iter()).map(|(a, b)| a * b.conj()).sum();
        assert!((lhs - rhs).norm() < 1e-10 * lhs.norm().max(1.0));
        // Moyal: inversion of the forward map is the identity
        let rho = HermiteOperator::random(3, 3, &mut rng).unwrap();
        let back = map.invert(&map.apply(rho.coeff()));
        assert!((back - rho.coeff()).norm() < 1e-8 * rho.hs_norm());
        let small = PhaseGrid::new(4.0, 0.001).unwrap();
        assert!(matches!(ForwardMap::new(&g, small, 40), Err(Error::Budget { .. })));
    }

    #[test]
    fn error_bound_arithmetic() {
        assert_eq!(error_bound(Variant::Logan, 0.0, 0.2), Some(0.0));
        assert!((error_bound(Variant::NoisySupported, 0.01, 0.25).unwrap() - 0.04).abs() < 1e-15);
        assert!((error_bound(Variant::MissingData, 0.1, 0.2).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(error_bound(Variant::Logan, 0.1, 0.5), None);
        assert_eq!(error_bound(Variant::MissingData, 0.1, 1.0), None);
    }

    #[test]
    fn certificate_examples() {
        let grid = PhaseGrid::new(5.0, 0.05).unwrap();
        let g = PolyradialWindow::gaussian();
        let c = certificate_for(&DomainMask::empty(grid), &g, Variant::Logan).unwrap();
        assert_eq!(c.alpha, 0.0);
        assert!(c.certified);
        let rs = make_rsparse(0.1, 10, grid).unwrap();
        let c = certificate_for(&rs, &g, Variant::Logan).unwrap();
        let rfk = c.candidates.iter().find(|x| x.0 == "rfk_R0.25").unwrap().1;
        assert!(c.certified && c.alpha <= rfk, "{c:?}");
        let d1 = make_disk_union(&[(0.0, 0.0)], &[1.0], grid).unwrap();
        let c = certificate_for(&d1, &g, Variant::Logan).unwrap();
        assert!(c.alpha >= 0.5 && !c.certified, "{c:?}");
        assert!(certificate_for(&d1, &g, Variant::MissingData).unwrap().certified);
    }

    #[test]
    fn logan_exact_and_support_noise() {
        let grid = PhaseGrid::new(5.0, 0.05).unwrap();
        let g = PolyradialWindow::rank_two();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rho = HermiteOperator::random(4, 2, &mut rng).unwrap();
        let omega = make_rsparse(0.3, 6, grid).unwrap();
        let raster = omega.raster().to_vec();
        let p = problem(&g, &omega, &rho, Variant::Logan, |i, b| if raster[i] { b.fill(ZERO) }, 0.0);
        let rep = solve(&p, &SolverConfig::default()).unwrap();
        assert!(rep.certified && rep.certificate_value <= 0.3, "{}", rep.certificate_value);
        assert!((rep.solution.coeff() - rho.coeff()).norm() < 1e-8);
        assert!(rep.residual_l1 < 1e-8 && rep.guaranteed_error == Some(0.0));
        // the same data read as support-limited noise: nontrivial L1 program
        let p = problem(&g, &omega, &rho, Variant::NoisySupported, |i, b| if raster[i] { b.fill(ZERO) }, 0.0);
        let rep = solve(&p, &SolverConfig::default()).unwrap();
        assert!(rep.converged, "{} {}", rep.iterations, rep.relative_gap);
        assert!((rep.solution.coeff() - rho.coeff()).norm() < 1e-3, "{}", (rep.solution.coeff() - rho.coeff()).norm());
    }

    #[test]
    fn missing_data_bound_and_scaling() {
        let grid = PhaseGrid::new(5.0, 0.1).unwrap();
        let g = PolyradialWindow::gaussian();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rho = HermiteOperator::random(3, 1, &mut rng).unwrap();
        let omega = make_disk_union(&[(0.5, 0.0)], &[0.6], grid).unwrap();
        let raster = omega.raster().to_vec();
        let noise_at = 2000;
        let bump = Complex64::new(0.3, -0.2);
        let p = problem(
            &g,
            &omega,
            &rho,
            Variant::MissingData,
            |i, b| {
                if raster[i] {
                    b.fill(ZERO)
                } else if i == noise_at {
                    b[0] += bump
                }
            },
            0.0,
        );
        let eta = grid.weight() * bump.norm();
        let rep = solve(&p, &SolverConfig::default()).unwrap();
        assert!(rep.converged);
        let truth = field_l1_distance(&g, grid, &rep.solution, &rho).unwrap();
        let bound = error_bound(Variant::MissingData, eta, rep.certificate_value).unwrap();
        assert!(truth <= bound + 1e-4, "{truth} {bound}");
        // scaling equivariance
        let c = 3.0;
        let scaled = RecoveryProblem::new(
            p.gamma.clone(),
            p.omega.clone(),
            StftField::from_parts(grid, 1, 3, p.observed.values().iter().map(|v| v * c).collect()).unwrap(),
            0.0,
            Variant::MissingData,
        )
        .unwrap();
        let rep2 = solve(&scaled, &SolverConfig::default()).unwrap();
        let d = (rep2.solution.coeff() - rep.solution.coeff() * Complex64::new(c, 0.0)).norm();
        assert!(d < 1e-4 * c * rho.hs_norm(), "{d}");
    }

    #[test]
    fn uncertified_instance_fails() {
        // Ω swallows most of the Gaussian's phase-space mass: the zero
        // operator beats the truth once the data on Ω are wiped out.
        let grid = PhaseGrid::new(4.0, 0.1).unwrap();
        let g = PolyradialWindow::gaussian();
        let rho = HermiteOperator::rank_one(&[Complex64::new(1.0, 0.0)], &[Complex64::new(1.0, 0.0)]).unwrap();
        let omega = make_disk_union(&[(0.0, 0.0)], &[1.5], grid).unwrap();
        let raster = omega.raster().to_vec();
        let p = problem(&g, &omega, &rho, Variant::NoisySupported, |i, b| if raster[i] { b.fill(ZERO) }, 0.0);
        let rep = solve(&p, &SolverConfig::default()).unwrap();
        assert!(!rep.certified && rep.guaranteed_error.is_none());
        assert!((rep.solution.coeff() - rho.coeff()).norm() > 0.5);
    }

    #[test]
    fn logan_infeasible_data() {
        let grid = PhaseGrid::new(4.0, 0.1).unwrap();
        let g = PolyradialWindow::gaussian();
        let omega = make_disk_union(&[(0.0, 0.0)], &[0.5], grid).unwrap();
        let vals: Vec<Complex64> = (0..grid.len() * 2).map(|i| Complex64::new((i % 7) as f64, 0.0)).collect();
        let obs = StftField::from_parts(grid, 1, 2, vals).unwrap();
        let p = RecoveryProblem::new(g, omega, obs, 0.0, Variant::Logan).unwrap();
        assert!(matches!(solve(&p, &SolverConfig::default()), Err(Error::Infeasible { .. })));
    }
}
