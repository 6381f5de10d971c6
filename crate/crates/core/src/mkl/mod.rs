//! Multiple kernel learning: the kernelized group Lasso with the squared
//! block norm, its optimality certificate, the kernel least-squares
//! estimate, adaptive reweighting, and the data-driven condition estimate.
//!
//! Every kernel is held as a centered factor `F_j = Π_n G_j` with
//! `Π_n K_j Π_n = F_j F_jᵀ`. All linear systems
//! `(Σ_j η_j F_j F_jᵀ + nρ I)` are solved through the push-through identity
//! in the stacked factor space, whose dimension is the total rank rather
//! than `n`.

mod kernel;

use std::collections::BTreeMap;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

pub use kernel::{center_factor, dense_factor, incomplete_cholesky, kernel_matrix, KernelSpec};

use crate::error::{GlError, Result};
use crate::linalg;
use crate::model::{BlockStructure, Dataset, SparsityPattern};
use kernel::center_vector;

/// Relative diagonal tolerance of the incomplete Cholesky factorization.
pub const FACTOR_TOL: f64 = 1e-12;
/// Reported duality gaps must satisfy `gap ≤ GAP_TOL·(1 + |primal|)`.
pub const GAP_TOL: f64 = 1e-6;
pub const MKL_KKT_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct KernelProblem {
    factors: Vec<DMatrix<f64>>,
    y: DVector<f64>,
    weights: Vec<f64>,
    ranges: Vec<Range<usize>>,
    /// `[F_1 … F_m]ᵀ[F_1 … F_m]`.
    gram: DMatrix<f64>,
    /// `[F_1 … F_m]ᵀ Ȳ`.
    fty: DVector<f64>,
}

impl KernelProblem {
    /// From factors `G_j` with `K_j = G_j G_jᵀ` (centered internally).
    pub fn from_factors(factors: Vec<DMatrix<f64>>, y: &DVector<f64>, weights: Vec<f64>) -> Result<Self> {
        let n = y.len();
        if n < 2 {
            return Err(GlError::InvalidInput("need at least two observations".into()));
        }
        if factors.is_empty() {
            return Err(GlError::InvalidInput("need at least one kernel".into()));
        }
        if weights.len() != factors.len() {
            return Err(GlError::DimensionMismatch {
                axis: "kernel weights",
                expected: factors.len(),
                found: weights.len(),
            });
        }
        if let Some(d) = weights.iter().find(|d| !(**d > 0.0 && d.is_finite())) {
            return Err(GlError::InvalidInput(format!("kernel weights must be positive, got {d}")));
        }
        for f in &factors {
            if f.nrows() != n {
                return Err(GlError::DimensionMismatch {
                    axis: "kernel rows",
                    expected: n,
                    found: f.nrows(),
                });
            }
        }
        let factors: Vec<DMatrix<f64>> = factors.iter().map(center_factor).collect();
        let y = center_vector(y);
        let mut ranges = Vec::with_capacity(factors.len());
        let mut off = 0;
        for f in &factors {
            ranges.push(off..off + f.ncols());
            off += f.ncols();
        }
        let mut stacked = DMatrix::zeros(n, off);
        for (f, r) in factors.iter().zip(&ranges) {
            stacked.columns_mut(r.start, r.len()).copy_from(f);
        }
        let mut gram = stacked.tr_mul(&stacked);
        linalg::symmetrize(&mut gram);
        let fty = stacked.tr_mul(&y);
        Ok(Self {
            factors,
            y,
            weights,
            ranges,
            gram,
            fty,
        })
    }

    /// From dense kernel matrices (PSD-checked, then factored).
    pub fn from_dense(kernels: &[DMatrix<f64>], y: &DVector<f64>, weights: Vec<f64>) -> Result<Self> {
        let factors = kernels.iter().map(dense_factor).collect::<Result<Vec<_>>>()?;
        Self::from_factors(factors, y, weights)
    }

    /// One kernel per group of columns. Linear kernels use the columns
    /// themselves as the factor; Gaussian kernels use incomplete Cholesky.
    pub fn from_data(data: &Dataset, blocks: &BlockStructure, kernels: &[KernelSpec]) -> Result<Self> {
        blocks.check_dim(data.p(), "covariate columns")?;
        if kernels.len() != blocks.num_groups() {
            return Err(GlError::DimensionMismatch {
                axis: "kernel specifications",
                expected: blocks.num_groups(),
                found: kernels.len(),
            });
        }
        let factors = (0..blocks.num_groups())
            .map(|j| {
                let r = blocks.range(j);
                let xj = data.x.columns(r.start, r.len()).into_owned();
                match kernels[j] {
                    KernelSpec::Linear => {
                        if xj.iter().any(|v| !v.is_finite()) {
                            return Err(GlError::InvalidInput("kernel input contains non-finite values".into()));
                        }
                        Ok(xj)
                    }
                    spec => incomplete_cholesky(&spec, &xj, FACTOR_TOL, data.n()),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_factors(factors, &data.y, blocks.weights().to_vec())
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn num_kernels(&self) -> usize {
        self.factors.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.weights.len() {
            return Err(GlError::DimensionMismatch {
                axis: "kernel weights",
                expected: self.weights.len(),
                found: weights.len(),
            });
        }
        if let Some(d) = weights.iter().find(|d| !(**d > 0.0 && d.is_finite())) {
            return Err(GlError::InvalidInput(format!("kernel weights must be positive, got {d}")));
        }
        Ok(Self {
            weights,
            ..self.clone()
        })
    }

    /// Centered response `Π_n Y`.
    pub fn response(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn factor(&self, j: usize) -> &DMatrix<f64> {
        &self.factors[j]
    }

    pub fn rank(&self, j: usize) -> usize {
        self.ranges[j].len()
    }

    /// Dense `Π_n K_j Π_n`; only sensible for small `n`.
    pub fn centered_kernel(&self, j: usize) -> DMatrix<f64> {
        let f = &self.factors[j];
        f * f.transpose()
    }

    /// `αᵀ Π K_j Π α = ‖F_jᵀα‖²`.
    pub fn quad(&self, j: usize, alpha: &DVector<f64>) -> f64 {
        self.factors[j].tr_mul(alpha).norm_squared()
    }

    fn total_rank(&self) -> usize {
        self.ranges.last().map_or(0, |r| r.end)
    }

    /// Stacked `Fᵀv`.
    fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.total_rank());
        for (f, r) in self.factors.iter().zip(&self.ranges) {
            out.rows_mut(r.start, r.len()).copy_from(&f.tr_mul(v));
        }
        out
    }

    /// `F c` for a stacked coefficient vector.
    fn expand(&self, c: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n());
        for (f, r) in self.factors.iter().zip(&self.ranges) {
            out += f * c.rows(r.start, r.len());
        }
        out
    }

    fn scale_blocks(&self, v: &DVector<f64>, scale: &[f64]) -> DVector<f64> {
        let mut out = v.clone();
        for (r, s) in self.ranges.iter().zip(scale) {
            let mut rows = out.rows_mut(r.start, r.len());
            rows *= *s;
        }
        out
    }
}

/// `α = (Σ_j η_j F_j F_jᵀ + nρI)⁻¹ Ȳ`, returned together with `Fᵀα`.
struct RidgeSolve {
    /// Stacked coefficients `c` with `α = (Ȳ − F D c)/(nρ)`, `D = Diag(√η)`.
    c: DVector<f64>,
    ft_alpha: DVector<f64>,
    alpha_norm_sq: f64,
    alpha_dot_y: f64,
}

fn ridge_solve(prob: &KernelProblem, eta: &[f64], rho: f64) -> Result<RidgeSolve> {
    let n = prob.n() as f64;
    let nr = n * rho;
    let root: Vec<f64> = eta.iter().map(|e| e.max(0.0).sqrt()).collect();
    let r = prob.total_rank();
    let mut scaled = prob.gram.clone();
    for (a, ra) in prob.ranges.iter().enumerate() {
        for (b, rb) in prob.ranges.iter().enumerate() {
            let mut blk = scaled.view_mut((ra.start, rb.start), (ra.len(), rb.len()));
            blk *= root[a] * root[b];
        }
    }
    let dfty = prob.scale_blocks(&prob.fty, &root);
    let mut system = scaled.clone();
    for t in 0..r {
        system[(t, t)] += nr;
    }
    let c = linalg::spd_solve(&system, &dfty, "regularized kernel system")?;
    // Fᵀα = (FᵀȲ − Fᵀ F D c)/(nρ)
    let dc = prob.scale_blocks(&c, &root);
    let ft_alpha = (&prob.fty - &prob.gram * &dc) / nr;
    let y2 = prob.y.norm_squared();
    let alpha_dot_y = (y2 - c.dot(&dfty)) / nr;
    let alpha_norm_sq = ((y2 - 2.0 * c.dot(&dfty) + c.dot(&(&scaled * &c))) / (nr * nr)).max(0.0);
    Ok(RidgeSolve {
        c,
        ft_alpha,
        alpha_norm_sq,
        alpha_dot_y,
    })
}

fn alpha_from(prob: &KernelProblem, eta: &[f64], rho: f64, sol: &RidgeSolve) -> DVector<f64> {
    let root: Vec<f64> = eta.iter().map(|e| e.max(0.0).sqrt()).collect();
    let dc = prob.scale_blocks(&sol.c, &root);
    (&prob.y - prob.expand(&dc)) / (prob.n() as f64 * rho)
}

fn block_quads(prob: &KernelProblem, ft_alpha: &DVector<f64>) -> Vec<f64> {
    prob.ranges.iter().map(|r| ft_alpha.rows(r.start, r.len()).norm_squared()).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct MklSolution {
    #[serde(serialize_with = "crate::io::ser_dvector")]
    pub alpha: DVector<f64>,
    pub eta: Vec<f64>,
    /// `‖f_j‖ = η_j (αᵀK_jα)^{1/2}`.
    pub norms: Vec<f64>,
    pub mu: f64,
    pub primal: f64,
    pub duality_gap: f64,
    pub iterations: usize,
}

impl MklSolution {
    pub fn pattern(&self) -> SparsityPattern {
        let total: f64 = self.norms.iter().map(|v| v * v).sum::<f64>().sqrt();
        let active = (0..self.norms.len()).filter(|&j| self.norms[j] > crate::model::PATTERN_REL_TOL * total);
        SparsityPattern::new(active, self.norms.len()).expect("indices in range")
    }
}

struct Objective {
    primal: f64,
    dual: f64,
    norms: Vec<f64>,
    quads: Vec<f64>,
}

/// Primal `(1/2n)‖Ȳ − Σ η_j K_j α‖² + (μ/2)(Σ d_j‖f_j‖)²` of the point
/// `(α, η)` and the dual `μαᵀȲ − (nμ²/2)‖α‖² − (μ/2) max_j αᵀK_jα/d_j²`.
fn objective(prob: &KernelProblem, eta: &[f64], mu: f64, sol: &RidgeSolve) -> Objective {
    let n = prob.n() as f64;
    let quads = block_quads(prob, &sol.ft_alpha);
    let norms: Vec<f64> = quads.iter().zip(eta).map(|(q, e)| e * q.sqrt()).collect();
    let omega: f64 = norms.iter().zip(&prob.weights).map(|(f, d)| f * d).sum();
    let fit = 0.5 * n * mu * mu * sol.alpha_norm_sq;
    let primal = fit + 0.5 * mu * omega * omega;
    let top = quads
        .iter()
        .zip(&prob.weights)
        .map(|(q, d)| q / (d * d))
        .fold(0.0, f64::max);
    let dual = mu * sol.alpha_dot_y - fit - 0.5 * mu * top;
    Objective {
        primal,
        dual,
        norms,
        quads,
    }
}

fn normalize_eta(eta: &mut [f64], weights: &[f64]) {
    let total: f64 = eta.iter().zip(weights).map(|(e, d)| e * d * d).sum();
    if total > 0.0 {
        for e in eta.iter_mut() {
            *e /= total;
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MklOptions {
    /// Inner stopping rule on the relative duality gap.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for MklOptions {
    fn default() -> Self {
        Self {
            tol: 1e-13,
            max_iters: 200_000,
        }
    }
}

pub fn mkl_solve(prob: &KernelProblem, mu: f64) -> Result<MklSolution> {
    mkl_solve_with(prob, mu, &MklOptions::default())
}

/// Alternates the kernel-ridge solve for `α` given `η` with the update
/// `η_j ← η_j (αᵀK_jα)^{1/2}/d_j`, renormalized to `Σ η_j d_j² = 1`.
/// Kernels whose `αᵀK_jα/d_j²` falls short of the maximum get `η_j = 0` at
/// the end, and the point is re-solved and certified by its duality gap.
pub fn mkl_solve_with(prob: &KernelProblem, mu: f64, opts: &MklOptions) -> Result<MklSolution> {
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(GlError::InvalidInput(format!("mu must be > 0, got {mu}")));
    }
    let m = prob.num_kernels();
    let mut eta: Vec<f64> = prob.weights.iter().map(|d| 1.0 / (m as f64 * d * d)).collect();
    let mut iterations = 0;
    let mut last_gap;
    loop {
        let sol = ridge_solve(prob, &eta, mu)?;
        let obj = objective(prob, &eta, mu, &sol);
        last_gap = obj.primal - obj.dual;
        if obj.primal - obj.dual <= opts.tol * (1.0 + obj.primal.abs()) || m == 1 {
            break;
        }
        if iterations >= opts.max_iters {
            break;
        }
        iterations += 1;
        for j in 0..m {
            eta[j] *= obj.quads[j].sqrt() / prob.weights[j];
        }
        normalize_eta(&mut eta, &prob.weights);
    }

    // Complementarity: drop kernels strictly below the maximal ratio.
    let sol = ridge_solve(prob, &eta, mu)?;
    let quads = block_quads(prob, &sol.ft_alpha);
    let ratios: Vec<f64> = quads.iter().zip(&prob.weights).map(|(q, d)| q / (d * d)).collect();
    let top = ratios.iter().copied().fold(0.0, f64::max);
    let mut trimmed = eta.clone();
    for j in 0..m {
        if ratios[j] < top * (1.0 - 1e-6) {
            trimmed[j] = 0.0;
        }
    }
    normalize_eta(&mut trimmed, &prob.weights);
    let sol_t = ridge_solve(prob, &trimmed, mu)?;
    let obj_t = objective(prob, &trimmed, mu, &sol_t);
    let obj = objective(prob, &eta, mu, &sol);
    let (eta, sol, obj) = if obj_t.primal - obj_t.dual <= (obj.primal - obj.dual).max(GAP_TOL * 1e-3 * (1.0 + obj.primal.abs())) {
        (trimmed, sol_t, obj_t)
    } else {
        (eta, sol, obj)
    };
    let gap = (obj.primal - obj.dual).max(0.0);
    if gap > GAP_TOL * (1.0 + obj.primal.abs()) {
        return Err(GlError::NonConvergence {
            what: "multiple kernel learning",
            iterations,
            residual: gap.min(last_gap),
        });
    }
    let alpha = alpha_from(prob, &eta, mu, &sol);
    Ok(MklSolution {
        alpha,
        eta,
        norms: obj.norms,
        mu,
        primal: obj.primal,
        duality_gap: gap,
        iterations,
    })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MklKkt {
    /// `‖(Σ η_j ΠK_jΠ + nμI)α − Ȳ‖ / (1 + ‖Ȳ‖)`.
    pub linear_system: f64,
    /// `|Σ η_j d_j² − 1|`.
    pub normalization: f64,
    /// Largest relative shortfall of `αᵀK_jα/d_j²` below the maximum over
    /// kernels with `η_j > 0`, plus any negative `η_j`.
    pub complementarity: f64,
    /// `|αᵀ1|`.
    pub centering: f64,
    pub residual: f64,
}

pub fn mkl_kkt_check(prob: &KernelProblem, sol: &MklSolution) -> MklKkt {
    let n = prob.n() as f64;
    let ft_alpha = prob.project(&sol.alpha);
    let scaled = prob.scale_blocks(&ft_alpha, &sol.eta);
    let lhs = prob.expand(&scaled) + &sol.alpha * (n * sol.mu);
    let linear_system = (lhs - &prob.y).norm() / (1.0 + prob.y.norm());
    let normalization = (sol.eta.iter().zip(&prob.weights).map(|(e, d)| e * d * d).sum::<f64>() - 1.0).abs();
    let quads = block_quads(prob, &ft_alpha);
    let ratios: Vec<f64> = quads.iter().zip(&prob.weights).map(|(q, d)| q / (d * d)).collect();
    let top = ratios.iter().copied().fold(0.0, f64::max);
    let mut complementarity = 0.0f64;
    for (j, &e) in sol.eta.iter().enumerate() {
        if e < 0.0 {
            complementarity = complementarity.max(-e);
        } else if e > 0.0 {
            complementarity = complementarity.max((top - ratios[j]) / (top + 1e-300));
        }
    }
    let centering = sol.alpha.sum().abs();
    MklKkt {
        linear_system,
        normalization,
        complementarity,
        centering,
        residual: linear_system.max(normalization).max(complementarity).max(centering),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LsKernelEstimate {
    #[serde(serialize_with = "crate::io::ser_dvector")]
    pub alpha: DVector<f64>,
    /// `(αᵀK_jα)^{1/2}`.
    pub norms: Vec<f64>,
}

/// `α = Π(Σ_j ΠK_jΠ + nκI)⁻¹ΠȲ` and the block norms of `f_j = Σ_a α_a k_j(·, x_a)`.
pub fn ls_kernel_estimate(prob: &KernelProblem, kappa: f64) -> Result<LsKernelEstimate> {
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(GlError::InvalidInput(format!("kappa must be > 0, got {kappa}")));
    }
    let ones = vec![1.0; prob.num_kernels()];
    let sol = ridge_solve(prob, &ones, kappa)?;
    let norms = block_quads(prob, &sol.ft_alpha).into_iter().map(f64::sqrt).collect();
    Ok(LsKernelEstimate {
        alpha: alpha_from(prob, &ones, kappa, &sol),
        norms,
    })
}

/// `κ_n = κ₀ n^{-1/3}`.
pub fn kappa_schedule(kappa0: f64, n: usize) -> f64 {
    kappa0 * (n as f64).powf(-1.0 / 3.0)
}

/// Default `κ₀` for the `κ_n` schedule.
pub const DEFAULT_KAPPA0: f64 = 0.01;

/// Solve with weights `d_j = ‖f̂^{LS}_j‖^{-γ}` from the least-squares
/// estimate at `κ_n = κ₀n^{-1/3}`, at `μ = μ₀ n^{-1/3}`. Returns the solution
/// and the weights used.
pub fn adaptive_mkl(prob: &KernelProblem, mu0: f64, gamma: f64, kappa0: f64) -> Result<(MklSolution, Vec<f64>)> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(GlError::InvalidInput(format!("gamma must be >= 0, got {gamma}")));
    }
    let n = prob.n();
    let ls = ls_kernel_estimate(prob, kappa_schedule(kappa0, n))?;
    if let Some(j) = ls.norms.iter().position(|&v| v == 0.0) {
        return Err(GlError::ZeroNorm {
            group: j + 1,
            context: "least-squares kernel estimate",
        });
    }
    let weights: Vec<f64> = ls.norms.iter().map(|v| v.powf(-gamma)).collect();
    let reweighted = prob.with_weights(weights.clone())?;
    let sol = mkl_solve(&reweighted, mu0 * (n as f64).powf(-1.0 / 3.0))?;
    Ok((sol, weights))
}

/// Data-driven estimate of the condition for each `i ∉ J`:
/// `‖(ΠK_iΠ)^{1/2}(Σ_J ΠK_jΠ + nκI)⁻¹(Σ_J η̂_j⁻¹ ΠK_jΠ) α‖` with
/// `α = (Σ_J ΠK_jΠ + nκI)⁻¹ΠȲ` and `η̂_j = (αᵀK_jα)^{1/2}/d_j`.
///
/// Values are on the scale of `d_i` times the population condition value;
/// divide by `d_i` to compare with 1.
pub fn estimate_condition(prob: &KernelProblem, pattern: &SparsityPattern, kappa: f64) -> Result<BTreeMap<usize, f64>> {
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(GlError::InvalidInput(format!("kappa must be > 0, got {kappa}")));
    }
    if pattern.is_empty() {
        return Err(GlError::EmptyPattern);
    }
    let m = prob.num_kernels();
    if let Some(j) = pattern.active().find(|&j| j >= m) {
        return Err(GlError::InvalidInput(format!("kernel {} out of range", j + 1)));
    }
    let on: Vec<f64> = (0..m).map(|j| if pattern.contains(j) { 1.0 } else { 0.0 }).collect();
    let sol = ridge_solve(prob, &on, kappa)?;
    let quads = block_quads(prob, &sol.ft_alpha);
    let mut inv_eta = vec![0.0; m];
    for j in pattern.active() {
        let eta = quads[j].sqrt() / prob.weights[j];
        if eta == 0.0 {
            return Err(GlError::ZeroNorm {
                group: j + 1,
                context: "estimated function of an active kernel",
            });
        }
        inv_eta[j] = 1.0 / eta;
    }
    // z = (Σ_J η̂_j⁻¹ F_jF_jᵀ) α = F D' (Fᵀα) with D' = Diag(η̂⁻¹) on J.
    let coef = prob.scale_blocks(&sol.ft_alpha, &inv_eta);
    // u = (F_J F_Jᵀ + nκ)⁻¹ F_J coef = F_J (F_JᵀF_J + nκ)⁻¹ coef, and only
    // F_iᵀu is needed.
    let n = prob.n() as f64;
    let r = prob.total_rank();
    let mask = prob.scale_blocks(&DVector::from_element(r, 1.0), &on);
    let mut system = prob.gram.clone();
    for a in 0..r {
        for b in 0..r {
            system[(a, b)] *= mask[a] * mask[b];
        }
        system[(a, a)] += n * kappa;
    }
    let v = linalg::spd_solve(&system, &coef, "regularized kernel system")?;
    let v = v.component_mul(&mask);
    let ft_u = &prob.gram * v;
    Ok(pattern
        .inactive(m)
        .into_iter()
        .map(|i| {
            let ri = prob.ranges[i].clone();
            (i, ft_u.rows(ri.start, ri.len()).norm())
        })
        .collect())
}
