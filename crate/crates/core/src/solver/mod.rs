//! Finite-dimensional group Lasso: fixed-λ and squared-norm solvers,
//! optimality certificates, warm-started paths, least squares, the population
//! problem and the adaptive group Lasso.

mod bcd;
mod kkt;
mod path;

use nalgebra::DVector;
use serde::Serialize;

pub use bcd::{objective_value, SolverOptions, KKT_GATE};
pub use kkt::{check_kkt, check_kkt_squared, GroupSlack, KktReport};
pub use path::{
    eta_profile, lambda_max, log_grid, path_on_grid, regularization_path, regularization_path_with, GridSpec, PathResult,
};

use crate::error::{GlError, Result};
use crate::linalg;
use crate::model::{default_pattern, BlockStructure, EmpiricalMoments, PopulationModel, SparsityPattern};
use bcd::{block_coordinate_descent, Workspace};

#[derive(Debug, Clone, Serialize)]
pub struct GroupLassoSolution {
    #[serde(serialize_with = "crate::io::ser_dvector")]
    pub w: DVector<f64>,
    pub intercept: f64,
    /// Regularization of the `λ Σ d_j‖w_j‖` form. For squared-form solves
    /// this is the equivalent `μ Σ d_j‖ŵ_j‖`.
    pub lambda: f64,
    /// Set for squared-form solves.
    pub mu: Option<f64>,
    pub pattern: SparsityPattern,
    pub kkt_residual: f64,
    pub iterations: usize,
}

fn finish(
    mom: &EmpiricalMoments,
    blocks: &BlockStructure,
    w: DVector<f64>,
    lambda: f64,
    mu: Option<f64>,
    kkt_residual: f64,
    iterations: usize,
) -> GroupLassoSolution {
    GroupLassoSolution {
        intercept: mom.intercept(&w),
        pattern: default_pattern(&w, blocks),
        w,
        lambda,
        mu,
        kkt_residual,
        iterations,
    }
}

fn check_inputs(mom: &EmpiricalMoments, blocks: &BlockStructure, reg: f64, name: &str) -> Result<()> {
    blocks.check_dim(mom.dim(), "moment dimension")?;
    if !(reg >= 0.0 && reg.is_finite()) {
        return Err(GlError::InvalidInput(format!("{name} must be finite and >= 0, got {reg}")));
    }
    let min_eig = linalg::min_eigenvalue(&mom.s_xx);
    if min_eig < -1e-10 {
        return Err(GlError::NotPositiveSemidefinite {
            what: "s_xx",
            min_eigenvalue: min_eig,
        });
    }
    Ok(())
}

/// Unregularized least squares `Σ̂_XX⁻¹ Σ̂_XY`.
pub fn ols(mom: &EmpiricalMoments) -> Result<DVector<f64>> {
    let min_eig = linalg::min_eigenvalue(&mom.s_xx);
    if !(min_eig > 1e-12) {
        return Err(GlError::Singular { what: "s_xx" });
    }
    linalg::spd_solve(&mom.s_xx, &mom.s_xy, "s_xx")
}

pub fn solve_fixed_lambda(mom: &EmpiricalMoments, blocks: &BlockStructure, lambda: f64) -> Result<GroupLassoSolution> {
    solve_fixed_lambda_with(mom, blocks, lambda, None, &SolverOptions::default())
}

/// Fixed-λ solve with an optional warm start.
pub fn solve_fixed_lambda_with(
    mom: &EmpiricalMoments,
    blocks: &BlockStructure,
    lambda: f64,
    warm: Option<&DVector<f64>>,
    opts: &SolverOptions,
) -> Result<GroupLassoSolution> {
    check_inputs(mom, blocks, lambda, "lambda")?;
    let ws = Workspace::new(mom, blocks);
    solve_lambda_ws(mom, blocks, &ws, lambda, warm, opts)
}

fn solve_lambda_ws(
    mom: &EmpiricalMoments,
    blocks: &BlockStructure,
    ws: &Workspace,
    lambda: f64,
    warm: Option<&DVector<f64>>,
    opts: &SolverOptions,
) -> Result<GroupLassoSolution> {
    if lambda == 0.0 {
        let w = ols(mom)?;
        let residual = check_kkt(mom, blocks, &w, 0.0).residual;
        return Ok(finish(mom, blocks, w, 0.0, None, residual, 0));
    }
    let w0 = warm.cloned().unwrap_or_else(|| DVector::zeros(blocks.dim()));
    let out = block_coordinate_descent(mom, blocks, ws, lambda, w0, opts)?;
    Ok(finish(mom, blocks, out.w, lambda, None, out.residual, out.sweeps))
}

/// Squared-norm formulation `min loss(w) + (μ/2)(Σ d_j‖w_j‖)²`.
///
/// Solved through the fixed-λ solver: the solution at μ is the λ-form
/// solution at the unique root of `λ − μ Σ d_j‖ŵ_j(λ)‖`, which is strictly
/// increasing in λ. The returned solution is certified against the
/// squared-form conditions.
pub fn solve_fixed_mu(mom: &EmpiricalMoments, blocks: &BlockStructure, mu: f64) -> Result<GroupLassoSolution> {
    solve_fixed_mu_with(mom, blocks, mu, &SolverOptions::default())
}

pub fn solve_fixed_mu_with(
    mom: &EmpiricalMoments,
    blocks: &BlockStructure,
    mu: f64,
    opts: &SolverOptions,
) -> Result<GroupLassoSolution> {
    check_inputs(mom, blocks, mu, "mu")?;
    if mu == 0.0 {
        let w = ols(mom)?;
        let residual = check_kkt_squared(mom, blocks, &w, 0.0).residual;
        return Ok(finish(mom, blocks, w, 0.0, Some(0.0), residual, 0));
    }
    let ws = Workspace::new(mom, blocks);
    let lmax = lambda_max(mom, blocks);
    if lmax == 0.0 {
        let w = DVector::zeros(blocks.dim());
        return Ok(finish(mom, blocks, w, 0.0, Some(mu), 0.0, 0));
    }

    let mut sweeps = 0usize;
    let mut warm: Option<DVector<f64>> = None;
    let mut eval = |lambda: f64, warm: &mut Option<DVector<f64>>| -> Result<(f64, GroupLassoSolution)> {
        let sol = solve_lambda_ws(mom, blocks, &ws, lambda, warm.as_ref(), opts)?;
        sweeps += sol.iterations;
        *warm = Some(sol.w.clone());
        Ok((lambda - mu * blocks.block_l1(&sol.w), sol))
    };

    // Bracket [lo, hi] with h(lo) < 0 < h(hi).
    let mut hi = lmax;
    let mut h_hi = lmax;
    let mut lo = 0.0;
    let mut h_lo;
    let mut best;
    let ols_ok = linalg::min_eigenvalue(&mom.s_xx) > 1e-12;
    if ols_ok {
        let (h, s) = eval(0.0, &mut warm)?;
        h_lo = h;
        best = s;
    } else {
        lo = lmax * 1e-12;
        let (h, s) = eval(lo, &mut warm)?;
        if h >= 0.0 {
            return Err(GlError::Singular {
                what: "s_xx (squared-form root not bracketed)",
            });
        }
        h_lo = h;
        best = s;
    }
    let mut best_h = h_lo;

    // Illinois false position with bisection fallback.
    let mut side = 0i8;
    let tol_h = 1e-13 * (1.0 + lmax);
    for _ in 0..300 {
        let mut lambda = hi - h_hi * (hi - lo) / (h_hi - h_lo);
        if !(lambda > lo && lambda < hi) {
            lambda = 0.5 * (lo + hi);
        }
        let (h, s) = eval(lambda, &mut warm)?;
        if h.abs() < best_h.abs() {
            best_h = h;
            best = s;
        }
        if h.abs() <= tol_h || (hi - lo) <= 1e-15 * hi {
            break;
        }
        if h < 0.0 {
            lo = lambda;
            h_lo = h;
            if side == -1 {
                h_hi *= 0.5;
            }
            side = -1;
        } else {
            hi = lambda;
            h_hi = h;
            if side == 1 {
                h_lo *= 0.5;
            }
            side = 1;
        }
    }

    let residual = check_kkt_squared(mom, blocks, &best.w, mu).residual;
    if residual > KKT_GATE {
        return Err(GlError::NonConvergence {
            what: "squared-form root search",
            iterations: sweeps,
            residual,
        });
    }
    let lambda_equiv = mu * blocks.block_l1(&best.w);
    Ok(finish(mom, blocks, best.w, lambda_equiv, Some(mu), residual, sweeps))
}

/// Adaptive weights `d_j = ‖ŵ^{LS}_j‖^{-γ}`.
pub fn adaptive_weights(mom: &EmpiricalMoments, blocks: &BlockStructure, gamma: f64) -> Result<BlockStructure> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(GlError::InvalidInput(format!("gamma must be >= 0, got {gamma}")));
    }
    let w_ls = ols(mom)?;
    let mut weights = Vec::with_capacity(blocks.num_groups());
    for j in 0..blocks.num_groups() {
        let nrm = blocks.group_norm(&w_ls, j);
        if nrm == 0.0 {
            return Err(GlError::ZeroNorm {
                group: j + 1,
                context: "least-squares estimate",
            });
        }
        weights.push(nrm.powf(-gamma));
    }
    blocks.with_weights(weights)
}

/// Squared-form solve with weights from the least-squares estimate.
///
/// The returned solution refers to the reweighted block structure, which is
/// returned alongside it.
pub fn adaptive_group_lasso(
    mom: &EmpiricalMoments,
    blocks: &BlockStructure,
    mu: f64,
    gamma: f64,
) -> Result<(GroupLassoSolution, BlockStructure)> {
    let adaptive = adaptive_weights(mom, blocks, gamma)?;
    let sol = solve_fixed_mu(mom, &adaptive, mu)?;
    Ok((sol, adaptive))
}

/// `min ½(w − w̄)ᵀΣ(w − w̄) + λ₀ Σ d_j‖w_j‖`.
pub fn population_group_lasso(
    model: &PopulationModel,
    blocks: &BlockStructure,
    lambda0: f64,
) -> Result<GroupLassoSolution> {
    if !(lambda0 > 0.0) {
        return Err(GlError::InvalidInput(format!("lambda0 must be > 0, got {lambda0}")));
    }
    let mut mom = EmpiricalMoments::population(model);
    mom.s_yy = model.w.dot(&mom.s_xy);
    solve_fixed_lambda(&mom, blocks, lambda0)
}

#[cfg(test)]
mod tests;
