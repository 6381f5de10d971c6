use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::bcd::{SolverOptions, Workspace, KKT_GATE};
use super::{check_inputs, solve_lambda_ws, GroupLassoSolution};
use crate::error::{GlError, Result};
use crate::model::{BlockStructure, EmpiricalMoments};

/// Logarithmic grid from `λ_max` down to `lmin_ratio · λ_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub points: usize,
    pub lmin_ratio: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            points: 100,
            lmin_ratio: 1e-3,
        }
    }
}

impl GridSpec {
    /// `per_decade` points per factor of ten, endpoints included.
    pub fn per_decade(per_decade: usize, lmin_ratio: f64) -> Self {
        let decades = -lmin_ratio.log10();
        Self {
            points: (per_decade as f64 * decades).round() as usize + 1,
            lmin_ratio,
        }
    }
}

/// Smallest λ at which `w = 0` is optimal: `max_j ‖Σ̂_{X_jY}‖ / d_j`.
pub fn lambda_max(mom: &EmpiricalMoments, blocks: &BlockStructure) -> f64 {
    (0..blocks.num_groups())
        .map(|j| {
            let r = blocks.range(j);
            mom.s_xy.rows(r.start, r.len()).norm() / blocks.weight(j)
        })
        .fold(0.0, f64::max)
}

/// Decreasing logarithmic grid on `[lmin_ratio·top, top]`.
pub fn log_grid(top: f64, spec: &GridSpec) -> Vec<f64> {
    if spec.points <= 1 {
        return vec![top];
    }
    let step = spec.lmin_ratio.ln() / (spec.points - 1) as f64;
    (0..spec.points)
        .map(|k| if k == 0 { top } else { top * (step * k as f64).exp() })
        .collect()
}

/// `η̂_j = d_j‖ŵ_j‖ / Σ_i d_i‖ŵ_i‖` (all zeros when `ŵ = 0`).
pub fn eta_profile(w: &DVector<f64>, blocks: &BlockStructure) -> Vec<f64> {
    let total = blocks.block_l1(w);
    (0..blocks.num_groups())
        .map(|j| {
            if total > 0.0 {
                blocks.weight(j) * blocks.group_norm(w, j) / total
            } else {
                0.0
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct PathResult {
    pub grid: Vec<f64>,
    pub solutions: Vec<GroupLassoSolution>,
    pub eta_profiles: Vec<Vec<f64>>,
}

/// Warm-started fixed-λ solves along a decreasing logarithmic grid.
pub fn regularization_path(mom: &EmpiricalMoments, blocks: &BlockStructure, spec: &GridSpec) -> Result<PathResult> {
    regularization_path_with(mom, blocks, spec, &SolverOptions::default())
}

pub fn regularization_path_with(
    mom: &EmpiricalMoments,
    blocks: &BlockStructure,
    spec: &GridSpec,
    opts: &SolverOptions,
) -> Result<PathResult> {
    if spec.points == 0 || !(spec.lmin_ratio > 0.0 && spec.lmin_ratio <= 1.0) {
        return Err(GlError::InvalidInput(format!(
            "grid needs points >= 1 and lmin_ratio in (0, 1], got {spec:?}"
        )));
    }
    let grid = log_grid(lambda_max(mom, blocks), spec);
    path_on_grid(mom, blocks, &grid, opts)
}

/// Warm-started fixed-λ solves along a caller-supplied grid (solved in the
/// given order, typically decreasing).
pub fn path_on_grid(
    mom: &EmpiricalMoments,
    blocks: &BlockStructure,
    grid: &[f64],
    opts: &SolverOptions,
) -> Result<PathResult> {
    if grid.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
        return Err(GlError::InvalidInput("grid values must be finite and >= 0".into()));
    }
    check_inputs(mom, blocks, 0.0, "lambda")?;
    let ws = Workspace::new(mom, blocks);
    let grid = grid.to_vec();
    let mut solutions: Vec<GroupLassoSolution> = Vec::with_capacity(grid.len());
    let mut eta_profiles = Vec::with_capacity(grid.len());
    for (index, &lambda) in grid.iter().enumerate() {
        let warm = solutions.last().map(|s| &s.w);
        let sol = solve_lambda_ws(mom, blocks, &ws, lambda, warm, opts)
            .map_err(|e| GlError::AtGridPoint {
                index,
                source: Box::new(e),
            })?;
        if sol.kkt_residual > KKT_GATE {
            return Err(GlError::AtGridPoint {
                index,
                source: Box::new(GlError::NonConvergence {
                    what: "path solve",
                    iterations: sol.iterations,
                    residual: sol.kkt_residual,
                }),
            });
        }
        eta_profiles.push(eta_profile(&sol.w, blocks));
        solutions.push(sol);
    }
    Ok(PathResult {
        grid,
        solutions,
        eta_profiles,
    })
}
