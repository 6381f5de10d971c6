//! Optimality certificates for both group-Lasso formulations.

use nalgebra::DVector;
use serde::Serialize;

use crate::model::{BlockStructure, EmpiricalMoments};

/// Per-group slack in the first-order conditions.
#[derive(Debug, Clone, Serialize)]
pub struct GroupSlack {
    pub group: usize,
    pub active: bool,
    /// `‖Σ̂_{X_jX}w − Σ̂_{X_jY}‖`.
    pub correlation_norm: f64,
    /// `λ d_j` (or `μ d_j Σ_i d_i‖w_i‖` for the squared form).
    pub threshold: f64,
    pub violation: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct KktReport {
    pub residual: f64,
    pub groups: Vec<GroupSlack>,
}

/// Residual of the optimality conditions for penalty `Σ_j τ_j ‖w_j‖`, where
/// `τ_j = scale · d_j`.
pub(crate) fn kkt_with_scale(
    grad: &DVector<f64>,
    blocks: &BlockStructure,
    w: &DVector<f64>,
    scale: f64,
) -> KktReport {
    let mut groups = Vec::with_capacity(blocks.num_groups());
    let mut residual = 0.0f64;
    for j in 0..blocks.num_groups() {
        let r = blocks.range(j);
        let gj = grad.rows(r.start, r.len());
        let wj = w.rows(r.start, r.len());
        let wn = wj.norm();
        let threshold = scale * blocks.weight(j);
        let corr = gj.norm();
        let active = wn > 0.0;
        let violation = if active {
            (gj + wj * (threshold / wn)).norm()
        } else {
            (corr - threshold).max(0.0)
        };
        residual = residual.max(violation);
        groups.push(GroupSlack {
            group: j,
            active,
            correlation_norm: corr,
            threshold,
            violation,
        });
    }
    KktReport { residual, groups }
}

/// Conditions for `min loss(w) + λ Σ d_j‖w_j‖`.
pub fn check_kkt(
    mom: &EmpiricalMoments,
    blocks: &BlockStructure,
    w: &DVector<f64>,
    lambda: f64,
) -> KktReport {
    kkt_with_scale(&mom.gradient(w), blocks, w, lambda)
}

/// Conditions for `min loss(w) + (μ/2)(Σ d_j‖w_j‖)²`.
pub fn check_kkt_squared(
    mom: &EmpiricalMoments,
    blocks: &BlockStructure,
    w: &DVector<f64>,
    mu: f64,
) -> KktReport {
    kkt_with_scale(&mom.gradient(w), blocks, w, mu * blocks.block_l1(w))
}
