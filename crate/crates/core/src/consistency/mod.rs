//! Population consistency conditions for the group Lasso: condition values,
//! the second-order refinement at the boundary, loading-free bounds, and the
//! limiting probability of selecting the right pattern.

mod bounds;
mod probability;

use std::collections::BTreeMap;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

pub use bounds::{
    loading_free_condition, loading_free_per_group, sdp_bound_matrix, sdp_upper_bound, spectral_upper_bound,
    spectral_upper_bound_per_group,
    SdpSolution, DEFAULT_RESTARTS,
};
pub use probability::{pattern_probability_limit, PatternProbability};

use crate::error::{GlError, Result};
use crate::linalg;
use crate::model::{BlockStructure, PopulationModel, SparsityPattern};

/// Values within this distance of 1 are treated as lying on the boundary.
pub const BOUNDARY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Verdict {
    StrictHolds,
    WeakBoundary,
    Violated,
}

impl Verdict {
    pub fn classify(max_value: f64) -> Self {
        if max_value < 1.0 - BOUNDARY_TOL {
            Verdict::StrictHolds
        } else if max_value <= 1.0 + BOUNDARY_TOL {
            Verdict::WeakBoundary
        } else {
            Verdict::Violated
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ConditionReport {
    /// Keyed by 0-based inactive group index.
    pub per_group_values: BTreeMap<usize, f64>,
    pub max_value: f64,
    pub verdict: Verdict,
}

/// Quantities shared by every condition for a fixed `(Σ, w, J)`.
pub(crate) struct Geometry {
    pub active: Vec<usize>,
    pub inactive: Vec<usize>,
    /// Position of each active group inside the stacked `J` coordinates.
    pub local: Vec<Range<usize>>,
    pub j_idx: Vec<usize>,
    /// `Σ_{X_J X_J}⁻¹`.
    pub sigma_jj_inv: DMatrix<f64>,
    /// `Σ_{X_i X_J} Σ_{X_J X_J}⁻¹` for each inactive group.
    pub cross: Vec<DMatrix<f64>>,
    /// `Diag(d_j/‖w_j‖) w_J`, or `None` when some active group has `w_j = 0`.
    pub direction: Option<DVector<f64>>,
}

impl Geometry {
    pub fn new(sigma: &DMatrix<f64>, w: Option<&DVector<f64>>, blocks: &BlockStructure, pattern: &SparsityPattern) -> Result<Self> {
        blocks.check_dim(sigma.nrows(), "covariance dimension")?;
        if pattern.is_empty() {
            return Err(GlError::EmptyPattern);
        }
        if let Some(&j) = pattern.active_vec().iter().find(|&&j| j >= blocks.num_groups()) {
            return Err(GlError::InvalidInput(format!("group {} out of range", j + 1)));
        }
        let active = pattern.active_vec();
        let inactive = pattern.inactive(blocks.num_groups());
        let j_idx = blocks.indices(active.iter().copied());
        let mut local = Vec::with_capacity(active.len());
        let mut off = 0;
        for &j in &active {
            local.push(off..off + blocks.size(j));
            off += blocks.size(j);
        }
        let s_jj = linalg::submatrix(sigma, &j_idx, &j_idx);
        let min_eig = linalg::min_eigenvalue(&s_jj);
        if !(min_eig > 1e-12 * linalg::max_eigenvalue(&s_jj).max(1e-300)) {
            return Err(GlError::Singular {
                what: "covariance block of the active groups",
            });
        }
        let sigma_jj_inv = linalg::spd_inverse(&s_jj, "covariance block of the active groups")?;
        let cross = inactive
            .iter()
            .map(|&i| linalg::submatrix(sigma, &blocks.indices([i]), &j_idx) * &sigma_jj_inv)
            .collect();
        let direction = match w {
            None => None,
            Some(w) => {
                let mut s = DVector::zeros(j_idx.len());
                for (k, &j) in active.iter().enumerate() {
                    let nrm = blocks.group_norm(w, j);
                    if nrm == 0.0 {
                        return Err(GlError::ZeroNorm {
                            group: j + 1,
                            context: "loading of an active group",
                        });
                    }
                    let r = blocks.range(j);
                    let wj = w.rows(r.start, r.len()) * (blocks.weight(j) / nrm);
                    s.rows_mut(local[k].start, local[k].len()).copy_from(&wj);
                }
                Some(s)
            }
        };
        Ok(Self {
            active,
            inactive,
            local,
            j_idx,
            sigma_jj_inv,
            cross,
            direction,
        })
    }

    pub fn for_model(model: &PopulationModel, blocks: &BlockStructure, pattern: &SparsityPattern) -> Result<Self> {
        Self::new(&model.sigma_xx, Some(&model.w), blocks, pattern)
    }

    /// `Σ_{X_i X_J} Σ_{X_J X_J}⁻¹ Diag(d_j) ` with the weights folded in.
    pub fn weighted_cross(&self, k: usize, blocks: &BlockStructure) -> DMatrix<f64> {
        let mut b = self.cross[k].clone();
        for (a, &j) in self.active.iter().enumerate() {
            let r = self.local[a].clone();
            let mut cols = b.columns_mut(r.start, r.len());
            cols *= blocks.weight(j);
        }
        b
    }
}

/// `(1/d_i)‖Σ_{X_i X_J} Σ_{X_J X_J}⁻¹ Diag(d_j/‖w_j‖) w_J‖` for every inactive group.
pub fn condition_value(model: &PopulationModel, blocks: &BlockStructure, pattern: &SparsityPattern) -> Result<ConditionReport> {
    let geo = Geometry::for_model(model, blocks, pattern)?;
    let s = geo.direction.as_ref().expect("loading supplied");
    let mut per_group_values = BTreeMap::new();
    let mut max_value = 0.0f64;
    for (k, &i) in geo.inactive.iter().enumerate() {
        let v = (&geo.cross[k] * s).norm() / blocks.weight(i);
        max_value = max_value.max(v);
        per_group_values.insert(i, v);
    }
    Ok(ConditionReport {
        per_group_values,
        max_value,
        verdict: Verdict::classify(max_value),
    })
}

/// Second-order quantity for inactive groups whose condition value is at or
/// above `1 − BOUNDARY_TOL`.
///
/// With `Δ = −Σ_{X_J X_J}⁻¹ Diag(d_j/‖w_j‖) w_J` this is
/// `ΔᵀΣ_{X_J X_i}Σ_{X_i X_J}Σ_{X_J X_J}⁻¹ Diag[d_j/‖w_j‖ (I − w_j w_jᵀ/‖w_j‖²)] Δ`.
/// A positive value at a boundary group means the loadings move away from
/// the violating direction as λ decreases.
pub fn refined_condition(
    model: &PopulationModel,
    blocks: &BlockStructure,
    pattern: &SparsityPattern,
) -> Result<BTreeMap<usize, f64>> {
    let geo = Geometry::for_model(model, blocks, pattern)?;
    let s = geo.direction.as_ref().expect("loading supplied");
    let delta = -(&geo.sigma_jj_inv * s);

    // Diag[d_j/‖w_j‖ (I − ŵ_j ŵ_jᵀ)] Δ, block by block.
    let mut proj = DVector::zeros(delta.len());
    for (a, &j) in geo.active.iter().enumerate() {
        let r = geo.local[a].clone();
        let wr = blocks.range(j);
        let wj = model.w.rows(wr.start, wr.len());
        let nrm = wj.norm();
        let unit = wj / nrm;
        let dj = delta.rows(r.start, r.len());
        let out = (&dj - &unit * unit.dot(&dj)) * (blocks.weight(j) / nrm);
        proj.rows_mut(r.start, r.len()).copy_from(&out);
    }

    let mut out = BTreeMap::new();
    for (k, &i) in geo.inactive.iter().enumerate() {
        let value = (&geo.cross[k] * s).norm() / blocks.weight(i);
        if value < 1.0 - BOUNDARY_TOL {
            continue;
        }
        let ri = blocks.indices([i]);
        let s_ij = linalg::submatrix(&model.sigma_xx, &ri, &geo.j_idx);
        let left = &s_ij * &delta;
        let right = &geo.cross[k] * &proj;
        out.insert(i, left.dot(&right));
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
