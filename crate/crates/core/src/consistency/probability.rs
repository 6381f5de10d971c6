use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use super::Geometry;
use crate::error::{GlError, Result};
use crate::linalg;
use crate::model::{BlockStructure, PopulationModel, SparsityPattern};
use crate::rng;

const CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PatternProbability {
    pub estimate: f64,
    pub se: f64,
}

/// Monte-Carlo limit of the probability of selecting `J` when
/// `λ_n = λ₀ n^{-1/2}`:
/// `P(max_i (1/d_i)‖(σ/λ₀) t_i − Σ_{X_i X_J} Σ_{X_J X_J}⁻¹ Diag(d_j/‖w_j‖) w_J‖ ≤ 1)`
/// with `t ~ N(0, Σ_{X_{J^c} X_{J^c} | X_J})`.
///
/// Draws are split into fixed chunks with their own streams, so the result
/// depends only on `seed` and `draws`.
pub fn pattern_probability_limit(
    model: &PopulationModel,
    blocks: &BlockStructure,
    pattern: &SparsityPattern,
    lambda0: f64,
    draws: usize,
    seed: u64,
) -> Result<PatternProbability> {
    if !(lambda0 > 0.0 && lambda0.is_finite()) {
        return Err(GlError::InvalidInput(format!("lambda0 must be > 0, got {lambda0}")));
    }
    if draws == 0 {
        return Err(GlError::InvalidInput("draws must be >= 1".into()));
    }
    let geo = Geometry::for_model(model, blocks, pattern)?;
    if geo.inactive.is_empty() {
        return Ok(PatternProbability { estimate: 1.0, se: 0.0 });
    }
    let s = geo.direction.as_ref().expect("loading supplied");
    let c_idx = blocks.indices(geo.inactive.iter().copied());
    let s_cj = linalg::submatrix(&model.sigma_xx, &c_idx, &geo.j_idx);
    let mut cond = linalg::submatrix(&model.sigma_xx, &c_idx, &c_idx) - &s_cj * &geo.sigma_jj_inv * s_cj.transpose();
    linalg::symmetrize(&mut cond);
    let min_eig = linalg::min_eigenvalue(&cond);
    if min_eig < -1e-8 {
        return Err(GlError::NotPositiveSemidefinite {
            what: "conditional covariance of inactive groups",
            min_eigenvalue: min_eig,
        });
    }
    let factor = linalg::psd_factor(&cond);
    let offsets: Vec<DVector<f64>> = geo.cross.iter().map(|c| c * s).collect();
    let mut starts = Vec::with_capacity(geo.inactive.len());
    let mut off = 0;
    for &i in &geo.inactive {
        starts.push((off, blocks.size(i), blocks.weight(i)));
        off += blocks.size(i);
    }
    let scale = model.sigma / lambda0;
    let dim = c_idx.len();

    let chunks = draws.div_ceil(CHUNK);
    let hits: usize = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let count = CHUNK.min(draws - c * CHUNK);
            let mut r = rng::stream(seed, &[c as u64]);
            let z = DMatrix::from_fn(dim, count, |_, _| r.sample::<f64, _>(StandardNormal));
            let t = &factor * z;
            (0..count)
                .filter(|&col| {
                    starts.iter().zip(&offsets).all(|(&(o, len, d), base)| {
                        let ti = t.view((o, col), (len, 1));
                        let mut sq = 0.0;
                        for k in 0..len {
                            let v = scale * ti[k] - base[k];
                            sq += v * v;
                        }
                        sq.sqrt() / d <= 1.0
                    })
                })
                .count()
        })
        .sum();
    let estimate = hits as f64 / draws as f64;
    Ok(PatternProbability {
        estimate,
        se: (estimate * (1.0 - estimate) / draws as f64).sqrt(),
    })
}
