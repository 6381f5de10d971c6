//! Loading-free condition: a multi-start lower bound and two upper bounds.
//!
//! For an inactive group `i` let `B_i = Σ_{X_i X_J} Σ_{X_J X_J}⁻¹ Diag(d_j)`
//! and `A_i = B_iᵀ B_i`. The loading-free value is
//! `(1/d_i) max ‖B_i u‖` over `u` with one unit vector per active group.
//! The spectral bound applies the triangle inequality block by block; the
//! semidefinite bound relaxes `u uᵀ` to any `M ⪰ 0` with unit-trace diagonal
//! blocks.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::Geometry;
use crate::error::{GlError, Result};
use crate::linalg;
use crate::model::{BlockStructure, PopulationModel, SparsityPattern};
use crate::rng;

pub const DEFAULT_RESTARTS: usize = 50;

const ASCENT_MAX_ITERS: usize = 20_000;
const RESTART_SEED: u64 = 0x6c6f_6164_696e_67;

fn block_ranges(sizes: &[usize]) -> Vec<std::ops::Range<usize>> {
    let mut off = 0;
    sizes
        .iter()
        .map(|&s| {
            let r = off..off + s;
            off += s;
            r
        })
        .collect()
}

/// Normalizes each block of `v` in place. Blocks of zero norm are replaced
/// by the matching block of `fallback`.
fn normalize_blocks(v: &mut DMatrix<f64>, fallback: &DMatrix<f64>, ranges: &[std::ops::Range<usize>]) {
    for r in ranges {
        let nrm = v.rows(r.start, r.len()).norm();
        if nrm > 0.0 && nrm.is_finite() {
            let mut rows = v.rows_mut(r.start, r.len());
            rows /= nrm;
        } else {
            v.rows_mut(r.start, r.len()).copy_from(&fallback.rows(r.start, r.len()));
        }
    }
}

/// Monotone ascent of `tr(VᵀAV)` over matrices whose row blocks have unit
/// Frobenius norm. `A` must be PSD, which makes each step a minorize-maximize
/// update.
fn block_power_ascent(a: &DMatrix<f64>, ranges: &[std::ops::Range<usize>], mut v: DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let mut value = (v.transpose() * a * &v).trace();
    for _ in 0..ASCENT_MAX_ITERS {
        let mut next = a * &v;
        normalize_blocks(&mut next, &v, ranges);
        let next_value = (next.transpose() * a * &next).trace();
        v = next;
        let done = next_value - value <= 1e-15 * next_value.abs().max(1e-300);
        value = next_value.max(value);
        if done {
            break;
        }
    }
    (v, value)
}

/// Loading-free value for each inactive group, as `(group, value)`.
pub fn loading_free_per_group(
    model: &PopulationModel,
    blocks: &BlockStructure,
    pattern: &SparsityPattern,
    restarts: usize,
) -> Result<Vec<(usize, f64)>> {
    let geo = Geometry::for_model(model, blocks, pattern)?;
    let sizes: Vec<usize> = geo.active.iter().map(|&j| blocks.size(j)).collect();
    let ranges = block_ranges(&sizes);
    let q = geo.j_idx.len();
    let loading_start = {
        let s = geo.direction.as_ref().expect("loading supplied");
        let mut u = DMatrix::from_column_slice(q, 1, s.as_slice());
        let ones = DMatrix::from_element(q, 1, 1.0);
        normalize_blocks(&mut u, &ones, &ranges);
        u
    };
    let mut out = Vec::with_capacity(geo.inactive.len());
    for (k, &i) in geo.inactive.iter().enumerate() {
        let b = geo.weighted_cross(k, blocks);
        let a = b.transpose() * &b;
        let best = if geo.active.len() == 1 {
            linalg::max_eigenvalue(&a).max(0.0)
        } else {
            let mut best = block_power_ascent(&a, &ranges, loading_start.clone()).1;
            let mut r = rng::stream(RESTART_SEED, &[i as u64]);
            for _ in 0..restarts {
                let mut u = DMatrix::from_fn(q, 1, |_, _| r.sample::<f64, _>(StandardNormal));
                normalize_blocks(&mut u, &loading_start, &ranges);
                best = best.max(block_power_ascent(&a, &ranges, u).1);
            }
            best
        };
        out.push((i, best.max(0.0).sqrt() / blocks.weight(i)));
    }
    Ok(out)
}

/// Largest loading-free value over inactive groups. This is attained by a
/// feasible point, so it never exceeds the true maximum.
pub fn loading_free_condition(
    model: &PopulationModel,
    blocks: &BlockStructure,
    pattern: &SparsityPattern,
    restarts: usize,
) -> Result<f64> {
    Ok(loading_free_per_group(model, blocks, pattern, restarts)?
        .into_iter()
        .map(|(_, v)| v)
        .fold(0.0, f64::max))
}

/// `(1/d_i) Σ_{j∈J} d_j ‖(Σ_{X_i X_J} Σ_{X_J X_J}⁻¹)_{·j}‖₂` for each
/// inactive group, as `(group, value)`.
pub fn spectral_upper_bound_per_group(
    model: &PopulationModel,
    blocks: &BlockStructure,
    pattern: &SparsityPattern,
) -> Result<Vec<(usize, f64)>> {
    let geo = Geometry::new(&model.sigma_xx, None, blocks, pattern)?;
    Ok(geo
        .inactive
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let b = geo.weighted_cross(k, blocks);
            let total: f64 = geo
                .local
                .iter()
                .map(|r| linalg::spectral_norm(&b.columns(r.start, r.len()).into_owned()))
                .sum();
            (i, total / blocks.weight(i))
        })
        .collect())
}

/// Largest per-group spectral bound.
pub fn spectral_upper_bound(model: &PopulationModel, blocks: &BlockStructure, pattern: &SparsityPattern) -> Result<f64> {
    Ok(spectral_upper_bound_per_group(model, blocks, pattern)?
        .into_iter()
        .map(|(_, v)| v)
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, Serialize)]
pub struct SdpSolution {
    /// Lower bound from the best feasible `M = VVᵀ`.
    pub primal: f64,
    /// Upper bound `Σ λ_j` from a certified dual point.
    pub dual: f64,
    pub gap: f64,
    pub lambda: Vec<f64>,
    pub iterations: usize,
}

/// `max tr(MA)` over `M ⪰ 0` with `tr M_jj = 1`, bracketed by a low-rank
/// primal point and a dual point `Diag(λ_j I) ⪰ A`.
///
/// The primal is ascended in factored form; stationary multipliers are
/// lifted to dual feasibility by the most negative eigenvalue of
/// `Diag(λ) − A`, whose eigenvector also serves as an escape direction when
/// the ascent stalls short of the tolerance.
pub fn sdp_bound_matrix(a: &DMatrix<f64>, sizes: &[usize]) -> Result<SdpSolution> {
    let q: usize = sizes.iter().sum();
    if a.nrows() != q || a.ncols() != q {
        return Err(GlError::DimensionMismatch {
            axis: "SDP cost matrix",
            expected: q,
            found: a.nrows(),
        });
    }
    let ranges = block_ranges(sizes);
    let m = sizes.len();
    let mut a = a.clone();
    linalg::symmetrize(&mut a);

    // Block-norm dual point: λ_j = a_j Σ_k a_k with a_j² = ‖A_jj‖₂.
    let norms: Vec<f64> = ranges
        .iter()
        .map(|r| linalg::max_eigenvalue(&a.view((r.start, r.start), (r.len(), r.len())).into_owned()).max(0.0).sqrt())
        .collect();
    let total: f64 = norms.iter().sum();
    let mut best_dual = total * total;
    let mut best_lambda: Vec<f64> = norms.iter().map(|n| n * total).collect();

    let rank = (((2 * m) as f64).sqrt().floor() as usize + 2).min(q);
    let mut r = rng::stream(RESTART_SEED, &[q as u64, m as u64]);
    let fallback = DMatrix::from_fn(q, rank, |_, _| r.sample::<f64, _>(StandardNormal));
    let mut fallback_n = fallback.clone();
    let ones = DMatrix::from_element(q, rank, 1.0);
    normalize_blocks(&mut fallback_n, &ones, &ranges);
    let mut v = fallback_n.clone();

    let mut primal = (v.transpose() * &a * &v).trace();
    let tol = |p: f64| 1e-5 * (1.0 + p.abs());
    let max_iters = 200_000;
    let mut since_check = 0usize;
    for iter in 1..=max_iters {
        let mut next = &a * &v;
        normalize_blocks(&mut next, &v, &ranges);
        let value = (next.transpose() * &a * &next).trace();
        let stalled = value - primal <= 1e-13 * value.abs().max(1e-300);
        v = next;
        primal = primal.max(value);
        since_check += 1;
        if !(stalled || since_check >= 25) {
            continue;
        }
        since_check = 0;

        let av = &a * &v;
        let lambda: Vec<f64> = ranges
            .iter()
            .map(|r| (v.rows(r.start, r.len()).transpose() * av.rows(r.start, r.len())).trace())
            .collect();
        let mut slack = -a.clone();
        for (j, rg) in ranges.iter().enumerate() {
            for t in rg.clone() {
                slack[(t, t)] += lambda[j];
            }
        }
        let eig = SymmetricEigen::new(slack);
        let (kmin, emin) = eig
            .eigenvalues
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (k, e)| if e < acc.1 { (k, e) } else { acc });
        let shift = (-emin).max(0.0);
        let dual: f64 = lambda.iter().sum::<f64>() + shift * m as f64;
        if dual < best_dual {
            best_dual = dual;
            best_lambda = lambda.iter().map(|l| l + shift).collect();
        }
        if best_dual - primal <= tol(primal) {
            return Ok(SdpSolution {
                primal,
                dual: best_dual,
                gap: best_dual - primal,
                lambda: best_lambda,
                iterations: iter,
            });
        }
        if stalled && emin < 0.0 {
            // Rank-one push along the violated direction, then renormalize.
            let dir = eig.eigenvectors.column(kmin).into_owned();
            let coef = DVector::from_fn(rank, |c, _| if c == iter % rank { 1.0 } else { 0.0 });
            let mut pushed = &v + dir * coef.transpose() * 0.5;
            normalize_blocks(&mut pushed, &fallback_n, &ranges);
            v = pushed;
        }
    }
    Err(GlError::NonConvergence {
        what: "semidefinite bound",
        iterations: max_iters,
        residual: best_dual - primal,
    })
}

/// `(1/d_i) √(optimal value)` of the semidefinite relaxation for group `i`.
pub fn sdp_upper_bound(
    model: &PopulationModel,
    blocks: &BlockStructure,
    pattern: &SparsityPattern,
    i: usize,
) -> Result<(f64, SdpSolution)> {
    if pattern.contains(i) || i >= blocks.num_groups() {
        return Err(GlError::InvalidInput(format!("group {} is not an inactive group", i + 1)));
    }
    let geo = Geometry::new(&model.sigma_xx, None, blocks, pattern)?;
    let k = geo.inactive.iter().position(|&g| g == i).expect("inactive group");
    let b = geo.weighted_cross(k, blocks);
    let a = b.transpose() * &b;
    let sizes: Vec<usize> = geo.active.iter().map(|&j| blocks.size(j)).collect();
    let sol = sdp_bound_matrix(&a, &sizes)?;
    Ok((sol.dual.max(0.0).sqrt() / blocks.weight(i), sol))
}
