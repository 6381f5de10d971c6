//! Block coordinate descent for `min ½Σ̂_YY − Σ̂_XYᵀw + ½wᵀΣ̂_XXw + λ Σ d_j‖w_j‖`.
//!
//! Each block is minimized exactly: with the other blocks fixed the block
//! subproblem is `min ½vᵀHv − rᵀv + τ‖v‖`. Either `‖r‖ ≤ τ` and `v = 0`, or
//! `v = t (tH + τI)⁻¹ r` where `t = ‖v‖ > 0` is the unique root of
//! `‖(tH + τI)⁻¹ r‖ = 1`, found by safeguarded Newton in the eigenbasis of `H`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::kkt::kkt_with_scale;
use crate::error::{GlError, Result};
use crate::model::{BlockStructure, EmpiricalMoments};

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    /// Stop once the KKT residual falls below this value.
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_sweeps: 100_000,
        }
    }
}

/// Residual every returned solution must meet.
pub const KKT_GATE: f64 = 1e-7;

pub(crate) struct BlockEigen {
    vectors: DMatrix<f64>,
    values: DVector<f64>,
}

pub(crate) struct Workspace {
    eig: Vec<BlockEigen>,
}

impl Workspace {
    pub fn new(mom: &EmpiricalMoments, blocks: &BlockStructure) -> Self {
        let eig = (0..blocks.num_groups())
            .map(|j| {
                let r = blocks.range(j);
                let h = mom.s_xx.view((r.start, r.start), (r.len(), r.len())).into_owned();
                let e = SymmetricEigen::new(h);
                BlockEigen {
                    values: e.eigenvalues.map(|v| v.max(0.0)),
                    vectors: e.eigenvectors,
                }
            })
            .collect();
        Self { eig }
    }
}

/// Exact minimizer of `½vᵀHv − rᵀv + τ‖v‖` given the eigendecomposition of `H`.
fn block_minimizer(eig: &BlockEigen, r: &DVector<f64>, tau: f64) -> Result<DVector<f64>> {
    let rn = r.norm();
    if rn <= tau {
        return Ok(DVector::zeros(r.len()));
    }
    let c = eig.vectors.tr_mul(r);
    let h = &eig.values;
    let hmax = h.max();
    let scale_floor = 1e-14 * hmax.max(1e-300);

    if tau == 0.0 {
        if h.iter().any(|&v| v <= scale_floor) {
            return Err(GlError::Singular {
                what: "diagonal block of s_xx at lambda = 0",
            });
        }
        let z = c.component_div(h);
        return Ok(&eig.vectors * z);
    }

    // Mass in directions with (numerically) zero curvature decides whether the
    // block problem is bounded.
    let flat: f64 = c
        .iter()
        .zip(h.iter())
        .filter(|(_, &hv)| hv <= scale_floor)
        .map(|(ck, _)| ck * ck)
        .sum();
    if flat >= tau * tau {
        return Err(GlError::InvalidInput(
            "group subproblem is unbounded below (correlation along a null direction of s_xx exceeds the penalty)".into(),
        ));
    }

    let phi = |t: f64| -> (f64, f64) {
        let mut f = 0.0;
        let mut df = 0.0;
        for (ck, &hv) in c.iter().zip(h.iter()) {
            let den = hv * t + tau;
            f += ck * ck / (den * den);
            df += -2.0 * ck * ck * hv / (den * den * den);
        }
        (f, df)
    };

    // ψ(t) = φ(t)^{-1/2} − 1 is increasing with ψ(0) < 0.
    let mut lo = 0.0;
    let mut hi = {
        let hmin_pos = h.iter().copied().filter(|&v| v > scale_floor).fold(f64::INFINITY, f64::min);
        let mut t = if hmin_pos.is_finite() { rn / hmin_pos } else { 1.0 };
        while phi(t).0 > 1.0 {
            t *= 2.0;
            if !t.is_finite() {
                return Err(GlError::InvalidInput("block root bracket overflow".into()));
            }
        }
        t
    };
    let mut t = 0.5 * (lo + hi);
    for _ in 0..200 {
        let (f, df) = phi(t);
        let psi = f.powf(-0.5) - 1.0;
        if psi < 0.0 {
            lo = t;
        } else {
            hi = t;
        }
        if psi.abs() <= 1e-15 || (hi - lo) <= 1e-16 * hi {
            break;
        }
        let dpsi = -0.5 * f.powf(-1.5) * df;
        let mut next = t - psi / dpsi;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        t = next;
    }
    let z = DVector::from_fn(c.len(), |k, _| t * c[k] / (h[k] * t + tau));
    Ok(&eig.vectors * z)
}

pub(crate) struct BcdOutcome {
    pub w: DVector<f64>,
    pub residual: f64,
    pub sweeps: usize,
}

/// Runs block coordinate descent from `w0` until the KKT residual is below
/// `opts.tol`.
pub(crate) fn block_coordinate_descent(
    mom: &EmpiricalMoments,
    blocks: &BlockStructure,
    ws: &Workspace,
    lambda: f64,
    w0: DVector<f64>,
    opts: &SolverOptions,
) -> Result<BcdOutcome> {
    let mut w = w0;
    let mut grad = mom.gradient(&w);
    let mut residual = kkt_with_scale(&grad, blocks, &w, lambda).residual;
    if residual <= opts.tol {
        return Ok(BcdOutcome {
            w,
            residual,
            sweeps: 0,
        });
    }
    let mut objective = objective_value(mom, blocks, &w, lambda);
    for sweep in 1..=opts.max_sweeps {
        for j in 0..blocks.num_groups() {
            let rg = blocks.range(j);
            let (start, len) = (rg.start, rg.len());
            let wj = w.rows(start, len).into_owned();
            let hw = mom.s_xx.view((start, start), (len, len)) * &wj;
            let r = hw - grad.rows(start, len);
            let new_wj = block_minimizer(&ws.eig[j], &r, lambda * blocks.weight(j))?;
            let delta = &new_wj - &wj;
            if delta.iter().all(|&v| v == 0.0) {
                continue;
            }
            grad += mom.s_xx.columns(start, len) * &delta;
            w.rows_mut(start, len).copy_from(&new_wj);
        }
        if sweep % 64 == 0 {
            grad = mom.gradient(&w);
        }
        let next = objective_value(mom, blocks, &w, lambda);
        debug_assert!(
            next <= objective + 1e-12 * (1.0 + objective.abs()),
            "objective increased from {objective} to {next}"
        );
        objective = next;
        residual = kkt_with_scale(&grad, blocks, &w, lambda).residual;
        if residual <= opts.tol {
            let fresh = mom.gradient(&w);
            residual = kkt_with_scale(&fresh, blocks, &w, lambda).residual;
            if residual <= opts.tol {
                return Ok(BcdOutcome {
                    w,
                    residual,
                    sweeps: sweep,
                });
            }
            grad = fresh;
        }
    }
    Err(GlError::NonConvergence {
        what: "block coordinate descent",
        iterations: opts.max_sweeps,
        residual,
    })
}

pub fn objective_value(mom: &EmpiricalMoments, blocks: &BlockStructure, w: &DVector<f64>, lambda: f64) -> f64 {
    mom.loss(w) + lambda * blocks.block_l1(w)
}
