//! Covariance-operator coordinates for Gaussian kernels `exp(−b(x − x')²)`
//! on the components of a Gaussian vector `X ~ N(0, S)`.
//!
//! For each component the non-centered covariance operator has eigenpairs
//! `(λ_k, e_k)` with
//! `e_k(x) = λ_k^{1/2} (c/a)^{1/4} (2^k k!)^{-1/2} exp(−(c − a)x²) H_k((2c)^{1/2} x)`,
//! `λ_k = (2a/A)^{1/2} B^k`, `a = 1/(4S_jj)`, `c = (a² + 2ab)^{1/2}`,
//! `A = a + b + c`, `B = b/A`, and `H_k` the physicists' Hermite polynomials.
//! The `e_k` are orthonormal in the RKHS; `φ_k = λ_k^{-1/2} e_k` are
//! orthonormal in `L²(p_X)`. Internally everything is carried in the `φ`
//! coordinates, which stay well scaled as `λ_k → 0`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::consistency::{ConditionReport, Verdict};
use crate::error::{GlError, Result};
use crate::linalg;
use crate::model::SparsityPattern;

pub const DEFAULT_TRUNCATION: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianEigenSystem {
    pub s: f64,
    pub bandwidth: f64,
    pub a: f64,
    pub c: f64,
    pub big_a: f64,
    pub big_b: f64,
    pub eigenvalues: Vec<f64>,
}

pub fn eigen_system(s_jj: f64, bandwidth: f64, truncation: usize) -> Result<GaussianEigenSystem> {
    if !(s_jj > 0.0 && s_jj.is_finite()) || !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(GlError::InvalidInput(format!(
            "variance and bandwidth must be positive, got {s_jj} and {bandwidth}"
        )));
    }
    if truncation == 0 {
        return Err(GlError::InvalidInput("truncation must be >= 1".into()));
    }
    let a = 1.0 / (4.0 * s_jj);
    let c = (a * a + 2.0 * a * bandwidth).sqrt();
    let big_a = a + bandwidth + c;
    let big_b = bandwidth / big_a;
    let lead = (2.0 * a / big_a).sqrt();
    let eigenvalues = (0..truncation).map(|k| lead * big_b.powi(k as i32)).collect();
    Ok(GaussianEigenSystem {
        s: s_jj,
        bandwidth,
        a,
        c,
        big_a,
        big_b,
        eigenvalues,
    })
}

impl GaussianEigenSystem {
    pub fn truncation(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `φ_0(x), …, φ_{K−1}(x)`, the `L²(p_X)`-orthonormal eigenfunctions.
    pub fn l2_eigenfunctions(&self, x: f64) -> Vec<f64> {
        let pre = (self.c / self.a).powf(0.25) * (-(self.c - self.a) * x * x).exp();
        hermite_scaled((2.0 * self.c).sqrt() * x, self.truncation())
            .into_iter()
            .map(|h| pre * h)
            .collect()
    }

    /// `e_0(x), …, e_{K−1}(x)`.
    pub fn eigenfunctions(&self, x: f64) -> Vec<f64> {
        self.l2_eigenfunctions(x)
            .into_iter()
            .zip(&self.eigenvalues)
            .map(|(v, l)| v * l.sqrt())
            .collect()
    }
}

/// `H_k(z)/(2^k k!)^{1/2}` for `k < count`.
pub fn hermite_scaled(z: f64, count: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(count);
    if count == 0 {
        return out;
    }
    out.push(1.0);
    if count == 1 {
        return out;
    }
    out.push(std::f64::consts::SQRT_2 * z);
    for k in 1..count - 1 {
        let kf = k as f64;
        let next = (std::f64::consts::SQRT_2 * z * out[k] - kf.sqrt() * out[k - 1]) / (kf + 1.0).sqrt();
        out.push(next);
    }
    out
}

/// Gauss–Hermite nodes and weights for the weight `exp(−x²)`.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    let half = n.div_ceil(2);
    let mut z = 0.0f64;
    for i in 0..half {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * (1.0 + z.abs()) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

fn check_pd2(q: &DMatrix<f64>, what: &'static str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    if q.nrows() != 2 || q.ncols() != 2 {
        return Err(GlError::DimensionMismatch {
            axis: "2x2 matrix",
            expected: 2,
            found: q.nrows(),
        });
    }
    let mut q = q.clone();
    linalg::symmetrize(&mut q);
    let eig = SymmetricEigen::new(q);
    let min = eig.eigenvalues.min();
    if !(min > 0.0) {
        return Err(GlError::NotPositiveDefinite {
            what,
            min_eigenvalue: min,
        });
    }
    Ok(eig)
}

/// `∫∫ exp(−zᵀQz) h̃_k(u) h̃_l(v) du dv` for all `k, l < count`, where
/// `h̃_k = H_k/(2^k k!)^{1/2}`.
///
/// With `Q = R Λ Rᵀ` and `z = R Λ^{-1/2} s` the integrand becomes
/// `exp(−‖s‖²)` times a polynomial in `s`, integrated by tensor
/// Gauss–Hermite with `nodes` points per axis.
pub fn d_matrix_scaled(q: &DMatrix<f64>, count: usize, nodes: usize) -> Result<DMatrix<f64>> {
    let eig = check_pd2(q, "Q")?;
    let (x, w) = gauss_hermite(nodes);
    let r = &eig.eigenvectors;
    let s0 = 1.0 / eig.eigenvalues[0].sqrt();
    let s1 = 1.0 / eig.eigenvalues[1].sqrt();
    let jac = s0 * s1;
    let mut out = DMatrix::zeros(count, count);
    for (xa, wa) in x.iter().zip(&w) {
        for (xb, wb) in x.iter().zip(&w) {
            let (ta, tb) = (xa * s0, xb * s1);
            let u = r[(0, 0)] * ta + r[(0, 1)] * tb;
            let v = r[(1, 0)] * ta + r[(1, 1)] * tb;
            let hu = DVector::from_vec(hermite_scaled(u, count));
            let hv = DVector::from_vec(hermite_scaled(v, count));
            out.ger(wa * wb * jac, &hu, &hv, 1.0);
        }
    }
    Ok(out)
}

/// Default node count for indices up to `max_index`.
pub fn default_nodes(max_index: usize) -> usize {
    2 * max_index + 40
}

/// `D_kl(Q) = ∫∫ exp(−zᵀQz) H_k(u) H_l(v) du dv`.
pub fn d_kl_quadrature(q: &DMatrix<f64>, k: usize, l: usize) -> Result<f64> {
    let count = k.max(l) + 1;
    let scaled = d_matrix_scaled(q, count, default_nodes(k.max(l)))?;
    Ok(scaled[(k, l)] * (hermite_norm_sq(k) * hermite_norm_sq(l)).sqrt())
}

/// `2^k k!`.
fn hermite_norm_sq(k: usize) -> f64 {
    (1..=k).fold(1.0, |acc, j| acc * 2.0 * j as f64)
}

/// `E φ_k(X)`: zero for odd `k`; for `k = 2r` it is
/// `(2(ac)^{1/2}/(a + c) · C(2r, r))^{1/2} ((c − a)/(2(c + a)))^r`.
pub fn l2_means(sys: &GaussianEigenSystem) -> DVector<f64> {
    let (a, c) = (sys.a, sys.c);
    let base = 2.0 * (a * c).sqrt() / (a + c);
    let ratio = (c - a) / (2.0 * (c + a));
    DVector::from_fn(sys.truncation(), |k, _| {
        if k % 2 == 1 {
            return 0.0;
        }
        let r = k / 2;
        let binom = (0..r).fold(1.0, |acc, t| acc * (2 * r - t) as f64 / (t + 1) as f64);
        (base * binom).sqrt() * ratio.powi(r as i32)
    })
}

/// `E e_k(X)`.
pub fn eigenfunction_means(sys: &GaussianEigenSystem) -> DVector<f64> {
    let mu = l2_means(sys);
    DVector::from_fn(mu.len(), |k, _| mu[k] * sys.eigenvalues[k].sqrt())
}

/// `Q` for the pair `(X_1, X_2)` with covariance `s2`; the first coordinate
/// belongs to `sys1`.
fn pair_q(s2: &DMatrix<f64>, sys1: &GaussianEigenSystem, sys2: &GaussianEigenSystem) -> Result<DMatrix<f64>> {
    let (c1, c2) = (sys1.c, sys2.c);
    let m = DMatrix::from_row_slice(2, 2, &[
        s2[(0, 0)] * c1,
        s2[(0, 1)] * (c1 * c2).sqrt(),
        s2[(1, 0)] * (c1 * c2).sqrt(),
        s2[(1, 1)] * c2,
    ]);
    let inv = m.try_inverse().ok_or(GlError::Singular { what: "pair covariance" })?;
    let mut q = inv * 0.25;
    q[(0, 0)] += 0.5 * (1.0 - sys1.a / c1);
    q[(1, 1)] += 0.5 * (1.0 - sys2.a / c2);
    linalg::symmetrize(&mut q);
    Ok(q)
}

fn check_pair(s2: &DMatrix<f64>) -> Result<f64> {
    if s2.nrows() != 2 || s2.ncols() != 2 {
        return Err(GlError::DimensionMismatch {
            axis: "pair covariance",
            expected: 2,
            found: s2.nrows(),
        });
    }
    let det = s2[(0, 0)] * s2[(1, 1)] - s2[(0, 1)] * s2[(1, 0)];
    if !(det > 1e-14 * s2[(0, 0)] * s2[(1, 1)]) || !(s2[(0, 0)] > 0.0) {
        return Err(GlError::Singular { what: "pair covariance" });
    }
    Ok(det)
}

/// `E φ_k(X_1) φ_l(X_2)` for the `L²`-orthonormal eigenfunctions.
pub fn l2_cross_moments(s2: &DMatrix<f64>, sys1: &GaussianEigenSystem, sys2: &GaussianEigenSystem) -> Result<DMatrix<f64>> {
    let det = check_pair(s2)?;
    let count = sys1.truncation().max(sys2.truncation());
    let q = pair_q(s2, sys1, sys2)?;
    let d = d_matrix_scaled(&q, count, default_nodes(count - 1))?;
    let pre = (sys1.c * sys2.c / (sys1.a * sys2.a)).powf(0.25) / det.sqrt()
        / (4.0 * std::f64::consts::PI * (sys1.c * sys2.c).sqrt());
    Ok(DMatrix::from_fn(sys1.truncation(), sys2.truncation(), |k, l| pre * d[(k, l)]))
}

/// Non-centered cross moments `E e_k(X_1) e_l(X_2)`; `s2` is the covariance
/// of `(X_1, X_2)`.
pub fn cross_moments(s2: &DMatrix<f64>, sys1: &GaussianEigenSystem, sys2: &GaussianEigenSystem) -> Result<DMatrix<f64>> {
    let phi = l2_cross_moments(s2, sys1, sys2)?;
    Ok(DMatrix::from_fn(phi.nrows(), phi.ncols(), |k, l| {
        phi[(k, l)] * (sys1.eigenvalues[k] * sys2.eigenvalues[l]).sqrt()
    }))
}

/// Truncated operator coordinates for all components of `X ~ N(0, S)`.
pub struct TruncatedOperatorModel {
    pub s: DMatrix<f64>,
    pub systems: Vec<GaussianEigenSystem>,
    /// `E φ^j(X_j)` per component.
    pub means: Vec<DVector<f64>>,
}

impl TruncatedOperatorModel {
    pub fn new(s: &DMatrix<f64>, bandwidths: &[f64], truncation: usize) -> Result<Self> {
        let m = s.nrows();
        if s.ncols() != m || bandwidths.len() != m {
            return Err(GlError::DimensionMismatch {
                axis: "bandwidths",
                expected: m,
                found: bandwidths.len(),
            });
        }
        let min_eig = linalg::min_eigenvalue(s);
        if !(min_eig > 0.0) || linalg::max_asymmetry(s) > 1e-12 {
            return Err(GlError::NotPositiveDefinite {
                what: "input covariance S",
                min_eigenvalue: min_eig,
            });
        }
        let systems = (0..m)
            .map(|j| eigen_system(s[(j, j)], bandwidths[j], truncation))
            .collect::<Result<Vec<_>>>()?;
        let means = systems.iter().map(l2_means).collect();
        Ok(Self {
            s: s.clone(),
            systems,
            means,
        })
    }

    /// `Cov(φ^i(X_i), φ^j(X_j))`.
    pub fn l2_covariance(&self, i: usize, j: usize) -> Result<DMatrix<f64>> {
        let k = self.systems[i].truncation();
        let outer = &self.means[i] * self.means[j].transpose();
        if i == j {
            return Ok(DMatrix::identity(k, k) - outer);
        }
        let s2 = DMatrix::from_row_slice(2, 2, &[
            self.s[(i, i)],
            self.s[(i, j)],
            self.s[(j, i)],
            self.s[(j, j)],
        ]);
        Ok(l2_cross_moments(&s2, &self.systems[i], &self.systems[j])? - outer)
    }
}

/// Orthonormal basis of the complement of `u` (unit vector) in `R^k`.
fn complement_basis(u: &DVector<f64>) -> DMatrix<f64> {
    let k = u.len();
    let proj = DMatrix::identity(k, k) - u * u.transpose();
    let eig = SymmetricEigen::new(proj);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]));
    DMatrix::from_fn(k, k - 1, |r, c| eig.eigenvectors[(r, order[c])])
}

/// Nonparametric condition value for every inactive component.
///
/// `f_coords[j]` holds the coefficients of `f_j` in the RKHS basis
/// `e_0^j, e_1^j, …` (shorter vectors are zero padded, zero vectors mark
/// inactive components). In `φ` coordinates, write the centered covariance
/// as `Λ^{1/2} R Λ^{1/2}` with `R_jj = I − μ_j μ_jᵀ`, `μ_j = E φ^j`. The
/// value for `i` is `(1/d_i)‖Λ_i^{1/2} R_iJ R_JJ⁺ s‖` with
/// `s_j = (d_j/‖f_j‖) Λ_j^{-1/2} f_j`. The pseudo-inverse acts on the
/// complement of the `μ_j` directions, which carry the constants; `s_j`
/// must be orthogonal to `μ_j`.
pub fn analytic_condition(
    s: &DMatrix<f64>,
    bandwidths: &[f64],
    weights: &[f64],
    pattern: &SparsityPattern,
    f_coords: &[Vec<f64>],
    truncation: usize,
) -> Result<ConditionReport> {
    let m = s.nrows();
    if weights.len() != m || f_coords.len() != m {
        return Err(GlError::DimensionMismatch {
            axis: "per-component inputs",
            expected: m,
            found: weights.len().min(f_coords.len()),
        });
    }
    if weights.iter().any(|d| !(*d > 0.0)) {
        return Err(GlError::InvalidInput("weights must be positive".into()));
    }
    if pattern.is_empty() {
        return Err(GlError::EmptyPattern);
    }
    if truncation < 2 {
        return Err(GlError::InvalidInput("truncation must be >= 2".into()));
    }
    let model = TruncatedOperatorModel::new(s, bandwidths, truncation)?;
    let active = pattern.active_vec();
    if let Some(&j) = active.iter().find(|&&j| j >= m) {
        return Err(GlError::InvalidInput(format!("component {} out of range", j + 1)));
    }
    let k = truncation;
    let kc = k - 1;

    let mut s_vec = DVector::zeros(active.len() * kc);
    let mut bases = Vec::with_capacity(active.len());
    for (a, &j) in active.iter().enumerate() {
        let f = &f_coords[j];
        if f.len() > k {
            return Err(GlError::InvalidInput(format!(
                "component {} has {} coefficients but the truncation is {k}",
                j + 1,
                f.len()
            )));
        }
        let f = DVector::from_fn(k, |t, _| f.get(t).copied().unwrap_or(0.0));
        let nrm = f.norm();
        if nrm == 0.0 {
            return Err(GlError::ZeroNorm {
                group: j + 1,
                context: "function of an active component",
            });
        }
        let lam = &model.systems[j].eigenvalues;
        let sj = DVector::from_fn(k, |t, _| weights[j] / nrm * f[t] / lam[t].sqrt());
        let mu = &model.means[j];
        let unit = mu / mu.norm();
        let along = unit.dot(&sj);
        if along.abs() > 1e-8 * (1.0 + sj.norm()) {
            return Err(GlError::RangeCondition {
                group: j + 1,
                component: along,
            });
        }
        let basis = complement_basis(&unit);
        s_vec.rows_mut(a * kc, kc).copy_from(&(basis.transpose() * sj));
        bases.push(basis);
    }

    let mut r_jj = DMatrix::zeros(active.len() * kc, active.len() * kc);
    for (a, &ja) in active.iter().enumerate() {
        for (b, &jb) in active.iter().enumerate().skip(a) {
            let block = bases[a].transpose() * model.l2_covariance(ja, jb)? * &bases[b];
            r_jj.view_mut((a * kc, b * kc), (kc, kc)).copy_from(&block);
            if a != b {
                r_jj.view_mut((b * kc, a * kc), (kc, kc)).copy_from(&block.transpose());
            }
        }
    }
    linalg::symmetrize(&mut r_jj);
    let min_eig = linalg::min_eigenvalue(&r_jj);
    if !(min_eig > 1e-12) {
        return Err(GlError::Singular {
            what: "truncated covariance of the active components (try a smaller truncation)",
        });
    }
    let x = linalg::spd_solve(&r_jj, &s_vec, "truncated covariance of the active components")?;

    let mut per_group_values = BTreeMap::new();
    let mut max_value = 0.0f64;
    for i in pattern.inactive(m) {
        let mut v = DVector::zeros(k);
        for (a, &j) in active.iter().enumerate() {
            let y = &bases[a] * x.rows(a * kc, kc);
            v += model.l2_covariance(i, j)? * y;
        }
        let lam = &model.systems[i].eigenvalues;
        for t in 0..k {
            v[t] *= lam[t].sqrt();
        }
        let value = v.norm() / weights[i];
        max_value = max_value.max(value);
        per_group_values.insert(i, value);
    }
    Ok(ConditionReport {
        per_group_values,
        max_value,
        verdict: Verdict::classify(max_value),
    })
}
