//! Shared data model: block structures, population models, datasets,
//! centered empirical moments and sparsity patterns.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GlError, Result};
use crate::linalg;

/// Relative threshold used when reading the sparsity pattern of an iterate.
pub const PATTERN_REL_TOL: f64 = 1e-8;

/// Partition of `p` covariates into `m` contiguous groups, each with a
/// positive penalty weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BlockSpec", into = "BlockSpec")]
pub struct BlockStructure {
    sizes: Vec<usize>,
    weights: Vec<f64>,
    offsets: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct BlockSpec {
    group_sizes: Vec<usize>,
    weights: Vec<f64>,
}

impl TryFrom<BlockSpec> for BlockStructure {
    type Error = GlError;
    fn try_from(spec: BlockSpec) -> Result<Self> {
        BlockStructure::new(spec.group_sizes, spec.weights)
    }
}

impl From<BlockStructure> for BlockSpec {
    fn from(b: BlockStructure) -> Self {
        BlockSpec {
            group_sizes: b.sizes,
            weights: b.weights,
        }
    }
}

impl BlockStructure {
    pub fn new(sizes: Vec<usize>, weights: Vec<f64>) -> Result<Self> {
        if sizes.is_empty() {
            return Err(GlError::InvalidInput("at least one group is required".into()));
        }
        if sizes.len() != weights.len() {
            return Err(GlError::DimensionMismatch {
                axis: "weights",
                expected: sizes.len(),
                found: weights.len(),
            });
        }
        if let Some(j) = sizes.iter().position(|&s| s == 0) {
            return Err(GlError::InvalidInput(format!("group {} has size zero", j + 1)));
        }
        if let Some(j) = weights.iter().position(|&d| !(d > 0.0 && d.is_finite())) {
            return Err(GlError::InvalidInput(format!(
                "group {} has non-positive weight {}",
                j + 1,
                weights[j]
            )));
        }
        let mut offsets = Vec::with_capacity(sizes.len() + 1);
        offsets.push(0);
        for s in &sizes {
            offsets.push(offsets.last().unwrap() + s);
        }
        Ok(Self {
            sizes,
            weights,
            offsets,
        })
    }

    /// `m` groups of equal size with unit weights.
    pub fn uniform(m: usize, size: usize) -> Result<Self> {
        Self::new(vec![size; m], vec![1.0; m])
    }

    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        Self::new(self.sizes.clone(), weights)
    }

    pub fn num_groups(&self) -> usize {
        self.sizes.len()
    }

    pub fn dim(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, j: usize) -> f64 {
        self.weights[j]
    }

    pub fn size(&self, j: usize) -> usize {
        self.sizes[j]
    }

    pub fn range(&self, j: usize) -> Range<usize> {
        self.offsets[j]..self.offsets[j + 1]
    }

    /// Covariate indices belonging to the given groups, in group order.
    pub fn indices(&self, groups: impl IntoIterator<Item = usize>) -> Vec<usize> {
        groups.into_iter().flat_map(|j| self.range(j)).collect()
    }

    pub fn group_norm(&self, w: &DVector<f64>, j: usize) -> f64 {
        w.rows(self.range(j).start, self.size(j)).norm()
    }

    pub fn group_norms(&self, w: &DVector<f64>) -> Vec<f64> {
        (0..self.num_groups()).map(|j| self.group_norm(w, j)).collect()
    }

    /// Weighted block ℓ1-norm `Σ d_j ‖w_j‖`.
    pub fn block_l1(&self, w: &DVector<f64>) -> f64 {
        (0..self.num_groups())
            .map(|j| self.weights[j] * self.group_norm(w, j))
            .sum()
    }

    pub fn check_dim(&self, p: usize, axis: &'static str) -> Result<()> {
        if p != self.dim() {
            return Err(GlError::DimensionMismatch {
                axis,
                expected: self.dim(),
                found: p,
            });
        }
        Ok(())
    }
}

/// Set of active groups (0-based internally, printed 1-based).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct SparsityPattern {
    active: BTreeSet<usize>,
}

impl SparsityPattern {
    pub fn new(active: impl IntoIterator<Item = usize>, num_groups: usize) -> Result<Self> {
        let active: BTreeSet<usize> = active.into_iter().collect();
        if let Some(&j) = active.iter().find(|&&j| j >= num_groups) {
            return Err(GlError::InvalidInput(format!(
                "group index {} out of range 1..={}",
                j + 1,
                num_groups
            )));
        }
        Ok(Self { active })
    }

    /// Parses a comma-separated list of 1-based group indices.
    pub fn parse_one_based(s: &str, num_groups: usize) -> Result<Self> {
        let mut out = Vec::new();
        for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let k: usize = tok
                .parse()
                .map_err(|_| GlError::InvalidInput(format!("bad group index '{tok}'")))?;
            if k == 0 {
                return Err(GlError::InvalidInput("group indices are 1-based".into()));
            }
            out.push(k - 1);
        }
        Self::new(out, num_groups)
    }

    pub fn contains(&self, j: usize) -> bool {
        self.active.contains(&j)
    }

    pub fn active(&self) -> impl Iterator<Item = usize> + '_ {
        self.active.iter().copied()
    }

    pub fn active_vec(&self) -> Vec<usize> {
        self.active.iter().copied().collect()
    }

    pub fn inactive(&self, num_groups: usize) -> Vec<usize> {
        (0..num_groups).filter(|j| !self.active.contains(j)).collect()
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn one_based(&self) -> Vec<usize> {
        self.active.iter().map(|j| j + 1).collect()
    }

    /// Bit string with one character per group, group 1 first.
    pub fn bits(&self, num_groups: usize) -> String {
        (0..num_groups)
            .map(|j| if self.contains(j) { '1' } else { '0' })
            .collect()
    }
}

impl fmt::Display for SparsityPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.one_based().iter().map(|k| k.to_string()).collect();
        write!(f, "{{{}}}", parts.join(","))
    }
}

/// Group `j` is active iff `‖w_j‖ > tol`.
pub fn pattern_of(w: &DVector<f64>, blocks: &BlockStructure, tol: f64) -> SparsityPattern {
    let active = (0..blocks.num_groups()).filter(|&j| blocks.group_norm(w, j) > tol);
    SparsityPattern {
        active: active.collect(),
    }
}

/// Pattern read at the default threshold `1e-8·‖w‖`.
pub fn default_pattern(w: &DVector<f64>, blocks: &BlockStructure) -> SparsityPattern {
    pattern_of(w, blocks, PATTERN_REL_TOL * w.norm())
}

/// Ground-truth joint distribution: `X ~ N(0, Σ_XX)`, `Y = wᵀX + b + ε`,
/// `ε ~ N(0, σ²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationModel {
    pub sigma_xx: DMatrix<f64>,
    pub w: DVector<f64>,
    pub b: f64,
    pub sigma: f64,
}

impl PopulationModel {
    pub fn new(sigma_xx: DMatrix<f64>, w: DVector<f64>, b: f64, sigma: f64) -> Result<Self> {
        let p = sigma_xx.nrows();
        if sigma_xx.ncols() != p {
            return Err(GlError::DimensionMismatch {
                axis: "sigma_xx columns",
                expected: p,
                found: sigma_xx.ncols(),
            });
        }
        if w.len() != p {
            return Err(GlError::DimensionMismatch {
                axis: "loading vector",
                expected: p,
                found: w.len(),
            });
        }
        if !(sigma >= 0.0) {
            return Err(GlError::InvalidInput(format!("noise level {sigma} must be >= 0")));
        }
        if linalg::max_asymmetry(&sigma_xx) > 1e-10 {
            return Err(GlError::InvalidInput("sigma_xx is not symmetric".into()));
        }
        let min_eig = linalg::min_eigenvalue(&sigma_xx);
        if !(min_eig > 0.0) {
            return Err(GlError::NotPositiveDefinite {
                what: "sigma_xx",
                min_eigenvalue: min_eig,
            });
        }
        Ok(Self {
            sigma_xx,
            w,
            b,
            sigma,
        })
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    /// `E(wᵀX)² = wᵀΣw` (inputs have zero mean).
    pub fn signal_variance(&self) -> f64 {
        self.w.dot(&(&self.sigma_xx * &self.w))
    }

    /// True pattern `J = {j : w_j ≠ 0}`.
    pub fn pattern(&self, blocks: &BlockStructure) -> SparsityPattern {
        pattern_of(&self.w, blocks, 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(GlError::DimensionMismatch {
                axis: "rows (x vs y)",
                expected: y.len(),
                found: x.nrows(),
            });
        }
        if y.len() < 2 {
            return Err(GlError::InvalidInput("at least two samples are required".into()));
        }
        Ok(Self { x, y })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }
}

/// Centered second moments `Σ̂_YY`, `Σ̂_XY`, `Σ̂_XX`.
///
/// `n == 0` marks population moments built from a [`PopulationModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMoments {
    pub s_yy: f64,
    pub s_xy: DVector<f64>,
    pub s_xx: DMatrix<f64>,
    pub n: usize,
    pub x_mean: DVector<f64>,
    pub y_mean: f64,
}

impl EmpiricalMoments {
    /// Builds moments directly, symmetrizing `s_xx` and rejecting matrices
    /// with eigenvalues below `-1e-10`.
    pub fn from_parts(s_yy: f64, s_xy: DVector<f64>, mut s_xx: DMatrix<f64>, n: usize) -> Result<Self> {
        let p = s_xy.len();
        if s_xx.nrows() != p || s_xx.ncols() != p {
            return Err(GlError::DimensionMismatch {
                axis: "s_xx",
                expected: p,
                found: s_xx.nrows(),
            });
        }
        linalg::symmetrize(&mut s_xx);
        let min_eig = linalg::min_eigenvalue(&s_xx);
        if min_eig < -1e-10 {
            return Err(GlError::NotPositiveSemidefinite {
                what: "s_xx",
                min_eigenvalue: min_eig,
            });
        }
        Ok(Self {
            s_yy,
            s_xy,
            s_xx,
            n,
            x_mean: DVector::zeros(p),
            y_mean: 0.0,
        })
    }

    /// Population moments of the model: `Σ_XX`, `Σ_XX w`, `wᵀΣw + σ²`.
    pub fn population(model: &PopulationModel) -> Self {
        let s_xy = &model.sigma_xx * &model.w;
        Self {
            s_yy: model.w.dot(&s_xy) + model.sigma * model.sigma,
            s_xy,
            s_xx: model.sigma_xx.clone(),
            n: 0,
            x_mean: DVector::zeros(model.dim()),
            y_mean: model.b,
        }
    }

    pub fn dim(&self) -> usize {
        self.s_xy.len()
    }

    /// Intercept `b̂ = ȳ − x̄ᵀŵ` for a fitted loading vector.
    pub fn intercept(&self, w: &DVector<f64>) -> f64 {
        self.y_mean - self.x_mean.dot(w)
    }

    /// Objective `½Σ̂_YY − Σ̂_XYᵀw + ½wᵀΣ̂_XXw` without the penalty.
    pub fn loss(&self, w: &DVector<f64>) -> f64 {
        0.5 * self.s_yy - self.s_xy.dot(w) + 0.5 * w.dot(&(&self.s_xx * w))
    }

    /// Gradient of the loss, `Σ̂_XX w − Σ̂_XY`.
    pub fn gradient(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.s_xx * w - &self.s_xy
    }
}

/// Centering projection `Π_n = I_n − (1/n) 1 1ᵀ`.
pub fn centering_matrix(n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::from_element(n, n, -1.0 / n as f64);
    for i in 0..n {
        m[(i, i)] += 1.0;
    }
    m
}

/// Columns of `x` with their means removed.
pub fn center_columns(x: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let n = x.nrows() as f64;
    let means = DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n));
    let mut out = x.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col.add_scalar_mut(-means[j]);
    }
    (out, means)
}

pub fn empirical_moments(data: &Dataset, blocks: &BlockStructure) -> Result<EmpiricalMoments> {
    blocks.check_dim(data.p(), "covariate columns")?;
    let n = data.n();
    let nf = n as f64;
    let (xc, x_mean) = center_columns(&data.x);
    let y_mean = data.y.sum() / nf;
    let yc = data.y.add_scalar(-y_mean);

    let mut s_xx = xc.tr_mul(&xc) / nf;
    linalg::symmetrize(&mut s_xx);
    let s_xy = xc.tr_mul(&yc) / nf;
    let s_yy = yc.norm_squared() / nf;
    Ok(EmpiricalMoments {
        s_yy,
        s_xy,
        s_xx,
        n,
        x_mean,
        y_mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_block() -> BlockStructure {
        BlockStructure::uniform(1, 1).unwrap()
    }

    #[test]
    fn constant_column_has_zero_variance() {
        let x = DMatrix::from_element(5, 1, 1.0);
        let y = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0, 0.0]);
        let mom = empirical_moments(&Dataset::new(x, y).unwrap(), &one_block()).unwrap();
        assert_eq!(mom.s_xx[(0, 0)], 0.0);
        assert_eq!(mom.s_xy[0], 0.0);
    }

    #[test]
    fn two_point_hand_computation() {
        let x = DMatrix::from_column_slice(2, 1, &[0.0, 2.0]);
        let y = DVector::from_vec(vec![0.0, 2.0]);
        let mom = empirical_moments(&Dataset::new(x, y).unwrap(), &one_block()).unwrap();
        assert!((mom.s_xx[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((mom.s_xy[0] - 1.0).abs() < 1e-15);
        assert!((mom.s_yy - 1.0).abs() < 1e-15);
        assert!((mom.intercept(&DVector::from_element(1, 1.0))).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_names_axis() {
        let x = DMatrix::zeros(4, 3);
        let y = DVector::zeros(4);
        let blocks = BlockStructure::uniform(2, 2).unwrap();
        let err = empirical_moments(&Dataset::new(x, y).unwrap(), &blocks).unwrap_err();
        assert!(matches!(
            err,
            GlError::DimensionMismatch {
                axis: "covariate columns",
                expected: 4,
                found: 3
            }
        ));
        let err = Dataset::new(DMatrix::zeros(3, 1), DVector::zeros(4)).unwrap_err();
        assert!(matches!(err, GlError::DimensionMismatch { .. }));
    }

    #[test]
    fn pattern_threshold_is_strict() {
        let blocks = BlockStructure::uniform(2, 2).unwrap();
        let w = DVector::zeros(4);
        assert!(pattern_of(&w, &blocks, 1e-8).is_empty());

        let w = DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(pattern_of(&w, &blocks, 1e-8).active_vec(), vec![0]);

        let w = DVector::from_vec(vec![1.0, 0.0, 0.3, 0.4]);
        assert_eq!(pattern_of(&w, &blocks, 0.5).active_vec(), vec![0]);
        assert_eq!(pattern_of(&w, &blocks, 0.49).active_vec(), vec![0, 1]);
    }

    #[test]
    fn block_structure_validation() {
        assert!(BlockStructure::new(vec![], vec![]).is_err());
        assert!(BlockStructure::new(vec![1, 0], vec![1.0, 1.0]).is_err());
        assert!(BlockStructure::new(vec![1, 2], vec![1.0, 0.0]).is_err());
        assert!(BlockStructure::new(vec![1, 2], vec![1.0]).is_err());
        let b = BlockStructure::new(vec![1, 3, 2], vec![1.0, 2.0, 0.5]).unwrap();
        assert_eq!(b.dim(), 6);
        assert_eq!(b.range(1), 1..4);
        assert_eq!(b.indices([0, 2]), vec![0, 4, 5]);
    }

    #[test]
    fn pattern_parsing() {
        let j = SparsityPattern::parse_one_based("1, 3", 4).unwrap();
        assert_eq!(j.active_vec(), vec![0, 2]);
        assert_eq!(j.bits(4), "1010");
        assert_eq!(j.to_string(), "{1,3}");
        assert!(SparsityPattern::parse_one_based("0", 4).is_err());
        assert!(SparsityPattern::parse_one_based("5", 4).is_err());
    }

    #[test]
    fn population_model_rejects_indefinite() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(PopulationModel::new(s, DVector::zeros(2), 0.0, 0.1).is_err());
    }

    proptest! {
        #[test]
        fn centering_is_idempotent_projection(n in 1usize..40) {
            let pi = centering_matrix(n);
            let diff = &pi * &pi - &pi;
            prop_assert!(diff.norm() <= 1e-12);
            let ones = DVector::from_element(n, 1.0);
            prop_assert!((&pi * ones).norm() <= 1e-12);
        }

        #[test]
        fn moments_invariant_to_shifts(
            vals in proptest::collection::vec(-3.0f64..3.0, 30),
            shift_x in -50.0f64..50.0,
            shift_y in -50.0f64..50.0,
        ) {
            let blocks = BlockStructure::uniform(2, 1).unwrap();
            let x = DMatrix::from_fn(10, 2, |i, j| vals[i * 2 + j]);
            let y = DVector::from_fn(10, |i, _| vals[20 + i]);
            let base = empirical_moments(&Dataset::new(x.clone(), y.clone()).unwrap(), &blocks).unwrap();
            let shifted = empirical_moments(
                &Dataset::new(x.add_scalar(shift_x), y.add_scalar(shift_y)).unwrap(),
                &blocks,
            ).unwrap();
            prop_assert!((base.s_xx - &shifted.s_xx).abs().max() <= 1e-10);
            prop_assert!((base.s_xy - &shifted.s_xy).abs().max() <= 1e-10);
            prop_assert!((base.s_yy - shifted.s_yy).abs() <= 1e-10);
            prop_assert_eq!(linalg::max_asymmetry(&shifted.s_xx), 0.0);
        }

        #[test]
        fn gram_route_matches_projection_route(vals in proptest::collection::vec(-2.0f64..2.0, 24)) {
            let blocks = BlockStructure::uniform(1, 3).unwrap();
            let x = DMatrix::from_fn(6, 3, |i, j| vals[i * 3 + j]);
            let y = DVector::from_fn(6, |i, _| vals[18 + i]);
            let mom = empirical_moments(&Dataset::new(x.clone(), y.clone()).unwrap(), &blocks).unwrap();
            let pi = centering_matrix(6);
            let s_xx = x.transpose() * &pi * &x / 6.0;
            let s_xy = x.transpose() * &pi * &y / 6.0;
            prop_assert!((mom.s_xx - s_xx).abs().max() <= 1e-12);
            prop_assert!((mom.s_xy - s_xy).abs().max() <= 1e-12);
        }
    }
}
