use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::consistency::{condition_value, refined_condition, ConditionReport, Verdict};
use crate::error::{GlError, Result};
use crate::gaussian::{analytic_condition, GaussianEigenSystem, TruncatedOperatorModel, DEFAULT_TRUNCATION};
use crate::linalg;
use crate::model::{default_pattern, BlockStructure, Dataset, EmpiricalMoments, PopulationModel, SparsityPattern};
use crate::rng::{self, StreamRng};
use crate::solver::{log_grid, population_group_lasso, GridSpec};

pub const DEFAULT_ATTEMPT_CAP: u64 = 100_000;

/// Number of leading eigenfunctions carrying the nonparametric targets.
pub const NONPARAMETRIC_TERMS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteModel {
    pub model: PopulationModel,
    pub blocks: BlockStructure,
    pub pattern: SparsityPattern,
}

fn random_subset(rng: &mut StreamRng, m: usize, k: usize) -> Vec<usize> {
    let mut picked = index::sample(rng, m, k).into_vec();
    picked.sort_unstable();
    picked
}

/// `Σ = GGᵀ` with each block rescaled to unit trace, `|J| = card_j` groups
/// drawn uniformly, loadings uniform on spheres of radius `U(1/3, 1)` and
/// noise `σ = 0.2 (wᵀΣw)^{1/2}`. Unit weights.
pub fn gen_finite_model(seed: u64, m: usize, group_size: usize, card_j: usize) -> Result<FiniteModel> {
    if m == 0 || group_size == 0 || card_j == 0 || card_j > m {
        return Err(GlError::InvalidInput(format!(
            "need m >= 1, group size >= 1 and 1 <= |J| <= m, got m={m}, size={group_size}, |J|={card_j}"
        )));
    }
    let blocks = BlockStructure::uniform(m, group_size)?;
    let p = blocks.dim();
    let mut r = rng::stream(seed, &[]);
    let sigma = loop {
        let g = DMatrix::from_fn(p, p, |_, _| r.sample::<f64, _>(StandardNormal));
        let mut s = &g * g.transpose();
        let mut scale = DVector::zeros(p);
        for j in 0..m {
            let range = blocks.range(j);
            let tr: f64 = range.clone().map(|a| s[(a, a)]).sum();
            for a in range {
                scale[a] = tr.sqrt().recip();
            }
        }
        s = DMatrix::from_fn(p, p, |a, b| s[(a, b)] * scale[a] * scale[b]);
        linalg::symmetrize(&mut s);
        if linalg::min_eigenvalue(&s) > 1e-10 {
            break s;
        }
    };
    let active = random_subset(&mut r, m, card_j);
    let mut w = DVector::zeros(p);
    for &j in &active {
        let range = blocks.range(j);
        let mut v = DVector::from_fn(range.len(), |_, _| r.sample::<f64, _>(StandardNormal));
        let radius = r.random_range(1.0 / 3.0..1.0);
        v *= radius / v.norm();
        w.rows_mut(range.start, range.len()).copy_from(&v);
    }
    let noise = 0.2 * w.dot(&(&sigma * &w)).sqrt();
    let model = PopulationModel::new(sigma, w, 0.0, noise)?;
    let pattern = SparsityPattern::new(active, m)?;
    Ok(FiniteModel { model, blocks, pattern })
}

/// Regimes targeted by rejection sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetVerdict {
    /// Strict condition holds.
    Strict,
    /// Weak condition violated and no population solution has the true
    /// pattern.
    ViolatedNoRefine,
    /// Weak condition violated, a positive refined value at a violating
    /// group and a window of `λ₀` where the population solution has the true
    /// pattern.
    ViolatedRefined,
}

/// Whether the population problem selects `J` somewhere on a 50-per-decade
/// grid spanning three decades below its `λ_max`.
pub fn population_window(fixture: &FiniteModel) -> Result<bool> {
    let s_xy = &fixture.model.sigma_xx * &fixture.model.w;
    let top = (0..fixture.blocks.num_groups())
        .map(|j| {
            let r = fixture.blocks.range(j);
            s_xy.rows(r.start, r.len()).norm() / fixture.blocks.weight(j)
        })
        .fold(0.0, f64::max);
    for lambda0 in log_grid(top, &GridSpec::per_decade(50, 1e-3)).into_iter().skip(1) {
        let sol = population_group_lasso(&fixture.model, &fixture.blocks, lambda0)?;
        if default_pattern(&sol.w, &fixture.blocks) == fixture.pattern {
            return Ok(true);
        }
    }
    Ok(false)
}

fn matches_target(fixture: &FiniteModel, report: &ConditionReport, target: TargetVerdict) -> Result<bool> {
    Ok(match target {
        TargetVerdict::Strict => report.verdict == Verdict::StrictHolds,
        TargetVerdict::ViolatedNoRefine => report.verdict == Verdict::Violated && !population_window(fixture)?,
        TargetVerdict::ViolatedRefined => {
            report.verdict == Verdict::Violated
                && refined_condition(&fixture.model, &fixture.blocks, &fixture.pattern)?
                    .values()
                    .any(|&v| v > 0.0)
                && population_window(fixture)?
        }
    })
}

#[derive(Debug, Clone)]
pub struct ConditionedModel {
    pub fixture: FiniteModel,
    pub report: ConditionReport,
    /// Models drawn, including the accepted one.
    pub attempts: u64,
    /// Seed passed to [`gen_finite_model`] for the accepted model.
    pub model_seed: u64,
}

/// Rejection-samples [`gen_finite_model`] (m = 4, size 2, |J| = 2) until the
/// model falls in the target regime. Attempt `k` uses seed
/// `derive_seed(seed, [k])`.
pub fn gen_finite_model_conditioned(seed: u64, target: TargetVerdict, cap: u64) -> Result<ConditionedModel> {
    for k in 0..cap {
        let model_seed = rng::derive_seed(seed, &[k]);
        let fixture = gen_finite_model(model_seed, 4, 2, 2)?;
        let report = condition_value(&fixture.model, &fixture.blocks, &fixture.pattern)?;
        if matches_target(&fixture, &report, target)? {
            return Ok(ConditionedModel {
                fixture,
                report,
                attempts: k + 1,
                model_seed,
            });
        }
    }
    Err(GlError::AttemptCapExceeded { attempts: cap as usize })
}

fn joint_factor(model: &PopulationModel) -> Result<DMatrix<f64>> {
    let p = model.dim();
    let s_xy = &model.sigma_xx * &model.w;
    let mut joint = DMatrix::zeros(p + 1, p + 1);
    joint.view_mut((0, 0), (p, p)).copy_from(&model.sigma_xx);
    joint.view_mut((0, p), (p, 1)).copy_from(&s_xy);
    joint.view_mut((p, 0), (1, p)).copy_from(&s_xy.transpose());
    joint[(p, p)] = model.w.dot(&s_xy) + model.sigma * model.sigma;
    Ok(linalg::cholesky(&joint, "joint covariance of (X, Y)")?.l())
}

/// Centered moments of `n` draws from the model, sampled exactly through the
/// Wishart law of the scatter matrix (Bartlett decomposition). Needs
/// `n > p + 1` and `σ > 0`.
pub fn sample_moments(model: &PopulationModel, n: usize, rng: &mut StreamRng) -> Result<EmpiricalMoments> {
    let p = model.dim();
    if n < p + 2 {
        return Err(GlError::InvalidInput(format!("need n >= {} samples, got {n}", p + 2)));
    }
    let l = joint_factor(model)?;
    let d = p + 1;
    let mut a = DMatrix::zeros(d, d);
    for i in 0..d {
        let chi = ChiSquared::new((n - 1 - i) as f64).expect("positive degrees of freedom");
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample(StandardNormal);
        }
    }
    let la = l * a;
    let scatter = &la * la.transpose() / n as f64;
    let s_xx = scatter.view((0, 0), (p, p)).into_owned();
    let s_xy = scatter.view((0, p), (p, 1)).column(0).into_owned();
    EmpiricalMoments::from_parts(scatter[(p, p)], s_xy, s_xx, n)
}

/// `n` i.i.d. rows `(X, Y)` from the model.
pub fn sample_dataset(model: &PopulationModel, n: usize, rng: &mut StreamRng) -> Result<Dataset> {
    let p = model.dim();
    let l = linalg::cholesky(&model.sigma_xx, "sigma_xx")?.l();
    let z = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let x = z * l.transpose();
    let noise = DVector::from_fn(n, |_, _| model.sigma * rng.sample::<f64, _>(StandardNormal));
    let y = &x * &model.w + noise.add_scalar(model.b);
    Dataset::new(x, y)
}

/// Additive model `Y = Σ_{j∈J} f_j(X_j) + ε` over Gaussian inputs with
/// Gaussian kernels `exp(−b(x − x')²)`.
#[derive(Debug, Clone)]
pub struct NonparametricModel {
    pub s: DMatrix<f64>,
    pub bandwidths: Vec<f64>,
    /// Coefficients of `f_j` on `e_0^j, …, e_9^j`; zero for inactive `j`.
    pub f_coords: Vec<Vec<f64>>,
    pub pattern: SparsityPattern,
    pub sigma: f64,
    systems: Vec<GaussianEigenSystem>,
}

/// `S = GGᵀ` rescaled to unit diagonal, bandwidths 1, two active components
/// drawn uniformly. Each `f_j` has coefficients `λ_k^{1/2} z_k` on the first
/// ten eigenfunctions, with `z` standard normal projected orthogonally to
/// `(E φ_k)_k`, so `f_j` lies in the range of the covariance operator and
/// has RKHS norm `‖z‖`. Noise `σ = 0.2 Var(Σ f_j)^{1/2}`.
pub fn gen_nonparametric_model(seed: u64, m: usize) -> Result<NonparametricModel> {
    if m < 2 {
        return Err(GlError::InvalidInput(format!("need at least two components, got {m}")));
    }
    let mut r = rng::stream(seed, &[]);
    let s = loop {
        let g = DMatrix::from_fn(m, m, |_, _| r.sample::<f64, _>(StandardNormal));
        let raw = &g * g.transpose();
        let mut s = DMatrix::from_fn(m, m, |a, b| raw[(a, b)] / (raw[(a, a)] * raw[(b, b)]).sqrt());
        linalg::symmetrize(&mut s);
        for a in 0..m {
            s[(a, a)] = 1.0;
        }
        if linalg::min_eigenvalue(&s) > 1e-10 {
            break s;
        }
    };
    let bandwidths = vec![1.0; m];
    let active = random_subset(&mut r, m, 2);
    let ops = TruncatedOperatorModel::new(&s, &bandwidths, NONPARAMETRIC_TERMS)?;
    let mut f_coords = vec![vec![0.0; NONPARAMETRIC_TERMS]; m];
    for &j in &active {
        let mean = &ops.means[j];
        let unit = mean / mean.norm();
        let mut z = DVector::from_fn(NONPARAMETRIC_TERMS, |_, _| r.sample::<f64, _>(StandardNormal));
        z -= &unit * unit.dot(&z);
        let lambdas = &ops.systems[j].eigenvalues;
        f_coords[j] = (0..NONPARAMETRIC_TERMS).map(|k| lambdas[k].sqrt() * z[k]).collect();
    }
    // φ-coordinates of f_j are λ_k^{1/2} θ_k.
    let phi: Vec<DVector<f64>> = (0..m)
        .map(|j| DVector::from_fn(NONPARAMETRIC_TERMS, |k, _| ops.systems[j].eigenvalues[k].sqrt() * f_coords[j][k]))
        .collect();
    let mut variance = 0.0;
    for &i in &active {
        for &j in &active {
            variance += phi[i].dot(&(ops.l2_covariance(i, j)? * &phi[j]));
        }
    }
    let pattern = SparsityPattern::new(active, m)?;
    Ok(NonparametricModel {
        s,
        bandwidths,
        f_coords,
        pattern,
        sigma: 0.2 * variance.max(0.0).sqrt(),
        systems: ops.systems,
    })
}

impl NonparametricModel {
    pub fn num_components(&self) -> usize {
        self.s.nrows()
    }

    /// `f_j(x)`.
    pub fn component_value(&self, j: usize, x: f64) -> f64 {
        let coords = &self.f_coords[j];
        if coords.iter().all(|&c| c == 0.0) {
            return 0.0;
        }
        self.systems[j].eigenfunctions(x).iter().zip(coords).map(|(e, c)| e * c).sum()
    }

    /// Inputs, response and the noiseless signal `Σ_j f_j(X_j)` per row.
    pub fn sample(&self, n: usize, rng: &mut StreamRng) -> Result<(Dataset, DVector<f64>)> {
        let m = self.num_components();
        let l = linalg::cholesky(&self.s, "input covariance S")?.l();
        let z = DMatrix::from_fn(n, m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = z * l.transpose();
        let signal = DVector::from_fn(n, |i, _| (0..m).map(|j| self.component_value(j, x[(i, j)])).sum());
        let y = DVector::from_fn(n, |i, _| signal[i] + self.sigma * rng.sample::<f64, _>(StandardNormal));
        Ok((Dataset::new(x, y)?, signal))
    }

    /// Closed-form condition values with unit weights.
    pub fn analytic_condition(&self, truncation: usize) -> Result<ConditionReport> {
        let m = self.num_components();
        analytic_condition(&self.s, &self.bandwidths, &vec![1.0; m], &self.pattern, &self.f_coords, truncation)
    }

    pub fn analytic_condition_default(&self) -> Result<ConditionReport> {
        self.analytic_condition(DEFAULT_TRUNCATION)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    FiniteConsistent,
    FiniteWeakViolated,
    FiniteBoundaryRefined,
    Nonparametric,
}

impl Scenario {
    pub fn target(self) -> Option<TargetVerdict> {
        match self {
            Scenario::FiniteConsistent => Some(TargetVerdict::Strict),
            Scenario::FiniteWeakViolated => Some(TargetVerdict::ViolatedNoRefine),
            Scenario::FiniteBoundaryRefined => Some(TargetVerdict::ViolatedRefined),
            Scenario::Nonparametric => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Scenario::FiniteConsistent => "finite-consistent",
            Scenario::FiniteWeakViolated => "finite-weak-violated",
            Scenario::FiniteBoundaryRefined => "finite-boundary-refined",
            Scenario::Nonparametric => "nonparametric",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = GlError;

    fn from_str(s: &str) -> Result<Self> {
        [
            Scenario::FiniteConsistent,
            Scenario::FiniteWeakViolated,
            Scenario::FiniteBoundaryRefined,
            Scenario::Nonparametric,
        ]
        .into_iter()
        .find(|sc| sc.name() == s)
        .ok_or_else(|| GlError::InvalidInput(format!("unknown scenario '{s}'")))
    }
}
