use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::rng;

fn random_model(seed: u64, sizes: &[usize], active: &[usize]) -> (PopulationModel, BlockStructure, SparsityPattern) {
    let mut r = rng::stream(seed, &[17]);
    let weights: Vec<f64> = sizes.iter().map(|_| r.random_range(0.5..2.0)).collect();
    let blocks = BlockStructure::new(sizes.to_vec(), weights).unwrap();
    let p = blocks.dim();
    let g = DMatrix::from_fn(p, p, |_, _| r.sample::<f64, _>(StandardNormal));
    let mut sigma = &g * g.transpose() / p as f64 + DMatrix::identity(p, p) * 0.2;
    linalg::symmetrize(&mut sigma);
    let mut w = DVector::zeros(p);
    for &j in active {
        for k in blocks.range(j) {
            w[k] = r.sample::<f64, _>(StandardNormal);
        }
    }
    let pattern = SparsityPattern::new(active.iter().copied(), sizes.len()).unwrap();
    (PopulationModel::new(sigma, w, 0.0, 1.0).unwrap(), blocks, pattern)
}

fn lasso_model(sigma: &[f64], w: &[f64]) -> PopulationModel {
    let p = w.len();
    PopulationModel::new(DMatrix::from_row_slice(p, p, sigma), DVector::from_column_slice(w), 0.0, 1.0).unwrap()
}

#[test]
fn zero_cross_covariance_gives_zero_values() {
    let sigma = DMatrix::from_row_slice(4, 4, &[
        1.0, 0.3, 0.0, 0.0, //
        0.3, 1.0, 0.0, 0.0, //
        0.0, 0.0, 2.0, 0.5, //
        0.0, 0.0, 0.5, 1.0,
    ]);
    let model = PopulationModel::new(sigma, DVector::from_vec(vec![1.0, -1.0, 0.0, 0.0]), 0.0, 1.0).unwrap();
    let blocks = BlockStructure::uniform(2, 2).unwrap();
    let pattern = SparsityPattern::new([0], 2).unwrap();
    let rep = condition_value(&model, &blocks, &pattern).unwrap();
    assert_eq!(rep.max_value, 0.0);
    assert_eq!(rep.verdict, Verdict::StrictHolds);
    assert_eq!(loading_free_condition(&model, &blocks, &pattern, 10).unwrap(), 0.0);
    assert_eq!(spectral_upper_bound(&model, &blocks, &pattern).unwrap(), 0.0);
    assert!(sdp_upper_bound(&model, &blocks, &pattern, 1).unwrap().0 < 1e-6);
}

#[test]
fn two_variable_lasso_value_is_correlation() {
    for rho in [-0.9, -0.3, 0.0, 0.4, 0.95] {
        for w1 in [2.0, -0.1] {
            let model = lasso_model(&[1.0, rho, rho, 1.0], &[w1, 0.0]);
            let blocks = BlockStructure::uniform(2, 1).unwrap();
            let pattern = SparsityPattern::new([0], 2).unwrap();
            let rep = condition_value(&model, &blocks, &pattern).unwrap();
            assert!((rep.max_value - rho.abs()).abs() < 1e-14);
            assert!((rep.per_group_values[&1] - rho.abs()).abs() < 1e-14);
        }
    }
}

#[test]
fn verdict_thresholds() {
    assert_eq!(Verdict::classify(0.5), Verdict::StrictHolds);
    assert_eq!(Verdict::classify(1.0 - 2e-6), Verdict::StrictHolds);
    assert_eq!(Verdict::classify(1.0 - 5e-7), Verdict::WeakBoundary);
    assert_eq!(Verdict::classify(1.0 + 5e-7), Verdict::WeakBoundary);
    assert_eq!(Verdict::classify(1.0 + 2e-6), Verdict::Violated);
}

#[test]
fn empty_pattern_and_zero_loading_are_errors() {
    let (model, blocks, _) = random_model(1, &[2, 2, 1], &[0]);
    let empty = SparsityPattern::new([], 3).unwrap();
    assert!(matches!(condition_value(&model, &blocks, &empty), Err(GlError::EmptyPattern)));
    let with_zero = SparsityPattern::new([0, 1], 3).unwrap();
    assert!(matches!(
        condition_value(&model, &blocks, &with_zero),
        Err(GlError::ZeroNorm { group: 2, .. })
    ));
}

#[test]
fn full_pattern_has_no_inactive_groups() {
    let (model, blocks, pattern) = random_model(2, &[2, 1], &[0, 1]);
    let rep = condition_value(&model, &blocks, &pattern).unwrap();
    assert!(rep.per_group_values.is_empty());
    assert_eq!(rep.verdict, Verdict::StrictHolds);
    let pp = pattern_probability_limit(&model, &blocks, &pattern, 1.0, 10, 0).unwrap();
    assert_eq!(pp.estimate, 1.0);
    assert_eq!(pp.se, 0.0);
}

/// Boundary instance with `Σ_JJ = [[1, ½], [½, 1]]`, `w_J ∝ e₁` and cross
/// covariance `(a, 2a − 3/2)`, which puts the inactive group exactly on the
/// boundary. By hand the refined value is `4(1 − a)/3`.
fn boundary_model(a: f64) -> PopulationModel {
    let b = 2.0 * a - 1.5;
    lasso_model(&[1.0, 0.5, a, 0.5, 1.0, b, a, b, 10.0], &[1.0, 0.0, 0.0])
}

#[test]
fn refined_value_matches_hand_computation() {
    let blocks = BlockStructure::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
    let pattern = SparsityPattern::new([0], 2).unwrap();
    for a in [0.75, 0.2, 1.6] {
        let model = boundary_model(a);
        let rep = condition_value(&model, &blocks, &pattern).unwrap();
        assert!((rep.max_value - 1.0).abs() < 1e-12);
        assert_eq!(rep.verdict, Verdict::WeakBoundary);
        let refined = refined_condition(&model, &blocks, &pattern).unwrap();
        assert!((refined[&1] - 4.0 * (1.0 - a) / 3.0).abs() < 1e-12, "a={a}");
    }
}

#[test]
fn refined_value_vanishes_for_scalar_groups() {
    let model = lasso_model(&[1.0, 0.5, 0.5, 0.5, 1.0, 0.5, 0.5, 0.5, 1.0], &[1.0, 1.0, 0.0]);
    let blocks = BlockStructure::uniform(3, 1).unwrap();
    let pattern = SparsityPattern::new([0, 1], 3).unwrap();
    let rep = condition_value(&model, &blocks, &pattern).unwrap();
    assert!(rep.max_value < 1.0);
    assert!(refined_condition(&model, &blocks, &pattern).unwrap().is_empty());

    // Rescale the cross covariance so the value sits at 1.
    let k = 1.0 / rep.max_value;
    let c = 0.5 * k;
    let boundary = lasso_model(&[1.0, 0.5, c, 0.5, 1.0, c, c, c, 4.0], &[1.0, 1.0, 0.0]);
    let refined = refined_condition(&boundary, &blocks, &pattern).unwrap();
    assert_eq!(refined.len(), 1);
    assert!(refined[&2].abs() < 1e-14);
}

#[test]
fn single_active_group_matches_svd() {
    for seed in 0..10 {
        let (model, blocks, pattern) = random_model(seed, &[3, 2, 2], &[0]);
        let lf = loading_free_per_group(&model, &blocks, &pattern, DEFAULT_RESTARTS).unwrap();
        for (i, v) in lf {
            let ri = blocks.indices([i]);
            let rj = blocks.indices([0]);
            let s_ij = linalg::submatrix(&model.sigma_xx, &ri, &rj);
            let s_jj = linalg::submatrix(&model.sigma_xx, &rj, &rj);
            let m = s_ij * s_jj.try_inverse().unwrap() * blocks.weight(0) / blocks.weight(i);
            let svd = m.svd(false, false).singular_values.max();
            assert!((v - svd).abs() < 1e-8);
        }
    }
}

#[test]
fn all_scalar_groups_give_lasso_closed_form() {
    for seed in 0..20 {
        let (model, blocks, pattern) = random_model(seed, &[1, 1, 1, 1, 1], &[0, 2, 3]);
        let j = pattern.active_vec();
        let s_jj_inv = linalg::submatrix(&model.sigma_xx, &j, &j).try_inverse().unwrap();
        for i in pattern.inactive(5) {
            let row = linalg::submatrix(&model.sigma_xx, &[i], &j) * &s_jj_inv;
            let closed: f64 = j.iter().enumerate().map(|(k, &g)| row[k].abs() * blocks.weight(g)).sum::<f64>()
                / blocks.weight(i);
            let (sdp, sol) = sdp_upper_bound(&model, &blocks, &pattern, i).unwrap();
            assert!((sdp - closed).abs() < 1e-6, "seed {seed}: {sdp} vs {closed}");
            assert!(sol.gap <= 1e-5 * (1.0 + sol.primal));
            let lf = loading_free_per_group(&model, &blocks, &pattern, 10).unwrap();
            let lf_i = lf.iter().find(|(g, _)| *g == i).unwrap().1;
            assert!((lf_i - closed).abs() < 1e-8);
        }
        let closed_max = spectral_upper_bound(&model, &blocks, &pattern).unwrap();
        let lf = loading_free_condition(&model, &blocks, &pattern, 10).unwrap();
        assert!((closed_max - lf).abs() < 1e-8);
    }
}

#[test]
fn diagonal_cost_has_trace_optimum() {
    let a = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 2.0, 1.5, 0.1]));
    let sol = sdp_bound_matrix(&a, &[1, 1, 1, 1]).unwrap();
    assert!((sol.dual - 4.1).abs() < 1e-5);
    for (l, d) in sol.lambda.iter().zip([0.5, 2.0, 1.5, 0.1]) {
        assert!((l - d).abs() < 1e-5);
    }
}

#[test]
fn sdp_dual_is_feasible_and_primal_is_attained() {
    for seed in 0..30u64 {
        let mut r = rng::stream(seed, &[99]);
        let sizes = [2usize, 3, 1, 2];
        let q: usize = sizes.iter().sum();
        let b = DMatrix::from_fn(3, q, |_, _| r.sample::<f64, _>(StandardNormal));
        let a = b.transpose() * &b;
        let sol = sdp_bound_matrix(&a, &sizes).unwrap();
        let mut slack = -a.clone();
        let mut off = 0;
        for (j, &s) in sizes.iter().enumerate() {
            for t in off..off + s {
                slack[(t, t)] += sol.lambda[j];
            }
            off += s;
        }
        assert!(linalg::min_eigenvalue(&slack) > -1e-9);
        assert!((sol.lambda.iter().sum::<f64>() - sol.dual).abs() < 1e-9 * sol.dual);
        assert!(sol.primal <= sol.dual + 1e-9);
        assert!(sol.gap <= 1e-5 * (1.0 + sol.primal));
    }
}

#[test]
fn sdp_rejects_active_group() {
    let (model, blocks, pattern) = random_model(3, &[2, 2, 2], &[0, 1]);
    assert!(sdp_upper_bound(&model, &blocks, &pattern, 0).is_err());
    assert!(sdp_upper_bound(&model, &blocks, &pattern, 2).is_ok());
}

#[test]
fn bound_sandwich_on_random_instances() {
    for seed in 0..60u64 {
        let (model, blocks, pattern) = random_model(1000 + seed, &[2, 3, 1, 2, 2], &[0, 1, 3]);
        let value = condition_value(&model, &blocks, &pattern).unwrap().max_value;
        let per = loading_free_per_group(&model, &blocks, &pattern, 20).unwrap();
        let lf = per.iter().map(|p| p.1).fold(0.0, f64::max);
        let spectral = spectral_upper_bound(&model, &blocks, &pattern).unwrap();
        assert!(value <= lf + 1e-10);
        assert!(lf <= spectral + 1e-10);
        let mut sdp_max = 0.0f64;
        for &(i, v) in &per {
            let (sdp, _) = sdp_upper_bound(&model, &blocks, &pattern, i).unwrap();
            assert!(v <= sdp + 1e-9, "seed {seed} group {i}: {v} > {sdp}");
            sdp_max = sdp_max.max(sdp);
        }
        assert!(sdp_max <= spectral + 1e-9);
    }
}

/// `Φ(b) − Φ(a)` by composite Simpson integration of the normal density.
fn normal_interval(a: f64, b: f64) -> f64 {
    let n = 20_000;
    let h = (b - a) / n as f64;
    let f = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = f(a) + f(b);
    for k in 1..n {
        s += f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

#[test]
fn scalar_pattern_probability_matches_normal_interval() {
    // J = {1}, inactive scalar group 2; t ~ N(0, 1 − ρ²), offset ρ·sign(w₁).
    let rho = 0.6;
    let model = PopulationModel::new(
        DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]),
        DVector::from_vec(vec![1.0, 0.0]),
        0.0,
        0.8,
    )
    .unwrap();
    let blocks = BlockStructure::uniform(2, 1).unwrap();
    let pattern = SparsityPattern::new([0], 2).unwrap();
    for lambda0 in [0.3, 1.0, 3.0] {
        let scale = model.sigma / lambda0 * (1.0 - rho * rho).sqrt();
        let exact = normal_interval((rho - 1.0) / scale, (rho + 1.0) / scale);
        let pp = pattern_probability_limit(&model, &blocks, &pattern, lambda0, 200_000, 5).unwrap();
        assert!((pp.estimate - exact).abs() < 4.0 * pp.se.max(1e-4), "{lambda0}: {} vs {exact}", pp.estimate);
    }
}

#[test]
fn pattern_probability_limits_in_lambda0() {
    let (model, blocks, pattern) = random_model(7, &[2, 2, 2], &[0]);
    let value = condition_value(&model, &blocks, &pattern).unwrap().max_value;
    let pp = pattern_probability_limit(&model, &blocks, &pattern, 1e6, 20_000, 1).unwrap();
    if value < 1.0 {
        assert!(pp.estimate > 0.99);
    } else {
        assert!(pp.estimate < 0.01);
    }

    let violated = lasso_model(&[1.0, 0.0, 0.9, 0.0, 1.0, 0.9, 0.9, 0.9, 2.0], &[1.0, 1.0, 0.0]);
    let b3 = BlockStructure::uniform(3, 1).unwrap();
    let p3 = SparsityPattern::new([0, 1], 3).unwrap();
    assert!(condition_value(&violated, &b3, &p3).unwrap().max_value > 1.5);
    let pp = pattern_probability_limit(&violated, &b3, &p3, 1e6, 20_000, 1).unwrap();
    assert_eq!(pp.estimate, 0.0);
}

#[test]
fn pattern_probability_is_monotone_for_strict_models() {
    let model = lasso_model(&[1.0, 0.2, 0.3, 0.2, 1.0, 0.1, 0.3, 0.1, 1.0], &[1.0, -1.0, 0.0]);
    let blocks = BlockStructure::uniform(3, 1).unwrap();
    let pattern = SparsityPattern::new([0, 1], 3).unwrap();
    assert_eq!(condition_value(&model, &blocks, &pattern).unwrap().verdict, Verdict::StrictHolds);
    let mut prev = 0.0;
    let mut prev_se = 0.0;
    for lambda0 in [0.1, 0.3, 1.0, 3.0] {
        let pp = pattern_probability_limit(&model, &blocks, &pattern, lambda0, 50_000, 9).unwrap();
        assert!(pp.estimate >= prev - 3.0 * (pp.se * pp.se + prev_se * prev_se as f64).sqrt());
        prev = pp.estimate;
        prev_se = pp.se;
    }
    let mut prev = 1.0;
    for sigma in [0.1, 0.5, 1.0, 2.0] {
        let mut m = model.clone();
        m.sigma = sigma;
        let pp = pattern_probability_limit(&m, &blocks, &pattern, 1.0, 50_000, 9).unwrap();
        assert!(pp.estimate <= prev + 3.0 * pp.se + 1e-12);
        prev = pp.estimate;
    }
}

#[test]
fn pattern_probability_ignores_thread_count() {
    let (model, blocks, pattern) = random_model(8, &[2, 1, 2, 1], &[0, 2]);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| pattern_probability_limit(&model, &blocks, &pattern, 0.7, 30_001, 42).unwrap())
    };
    let a = run(1);
    let b = run(4);
    assert_eq!(a.estimate.to_bits(), b.estimate.to_bits());
}

#[test]
fn invalid_probability_inputs() {
    let (model, blocks, pattern) = random_model(9, &[1, 1], &[0]);
    assert!(pattern_probability_limit(&model, &blocks, &pattern, 0.0, 10, 0).is_err());
    assert!(pattern_probability_limit(&model, &blocks, &pattern, 1.0, 0, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn condition_is_invariant_to_loading_scale(seed in 0u64..10_000, c in 1e-3f64..1e3) {
        let (model, blocks, pattern) = random_model(seed, &[2, 1, 3, 2], &[0, 2]);
        let a = condition_value(&model, &blocks, &pattern).unwrap();
        let mut scaled = model.clone();
        scaled.w *= c;
        let b = condition_value(&scaled, &blocks, &pattern).unwrap();
        prop_assert!((a.max_value - b.max_value).abs() <= 1e-10 * (1.0 + a.max_value));
    }

    #[test]
    fn loading_value_never_exceeds_loading_free(seed in 0u64..10_000) {
        let (model, blocks, pattern) = random_model(seed, &[2, 2, 1, 3], &[1, 3]);
        let value = condition_value(&model, &blocks, &pattern).unwrap().max_value;
        let lf = loading_free_condition(&model, &blocks, &pattern, 5).unwrap();
        let spectral = spectral_upper_bound(&model, &blocks, &pattern).unwrap();
        prop_assert!(value <= lf + 1e-10);
        prop_assert!(lf <= spectral + 1e-10);
    }
}
