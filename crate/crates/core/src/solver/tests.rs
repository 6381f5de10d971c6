use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::model::{empirical_moments, Dataset};
use crate::rng;

fn random_problem(seed: u64, sizes: &[usize], n: usize) -> (EmpiricalMoments, BlockStructure) {
    let mut r = rng::stream(seed, &[]);
    let weights: Vec<f64> = sizes.iter().map(|_| r.random_range(0.5..2.0)).collect();
    let blocks = BlockStructure::new(sizes.to_vec(), weights).unwrap();
    let p = blocks.dim();
    let mix = DMatrix::from_fn(p, p, |_, _| r.sample::<f64, _>(StandardNormal));
    let z = DMatrix::from_fn(n, p, |_, _| r.sample::<f64, _>(StandardNormal));
    let x = z * mix / (p as f64).sqrt();
    let w = DVector::from_fn(p, |i, _| if i % 3 == 0 { 0.0 } else { r.sample::<f64, _>(StandardNormal) });
    let noise = DVector::from_fn(n, |_, _| 0.3 * r.sample::<f64, _>(StandardNormal));
    let y = &x * w + noise;
    let mom = empirical_moments(&Dataset::new(x, y).unwrap(), &blocks).unwrap();
    (mom, blocks)
}

/// Accelerated proximal gradient with block soft-thresholding, used as an
/// independent reference minimizer.
fn fista_reference(mom: &EmpiricalMoments, blocks: &BlockStructure, lambda: f64, iters: usize) -> DVector<f64> {
    let lip = linalg::max_eigenvalue(&mom.s_xx);
    let step = 1.0 / lip;
    let p = blocks.dim();
    let mut x = DVector::zeros(p);
    let mut y = x.clone();
    let mut t = 1.0f64;
    for _ in 0..iters {
        let mut z = &y - mom.gradient(&y) * step;
        for j in 0..blocks.num_groups() {
            let r = blocks.range(j);
            let mut zj = z.rows_mut(r.start, r.len());
            let nrm = zj.norm();
            let shrink = if nrm > 0.0 { (1.0 - step * lambda * blocks.weight(j) / nrm).max(0.0) } else { 0.0 };
            zj *= shrink;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = &z + (&z - &x) * ((t - 1.0) / t_next);
        x = z;
        t = t_next;
    }
    x
}

#[test]
fn zero_lambda_is_least_squares() {
    let (mom, blocks) = random_problem(1, &[2, 2, 3], 80);
    let sol = solve_fixed_lambda(&mom, &blocks, 0.0).unwrap();
    let direct = mom.s_xx.clone().lu().solve(&mom.s_xy).unwrap();
    assert!((&sol.w - direct).amax() < 1e-10);
    assert!(sol.kkt_residual <= 1e-8);
}

#[test]
fn above_lambda_max_everything_is_zero() {
    let (mom, blocks) = random_problem(2, &[2, 1, 3], 60);
    let lmax = lambda_max(&mom, &blocks);
    for lambda in [lmax, 1.5 * lmax, 10.0 * lmax] {
        let sol = solve_fixed_lambda(&mom, &blocks, lambda).unwrap();
        assert_eq!(sol.w.norm(), 0.0);
        assert!(sol.pattern.is_empty());
        assert!(check_kkt(&mom, &blocks, &sol.w, lambda).residual <= KKT_GATE);
    }
    let below = solve_fixed_lambda(&mom, &blocks, 0.99 * lmax).unwrap();
    assert!(below.w.norm() > 0.0);
}

#[test]
fn identity_covariance_gives_block_soft_thresholding() {
    let blocks = BlockStructure::new(vec![2, 3, 1], vec![1.0, 0.5, 2.0]).unwrap();
    let s_xy = DVector::from_vec(vec![0.8, -0.3, 0.1, 0.2, -0.05, 1.5]);
    let mom = EmpiricalMoments::from_parts(1.0, s_xy.clone(), DMatrix::identity(6, 6), 10).unwrap();
    for lambda in [0.05, 0.3, 0.7, 2.0] {
        let sol = solve_fixed_lambda(&mom, &blocks, lambda).unwrap();
        for j in 0..3 {
            let r = blocks.range(j);
            let sj = s_xy.rows(r.start, r.len());
            let factor = (1.0 - lambda * blocks.weight(j) / sj.norm()).max(0.0);
            let expect = sj * factor;
            assert!((sol.w.rows(r.start, r.len()) - expect).amax() < 1e-12);
        }
    }
}

#[test]
fn agrees_with_proximal_gradient_reference() {
    for seed in 0..8u64 {
        let (mom, blocks) = random_problem(100 + seed, &[2, 3, 1, 2], 120);
        let lambda = 0.2 * lambda_max(&mom, &blocks);
        let sol = solve_fixed_lambda(&mom, &blocks, lambda).unwrap();
        let reference = fista_reference(&mom, &blocks, lambda, 20_000);
        assert!((&sol.w - &reference).amax() < 1e-6, "seed {seed}");
        assert!(
            objective_value(&mom, &blocks, &sol.w, lambda) <= objective_value(&mom, &blocks, &reference, lambda) + 1e-12
        );
    }
}

#[test]
fn kkt_at_least_squares_equals_largest_threshold() {
    let (mom, blocks) = random_problem(3, &[2, 2, 2], 100);
    let w = ols(&mom).unwrap();
    assert!(blocks.group_norms(&w).iter().all(|&v| v > 0.0));
    let lambda = 0.37;
    let report = check_kkt(&mom, &blocks, &w, lambda);
    let expected = blocks.weights().iter().map(|d| lambda * d).fold(0.0, f64::max);
    assert!((report.residual - expected).abs() < 1e-10);
    assert!(report.groups.iter().all(|g| g.active));
}

#[test]
fn kkt_residual_grows_along_a_ray() {
    let (mom, blocks) = random_problem(4, &[2, 2, 2], 100);
    let lambda = 0.1 * lambda_max(&mom, &blocks);
    let sol = solve_fixed_lambda(&mom, &blocks, lambda).unwrap();
    let dir = DVector::from_fn(blocks.dim(), |i, _| ((i * 7 + 3) % 5) as f64 - 2.0).normalize();
    let mut prev = sol.kkt_residual;
    for k in 1..20 {
        let delta = 0.01 * k as f64;
        let r = check_kkt(&mom, &blocks, &(&sol.w + &dir * delta), lambda).residual;
        assert!(r >= prev - 1e-12, "residual dropped at delta={delta}");
        assert!(r.is_finite());
        prev = r;
    }
    assert!(prev > 1e-3);
}

#[test]
fn singular_design_at_zero_lambda_is_refused() {
    let blocks = BlockStructure::uniform(2, 2).unwrap();
    let x = DMatrix::from_fn(3, 4, |i, j| (i + j) as f64 + if i == j { 0.5 } else { 0.0 });
    let y = DVector::from_vec(vec![1.0, 0.0, 2.0]);
    let mom = empirical_moments(&Dataset::new(x, y).unwrap(), &blocks).unwrap();
    assert!(matches!(ols(&mom), Err(GlError::Singular { .. })));
    assert!(solve_fixed_lambda(&mom, &blocks, 0.0).is_err());
    let sol = solve_fixed_lambda(&mom, &blocks, 0.05).unwrap();
    assert!(sol.kkt_residual <= KKT_GATE);
}

#[test]
fn indefinite_covariance_is_rejected() {
    let blocks = BlockStructure::uniform(2, 1).unwrap();
    let mut mom = EmpiricalMoments::from_parts(1.0, DVector::from_vec(vec![1.0, 1.0]), DMatrix::identity(2, 2), 5).unwrap();
    mom.s_xx[(0, 1)] = 2.0;
    mom.s_xx[(1, 0)] = 2.0;
    assert!(matches!(
        solve_fixed_lambda(&mom, &blocks, 0.1),
        Err(GlError::NotPositiveSemidefinite { .. })
    ));
}

#[test]
fn non_convergence_reports_residual() {
    let (mom, blocks) = random_problem(5, &[2, 2, 2], 40);
    let opts = SolverOptions { tol: 1e-14, max_sweeps: 1 };
    match solve_fixed_lambda_with(&mom, &blocks, 0.01, None, &opts) {
        Err(GlError::NonConvergence { residual, iterations, .. }) => {
            assert_eq!(iterations, 1);
            assert!(residual > 0.0);
        }
        other => panic!("expected non-convergence, got {other:?}"),
    }
}

#[test]
fn squared_form_zero_mu_is_least_squares() {
    let (mom, blocks) = random_problem(6, &[1, 2, 2], 70);
    let sol = solve_fixed_mu(&mom, &blocks, 0.0).unwrap();
    assert!((&sol.w - ols(&mom).unwrap()).amax() < 1e-12);
}

#[test]
fn squared_form_maps_to_lambda_form() {
    for seed in 0..10u64 {
        let (mom, blocks) = random_problem(200 + seed, &[2, 3, 2, 1], 90);
        for mu in [0.01, 0.1, 1.0] {
            let sq = solve_fixed_mu(&mom, &blocks, mu).unwrap();
            assert!(check_kkt_squared(&mom, &blocks, &sq.w, mu).residual <= KKT_GATE);
            let lambda = mu * blocks.block_l1(&sq.w);
            let lf = solve_fixed_lambda(&mom, &blocks, lambda).unwrap();
            assert!(check_kkt(&mom, &blocks, &lf.w, lambda).residual <= KKT_GATE);
            assert!((&sq.w - &lf.w).norm() <= 1e-6, "seed {seed} mu {mu}");
        }
    }
}

#[test]
fn squared_form_large_mu_shrinks_towards_zero() {
    let (mom, blocks) = random_problem(7, &[2, 2], 50);
    let small = solve_fixed_mu(&mom, &blocks, 1e3).unwrap();
    let large = solve_fixed_mu(&mom, &blocks, 1e6).unwrap();
    assert!(large.w.norm() < small.w.norm());
    assert!(large.w.norm() < 1e-4);
}

#[test]
fn squared_kkt_at_zero_is_correlation_norm() {
    let (mom, blocks) = random_problem(8, &[2, 1, 2], 50);
    let w = DVector::zeros(blocks.dim());
    let r = check_kkt_squared(&mom, &blocks, &w, 3.0).residual;
    let expected = (0..3)
        .map(|j| {
            let rg = blocks.range(j);
            mom.s_xy.rows(rg.start, rg.len()).norm()
        })
        .fold(0.0, f64::max);
    assert!((r - expected).abs() < 1e-14);
    assert!(r > 0.0);
}

#[test]
fn squared_and_linear_certificates_agree_on_equivalent_pair() {
    let (mom, blocks) = random_problem(9, &[2, 2, 2], 60);
    let mu = 0.2;
    let sq = solve_fixed_mu(&mom, &blocks, mu).unwrap();
    assert!(check_kkt_squared(&mom, &blocks, &sq.w, mu).residual <= KKT_GATE);
    assert!(check_kkt(&mom, &blocks, &sq.w, sq.lambda).residual <= KKT_GATE);
}

#[test]
fn different_starts_converge_to_same_solution() {
    let (mom, blocks) = random_problem(10, &[2, 2, 3], 80);
    let lambda = 0.15 * lambda_max(&mom, &blocks);
    let opts = SolverOptions::default();
    let a = solve_fixed_lambda_with(&mom, &blocks, lambda, None, &opts).unwrap();
    let start = DVector::from_element(blocks.dim(), 5.0);
    let b = solve_fixed_lambda_with(&mom, &blocks, lambda, Some(&start), &opts).unwrap();
    assert!((a.w - b.w).amax() < 1e-6);
}

#[test]
fn adaptive_with_zero_gamma_is_unweighted() {
    let (mom, blocks) = random_problem(11, &[2, 2, 2], 80);
    let unit = BlockStructure::uniform(3, 2).unwrap();
    let (a, weights) = adaptive_group_lasso(&mom, &blocks, 0.05, 0.0).unwrap();
    assert!(weights.weights().iter().all(|&d| d == 1.0));
    let b = solve_fixed_mu(&mom, &unit, 0.05).unwrap();
    assert!((a.w - b.w).amax() < 1e-12);
}

#[test]
fn adaptive_weights_scale_inversely_with_response() {
    let (mom, blocks) = random_problem(12, &[2, 2, 2], 80);
    let c = 3.5;
    let mut scaled = mom.clone();
    scaled.s_xy *= c;
    scaled.s_yy *= c * c;
    let ls = ols(&mom).unwrap();
    let ls_scaled = ols(&scaled).unwrap();
    assert!((ls * c - ls_scaled).amax() < 1e-10);
    let d = adaptive_weights(&mom, &blocks, 1.0).unwrap();
    let d_scaled = adaptive_weights(&scaled, &blocks, 1.0).unwrap();
    for j in 0..3 {
        assert!((d_scaled.weight(j) - d.weight(j) / c).abs() < 1e-10 * d.weight(j));
    }
}

#[test]
fn adaptive_rejects_zero_least_squares_group() {
    let blocks = BlockStructure::uniform(2, 1).unwrap();
    let mom = EmpiricalMoments::from_parts(1.0, DVector::from_vec(vec![1.0, 0.0]), DMatrix::identity(2, 2), 4).unwrap();
    assert!(matches!(
        adaptive_group_lasso(&mom, &blocks, 0.1, 1.0),
        Err(GlError::ZeroNorm { group: 2, .. })
    ));
}

#[test]
fn population_problem_limits() {
    let sigma = DMatrix::from_row_slice(3, 3, &[1.0, 0.3, 0.1, 0.3, 1.0, 0.2, 0.1, 0.2, 1.0]);
    let w = DVector::from_vec(vec![1.0, -0.5, 0.0]);
    let model = PopulationModel::new(sigma, w.clone(), 0.0, 0.1).unwrap();
    let blocks = BlockStructure::uniform(3, 1).unwrap();
    let tiny = population_group_lasso(&model, &blocks, 1e-9).unwrap();
    assert!((&tiny.w - &w).amax() < 1e-7);
    let huge = population_group_lasso(&model, &blocks, 1e3).unwrap();
    assert_eq!(huge.w.norm(), 0.0);
    assert!(population_group_lasso(&model, &blocks, 0.0).is_err());
}

#[test]
fn path_endpoints() {
    let (mom, blocks) = random_problem(13, &[2, 2, 2, 2], 150);
    let path = regularization_path(&mom, &blocks, &GridSpec { points: 60, lmin_ratio: 1e-6 }).unwrap();
    assert_eq!(path.grid.len(), 60);
    assert!(path.grid.windows(2).all(|g| g[0] > g[1]));
    assert_eq!(path.solutions[0].w.norm(), 0.0);
    let last = &path.solutions.last().unwrap().w;
    let w_ls = ols(&mom).unwrap();
    let lam_min = *path.grid.last().unwrap();
    let bound = lam_min * blocks.weights().iter().map(|d| d * d).sum::<f64>().sqrt() / linalg::min_eigenvalue(&mom.s_xx);
    assert!((last - &w_ls).norm() <= bound * (1.0 + 1e-6));
    for (sol, eta) in path.solutions.iter().zip(&path.eta_profiles) {
        assert!(sol.kkt_residual <= KKT_GATE);
        assert_eq!(sol.pattern, crate::model::default_pattern(&sol.w, &blocks));
        if sol.w.norm() > 0.0 {
            assert!((eta.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(eta.iter().all(|&e| e >= 0.0));
        }
    }
}

#[test]
fn grid_spec_per_decade() {
    let g = GridSpec::per_decade(50, 1e-3);
    assert_eq!(g.points, 151);
    let grid = log_grid(2.0, &g);
    assert!((grid[50] - 0.2).abs() < 1e-12);
    assert!((grid[150] - 2e-3).abs() < 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn weight_rescaling_is_absorbed_by_lambda(seed in 0u64..1000, c in 0.2f64..5.0) {
        let (mom, blocks) = random_problem(seed, &[2, 1, 2], 60);
        let lambda = 0.3 * lambda_max(&mom, &blocks);
        let a = solve_fixed_lambda(&mom, &blocks, lambda).unwrap();
        let scaled = blocks.with_weights(blocks.weights().iter().map(|d| d * c).collect()).unwrap();
        let b = solve_fixed_lambda(&mom, &scaled, lambda / c).unwrap();
        prop_assert!((a.w - b.w).amax() <= 1e-8);
    }

    #[test]
    fn every_output_is_certified(seed in 0u64..1000, frac in 0.001f64..1.2) {
        let (mom, blocks) = random_problem(seed, &[1, 2, 3, 2], 40);
        let lambda = frac * lambda_max(&mom, &blocks);
        let sol = solve_fixed_lambda(&mom, &blocks, lambda).unwrap();
        prop_assert!(check_kkt(&mom, &blocks, &sol.w, lambda).residual <= KKT_GATE);
        let sq = solve_fixed_mu(&mom, &blocks, frac).unwrap();
        prop_assert!(check_kkt_squared(&mom, &blocks, &sq.w, frac).residual <= KKT_GATE);
    }
}
