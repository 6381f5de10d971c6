use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::generate::{gen_finite_model_conditioned, gen_nonparametric_model, sample_moments, Scenario, DEFAULT_ATTEMPT_CAP};
use crate::error::{GlError, Result};
use crate::mkl::{kappa_schedule, ls_kernel_estimate, mkl_solve, KernelProblem, KernelSpec, DEFAULT_KAPPA0};
use crate::model::{default_pattern, BlockStructure};
use crate::rng;
use crate::solver::{adaptive_weights, log_grid, path_on_grid, GridSpec, SolverOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub seed: u64,
    pub n_grid: Vec<usize>,
    /// λ grid for finite scenarios, μ grid (top 1) for the nonparametric one.
    pub grid: GridSpec,
    pub replications: usize,
    /// Adaptive exponent γ; `None` for the plain estimator.
    pub adaptive: Option<f64>,
    pub attempt_cap: u64,
}

impl ExperimentConfig {
    /// Defaults: 50 replications; finite scenarios use `n ∈ {10², 10³, 10⁴}`
    /// and a 50-per-decade λ grid over three decades; the nonparametric one
    /// uses `n ∈ {100, 300, 1000}` and a 10-per-decade μ grid over four.
    pub fn new(scenario: Scenario, seed: u64) -> Self {
        let (n_grid, grid) = match scenario {
            Scenario::Nonparametric => (vec![100, 300, 1000], GridSpec::per_decade(10, 1e-4)),
            _ => (vec![100, 1_000, 10_000], GridSpec::per_decade(50, 1e-3)),
        };
        Self {
            scenario,
            seed,
            n_grid,
            grid,
            replications: 50,
            adaptive: None,
            attempt_cap: DEFAULT_ATTEMPT_CAP,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(GlError::InvalidInput("replications must be >= 1".into()));
        }
        if self.n_grid.is_empty() || self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(GlError::InvalidInput("n_grid must be nonempty and strictly increasing".into()));
        }
        if self.n_grid[0] < 10 {
            return Err(GlError::InvalidInput("sample sizes must be >= 10".into()));
        }
        if self.grid.points == 0 || !(self.grid.lmin_ratio > 0.0 && self.grid.lmin_ratio <= 1.0) {
            return Err(GlError::InvalidInput(format!("invalid grid {:?}", self.grid)));
        }
        if let Some(g) = self.adaptive {
            if !(g >= 0.0 && g.is_finite()) {
                return Err(GlError::InvalidInput(format!("gamma must be >= 0, got {g}")));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Cell {
    pub n: usize,
    /// λ (finite scenarios) or μ (nonparametric).
    pub reg: f64,
    pub pattern_freq: f64,
    /// Natural log of the mean squared estimation error.
    pub log_mse: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub cells: Vec<Cell>,
    /// Replications excluded per sample size (solver failure).
    pub failures: Vec<(usize, usize)>,
    /// Models drawn by rejection sampling (1 for the nonparametric scenario).
    pub attempts: u64,
    pub condition_max: f64,
}

/// Per-replication path outcome: pattern match and squared error per grid
/// point.
type Trace = Vec<(bool, f64)>;

struct Prepared {
    grid: Vec<f64>,
    attempts: u64,
    condition_max: f64,
    runner: Box<dyn Fn(usize, usize) -> Result<Trace> + Sync>,
}

fn prepare_finite(config: &ExperimentConfig) -> Result<Prepared> {
    let target = config.scenario.target().expect("finite scenario");
    let conditioned = gen_finite_model_conditioned(rng::derive_seed(config.seed, &[0]), target, config.attempt_cap)?;
    let fixture = conditioned.fixture;
    let w = fixture.model.w.clone();
    let s_xy = &fixture.model.sigma_xx * &w;
    let blocks = &fixture.blocks;
    let pop_weights: Vec<f64> = (0..blocks.num_groups())
        .map(|j| match config.adaptive {
            None => blocks.weight(j),
            Some(g) => {
                let nrm = blocks.group_norm(&w, j);
                if nrm > 0.0 {
                    nrm.powf(-g)
                } else {
                    f64::INFINITY
                }
            }
        })
        .collect();
    let top = (0..blocks.num_groups())
        .map(|j| {
            let r = blocks.range(j);
            s_xy.rows(r.start, r.len()).norm() / pop_weights[j]
        })
        .fold(0.0, f64::max);
    let grid = log_grid(top, &config.grid);

    let (seed, gamma, n_grid) = (config.seed, config.adaptive, config.n_grid.clone());
    let path_grid = grid.clone();
    let runner = move |cell: usize, rep: usize| -> Result<Trace> {
        let mut r = rng::stream(seed, &[1, cell as u64, rep as u64]);
        let mom = sample_moments(&fixture.model, n_grid[cell], &mut r)?;
        let blocks = match gamma {
            Some(g) => adaptive_weights(&mom, &fixture.blocks, g)?,
            None => fixture.blocks.clone(),
        };
        let path = path_on_grid(&mom, &blocks, &path_grid, &SolverOptions::default())?;
        Ok(path
            .solutions
            .iter()
            .map(|s| (default_pattern(&s.w, &blocks) == fixture.pattern, (&s.w - &fixture.model.w).norm_squared()))
            .collect())
    };
    Ok(Prepared {
        grid,
        attempts: conditioned.attempts,
        condition_max: conditioned.report.max_value,
        runner: Box::new(runner),
    })
}

fn prepare_nonparametric(config: &ExperimentConfig) -> Result<Prepared> {
    let model = gen_nonparametric_model(rng::derive_seed(config.seed, &[0]), 4)?;
    let condition_max = model.analytic_condition_default()?.max_value;
    let grid = log_grid(1.0, &config.grid);
    let m = model.num_components();
    let blocks = BlockStructure::uniform(m, 1)?;
    let specs: Vec<KernelSpec> = model.bandwidths.iter().map(|&b| KernelSpec::Gaussian { bandwidth: b }).collect();
    let (seed, gamma, n_grid) = (config.seed, config.adaptive, config.n_grid.clone());
    let path_grid = grid.clone();
    let runner = move |cell: usize, rep: usize| -> Result<Trace> {
        let n = n_grid[cell];
        let mut r = rng::stream(seed, &[1, cell as u64, rep as u64]);
        let (data, signal) = model.sample(n, &mut r)?;
        let mut prob = KernelProblem::from_data(&data, &blocks, &specs)?;
        if let Some(g) = gamma {
            let ls = ls_kernel_estimate(&prob, kappa_schedule(DEFAULT_KAPPA0, n))?;
            if let Some(j) = ls.norms.iter().position(|&v| v == 0.0) {
                return Err(GlError::ZeroNorm {
                    group: j + 1,
                    context: "least-squares kernel estimate",
                });
            }
            prob = prob.with_weights(ls.norms.iter().map(|v| v.powf(-g)).collect())?;
        }
        let truth = signal.add_scalar(-signal.mean());
        path_grid
            .iter()
            .map(|&mu| {
                let sol = mkl_solve(&prob, mu)?;
                let mut fitted = DVector::zeros(n);
                for j in 0..m {
                    if sol.eta[j] > 0.0 {
                        let f = prob.factor(j);
                        fitted += f * (f.tr_mul(&sol.alpha) * sol.eta[j]);
                    }
                }
                let err = (fitted - &truth).norm_squared() / n as f64;
                Ok((sol.pattern() == model.pattern, err))
            })
            .collect()
    };
    Ok(Prepared {
        grid,
        attempts: 1,
        condition_max,
        runner: Box::new(runner),
    })
}

/// Replicated paths over every `(n, grid point)` cell. Replications run in
/// parallel on independent streams `(seed, 1, cell, rep)` and are reduced in
/// replication order, so the output does not depend on the thread count.
/// Failed replications are excluded and counted.
pub fn run_sweep(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let prepared = match config.scenario {
        Scenario::Nonparametric => prepare_nonparametric(config)?,
        _ => prepare_finite(config)?,
    };
    let g = prepared.grid.len();
    let mut cells = Vec::with_capacity(config.n_grid.len() * g);
    let mut failures = Vec::new();
    for (c, &n) in config.n_grid.iter().enumerate() {
        let traces: Vec<Result<Trace>> = (0..config.replications)
            .into_par_iter()
            .map(|rep| (prepared.runner)(c, rep))
            .collect();
        let ok: Vec<&Trace> = traces.iter().filter_map(|t| t.as_ref().ok()).collect();
        failures.push((n, traces.len() - ok.len()));
        if ok.is_empty() {
            return Err(GlError::InvalidInput(format!("every replication failed at n = {n}")));
        }
        let count = ok.len() as f64;
        for (k, &reg) in prepared.grid.iter().enumerate() {
            let hits = ok.iter().filter(|t| t[k].0).count() as f64;
            let mse = ok.iter().map(|t| t[k].1).sum::<f64>() / count;
            cells.push(Cell {
                n,
                reg,
                pattern_freq: hits / count,
                log_mse: mse.ln(),
            });
        }
    }
    Ok(ExperimentResult {
        config: config.clone(),
        config_hash: config.hash(),
        cells,
        failures,
        attempts: prepared.attempts,
        condition_max: prepared.condition_max,
    })
}

/// CSV with header `n,lambda,pattern_freq,log_mse`.
pub fn write_cells_csv<W: Write>(cells: &[Cell], writer: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["n", "lambda", "pattern_freq", "log_mse"])?;
    for c in cells {
        out.write_record([c.n.to_string(), c.reg.to_string(), c.pattern_freq.to_string(), c.log_mse.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Meta<'a> {
    config: &'a ExperimentConfig,
    config_hash: &'a str,
    version: &'static str,
    attempts: u64,
    condition_max: f64,
    failures: Vec<FailureCount>,
}

#[derive(Serialize)]
struct FailureCount {
    n: usize,
    failed_replications: usize,
}

/// Writes `<dir>/cells.csv` and `<dir>/meta.json`.
pub fn write_results(result: &ExperimentResult, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_cells_csv(&result.cells, fs::File::create(dir.join("cells.csv"))?)?;
    let meta = Meta {
        config: &result.config,
        config_hash: &result.config_hash,
        version: env!("CARGO_PKG_VERSION"),
        attempts: result.attempts,
        condition_max: result.condition_max,
        failures: result
            .failures
            .iter()
            .map(|&(n, failed_replications)| FailureCount { n, failed_replications })
            .collect(),
    };
    let mut file = fs::File::create(dir.join("meta.json"))?;
    serde_json::to_writer_pretty(&mut file, &meta)?;
    writeln!(file)?;
    Ok(())
}

/// Best cell frequency for each sample size, in `n_grid` order.
pub fn best_frequency(result: &ExperimentResult) -> Vec<(usize, f64)> {
    result
        .config
        .n_grid
        .iter()
        .map(|&n| {
            let best = result.cells.iter().filter(|c| c.n == n).map(|c| c.pattern_freq).fold(0.0, f64::max);
            (n, best)
        })
        .collect()
}
