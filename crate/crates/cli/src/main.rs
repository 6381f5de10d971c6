use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use serde_json::{json, Value};

use gl_core::consistency::{
    condition_value, pattern_probability_limit, sdp_upper_bound, spectral_upper_bound, ConditionReport, Verdict,
};
use gl_core::experiments::{
    classify_paths, histogram, write_histogram_csv, write_results, run_sweep, ExperimentConfig, Scenario,
};
use gl_core::gaussian::{analytic_condition, DEFAULT_TRUNCATION};
use gl_core::io::{load_blocks, load_dataset, load_model};
use gl_core::mkl::{adaptive_mkl, estimate_condition, kappa_schedule, mkl_solve, KernelProblem, KernelSpec, DEFAULT_KAPPA0};
use gl_core::solver::{
    adaptive_group_lasso, adaptive_weights, regularization_path, solve_fixed_lambda, solve_fixed_mu, GridSpec,
    GroupLassoSolution,
};
use gl_core::{empirical_moments, BlockStructure, Dataset, SparsityPattern};

#[derive(Parser)]
#[command(name = "gl", version, about = "Group Lasso, multiple kernel learning and consistency diagnostics")]
struct Cli {
    /// Worker threads (defaults to all cores); results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the group Lasso at one regularization level.
    Solve(SolveArgs),
    /// Regularization path on a logarithmic grid, as CSV.
    Path(PathArgs),
    /// Consistency condition, its bounds and the limiting pattern probability.
    Check(CheckArgs),
    /// Multiple kernel learning at one regularization level.
    Mkl(MklArgs),
    /// Data-driven estimate of the kernel consistency condition.
    MklCheckCondition(MklConditionArgs),
    /// Analytic condition for Gaussian inputs and Gaussian kernels.
    GaussianCond(GaussianArgs),
    /// Replicated sweep over sample sizes and regularization levels.
    Experiment(ExperimentArgs),
    /// Three-way path classification histogram against the condition value.
    Classify(ClassifyArgs),
}

#[derive(Args)]
struct DataArgs {
    /// CSV with columns y, x1..xp.
    #[arg(long)]
    data: PathBuf,
    /// JSON {"group_sizes": [...], "weights": [...]}.
    #[arg(long)]
    blocks: PathBuf,
}

impl DataArgs {
    fn load(&self) -> Result<(Dataset, BlockStructure)> {
        let data = load_dataset(&self.data).with_context(|| format!("reading {}", self.data.display()))?;
        let blocks = load_blocks(&self.blocks).with_context(|| format!("reading {}", self.blocks.display()))?;
        Ok((data, blocks))
    }
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    input: DataArgs,
    /// Penalty λ of the λ Σ d_j‖w_j‖ form.
    #[arg(long, required_unless_present = "mu")]
    lambda: Option<f64>,
    /// Use the squared penalty (μ/2)(Σ d_j‖w_j‖)².
    #[arg(long, requires = "mu")]
    squared: bool,
    #[arg(long)]
    mu: Option<f64>,
    /// Reweight groups by d_j = ‖ŵ_j^LS‖^{-γ}.
    #[arg(long)]
    adaptive: bool,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
}

#[derive(Args)]
struct PathArgs {
    #[command(flatten)]
    input: DataArgs,
    #[arg(long, default_value_t = 100)]
    points: usize,
    #[arg(long, default_value_t = 1e-3)]
    lmin_ratio: f64,
    /// Output file (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    /// JSON {"sigma_xx": row-major, "w": [...], "sigma": s, "b"?, "blocks"?}.
    #[arg(long)]
    model: PathBuf,
    /// Block structure, overriding the one in the model file.
    #[arg(long)]
    blocks: Option<PathBuf>,
    /// 1-based active groups; defaults to the support of w.
    #[arg(long)]
    pattern: Option<String>,
    #[arg(long, default_value_t = 1.0)]
    lambda0: f64,
    #[arg(long, default_value_t = 100_000)]
    draws: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct KernelArgs {
    #[command(flatten)]
    input: DataArgs,
    /// `linear`, `gaussian:b=<bandwidth>`, or a comma list with one spec per group.
    #[arg(long, default_value = "gaussian:b=1")]
    kernel: String,
}

impl KernelArgs {
    fn problem(&self) -> Result<(KernelProblem, BlockStructure)> {
        let (data, blocks) = self.input.load()?;
        let specs = parse_kernels(&self.kernel, blocks.num_groups())?;
        Ok((KernelProblem::from_data(&data, &blocks, &specs)?, blocks))
    }
}

#[derive(Args)]
struct MklArgs {
    #[command(flatten)]
    kernels: KernelArgs,
    #[arg(long, required_unless_present = "adaptive")]
    mu: Option<f64>,
    /// Reweight by the kernel least-squares norms and solve at μ₀n^{-1/3}.
    #[arg(long)]
    adaptive: bool,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, default_value_t = 0.1)]
    mu0: f64,
    #[arg(long, default_value_t = DEFAULT_KAPPA0)]
    kappa0: f64,
}

#[derive(Args)]
struct MklConditionArgs {
    #[command(flatten)]
    kernels: KernelArgs,
    /// 1-based active kernels.
    #[arg(long)]
    pattern: String,
    /// Ridge level κ, or `auto` for κ₀n^{-1/3}.
    #[arg(long, default_value = "auto")]
    kappa: String,
    #[arg(long, default_value_t = DEFAULT_KAPPA0)]
    kappa0: f64,
}

#[derive(Args)]
struct GaussianArgs {
    /// JSON input covariance: nested rows or a flat row-major array.
    #[arg(long = "S")]
    s: PathBuf,
    #[arg(long, value_delimiter = ',')]
    bandwidths: Vec<f64>,
    /// Group weights d_j (default 1).
    #[arg(long, value_delimiter = ',')]
    weights: Option<Vec<f64>>,
    #[arg(long)]
    pattern: String,
    /// JSON array of per-component coefficient arrays in the eigenbasis.
    #[arg(long)]
    fcoords: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TRUNCATION)]
    trunc: usize,
}

#[derive(Args)]
struct ExperimentArgs {
    /// finite-consistent, finite-weak-violated, finite-boundary-refined or nonparametric.
    #[arg(long)]
    scenario: Scenario,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    reps: usize,
    #[arg(long, value_delimiter = ',')]
    n_grid: Option<Vec<usize>>,
    /// Grid points per decade of the regularization grid.
    #[arg(long)]
    per_decade: Option<usize>,
    #[arg(long)]
    lmin_ratio: Option<f64>,
    /// Use the adaptive group Lasso with this γ.
    #[arg(long)]
    adaptive: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long, default_value_t = 500)]
    count: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Sample size of each path.
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Bin width in log10 of the condition value.
    #[arg(long, default_value_t = 0.25)]
    bin_width: f64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_kernels(spec: &str, m: usize) -> Result<Vec<KernelSpec>> {
    let specs: Vec<KernelSpec> = spec.split(',').map(str::parse).collect::<gl_core::Result<_>>()?;
    match specs.len() {
        1 => Ok(vec![specs[0]; m]),
        k if k == m => Ok(specs),
        k => bail!("{k} kernel specs given for {m} groups"),
    }
}

fn one_based(values: &BTreeMap<usize, f64>) -> Value {
    Value::Object(values.iter().map(|(i, v)| ((i + 1).to_string(), json!(v))).collect())
}

fn verdict_name(v: Verdict) -> &'static str {
    match v {
        Verdict::StrictHolds => "strict-holds",
        Verdict::WeakBoundary => "weak-boundary",
        Verdict::Violated => "violated",
    }
}

fn report_json(report: &ConditionReport) -> Value {
    json!({
        "per_group_values": one_based(&report.per_group_values),
        "max_value": report.max_value,
        "verdict": verdict_name(report.verdict),
    })
}

fn solution_json(sol: &GroupLassoSolution) -> Value {
    json!({
        "w": sol.w.as_slice(),
        "intercept": sol.intercept,
        "pattern": sol.pattern.one_based(),
        "kkt_residual": sol.kkt_residual,
        "lambda": sol.lambda,
        "mu": sol.mu,
    })
}

fn print_json(value: &Value) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn read_json(path: &Path) -> Result<Value> {
    let file = File::open(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_reader(file).with_context(|| format!("parsing {}", path.display()))
}

fn solve(args: &SolveArgs) -> Result<Value> {
    let (data, blocks) = args.input.load()?;
    let mom = empirical_moments(&data, &blocks)?;
    let (sol, weights) = match (args.adaptive, args.squared, args.mu, args.lambda) {
        (true, _, Some(mu), _) => {
            let (sol, adaptive) = adaptive_group_lasso(&mom, &blocks, mu, args.gamma)?;
            (sol, Some(adaptive.weights().to_vec()))
        }
        (true, _, None, Some(lambda)) => {
            let adaptive = adaptive_weights(&mom, &blocks, args.gamma)?;
            (solve_fixed_lambda(&mom, &adaptive, lambda)?, Some(adaptive.weights().to_vec()))
        }
        (false, true, Some(mu), _) => (solve_fixed_mu(&mom, &blocks, mu)?, None),
        (false, false, _, Some(lambda)) => (solve_fixed_lambda(&mom, &blocks, lambda)?, None),
        (false, false, Some(mu), None) => (solve_fixed_mu(&mom, &blocks, mu)?, None),
        _ => bail!("give --lambda, or --squared with --mu"),
    };
    let mut out = solution_json(&sol);
    if let Some(w) = weights {
        out["weights"] = json!(w);
    }
    Ok(out)
}

fn path(args: &PathArgs) -> Result<()> {
    let (data, blocks) = args.input.load()?;
    let mom = empirical_moments(&data, &blocks)?;
    let spec = GridSpec {
        points: args.points,
        lmin_ratio: args.lmin_ratio,
    };
    let path = regularization_path(&mom, &blocks, &spec)?;
    let sink: Box<dyn Write> = match &args.out {
        Some(p) => Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(io::stdout().lock()),
    };
    let mut out = BufWriter::new(sink);
    let m = blocks.num_groups();
    let mut header = vec!["lambda".to_string()];
    header.extend((1..=m).map(|j| format!("eta_{j}")));
    header.extend(["pattern_bits".into(), "kkt_residual".into()]);
    writeln!(out, "{}", header.join(","))?;
    for ((lambda, sol), eta) in path.grid.iter().zip(&path.solutions).zip(&path.eta_profiles) {
        let mut row = vec![format!("{lambda:e}")];
        row.extend(eta.iter().map(|v| format!("{v:e}")));
        row.push(sol.pattern.bits(m));
        row.push(format!("{:e}", sol.kkt_residual));
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    Ok(())
}

fn check(args: &CheckArgs) -> Result<Value> {
    let file = load_model(&args.model).with_context(|| format!("reading {}", args.model.display()))?;
    let model = file.to_model()?;
    let blocks = match (&args.blocks, &file.blocks) {
        (Some(p), _) => load_blocks(p)?,
        (None, Some(b)) => b.clone(),
        (None, None) => BlockStructure::uniform(model.dim(), 1)?,
    };
    blocks.check_dim(model.dim(), "blocks")?;
    let pattern = match &args.pattern {
        Some(s) => SparsityPattern::parse_one_based(s, blocks.num_groups())?,
        None => model.pattern(&blocks),
    };
    let report = condition_value(&model, &blocks, &pattern)?;
    let spectral = spectral_upper_bound(&model, &blocks, &pattern)?;
    let mut sdp = 0.0f64;
    for i in pattern.inactive(blocks.num_groups()) {
        sdp = sdp.max(sdp_upper_bound(&model, &blocks, &pattern, i)?.0);
    }
    let prob = pattern_probability_limit(&model, &blocks, &pattern, args.lambda0, args.draws, args.seed)?;
    let mut out = report_json(&report);
    out["bounds"] = json!({ "spectral": spectral, "sdp": sdp });
    out["pattern_prob"] = json!({ "estimate": prob.estimate, "se": prob.se, "lambda0": args.lambda0 });
    Ok(out)
}

fn mkl(args: &MklArgs) -> Result<Value> {
    let (prob, _) = args.kernels.problem()?;
    let (sol, weights) = if args.adaptive {
        let (sol, w) = adaptive_mkl(&prob, args.mu0, args.gamma, args.kappa0)?;
        (sol, Some(w))
    } else {
        (mkl_solve(&prob, args.mu.context("--mu is required")?)?, None)
    };
    let mut out = json!({
        "eta": sol.eta,
        "norms": sol.norms,
        "duality_gap": sol.duality_gap,
        "mu": sol.mu,
        "pattern": sol.pattern().one_based(),
    });
    if let Some(w) = weights {
        out["weights"] = json!(w);
    }
    Ok(out)
}

fn mkl_check_condition(args: &MklConditionArgs) -> Result<Value> {
    let (prob, blocks) = args.kernels.problem()?;
    let kappa = if args.kappa == "auto" {
        kappa_schedule(args.kappa0, prob.n())
    } else {
        args.kappa.parse().with_context(|| format!("bad --kappa '{}'", args.kappa))?
    };
    let pattern = SparsityPattern::parse_one_based(&args.pattern, blocks.num_groups())?;
    let raw = estimate_condition(&prob, &pattern, kappa)?;
    let scaled: BTreeMap<usize, f64> = raw.iter().map(|(&i, v)| (i, v / blocks.weight(i))).collect();
    let max_value = scaled.values().copied().fold(0.0, f64::max);
    Ok(json!({
        "kappa": kappa,
        "per_group_values": one_based(&scaled),
        "max_value": max_value,
        "verdict": verdict_name(Verdict::classify(max_value)),
    }))
}

fn parse_matrix(value: &Value, m: usize) -> Result<DMatrix<f64>> {
    let nums = |v: &Value| -> Result<Vec<f64>> {
        v.as_array()
            .context("expected an array")?
            .iter()
            .map(|x| x.as_f64().context("expected a number"))
            .collect()
    };
    let rows = value.as_array().context("S must be a JSON array")?;
    let flat: Vec<f64> = if rows.first().is_some_and(Value::is_array) {
        rows.iter().map(nums).collect::<Result<Vec<_>>>()?.concat()
    } else {
        nums(value)?
    };
    if flat.len() != m * m {
        bail!("S has {} entries, expected {m}x{m}", flat.len());
    }
    Ok(DMatrix::from_row_slice(m, m, &flat))
}

fn gaussian_cond(args: &GaussianArgs) -> Result<Value> {
    let m = args.bandwidths.len();
    let s = parse_matrix(&read_json(&args.s)?, m)?;
    let f_coords: Vec<Vec<f64>> =
        serde_json::from_value(read_json(&args.fcoords)?).context("fcoords must be an array of number arrays")?;
    let weights = args.weights.clone().unwrap_or_else(|| vec![1.0; m]);
    let pattern = SparsityPattern::parse_one_based(&args.pattern, m)?;
    let report = analytic_condition(&s, &args.bandwidths, &weights, &pattern, &f_coords, args.trunc)?;
    Ok(report_json(&report))
}

fn experiment(args: &ExperimentArgs) -> Result<Value> {
    let mut config = ExperimentConfig::new(args.scenario, args.seed);
    config.replications = args.reps;
    config.adaptive = args.adaptive;
    if let Some(n) = &args.n_grid {
        config.n_grid = n.clone();
    }
    if args.per_decade.is_some() || args.lmin_ratio.is_some() {
        let ratio = args.lmin_ratio.unwrap_or(config.grid.lmin_ratio);
        let decades = -config.grid.lmin_ratio.log10();
        let per_decade = args
            .per_decade
            .unwrap_or(((config.grid.points - 1) as f64 / decades).round() as usize);
        config.grid = GridSpec::per_decade(per_decade, ratio);
    }
    let result = run_sweep(&config)?;
    write_results(&result, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    Ok(json!({
        "out": args.out,
        "cells": result.cells.len(),
        "condition_max": result.condition_max,
        "attempts": result.attempts,
        "config_hash": result.config_hash,
    }))
}

fn classify(args: &ClassifyArgs) -> Result<Value> {
    if !(args.bin_width > 0.0) {
        bail!("--bin-width must be positive");
    }
    let out = classify_paths(args.seed, args.count, args.n)?;
    let bins = histogram(&out.paths, args.bin_width);
    let file = File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_histogram_csv(&bins, BufWriter::new(file))?;
    Ok(json!({
        "out": args.out,
        "paths": out.paths.len(),
        "failures": out.failures,
        "bins": bins.len(),
    }))
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Solve(a) => print_json(&solve(a)?),
        Command::Path(a) => path(a),
        Command::Check(a) => print_json(&check(a)?),
        Command::Mkl(a) => print_json(&mkl(a)?),
        Command::MklCheckCondition(a) => print_json(&mkl_check_condition(a)?),
        Command::GaussianCond(a) => print_json(&gaussian_cond(a)?),
        Command::Experiment(a) => print_json(&experiment(a)?),
        Command::Classify(a) => print_json(&classify(a)?),
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global()?;
    }
    run(&cli)
}
