use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn gl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gl")).args(args).output().expect("gl runs")
}

fn gl_json(args: &[&str]) -> Value {
    let out = gl(args);
    assert!(out.status.success(), "gl {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("valid JSON")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// y = 2 x1 − x2 + small deterministic noise; x3, x4 irrelevant.
fn write_inputs(dir: &Path) -> (String, String) {
    let mut text = String::from("y,x1,x2,x3,x4\n");
    for i in 0..120 {
        let t = i as f64;
        let x1 = (0.37 * t).sin();
        let x2 = (0.91 * t + 0.3).cos();
        let x3 = (1.73 * t).sin() * 0.5 + 0.2 * x1;
        let x4 = ((2.29 * t).cos() + (0.13 * t).sin()) * 0.5;
        let y = 2.0 * x1 - x2 + 0.01 * (5.1 * t).sin();
        text.push_str(&format!("{y},{x1},{x2},{x3},{x4}\n"));
    }
    let data = dir.join("data.csv");
    fs::write(&data, text).unwrap();
    let blocks = dir.join("blocks.json");
    fs::write(&blocks, r#"{"group_sizes":[2,1,1],"weights":[1,1,1]}"#).unwrap();
    (path_str(&data).to_string(), path_str(&blocks).to_string())
}

#[test]
fn solve_reports_certified_solution() {
    let dir = tempfile::tempdir().unwrap();
    let (data, blocks) = write_inputs(dir.path());
    let v = gl_json(&["solve", "--data", &data, "--blocks", &blocks, "--lambda", "0.05"]);
    assert_eq!(v["w"].as_array().unwrap().len(), 4);
    assert_eq!(v["pattern"], serde_json::json!([1]));
    assert!(v["kkt_residual"].as_f64().unwrap() <= 1e-7);
    assert!(v["intercept"].is_number());

    let sq = gl_json(&["solve", "--data", &data, "--blocks", &blocks, "--squared", "--mu", "0.05"]);
    assert_eq!(sq["mu"].as_f64(), Some(0.05));
    assert!(sq["kkt_residual"].as_f64().unwrap() <= 1e-7);

    let ad = gl_json(&["solve", "--data", &data, "--blocks", &blocks, "--mu", "0.01", "--adaptive", "--gamma", "1"]);
    assert_eq!(ad["weights"].as_array().unwrap().len(), 3);
}

#[test]
fn path_csv_layout() {
    let dir = tempfile::tempdir().unwrap();
    let (data, blocks) = write_inputs(dir.path());
    let out = gl(&["path", "--data", &data, "--blocks", &blocks, "--points", "20", "--lmin-ratio", "1e-2"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "lambda,eta_1,eta_2,eta_3,pattern_bits,kkt_residual");
    assert_eq!(lines.len(), 21);
    assert!(lines[1].contains(",000,"));
    for line in &lines[1..] {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 6);
        assert!(fields[5].parse::<f64>().unwrap() <= 1e-7);
    }
}

#[test]
fn check_reports_condition_bounds_and_probability() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.json");
    fs::write(
        &model,
        r#"{"sigma_xx":[1,0.2,0.1, 0.2,1,0.3, 0.1,0.3,1],"w":[1,0,0],"sigma":0.5}"#,
    )
    .unwrap();
    let v = gl_json(&["check", "--model", path_str(&model), "--pattern", "1", "--draws", "2000"]);
    let per = v["per_group_values"].as_object().unwrap();
    assert_eq!(per.keys().cloned().collect::<Vec<_>>(), vec!["2", "3"]);
    assert!((per["2"].as_f64().unwrap() - 0.2).abs() < 1e-12);
    assert_eq!(v["verdict"], "strict-holds");
    let max = v["max_value"].as_f64().unwrap();
    let sdp = v["bounds"]["sdp"].as_f64().unwrap();
    let spectral = v["bounds"]["spectral"].as_f64().unwrap();
    assert!(max <= sdp + 1e-6 && sdp <= spectral + 1e-6);
    let p = v["pattern_prob"]["estimate"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p));
    assert_eq!(v, gl_json(&["check", "--model", path_str(&model), "--pattern", "1", "--draws", "2000"]));
}

#[test]
fn mkl_commands() {
    let dir = tempfile::tempdir().unwrap();
    let (data, blocks) = write_inputs(dir.path());
    let v = gl_json(&["mkl", "--data", &data, "--blocks", &blocks, "--kernel", "gaussian:b=1", "--mu", "0.01"]);
    assert_eq!(v["eta"].as_array().unwrap().len(), 3);
    assert!(v["duality_gap"].as_f64().unwrap() >= -1e-9);

    let lin = gl_json(&["mkl", "--data", &data, "--blocks", &blocks, "--kernel", "linear", "--mu", "0.05"]);
    let sq = gl_json(&["solve", "--data", &data, "--blocks", &blocks, "--squared", "--mu", "0.05"]);
    let w: Vec<f64> = sq["w"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    let first = (w[0] * w[0] + w[1] * w[1]).sqrt();
    assert!((lin["norms"][0].as_f64().unwrap() - first).abs() < 1e-5);

    let ad = gl_json(&["mkl", "--data", &data, "--blocks", &blocks, "--kernel", "linear", "--adaptive", "--gamma", "2"]);
    assert_eq!(ad["weights"].as_array().unwrap().len(), 3);

    let c = gl_json(&["mkl-check-condition", "--data", &data, "--blocks", &blocks, "--pattern", "1,2", "--kappa", "auto"]);
    assert_eq!(c["per_group_values"].as_object().unwrap().len(), 1);
    assert!(c["kappa"].as_f64().unwrap() > 0.0);
}

#[test]
fn gaussian_condition_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let model = gl_core::experiments::gen_nonparametric_model(8, 4).unwrap();
    let rows: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| model.s[(i, j)]).collect()).collect();
    let s = dir.path().join("s.json");
    fs::write(&s, serde_json::to_string(&rows).unwrap()).unwrap();
    let f = dir.path().join("f.json");
    fs::write(&f, serde_json::to_string(&model.f_coords).unwrap()).unwrap();
    let pattern: Vec<String> = model.pattern.one_based().iter().map(|k| k.to_string()).collect();
    let v = gl_json(&[
        "gaussian-cond", "--S", path_str(&s), "--bandwidths", "1,1,1,1", "--pattern", &pattern.join(","), "--fcoords",
        path_str(&f), "--trunc", "30",
    ]);
    let expect = model.analytic_condition(30).unwrap();
    let per = v["per_group_values"].as_object().unwrap();
    assert_eq!(per.len(), expect.per_group_values.len());
    for (i, value) in &expect.per_group_values {
        assert!((per[&(i + 1).to_string()].as_f64().unwrap() - value).abs() < 1e-12);
    }

    let uncentered = dir.path().join("g.json");
    fs::write(&uncentered, "[[0,1,0.5],[],[],[]]").unwrap();
    let out = gl(&[
        "gaussian-cond", "--S", path_str(&s), "--bandwidths", "1,1,1,1", "--pattern", "1", "--fcoords",
        path_str(&uncentered),
    ]);
    assert!(!out.status.success());
}

#[test]
fn experiment_and_classify_write_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("results");
    let args = [
        "experiment", "--scenario", "finite-consistent", "--seed", "7", "--reps", "3", "--n-grid", "100,200",
        "--per-decade", "5", "--out", path_str(&out),
    ];
    gl_json(&args);
    let cells = fs::read(out.join("cells.csv")).unwrap();
    let meta: Value = serde_json::from_slice(&fs::read(out.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["config"]["replications"], 3);
    assert!(String::from_utf8_lossy(&cells).starts_with("n,lambda,pattern_freq,log_mse\n"));

    let mut threaded = vec!["--threads", "1"];
    threaded.extend_from_slice(&args);
    gl_json(&threaded);
    assert_eq!(fs::read(out.join("cells.csv")).unwrap(), cells);

    let hist = dir.path().join("hist.csv");
    let v = gl_json(&["classify", "--count", "20", "--n", "200", "--out", path_str(&hist)]);
    assert_eq!(v["paths"].as_u64().unwrap() + v["failures"].as_u64().unwrap(), 20);
    assert!(fs::read_to_string(&hist).unwrap().starts_with("log10_lo,log10_hi,count,class1,class2,class3\n"));
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let (data, blocks) = write_inputs(dir.path());
    let out = gl(&["solve", "--data", &data, "--blocks", &blocks, "--lambda", "-1"]);
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());
    assert!(!gl(&["solve", "--data", "missing.csv", "--blocks", &blocks, "--lambda", "0.1"]).status.success());
    assert!(!gl(&["mkl", "--data", &data, "--blocks", &blocks, "--kernel", "poly", "--mu", "0.1"]).status.success());
    assert!(!gl(&["experiment", "--scenario", "finite", "--out", "x"]).status.success());
}
