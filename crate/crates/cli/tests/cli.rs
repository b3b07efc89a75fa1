use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn ncl() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ncl"));
    c.env_remove("NCL_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    ncl().args(args).output().unwrap()
}

fn ok_json(args: &[&str]) -> Value {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn synth(dir: &Path, name: &str, n: usize, sigma: f64, seed: u64) -> PathBuf {
    let p = dir.join(name);
    let (n, sigma, seed) = (n.to_string(), sigma.to_string(), seed.to_string());
    let out = run(&["synth", "--n", &n, "--d", "2", "--sigma", &sigma, "--seed", &seed, "--format", "csv", "-o", p.to_str().unwrap()]);
    assert!(out.status.success());
    p
}

#[test]
fn fit_then_predict_reproduces_training_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d.csv", 200, 0.3, 1);
    let model = dir.path().join("m.json");
    let (d, m) = (data.to_str().unwrap(), model.to_str().unwrap());
    let fit = ok_json(&["fit", "--data", d, "--targets", "y", "--H", "4", "--M", "6", "--lambda", "0.6", "--model-out", m]);
    let pred = ok_json(&["predict", "--model", m, "--data", d]);
    let a = fit["train_emp_err"][0].as_f64().unwrap();
    let b = pred["emp_err"][0].as_f64().unwrap();
    assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
    assert_eq!(pred["predictions"].as_array().unwrap().len(), 200);
}

#[test]
fn model_records_q() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d.csv", 150, 0.3, 2);
    let model = dir.path().join("m.json");
    let fit = ok_json(&["fit", "--data", data.to_str().unwrap(), "--targets", "y", "--H", "10", "--M", "100", "--lambda", "0.5", "--model-out", model.to_str().unwrap()]);
    assert_eq!(fit["q"], 1000);
    let saved: Value = serde_json::from_str(&std::fs::read_to_string(&model).unwrap()).unwrap();
    assert_eq!(saved["q"], 1000);
    assert_eq!(saved["basis"]["h"], 10);
}

#[test]
fn usage_errors_exit_2() {
    let out = run(&["fit", "--data", "x.csv", "--targets", "y", "--lambda", "1.5", "--model-out", "m.json"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["tune", "--data", "x.csv"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["verify", "--only", "nonsense"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1() {
    let out = run(&["predict", "--model", "/nonexistent/model.json", "--data", "/nonexistent/d.csv"]);
    assert_eq!(out.status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d.csv", 50, 0.3, 3);
    let out = run(&["fit", "--data", data.to_str().unwrap(), "--targets", "missing", "--lambda", "0.5", "--model-out", "m.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing"));
}

#[test]
fn sure_tuning_stays_below_one_on_noisy_data() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d.csv", 500, 1.0, 4);
    let r = ok_json(&["tune", "--data", data.to_str().unwrap(), "--targets", "y", "--H", "10", "--M", "40", "--method", "sure"]);
    assert!(r["lambda_star"].as_f64().unwrap() < 1.0 - 1e-4, "{r}");
    assert_eq!(r["factorizations"], 1);
}

#[test]
fn cv_tuning_output_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d.csv", 200, 0.5, 5);
    let args = ["tune", "--data", data.to_str().unwrap(), "--targets", "y", "--H", "4", "--M", "5", "--method", "cv5", "--seed", "9"];
    let a = run(&args);
    let b = run(&args);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn env_seed_replaces_default_seed() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d.csv", 120, 0.5, 6);
    let base = ["tune", "--data", data.to_str().unwrap(), "--targets", "y", "--H", "3", "--M", "4"];
    let with_env = ncl().args(base).env("NCL_SEED", "17").output().unwrap();
    let with_flag = run(&[&base[..], &["--seed", "17"]].concat());
    let default = run(&base);
    assert_eq!(with_env.stdout, with_flag.stdout);
    assert_ne!(with_env.stdout, default.stdout);
}

#[test]
fn df_curve_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d.csv", 200, 0.5, 7);
    let out = run(&["df-curve", "--data", data.to_str().unwrap(), "--targets", "y", "--H", "4", "--M", "6", "--grid", "uniform:21", "--format", "csv"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("lambda,df,emp_err,sure"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 21);
    assert_eq!(rows[0][0], 0.0);
    assert!((rows[0][1] - 4.0).abs() < 1e-6);
    assert!(rows.windows(2).all(|w| w[1][1] >= w[0][1]));
    assert!(rows.windows(2).all(|w| w[1][2] <= w[0][2] + 1e-12));
}

#[test]
fn verify_filter_and_injected_bug() {
    let out = run(&["verify", "--only", "tikhonov"]);
    assert_eq!(out.status.code(), Some(0));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["suites"].as_array().unwrap().len(), 1);
    assert_eq!(report["suites"][0]["name"], "tikhonov");
    let out = run(&["verify", "--only", "dof", "--inject-df-bug"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn bench_rows_per_dataset_and_output_averaging() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "a.csv", 150, 0.5, 8);
    let b = synth(dir.path(), "b.csv", 150, 0.5, 9);
    let rows = ok_json(&["bench", "--data", a.to_str().unwrap(), b.to_str().unwrap(), "--targets", "y", "--H", "3", "--M", "4", "--gamma", "1.0"]);
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["dataset_id"], "a");
    assert!(rows[0]["time_sure"]["mean"].as_f64().unwrap() > 0.0);

    // three outputs in one file
    let text = std::fs::read_to_string(&a).unwrap();
    let mut multi = String::from("x0,x1,y1,y2,y3\n");
    for line in text.lines().skip(1) {
        let v: Vec<f64> = line.split(',').map(|s| s.parse().unwrap()).collect();
        multi.push_str(&format!("{},{},{},{},{}\n", v[0], v[1], v[2], v[2] * 2.0 + v[0], v[1] - v[2]));
    }
    let m = dir.path().join("multi.csv");
    std::fs::write(&m, multi).unwrap();
    let out = run(&["bench", "--data", m.to_str().unwrap(), "--targets", "y1,y2,y3", "--H", "3", "--M", "4", "--gamma", "1.0", "--format", "csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 2, "{text}");
}

#[test]
fn mc_df_tracks_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d.csv", 200, 0.5, 10);
    let r = ok_json(&["mc-df", "--data", data.to_str().unwrap(), "--target-indices", "2", "--H", "3", "--M", "5", "--lambda", "0.8", "--repeats", "200"]);
    let exact = r["analytic_df"].as_f64().unwrap();
    let est = r["estimate"]["value"].as_f64().unwrap();
    let se = r["estimate"]["std_error"].as_f64().unwrap();
    assert!((est - exact).abs() <= (0.02 * exact).max(3.0 * se), "{est} vs {exact}");
}

#[test]
fn synth_is_deterministic() {
    let a = run(&["synth", "--n", "20", "--seed", "4", "--format", "csv"]);
    let b = run(&["synth", "--n", "20", "--seed", "4", "--format", "csv"]);
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(String::from_utf8(a.stdout).unwrap().lines().count(), 21);
}
