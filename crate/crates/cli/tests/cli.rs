use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BASE: &str = r#"{
    "states": 2,
    "generator": [[0.7, 0.3], [0.4, 0.6]],
    "f": [0, 1],
    "theta_interval": [-2, 2],
    "theta": [-1.0, 1.0],
    "R": 2,
    "trials": 4,
    "master_seed": 3,
    "family_points": 5
}"#;

fn run(dir: &Path, cmd: &str, config: &str, extra: &[&str]) -> Output {
    let cfg = dir.join("config.json");
    fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_restless-bai"))
        .arg(cmd)
        .arg("--config")
        .arg(&cfg)
        .arg("--output-dir")
        .arg(dir.join("out"))
        .args(extra)
        .output()
        .unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn family_has_unit_root_at_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), "family", BASE, &[]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("out/family.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "theta,rho,eta");
    assert_eq!(lines.len(), 6);
    let mid: Vec<f64> = lines[3].split(',').map(|x| x.parse().unwrap()).collect();
    assert_eq!(mid[0], 0.0);
    assert!((mid[1] - 1.0).abs() < 1e-12);
}

#[test]
fn forced_bound_equals_uniform() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), "lower-bound", BASE, &[]);
    assert_eq!(out.status.code(), Some(0));
    let b = json(&dir.path().join("out/bound.json"));
    assert_eq!(b["schema_version"], 1);
    let (ts, tu) = (b["t_star"].as_f64().unwrap(), b["t_unif"].as_f64().unwrap());
    assert!((ts - tu).abs() < 1e-9 * tu);
    assert!(b["fw_gap"].as_f64().unwrap() <= 1e-6);
    assert!(!b["nu_star"].as_array().unwrap().is_empty());
}

#[test]
fn simulate_is_deterministic_and_overridable() {
    let dir = tempfile::tempdir().unwrap();
    let first = run(dir.path(), "simulate", BASE, &[]);
    assert_eq!(first.status.code(), Some(0));
    let a = fs::read_to_string(dir.path().join("out/trials.csv")).unwrap();
    let again = run(dir.path(), "simulate", BASE, &["--parallel", "3"]);
    assert_eq!(again.status.code(), Some(0));
    let b = fs::read_to_string(dir.path().join("out/trials.csv")).unwrap();
    assert_eq!(a, b);
    assert!(a.starts_with("trial,seed,tau,recommended,correct,censored\n"));
    assert_eq!(a.lines().count(), 5);

    let summary = json(&dir.path().join("out/summary.json"));
    assert_eq!(summary["trials"], 4);
    assert_eq!(summary["config"]["master_seed"], 3);

    let other = run(dir.path(), "simulate", BASE, &["--trials", "2", "--seed", "9", "--delta", "0.2"]);
    assert_eq!(other.status.code(), Some(0));
    let summary = json(&dir.path().join("out/summary.json"));
    assert_eq!(summary["trials"], 2);
    assert_eq!(summary["config"]["delta"], 0.2);
}

#[test]
fn summary_config_reproduces_run() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), "simulate", BASE, &[]).status.code(), Some(0));
    let a = fs::read_to_string(dir.path().join("out/trials.csv")).unwrap();
    let summary = json(&dir.path().join("out/summary.json"));
    let cfg = serde_json::to_string(&summary["config"]).unwrap();
    let other = tempfile::tempdir().unwrap();
    assert_eq!(run(other.path(), "simulate", &cfg, &[]).status.code(), Some(0));
    assert_eq!(a, fs::read_to_string(other.path().join("out/trials.csv")).unwrap());
}

#[test]
fn validate_prints_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), "validate", BASE, &[]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{stdout}");
    assert!(stdout.lines().count() >= 10);
    assert!(stdout.lines().all(|l| l.contains("PASS")));
}

#[test]
fn invalid_config_exits_one_and_names_field() {
    let dir = tempfile::tempdir().unwrap();
    let bad = BASE.replace("\"R\": 2", "\"R\": 1");
    let out = run(dir.path(), "lower-bound", &bad, &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("R"));
    assert!(!dir.path().join("out/bound.json").exists());

    let unknown = BASE.replace("\"R\": 2", "\"R\": 2, \"colour\": 1");
    assert_eq!(run(dir.path(), "family", &unknown, &[]).status.code(), Some(1));

    let row = BASE.replace("[0.7, 0.3]", "[0.6, 0.3]");
    let out = run(dir.path(), "family", &row, &[]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unwritable_output_leaves_no_partial_files() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    fs::create_dir_all(&out_dir).unwrap();
    // a directory named like the second output makes that write fail
    fs::create_dir_all(out_dir.join("summary.json")).unwrap();
    let out = run(dir.path(), "simulate", BASE, &[]);
    assert_ne!(out.status.code(), Some(0));
    assert!(!out_dir.join("trials.csv").exists());
}
