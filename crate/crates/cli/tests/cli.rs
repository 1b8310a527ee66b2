use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::{json, Value};

fn lab_in(dir: &Path, args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_gje-lab"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .env_remove("GJE_LAB_OUT")
        .output()
        .expect("binary runs")
        .status
        .code()
        .unwrap_or(-1)
}

fn json_at(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn write(dir: &Path, name: &str, v: &Value) -> String {
    let p = dir.join(name);
    fs::write(&p, v.to_string()).unwrap();
    p.to_str().unwrap().to_owned()
}

fn line_problem(atoms: &[f64], weights: &[f64], k: usize, max_iter: usize) -> Value {
    let pts: Vec<Vec<f64>> = atoms.iter().map(|&a| vec![a]).collect();
    json!({
        "spec": { "kind": "quadratic", "n": 1 },
        "mu": { "k": k },
        "nu": { "atoms": pts, "weights": weights },
        "gauge": 0.0,
        "tol": 1e-6,
        "max_iter": max_iter,
    })
}

fn even_problem(m: usize, max_iter: usize) -> Value {
    let atoms: Vec<f64> = (0..m).map(|j| (j as f64 + 0.5) / m as f64).collect();
    line_problem(&atoms, &vec![1.0 / m as f64; m], 1024, max_iter)
}

#[test]
fn define_quadratic_succeeds_and_writes_spec() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(lab_in(d.path(), &["define", "--spec", "quadratic:2"]), 0);
    assert!(d.path().join("spec.json").exists());
    assert!(d.path().join("define.meta.json").exists());
    assert!(!d.path().join("error.json").exists());
}

#[test]
fn define_rejects_increasing_v_dependence() {
    let d = tempfile::tempdir().unwrap();
    let spec = write(
        d.path(),
        "bad.json",
        &json!({ "n": 2, "expression": "dot(x,y) + v", "X": { "lo": [0, 0], "hi": [1, 1] }, "Y": { "lo": [0, 0], "hi": [1, 1] } }),
    );
    let code = lab_in(d.path(), &["define", "--spec", &spec]);
    assert_eq!(code, 2);
    let err = json_at(&d.path().join("error.json"));
    assert_eq!(err["code"], 2);
    assert_eq!(err["command"], "define");
}

#[test]
fn define_missing_spec_is_usage_error() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(lab_in(d.path(), &["define", "--spec", "/nonexistent/spec.json"]), 1);
    assert_eq!(lab_in(d.path(), &["define"]), 1);
    assert!(d.path().join("error.json").exists());
}

#[test]
fn unknown_flag_is_usage_error() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(lab_in(d.path(), &["define", "--bogus"]), 1);
    assert_eq!(json_at(&d.path().join("error.json"))["code"], 1);
    assert_eq!(lab_in(d.path(), &["define", "--spec", "G2", "--tol", "-1"]), 1);
}

#[test]
fn scan_quadratic_is_degenerate_and_line_is_vacuous() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(lab_in(d.path(), &["scan-mtw", "--spec", "quadratic:2"]), 3);
    let rep = json_at(&d.path().join("g3_report.json"));
    assert!(rep["samples"].is_u64());
    assert!(d.path().join("g3_samples.csv").exists());

    let d1 = tempfile::tempdir().unwrap();
    assert_eq!(lab_in(d1.path(), &["scan-mtw", "--spec", "quadratic:1"]), 0);
}

#[test]
fn solve_two_atoms_gives_half_gap() {
    let d = tempfile::tempdir().unwrap();
    let p = write(d.path(), "p.json", &line_problem(&[0.0, 1.0], &[0.5, 0.5], 1024, 100));
    assert_eq!(lab_in(d.path(), &["solve", "--problem", &p]), 0);
    let sol = json_at(&d.path().join("solution.json"));
    let h = sol["heights"].as_array().unwrap();
    let gap = h[1].as_f64().unwrap() - h[0].as_f64().unwrap();
    assert!((gap - 0.5).abs() <= 2.0 / 1024.0, "gap {gap}");
    assert!(d.path().join("cells.csv").exists());
}

#[test]
fn solve_iteration_cap_keeps_best_state() {
    let d = tempfile::tempdir().unwrap();
    let p = write(d.path(), "p.json", &even_problem(64, 1));
    assert_eq!(lab_in(d.path(), &["solve", "--problem", &p]), 6);
    let sol = json_at(&d.path().join("solution.json"));
    assert_eq!(sol["heights"].as_array().unwrap().len(), 64);
    assert!(sol["residual"].as_f64().unwrap() > 1e-6);
    assert_eq!(json_at(&d.path().join("error.json"))["code"], 6);
}

#[test]
fn solve_rejects_unbalanced_weights() {
    let d = tempfile::tempdir().unwrap();
    let p = write(d.path(), "p.json", &line_problem(&[0.0, 1.0], &[0.5, 0.6], 256, 100));
    assert_eq!(lab_in(d.path(), &["solve", "--problem", &p]), 1);
}

#[test]
fn verify_needs_scan_constants() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(lab_in(d.path(), &["verify", "--spec", "G2", "--suite", "qglp"]), 7);
    assert_eq!(lab_in(d.path(), &["define", "--spec", "G2"]), 0);
    assert_eq!(lab_in(d.path(), &["verify", "--spec", "G2", "--suite", "qglp"]), 7);
    let err = json_at(&d.path().join("error.json"));
    assert!(err["error"].as_str().unwrap().contains("alpha missing"), "{err}");
}

#[test]
fn verify_quadratic_full_suite_passes() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(lab_in(d.path(), &["define", "--spec", "quadratic:2"]), 0);
    assert_eq!(lab_in(d.path(), &["scan-mtw", "--spec", "quadratic:2"]), 3);
    assert_eq!(lab_in(d.path(), &["verify", "--spec", "quadratic:2"]), 0);
    let rep = json_at(&d.path().join("verify.json"));
    assert_eq!(rep["pass"], true);
    let inclusion = rep["checks"].as_array().unwrap().iter().find(|r| r["suite"] == "inclusion").unwrap();
    assert_eq!(inclusion["applicable"], false);
}

#[test]
fn verify_unknown_suite_is_usage_error() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(lab_in(d.path(), &["verify", "--spec", "G2", "--suite", "nope"]), 1);
}

#[test]
fn diagnose_too_few_atoms_is_insufficient() {
    let d = tempfile::tempdir().unwrap();
    let p = write(d.path(), "p.json", &even_problem(4, 500));
    assert_eq!(lab_in(d.path(), &["diagnose", "--problem", &p]), 8);
}

#[test]
fn diagnose_spike_fails_measure_condition() {
    let d = tempfile::tempdir().unwrap();
    let mut prob = even_problem(8, 500);
    prob["mu"] = json!({ "k": 256, "spike": [0.5] });
    let p = write(d.path(), "p.json", &prob);
    assert_eq!(lab_in(d.path(), &["diagnose", "--problem", &p]), 9);
    let mc = json_at(&d.path().join("measure_condition.json"));
    assert_eq!(mc["holds"], false);
}

#[test]
fn out_env_overrides_flag() {
    let d = tempfile::tempdir().unwrap();
    let env_dir = d.path().join("env");
    let flag_dir = d.path().join("flag");
    let code = Command::new(env!("CARGO_BIN_EXE_gje-lab"))
        .args(["define", "--spec", "G2", "--out"])
        .arg(&flag_dir)
        .env("GJE_LAB_OUT", &env_dir)
        .status()
        .unwrap()
        .code();
    assert_eq!(code, Some(0));
    assert!(env_dir.join("spec.json").exists());
    assert!(!flag_dir.exists());
}

#[test]
fn report_collects_summary() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(lab_in(d.path(), &["report"]), 1);
    assert_eq!(lab_in(d.path(), &["define", "--spec", "G2"]), 0);
    assert_eq!(lab_in(d.path(), &["scan-mtw", "--spec", "G2"]), 0);
    assert_eq!(lab_in(d.path(), &["report"]), 0);
    let csv = fs::read_to_string(d.path().join("summary.csv")).unwrap();
    assert!(csv.starts_with("source,check,pass,margin"));
    assert!(csv.lines().count() > 2);
}

#[test]
fn in_process_run_matches_binary() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().to_str().unwrap();
    std::env::remove_var("GJE_LAB_OUT");
    assert_eq!(gje_cli::run(["gje-lab", "define", "--spec", "quadratic:1", "--out", out]), 0);
    assert_eq!(gje_cli::run(["gje-lab", "--help"]), 0);
}
