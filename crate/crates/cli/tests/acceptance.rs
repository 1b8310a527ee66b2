//! One pass/fail line per acceptance criterion, written straight to the
//! terminal so it shows up even when the harness captures output.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use gje_core::alexandrov::{solve_alexandrov, DiscreteMeasure, GridMeasure, SolverOptions};
use gje_core::expmaps;
use gje_core::genfun::{Builtin, ConstantsLedger, GenFun, WindowS};
use gje_core::geom::{self, ConvexBody, Domain, Point};
use gje_core::mtw;
use gje_core::regularity::sigma_formula;
use gje_core::rng::stream_rng;
use rand::Rng;
use serde_json::{json, Value};

fn report(id: u32, title: &str, pass: bool, detail: &str, elapsed: Duration, limit: Duration) {
    let verdict = if pass && elapsed <= limit { "PASS" } else { "FAIL" };
    let line = format!("criterion {id} [{verdict}] {title}: {detail} ({:.2} s, limit {} s)\n", elapsed.as_secs_f64(), limit.as_secs());
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {id}: {detail}");
    assert!(elapsed <= limit, "criterion {id} took {elapsed:?}");
}

fn lab(dir: &Path, args: &[&str]) -> i32 {
    let out = Command::new(env!("CARGO_BIN_EXE_gje-lab"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .env_remove("GJE_LAB_OUT")
        .output()
        .expect("binary runs");
    out.status.code().unwrap_or(-1)
}

fn read_json(path: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

fn uniform_1d_problem(atoms: usize, k: usize, tol: f64) -> Value {
    let pts: Vec<Vec<f64>> = (0..atoms).map(|j| vec![(j as f64 + 0.5) / atoms as f64]).collect();
    json!({
        "spec": { "kind": "quadratic", "n": 1 },
        "mu": { "k": k },
        "nu": { "atoms": pts, "weights": vec![1.0 / atoms as f64; atoms] },
        "tol": tol,
        "max_iter": 4000,
    })
}

#[test]
fn criterion_1_exponent_formulas() {
    let t = Instant::now();
    let mut ok = true;
    let mut worst: f64 = 0.0;
    for (n, p, want) in [(2, f64::INFINITY, 1.0 / 7.0), (1, f64::INFINITY, 1.0 / 3.0), (2, 4.0, 1.0 / 13.0)] {
        let s = sigma_formula(n, p).unwrap().sigma;
        ok &= s == want;
        worst = worst.max((s - want).abs());
    }
    for n in 1..=5usize {
        let s = sigma_formula(n, f64::INFINITY).unwrap().sigma;
        let want = 1.0 / (4 * n - 1) as f64;
        ok &= s == want;
        worst = worst.max((s - want).abs());
    }
    report(1, "exponent formulas", ok, &format!("max deviation {worst:e} (exact equality required)"), t.elapsed(), Duration::from_secs(1));
}

#[test]
fn criterion_2_mtw_cross_evaluator() {
    let t = Instant::now();
    let n = 2;
    let none = BTreeMap::new();
    let unit = Domain::unit_cube(n);
    let mut detail = Vec::new();
    let mut ok = true;
    for cost in ["norm2(x-y)/2", "-dot(x,y)"] {
        let r = mtw::cross_check(cost, &none, n, unit.clone(), unit.clone(), 100, 3).unwrap();
        let fd_max = r.max_abs_value + r.max_abs_diff;
        ok &= r.points == 100 && r.max_abs_value <= 1e-8 && fd_max <= 1e-8;
        detail.push(format!("{cost}: |exact| {:.1e}, |fd| {:.1e}", r.max_abs_value, fd_max));
    }
    let x = Domain::cube(n, 0.0, 1.0).unwrap();
    let y = Domain::cube(n, 2.0, 3.0).unwrap();
    let r = mtw::cross_check("-0.5*log(norm2(x-y))", &none, n, x, y, 100, 3).unwrap();
    ok &= r.points == 100 && r.max_rel_diff <= 1e-4;
    detail.push(format!("-log|x-y|: rel diff {:.1e}", r.max_rel_diff));
    report(2, "MTW cross-evaluator", ok, &detail.join("; "), t.elapsed(), Duration::from_secs(30));
}

#[test]
fn criterion_3_implicit_map_identities() {
    let t = Instant::now();
    let mut ok = true;
    let mut detail = Vec::new();
    for kind in Builtin::ALL {
        let spec = GenFun::builtin(kind, 2).unwrap();
        let window = WindowS::default_for(&spec).unwrap();
        let ce = expmaps::estimate_ce(&spec, &window, 5, &mut ConstantsLedger::default()).unwrap();
        let r = expmaps::verify_exp_derivative(&spec, &window, 100, 5, Some(ce)).unwrap();
        ok &= r.trials >= 100 && r.max_relative_error <= 1e-4 && r.round_trip_error <= 1e-8;
        detail.push(format!("{}: {} pts, Dp {:.1e}, rt {:.1e}", kind.name(), r.trials, r.max_relative_error, r.round_trip_error));
    }
    report(3, "implicit-map identities", ok, &detail.join("; "), t.elapsed(), Duration::from_secs(60));
}

#[test]
fn criterion_4_solver_correctness() {
    let t = Instant::now();
    let h = 1.0 / 1024.0;
    let g0 = GenFun::builtin(Builtin::Quadratic, 1).unwrap();
    let line = GridMeasure::uniform(g0.x_domain(), 1024).unwrap();
    let opts = SolverOptions { tol: 1e-3, max_iter: 2000, gauge: Some(0.0) };

    let two = DiscreteMeasure::uniform(vec![vec![0.0], vec![1.0]]).unwrap();
    let s2 = solve_alexandrov(&g0, &line, &two, &opts).unwrap();
    let gap2 = s2.state.heights[1] - s2.state.heights[0];

    let three = DiscreteMeasure::uniform(vec![vec![0.0], vec![0.5], vec![1.0]]).unwrap();
    let s3 = solve_alexandrov(&g0, &line, &three, &opts).unwrap();
    let (g31, g32) = (s3.state.heights[1] - s3.state.heights[0], s3.state.heights[2] - s3.state.heights[0]);

    let g2d = GenFun::builtin(Builtin::Quadratic, 2).unwrap();
    let square = GridMeasure::uniform(g2d.x_domain(), 128).unwrap();
    let mut rng = stream_rng(11, 0);
    let atoms: Vec<Point> = (0..25)
        .map(|i| vec![(i % 5) as f64 / 5.0 + rng.gen_range(0.02..0.18), (i / 5) as f64 / 5.0 + rng.gen_range(0.02..0.18)])
        .collect();
    let t2d = Instant::now();
    let s25 = solve_alexandrov(&g2d, &square, &DiscreteMeasure::uniform(atoms).unwrap(), &SolverOptions { tol: 1e-3, ..Default::default() }).unwrap();
    let took_2d = t2d.elapsed();

    let ok = (gap2 - 0.5).abs() <= 2.0 * h
        && s2.state.residual <= 1e-3
        && (g31 - 1.0 / 6.0).abs() <= 2.0 * h
        && (g32 - 0.5).abs() <= 2.0 * h
        && s3.state.residual <= 1e-3
        && s25.state.residual <= 1e-3
        && took_2d < Duration::from_secs(60);
    let detail = format!(
        "2-atom gap {gap2:.6} (res {:.1e}); 3-atom gaps {g31:.6}, {g32:.6} (res {:.1e}); 2D 25 atoms res {:.1e} in {:.2} s",
        s2.state.residual,
        s3.state.residual,
        s25.state.residual,
        took_2d.as_secs_f64()
    );
    report(4, "solver correctness", ok, &detail, t.elapsed(), Duration::from_secs(90));
}

#[test]
fn criterion_5_lemma_suite() {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let codes = [
        lab(dir.path(), &["define", "--spec", "G2"]),
        lab(dir.path(), &["scan-mtw", "--spec", "G2"]),
        lab(dir.path(), &["verify", "--spec", "G2"]),
    ];
    let verify = read_json(dir.path().join("verify.json"));
    let required = ["interpolation", "qglp", "semiconvexity", "c3", "inclusion", "volume"];
    let mut ok = codes == [0, 0, 0];
    let mut detail = Vec::new();
    for row in verify["checks"].as_array().unwrap() {
        let suite = row["suite"].as_str().unwrap();
        if !required.contains(&suite) {
            continue;
        }
        let probes = row["probes"].as_u64().unwrap_or(0);
        let margin = row["worst_margin"].as_f64().unwrap_or(f64::NEG_INFINITY);
        ok &= row["pass"].as_bool() == Some(true) && probes >= 200 && margin >= -1e-7;
        detail.push(format!("{} {probes}/{margin:.1e}", row["name"].as_str().unwrap()));
    }
    ok &= detail.len() == 7;
    report(5, "lemma suite on G2 (probes/worst margin)", ok, &format!("exit {codes:?}; {}", detail.join(", ")), t.elapsed(), Duration::from_secs(600));
}

#[test]
fn criterion_6_convex_geometry() {
    let t = Instant::now();
    let square = geom::verify_volume_lemmas(&ConvexBody::unit_cube(2), 100, 40_000, 7).unwrap();
    let tri = ConvexBody::from_vertices(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let triangle = geom::verify_volume_lemmas(&tri, 100, 40_000, 9).unwrap();
    let sq_ok = (square.c_a - 0.25).abs() <= 3.0 * square.c_a_stderr;
    let tri_ok = (triangle.c_a - 0.125).abs() <= 3.0 * triangle.c_a_stderr;
    let tubes = square.tube_trials.len() + triangle.tube_trials.len();
    let tube_ok = square.tube_trials.len() >= 100 && triangle.tube_trials.len() >= 100 && square.tube_bound_violations == 0 && triangle.tube_bound_violations == 0;
    let detail = format!(
        "square C_A {:.4} ± {:.4} (want 1/4), triangle C_A {:.4} ± {:.4} (want 1/8), {tubes} tube trials, violations {}",
        square.c_a,
        square.c_a_stderr,
        triangle.c_a,
        triangle.c_a_stderr,
        square.tube_bound_violations + triangle.tube_bound_violations
    );
    report(6, "convex geometry", sq_ok && tri_ok && tube_ok, &detail, t.elapsed(), Duration::from_secs(120));
}

#[test]
fn criterion_7_regularity_diagnostic() {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let problem = dir.path().join("problem.json");
    fs::write(&problem, uniform_1d_problem(64, 1024, 1e-6).to_string()).unwrap();
    let p = problem.to_str().unwrap();
    let code = lab(dir.path(), &["diagnose", "--problem", p]);
    let fit = read_json(dir.path().join("exponent_fit.json"));
    let sigma = fit["sigma_hat"].as_f64().unwrap();
    let r2 = fit["r2"].as_f64().unwrap();
    let meso = fit["mesoscale"].as_f64().unwrap();
    let half_cell = fit["max_cell_diameter"].as_f64().unwrap();
    let guard = lab(dir.path(), &["diagnose", "--problem", p, "--h-min", &(1.5 * half_cell).to_string()]);
    let err = read_json(dir.path().join("error.json"));
    let rejected = guard != 0 && err["error"].as_str().unwrap_or("").contains("mesoscale");
    let ok = code == 0 && sigma >= 0.9 && r2 >= 0.99 && sigma > 1.0 / 3.0 && (meso - 2.0 / 64.0).abs() < 1e-12 && rejected;
    let detail = format!("sigma_hat {sigma:.4}, r2 {r2:.4}, bound 1/3, mesoscale {meso}; h_min = 1.5 cell rejected: {rejected} (exit {guard})");
    report(7, "regularity diagnostic", ok, &detail, t.elapsed(), Duration::from_secs(60));
}

/// Every report file except the timestamped metadata.
fn reports(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| !p.to_string_lossy().ends_with(".meta.json"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn criterion_8_determinism() {
    let t = Instant::now();
    let work = tempfile::tempdir().unwrap();
    let problem = work.path().join("problem.json");
    fs::write(&problem, uniform_1d_problem(16, 256, 1e-6).to_string()).unwrap();
    let p = problem.to_str().unwrap();
    let runs: Vec<(&str, Vec<&str>)> = vec![
        ("define", vec!["define", "--spec", "G2"]),
        ("scan-mtw", vec!["scan-mtw", "--spec", "G2", "--seed", "3"]),
        ("verify", vec!["verify", "--spec", "G2", "--seed", "3", "--suite", "derivative,qglp,c3,inclusion,volume"]),
        ("solve", vec!["solve", "--problem", p]),
        ("diagnose", vec!["diagnose", "--problem", p, "--seed", "3"]),
        ("report", vec!["report"]),
    ];
    let dirs = [work.path().join("a"), work.path().join("b")];
    let mut codes = Vec::new();
    for (k, dir) in dirs.iter().enumerate() {
        for (_, args) in &runs {
            let mut args = args.clone();
            let workers = if k == 0 { "1" } else { "4" };
            args.extend(["--workers", workers]);
            codes.push(lab(dir, &args));
        }
    }
    let (a, b) = (reports(&dirs[0]), reports(&dirs[1]));
    let differing: Vec<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
    let ok = !a.is_empty() && a.len() == b.len() && differing.is_empty() && codes.iter().all(|&c| c == 0);
    let detail = format!("{} report files compared across worker counts 1 and 4, differing {differing:?}, exit codes {codes:?}", a.len());
    report(8, "determinism", ok, &detail, t.elapsed(), Duration::from_secs(300));
}
