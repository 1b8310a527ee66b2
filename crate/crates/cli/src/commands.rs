use std::fs;

use gje_core::alexandrov::{cells_csv, solve_alexandrov, Problem, SolutionFile, SolverState};
use gje_core::expmaps;
use gje_core::genfun::{check_gmono, ConstantsLedger, GenFun};
use gje_core::mtw::{self, G3Verdict};
use gje_core::regularity::{self, FitOptions, ModulusOptions};
use gje_core::Error;
use serde::Serialize;
use serde_json::{json, Value};

use crate::input::{load_problem, load_spec, load_window};
use crate::io::{CmdResult, Failure, Out};
use crate::Common;

fn require<'a>(value: &'a Option<String>, flag: &str) -> Result<&'a str, Failure> {
    value.as_deref().ok_or_else(|| Failure::usage(format!("{flag} is required")))
}

fn core_failure(code: i32) -> impl Fn(Error) -> Failure {
    move |e| Failure::new(code, e.to_string())
}

// ---------------------------------------------------------------------------
// define

#[derive(Serialize)]
struct ConditionResult {
    name: &'static str,
    holds: bool,
    detail: Value,
}

pub fn define(c: &Common, out: &Out) -> CmdResult {
    let spec = load_spec(require(&c.spec, "--spec")?)?;
    let window = load_window(c.window.as_deref(), &spec)?;
    let mut ledger = ConstantsLedger::default();
    let mut conditions = Vec::new();

    let gmono = check_gmono(&spec, &window, c.grid, &mut ledger);
    conditions.push(ConditionResult { name: "G-mono", holds: gmono.holds, detail: json!(gmono) });

    let ce = if gmono.holds { Some(expmaps::estimate_ce(&spec, &window, c.grid, &mut ledger)) } else { None };
    let (holds, detail) = match &ce {
        Some(Ok(v)) => (true, json!({ "C_e": v })),
        Some(Err(e)) => (false, json!({ "error": e.to_string() })),
        None => (false, json!({ "error": "skipped: H is not defined without G-mono" })),
    };
    conditions.push(ConditionResult { name: "E-nondegeneracy", holds, detail });

    let mut band_worst = f64::INFINITY;
    for x in spec.x_domain().grid(c.grid) {
        for y in spec.y_domain().grid(c.grid) {
            let (lo, hi) = spec.band(&x, &y).map_err(core_failure(2))?;
            band_worst = band_worst.min(hi - lo);
        }
    }
    let in_band = window.lattice(&spec, c.grid).len();
    conditions.push(ConditionResult {
        name: "band",
        holds: band_worst > 0.0 && in_band > 0,
        detail: json!({ "min_width": band_worst, "window_points_in_band": in_band }),
    });

    let report = json!({
        "name": spec.name(),
        "n": spec.n(),
        "v_separable": spec.is_v_separable(),
        "window": window,
        "beta": gmono.beta,
        "C_e": ce.as_ref().and_then(|r| r.as_ref().ok()),
        "conditions": conditions,
    });
    out.write_json("spec.json", &spec.to_spec_file())?;
    out.write_json("define.json", &report)?;
    out.save_ledger(&ledger)?;
    println!("{} (n = {})", spec.name(), spec.n());
    for cond in &conditions {
        println!("  {:<16} {}", cond.name, if cond.holds { "ok" } else { "FAILED" });
    }
    if let Some(b) = gmono.beta {
        println!("  beta = {b}");
    }
    if let Some(Ok(v)) = &ce {
        println!("  C_e = {v}");
    }
    match conditions.iter().find(|c| !c.holds) {
        Some(bad) => Err(Failure::new(2, format!("{} condition fails", bad.name)).with_detail(bad.detail.clone())),
        None => Ok(()),
    }
}

// ---------------------------------------------------------------------------
// scan-mtw

const SCAN_DIRECTIONS: usize = 4;
const CROSS_POINTS: usize = 100;

pub fn scan_mtw(c: &Common, out: &Out) -> CmdResult {
    let spec = load_spec(require(&c.spec, "--spec")?)?;
    let window = load_window(c.window.as_deref(), &spec)?;
    let mut ledger = out.load_ledger()?;
    let rep = mtw::scan_g3(&spec, &window, c.grid, SCAN_DIRECTIONS, c.seed, &mut ledger);
    let cross = match (spec.n() > 1, spec.cost_expression()) {
        (true, Some(cost)) => Some(
            mtw::cross_check(&cost, spec.params(), spec.n(), spec.x_domain().clone(), spec.y_domain().clone(), CROSS_POINTS, c.seed)
                .map(|r| json!({ "cost": cost, "report": r }))
                .unwrap_or_else(|e| json!({ "cost": cost, "error": e.to_string() })),
        ),
        _ => None,
    };
    let report = json!({
        "verdict": rep.verdict,
        "vacuous": rep.vacuous,
        "alpha": rep.min_value,
        "samples": rep.samples.len(),
        "attempted": rep.attempted,
        "skipped": rep.skipped,
        "skip_rate": rep.skip_rate(),
        "cross_check": cross,
        "window": window,
    });
    out.write_json("g3_report.json", &report)?;
    out.write_text("g3_samples.csv", &rep.to_csv())?;
    out.save_ledger(&ledger)?;
    println!("verdict {:?}{}", rep.verdict, if rep.vacuous { " (vacuous)" } else { "" });
    if rep.skip_rate() > 0.1 {
        return Err(Failure::new(5, format!("{} of {} lattice points failed to evaluate", rep.skipped, rep.attempted)));
    }
    match rep.verdict {
        G3Verdict::G3s => Ok(()),
        G3Verdict::G3wDegenerate => Err(Failure::new(3, format!("G3w-degenerate: min value {:?}", rep.min_value))),
        G3Verdict::Violated => Err(Failure::new(4, format!("G3 violated: min value {:?}", rep.min_value))),
    }
}

// ---------------------------------------------------------------------------
// solve

fn build_problem(c: &Common) -> Result<Problem, Failure> {
    let path = c.problem.as_deref().ok_or_else(|| Failure::usage("--problem is required"))?;
    let mut problem = load_problem(path)?.build().map_err(core_failure(1))?;
    if let Some(tol) = c.tol {
        problem.options.tol = tol;
    }
    Ok(problem)
}

fn run_solver(problem: &Problem, out: &Out) -> Result<SolverState, Failure> {
    match solve_alexandrov(&problem.spec, &problem.mu, &problem.nu, &problem.options) {
        Ok(sol) => {
            out.write_json("solution.json", &SolutionFile::from(&sol))?;
            out.write_text("cells.csv", &cells_csv(&problem.mu, &sol.cells))?;
            println!("residual {:e} after {} iterations", sol.state.residual, sol.state.iterations);
            Ok(sol.state)
        }
        Err(Error::SolverNonConvergence(best)) => {
            let file = SolutionFile {
                heights: best.heights.clone(),
                residual: best.residual,
                iterations: best.iterations,
                cell_masses: best.cell_masses.clone(),
                warnings: Vec::new(),
            };
            out.write_json("solution.json", &file)?;
            Err(Failure::new(6, format!("no convergence: best residual {:e} after {} iterations", best.residual, best.iterations))
                .with_detail(json!(file)))
        }
        Err(e) => Err(Failure::usage(e.to_string())),
    }
}

pub fn solve(c: &Common, out: &Out) -> CmdResult {
    let problem = build_problem(c)?;
    run_solver(&problem, out).map(|_| ())
}

/// A solution on disk that matches the problem, or a fresh solve.
fn solved_state(problem: &Problem, out: &Out) -> Result<SolverState, Failure> {
    if let Ok(text) = fs::read_to_string(out.path("solution.json")) {
        if let Ok(file) = serde_json::from_str::<SolutionFile>(&text) {
            if file.heights.len() == problem.nu.len() && file.residual <= problem.options.tol {
                return Ok(SolverState { heights: file.heights, cell_masses: file.cell_masses, residual: file.residual, iterations: file.iterations });
            }
        }
    }
    run_solver(problem, out)
}

// ---------------------------------------------------------------------------
// diagnose

const MEASURE_BALLS: usize = 512;

pub fn diagnose(c: &Common, out: &Out) -> CmdResult {
    let problem = build_problem(c)?;
    let Problem { spec, mu, nu, .. } = &problem;
    let measure = regularity::check_measure_condition(mu, c.p, MEASURE_BALLS, c.seed).map_err(core_failure(1))?;
    out.write_json("measure_condition.json", &measure)?;
    if !measure.holds {
        return Err(Failure::new(9, format!("measure condition fails for p = {} (growth ratio {})", c.p, measure.growth_ratio)));
    }
    let state = solved_state(&problem, out)?;
    let opts = FitOptions { h_min: c.h_min, seed: c.seed, ..Default::default() };
    let fit = match regularity::fit_holder_exponent(spec, &state, mu, nu, c.p, &opts) {
        Ok(f) => f,
        Err(Error::InsufficientData(m)) => return Err(Failure::new(8, format!("insufficient data: {m}"))),
        Err(e) => return Err(Failure::usage(e.to_string())),
    };
    out.write_json("exponent_fit.json", &fit)?;
    out.write_text("exponent_fit.csv", &fit.to_csv())?;
    let modulus = modulus_report(spec, &state, &problem, &measure, fit.mesoscale, c.seed);
    out.write_json("modulus.json", &modulus)?;
    println!("sigma_hat {} (r2 {}) bound {} window [{}, {}]", fit.sigma_hat, fit.r2, fit.sigma_bound, fit.scale_window.0, fit.scale_window.1);
    if fit.pass {
        Ok(())
    } else {
        Err(Failure::new(10, format!("sigma_hat = {} below the bound {} less 0.05", fit.sigma_hat, fit.sigma_bound)))
    }
}

fn modulus_report(spec: &GenFun, state: &SolverState, problem: &Problem, measure: &regularity::MeasureConditionReport, meso: f64, seed: u64) -> Value {
    let range = (0.25 * meso, 0.5 * spec.x_domain().diameter());
    let run = || -> gje_core::Result<_> {
        let pairs = regularity::sample_pairs(spec, state, &problem.nu, range, FitOptions::default().pairs, seed.wrapping_add(1))?;
        regularity::modulus_analysis(spec.n(), &pairs, measure, meso, &ModulusOptions::default())
    };
    match run() {
        Ok(m) => json!(m),
        Err(e) => json!({ "error": e.to_string() }),
    }
}

// ---------------------------------------------------------------------------
// report

/// Reports gathered into the summary, with the pointer to their pass flag.
const SOURCES: [(&str, &str); 6] = [
    ("define.json", ""),
    ("g3_report.json", "/verdict"),
    ("solution.json", "/residual"),
    ("verify.json", "/pass"),
    ("measure_condition.json", "/holds"),
    ("exponent_fit.json", "/pass"),
];

pub fn report(_c: &Common, out: &Out) -> CmdResult {
    let mut rows = Vec::new();
    let mut csv = String::from("source,check,pass,margin\n");
    for (file, pointer) in SOURCES {
        let Ok(text) = fs::read_to_string(out.path(file)) else { continue };
        let value: Value = serde_json::from_str(&text).map_err(|e| Failure::usage(format!("malformed {file}: {e}")))?;
        match file {
            "define.json" => {
                for c in value["conditions"].as_array().into_iter().flatten() {
                    csv.push_str(&format!("define,{},{},\n", c["name"].as_str().unwrap_or(""), c["holds"]));
                }
            }
            "verify.json" => {
                for s in value["checks"].as_array().into_iter().flatten() {
                    let margin = s["worst_margin"].as_f64().map(gje_core::report::csv_num).unwrap_or_default();
                    csv.push_str(&format!("verify,{},{},{margin}\n", s["name"].as_str().unwrap_or(""), s["pass"]));
                }
            }
            _ => csv.push_str(&format!("{},{},{},\n", file.trim_end_matches(".json"), pointer.trim_start_matches('/'), value.pointer(pointer).unwrap_or(&Value::Null))),
        }
        let status = if pointer.is_empty() { Value::Null } else { value.pointer(pointer).cloned().unwrap_or(Value::Null) };
        rows.push(json!({ "source": file, "status": status }));
    }
    if rows.is_empty() {
        return Err(Failure::usage("no reports found in the output directory"));
    }
    out.write_json("summary.json", &json!({ "reports": rows }))?;
    out.write_text("summary.csv", &csv)?;
    print!("{csv}");
    Ok(())
}
