use std::fs;

use gje_core::alexandrov::{self, SolutionFile, SolverState, TestSet};
use gje_core::expmaps;
use gje_core::gconvex::{self, Envelope};
use gje_core::genfun::{Constant, ConstantsLedger, GenFun, WindowS};
use gje_core::geom::{self, Point, Region};
use gje_core::mtw::{self, G3Verdict, InequalityReport, LemmaConstants, WindowNorms};
use gje_core::regularity::{self, InclusionConstants, InclusionOptions, VolumeOptions};
use gje_core::rng::stream_rng;
use gje_core::Error;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use serde_json::{json, Value};

use crate::input::{load_problem, load_spec, load_window};
use crate::io::{CmdResult, Failure, Out};
use crate::Common;

pub const SUITES: [&str; 10] =
    ["derivative", "convexity", "interpolation", "qglp", "semiconvexity", "c3", "inclusion", "volume", "geometry", "pushforward"];

/// Margin threshold shared by every check.
pub const MARGIN_FLOOR: f64 = -1e-7;

#[derive(Clone, Debug, Serialize)]
pub struct CheckRow {
    pub suite: &'static str,
    pub name: String,
    pub applicable: bool,
    pub probes: usize,
    pub skipped: usize,
    pub worst_margin: Option<f64>,
    pub pass: bool,
    pub detail: Value,
}

impl CheckRow {
    fn new(suite: &'static str, name: &str, probes: usize, worst_margin: f64, pass: bool, detail: Value) -> Self {
        Self { suite, name: name.to_string(), applicable: true, probes, skipped: 0, worst_margin: Some(worst_margin), pass, detail }
    }

    fn from_inequality(suite: &'static str, r: &InequalityReport) -> Self {
        let pass = r.probes > 0 && r.worst_margin >= MARGIN_FLOOR;
        Self { skipped: r.skipped, ..Self::new(suite, &r.name, r.probes, r.worst_margin, pass, json!(r)) }
    }

    fn not_applicable(suite: &'static str, reason: &str) -> Self {
        Self {
            suite,
            name: suite.to_string(),
            applicable: false,
            probes: 0,
            skipped: 0,
            worst_margin: None,
            pass: true,
            detail: json!({ "reason": reason }),
        }
    }
}

fn parse_suites(arg: &str) -> Result<Vec<&'static str>, Failure> {
    if arg == "full" {
        return Ok(SUITES.to_vec());
    }
    arg.split(',')
        .map(|s| SUITES.iter().copied().find(|k| *k == s.trim()).ok_or_else(|| Failure::usage(format!("unknown suite `{s}`"))))
        .collect()
}

fn missing(e: Error) -> Failure {
    match e {
        Error::MissingConstant(_) => Failure::new(7, e.to_string()),
        other => Failure::new(1, other.to_string()),
    }
}

/// Window constants shared by the suites, derived once.
struct Context<'a> {
    spec: &'a GenFun,
    window: &'a WindowS,
    ledger: ConstantsLedger,
    grid: usize,
    seed: u64,
    norms: Option<WindowNorms>,
}

impl Context<'_> {
    fn norms(&mut self) -> Result<WindowNorms, Failure> {
        if self.norms.is_none() {
            self.norms = Some(mtw::window_norms(self.spec, self.window, self.grid).map_err(|e| Failure::new(1, e.to_string()))?);
        }
        Ok(self.norms.clone().expect("set above"))
    }

    fn c_e(&self) -> Result<f64, Failure> {
        self.ledger.get(Constant::Ce).map_err(missing)
    }

    /// Interpolation constants; on a degenerate window (`α = 0`) the
    /// quantitative terms vanish.
    fn lemma_constants(&mut self) -> Result<(LemmaConstants, bool), Failure> {
        let c_e = self.c_e()?;
        let norms = self.norms()?;
        let diam = self.spec.y_domain().diameter();
        match (self.ledger.get(Constant::Alpha), self.ledger.g3_verdict) {
            (Ok(alpha), _) => {
                let lc = LemmaConstants::derive(&norms, c_e, alpha, diam);
                lc.record(self.window, &mut self.ledger).map_err(|e| Failure::new(1, e.to_string()))?;
                Ok((lc, false))
            }
            (Err(_), Some(G3Verdict::G3wDegenerate)) => {
                let flat = LemmaConstants::derive(&norms, c_e, 1.0, diam);
                let delta2 = if norms.d2pp_a == 0.0 { 0.0 } else { f64::INFINITY };
                Ok((LemmaConstants { alpha: 0.0, delta1: 0.0, delta2, delta0: 0.0, gamma: 0.0, c2: 0.0, ..flat }, true))
            }
            (Err(e), _) => Err(missing(e)),
        }
    }
}

/// Two supports through `x_mid` whose foci sit at `y_c ± half·e`, with the
/// unit direction `dir` along which their gradients separate.
struct CrossFixture {
    phi: Envelope,
    x_mid: Point,
    dir: Point,
    dy: f64,
}

fn cross_fixture(spec: &GenFun, window: &WindowS, e: &[f64]) -> Result<CrossFixture, Failure> {
    let fail = |e: Error| Failure::new(1, format!("fixture: {e}"));
    let yc = spec.y_domain().center();
    let (lo, hi) = spec.y_domain().bbox();
    let half = 0.35 * lo.iter().zip(&hi).map(|(a, b)| b - a).fold(f64::INFINITY, f64::min);
    let y0: Point = yc.iter().zip(e).map(|(c, d)| c - half * d).collect();
    let y1: Point = yc.iter().zip(e).map(|(c, d)| c + half * d).collect();
    let x = &window.x0;
    let v0 = spec.invert_h(x, &y0, window.u0).map_err(fail)?;
    let v1 = spec.invert_h(x, &y1, window.u0).map_err(fail)?;
    let p0 = spec.grad_x(x, &y0, v0).map_err(fail)?;
    let p1 = spec.grad_x(x, &y1, v1).map_err(fail)?;
    let d = &p1 - &p0;
    let len = d.norm();
    if !(len > 0.0) {
        return Err(Failure::new(1, "fixture supports do not separate"));
    }
    let dir: Point = d.iter().map(|c| c / len).collect();
    let dy = geom::dist(&y0, &y1);
    let phi = Envelope::from_foci(&[(y0, v0), (y1, v1)]).map_err(fail)?;
    Ok(CrossFixture { phi, x_mid: x.clone(), dir, dy })
}

/// Axis directions first, then random unit vectors.
fn directions(n: usize, count: usize, seed: u64) -> Vec<Point> {
    let mut rng = stream_rng(seed, 0xd1);
    (0..count)
        .map(|k| {
            if k < n {
                (0..n).map(|i| if i == k { 1.0 } else { 0.0 }).collect()
            } else {
                let g: Point = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let len = geom::norm(&g);
                g.iter().map(|c| c / len).collect()
            }
        })
        .collect()
}

fn along(x: &[f64], dir: &[f64], t: f64) -> Point {
    x.iter().zip(dir).map(|(a, d)| a + t * d).collect()
}

fn core_err(e: Error) -> Failure {
    Failure::new(1, e.to_string())
}

// ---------------------------------------------------------------------------
// suites

fn suite_derivative(cx: &mut Context) -> Result<Vec<CheckRow>, Failure> {
    let ce = cx.ledger.get(Constant::Ce).ok();
    let r = expmaps::verify_exp_derivative(cx.spec, cx.window, 100, cx.seed, ce).map_err(core_err)?;
    let margin = (1e-4 - r.max_relative_error).min(1e-8 - r.round_trip_error);
    Ok(vec![CheckRow { skipped: r.skipped, ..CheckRow::new("derivative", "exp_derivative", r.trials, margin, r.pass, json!(r)) }])
}

fn suite_convexity(cx: &mut Context) -> Result<Vec<CheckRow>, Failure> {
    let (x0, u0) = (cx.window.x0.clone(), cx.window.u0);
    let yc = cx.spec.y_domain().center();
    let vc = cx.spec.invert_h(&x0, &yc, u0).map_err(core_err)?;
    let r = expmaps::check_domain_convexity(cx.spec, &[(x0, u0)], &[(yc, vc)], 15, cx.seed);
    let probes = r.h_side.iter().chain(&r.g_side).map(|c| c.points).sum();
    Ok(vec![CheckRow::new("convexity", "domain_convexity", probes, -r.worst_violation, r.convex, json!(r))])
}

fn suite_interpolation(cx: &mut Context) -> Result<Vec<CheckRow>, Failure> {
    let (lc, degenerate) = cx.lemma_constants()?;
    let fixtures = mtw::random_segments(cx.spec, cx.window, 8, 0.05, cx.seed);
    if fixtures.is_empty() {
        return Err(Failure::new(1, "no in-band G-segment fixtures in the window"));
    }
    let (lip, conv) = mtw::verify_interpolation_bounds(cx.spec, &fixtures, &lc, 256, cx.seed);
    let mut rows = vec![CheckRow::from_inequality("interpolation", &lip)];
    if lc.delta2.is_finite() {
        rows.push(CheckRow::from_inequality("interpolation", &conv));
    } else {
        rows.push(CheckRow::not_applicable("interpolation", "degenerate window with nonzero D²pp𝒜"));
    }
    if degenerate {
        rows.iter_mut().for_each(|r| r.detail["degenerate"] = json!(true));
    }
    Ok(rows)
}

const QGLP_EPSILON: f64 = 0.1;

fn suite_qglp(cx: &mut Context) -> Result<Vec<CheckRow>, Failure> {
    let (lc, degenerate) = cx.lemma_constants()?;
    let fixtures = mtw::random_segments(cx.spec, cx.window, 8, 0.05, cx.seed.wrapping_add(1));
    let n = cx.spec.n();
    let mut worst = f64::INFINITY;
    let mut probes = 0;
    let mut skipped = 0;
    for (k, fx) in fixtures.iter().enumerate() {
        let mut rng = stream_rng(cx.seed, 0x91 + k as u64);
        let Ok((p0, p1)) = expmaps::segment_gradients(cx.spec, &fx.x_m, fx.u, &fx.y0, &fx.y1) else {
            skipped += 1;
            continue;
        };
        let dp = (&p1 - &p0).norm();
        let delta2 = (!degenerate).then_some(lc.delta2);
        let bound = match delta2 {
            Some(d2) if d2 > 0.0 && dp > 0.0 => 4.0 * QGLP_EPSILON / (d2 * dp),
            _ => f64::INFINITY,
        };
        let radius = bound.min(0.5 * cx.window.r1);
        let thetas: Vec<f64> = (0..5).map(|_| rng.gen_range(QGLP_EPSILON..1.0 - QGLP_EPSILON)).collect();
        let mut offsets = Vec::new();
        while offsets.len() < 8 {
            let off = geom::sample_ball(&mut rng, &vec![0.0; n], radius);
            if cx.spec.x_domain().contains(&along(&fx.x_m, &off, 1.0)) {
                offsets.push(off);
            }
        }
        match mtw::verify_qglp(cx.spec, fx, QGLP_EPSILON, lc.delta0, lc.gamma, delta2, &thetas, &offsets) {
            Ok(r) => {
                worst = worst.min(r.worst_margin);
                probes += r.probes;
            }
            Err(_) => skipped += 1,
        }
    }
    let pass = probes > 0 && worst >= MARGIN_FLOOR;
    let detail = json!({ "epsilon": QGLP_EPSILON, "delta0": lc.delta0, "gamma": lc.gamma, "degenerate": degenerate });
    Ok(vec![CheckRow { skipped, ..CheckRow::new("qglp", "quantitative_loeper", probes, worst, pass, detail) }])
}

fn suite_semiconvexity(cx: &mut Context) -> Result<Vec<CheckRow>, Failure> {
    let e = directions(cx.spec.n(), 1, cx.seed).remove(0);
    let fx = cross_fixture(cx.spec, cx.window, &e)?;
    let k = gconvex::hessian_bound(cx.spec, &fx.phi, &cx.spec.x_domain().grid(9)).map_err(core_err)?;
    let r = gconvex::check_semiconvexity(cx.spec, &fx.phi, k, 256, cx.seed).map_err(core_err)?;
    let margin = r.worst_margin.min(r.midpoint_worst);
    let pass = r.trials > 0 && margin >= MARGIN_FLOOR;
    Ok(vec![CheckRow { skipped: r.skipped, ..CheckRow::new("semiconvexity", "semiconvexity", r.trials, margin, pass, json!(r)) }])
}

fn suite_c3(cx: &mut Context) -> Result<Vec<CheckRow>, Failure> {
    let c_e = cx.c_e()?;
    let d2xx = cx.norms()?.d2xx;
    let mut worst = f64::INFINITY;
    let mut probes = 0;
    let mut skipped = 0;
    for (k, e) in directions(cx.spec.n(), 8, cx.seed).iter().enumerate() {
        let fx = cross_fixture(cx.spec, cx.window, e)?;
        let delta = gconvex::build_window_s(cx.spec, &fx.phi, &fx.x_mid).map_err(core_err)?.delta;
        let cap = delta.min(fx.dy);
        let mut rng = stream_rng(cx.seed, 0xc3 + k as u64);
        for _ in 0..32 {
            let dx = cap * rng.gen_range(0.05..0.95);
            let s = dx * rng.gen_range(-0.4..0.4);
            let x0 = along(&fx.x_mid, &fx.dir, s - 0.5 * dx);
            let x1 = along(&fx.x_mid, &fx.dir, s + 0.5 * dx);
            match gconvex::check_c3_estimate(cx.spec, &fx.phi, &x0, &x1, c_e, d2xx, Some(delta)) {
                Ok(r) => {
                    worst = worst.min(r.margin);
                    probes += 1;
                }
                Err(_) => skipped += 1,
            }
        }
    }
    let pass = probes > 0 && worst >= MARGIN_FLOOR;
    let detail = json!({ "C3": gconvex::c3_constant(c_e, d2xx) });
    Ok(vec![CheckRow { skipped, ..CheckRow::new("c3", "touching_point_c3", probes, worst, pass, detail) }])
}

fn suite_inclusion(cx: &mut Context) -> Result<Vec<CheckRow>, Failure> {
    let (lc, degenerate) = cx.lemma_constants()?;
    if degenerate {
        return Ok(vec![CheckRow::not_applicable("inclusion", "tube constants need α > 0")]);
    }
    let ic = InclusionConstants::derive(&cx.norms()?, lc.c_e, lc.delta0, lc.gamma);
    ic.record(cx.window, &mut cx.ledger).map_err(core_err)?;
    let mut worst = f64::INFINITY;
    let mut probes = 0;
    let mut included = 0;
    let mut all = true;
    for (k, e) in directions(cx.spec.n(), 4, cx.seed).iter().enumerate() {
        let fx = cross_fixture(cx.spec, cx.window, e)?;
        let dx = 0.5 * (fx.dy / ic.kappa).powi(5);
        let x0 = along(&fx.x_mid, &fx.dir, -0.5 * dx);
        let x1 = along(&fx.x_mid, &fx.dir, 0.5 * dx);
        let opts = InclusionOptions { seed: cx.seed.wrapping_add(k as u64), ..Default::default() };
        let r = regularity::check_gsub_image_inclusion(cx.spec, &fx.phi, &x0, &x1, &cx.ledger, &opts).map_err(missing)?;
        worst = worst.min(r.worst_boundary_margin);
        probes += r.probes.len();
        included += r.included;
        all &= r.pass;
    }
    let pass = all && worst >= MARGIN_FLOOR;
    let detail = json!({ "constants": ic, "included": included });
    Ok(vec![CheckRow::new("inclusion", "tube_in_image", probes, worst, pass, detail)])
}

fn suite_volume(cx: &mut Context) -> Result<Vec<CheckRow>, Failure> {
    cx.c_e()?;
    let n = cx.spec.n();
    let mut worst = f64::INFINITY;
    let mut probes = 0;
    let mut all = true;
    let per = 200usize.div_ceil(n);
    for (k, e) in directions(n, n, cx.seed).iter().enumerate() {
        let fx = cross_fixture(cx.spec, cx.window, e)?;
        let half = 0.01 * cx.window.r1;
        let x0 = along(&fx.x_mid, &fx.dir, -half);
        let x1 = along(&fx.x_mid, &fx.dir, half);
        let base = VolumeOptions { seed: cx.seed, ..Default::default() };
        let l_max = regularity::check_cv_volume(cx.spec, &fx.phi, &x0, &x1, 0.0, &cx.ledger, &base).map_err(missing)?.l_max;
        let mut rng = stream_rng(cx.seed, 0xcf + k as u64);
        for i in 0..per {
            let l = l_max * rng.gen_range(0.01..1.0);
            let opts = VolumeOptions { seed: cx.seed.wrapping_add(1 + i as u64), ..base.clone() };
            let r = regularity::check_cv_volume(cx.spec, &fx.phi, &x0, &x1, l, &cx.ledger, &opts).map_err(missing)?;
            worst = worst.min(r.margin);
            all &= r.pass;
            probes += 1;
        }
    }
    let pass = all && worst >= MARGIN_FLOOR;
    Ok(vec![CheckRow::new("volume", "tube_volume_cv", probes, worst, pass, json!({}))])
}

fn suite_geometry(cx: &mut Context) -> Result<Vec<CheckRow>, Failure> {
    let dom = cx.spec.x_domain();
    if !dom.is_convex_body() {
        return Ok(vec![CheckRow::not_applicable("geometry", "X is not a single convex body")]);
    }
    let r = geom::verify_volume_lemmas(&dom.bodies()[0], 100, 40_000, cx.seed).map_err(core_err)?;
    let probes = r.ball_trials.len() + r.tube_trials.len();
    let worst_tube = r.tube_trials.iter().map(|t| t.margin).fold(f64::INFINITY, f64::min);
    let detail = json!({
        "C_A": r.c_a,
        "C_A_stderr": r.c_a_stderr,
        "K_A": r.k_a,
        "K_A_analytic": r.k_a_analytic,
        "tube_bound_violations": r.tube_bound_violations,
    });
    Ok(vec![CheckRow::new("geometry", "ball_and_tube_volume", probes, r.worst_ball_margin.min(worst_tube), r.pass, detail)])
}

fn suite_pushforward(cx: &mut Context, c: &Common, out: &Out, explicit: bool) -> Result<Vec<CheckRow>, Failure> {
    let (Some(path), Ok(text)) = (c.problem.as_deref(), fs::read_to_string(out.path("solution.json"))) else {
        if explicit {
            return Err(Failure::new(7, "solution missing"));
        }
        return Ok(vec![CheckRow::not_applicable("pushforward", "no solved state")]);
    };
    let problem = load_problem(path)?.build().map_err(core_err)?;
    let file: SolutionFile = serde_json::from_str(&text).map_err(|e| Failure::usage(format!("malformed solution.json: {e}")))?;
    if file.heights.len() != problem.nu.len() {
        return Err(Failure::usage("solution.json does not match the problem"));
    }
    let state = SolverState { heights: file.heights, cell_masses: file.cell_masses, residual: file.residual, iterations: file.iterations };
    let cells = alexandrov::cell_decomposition(&problem.spec, &problem.nu.atoms, &state.heights, &problem.mu).map_err(core_err)?;
    let sol = alexandrov::Solution { state, cells, warnings: file.warnings };
    let m = problem.mu.centers.len();
    let mut rng = stream_rng(cx.seed, 0xf0);
    let mut sets: Vec<TestSet> = (0..problem.nu.len()).map(|j| TestSet::Atoms(vec![j])).collect();
    for _ in 0..20 {
        let a = rng.gen_range(0..m);
        let b = (a + rng.gen_range(1..=m / 4 + 1)).min(m);
        sets.push(TestSet::Cells((a..b).collect()));
    }
    let tol = problem.options.tol;
    let r = alexandrov::verify_pushforward(&problem.spec, &sol, &problem.mu, &problem.nu, tol, &sets).map_err(core_err)?;
    let margin = r.checks.iter().map(|k| k.bound - k.gap).fold(f64::INFINITY, f64::min);
    Ok(vec![CheckRow::new("pushforward", "weak_alexandrov", r.checks.len(), margin, r.pass, json!({ "worst_gap": r.worst_gap }))])
}

pub fn verify(c: &Common, out: &Out) -> CmdResult {
    let spec = load_spec(c.spec.as_deref().ok_or_else(|| Failure::usage("--spec is required"))?)?;
    let window = load_window(c.window.as_deref(), &spec)?;
    let suites = parse_suites(&c.suite)?;
    let explicit = c.suite != "full";
    let mut cx = Context { spec: &spec, window: &window, ledger: out.load_ledger()?, grid: c.grid, seed: c.seed, norms: None };
    let mut rows = Vec::new();
    for suite in suites {
        let got = match suite {
            "derivative" => suite_derivative(&mut cx),
            "convexity" => suite_convexity(&mut cx),
            "interpolation" => suite_interpolation(&mut cx),
            "qglp" => suite_qglp(&mut cx),
            "semiconvexity" => suite_semiconvexity(&mut cx),
            "c3" => suite_c3(&mut cx),
            "inclusion" => suite_inclusion(&mut cx),
            "volume" => suite_volume(&mut cx),
            "geometry" => suite_geometry(&mut cx),
            "pushforward" => suite_pushforward(&mut cx, c, out, explicit),
            _ => unreachable!("suite names come from SUITES"),
        };
        match got {
            Ok(r) => rows.extend(r),
            Err(f) if f.code == 7 => return Err(f),
            Err(f) => rows.push(CheckRow { applicable: true, pass: false, detail: json!({ "error": f.message }), ..CheckRow::not_applicable(suite, "") }),
        }
    }
    out.save_ledger(&cx.ledger)?;
    let pass = rows.iter().all(|r| r.pass);
    out.write_json("verify.json", &json!({ "pass": pass, "checks": rows }))?;
    for r in &rows {
        let status = match (r.applicable, r.pass) {
            (false, true) => "n/a",
            (_, true) => "pass",
            (_, false) => "FAIL",
        };
        println!("{:<14} {:<34} {:<5} probes {:>5} margin {}", r.suite, r.name, status, r.probes, r.worst_margin.map_or("-".to_string(), |m| format!("{m:e}")));
    }
    if pass {
        Ok(())
    } else {
        let failed: Vec<&str> = rows.iter().filter(|r| !r.pass).map(|r| r.name.as_str()).collect();
        Err(Failure::new(10, format!("failed checks: {}", failed.join(", "))))
    }
}
