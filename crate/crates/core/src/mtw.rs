//! Curvature: the pulled-back Hessian `𝒜(x, p, u)`, its second p-derivative
//! on orthogonal pairs, the cost-coordinate cross-check, and sampled checks
//! of the G-affine interpolation inequalities.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expmaps::{self, g_exp};
use crate::expr::Expr;
use crate::genfun::{Constant, ConstantsLedger, GenFun, MatN, VecN, WindowS};
use crate::geom::{self, Point, Region};
use crate::report::csv_num;
use crate::rng::stream_rng;

/// Values within this distance of zero count as degenerate.
pub const G3_TOL: f64 = 1e-8;

/// `𝒜(x, p, u) = D²_xxG(x, g_exp(p), V_x(p, u))`.
pub fn a_matrix(spec: &GenFun, x: &[f64], p: &[f64], u: f64, guess: Option<&[f64]>) -> Result<MatN> {
    let r = g_exp(spec, x, u, p, guess)?;
    spec.hess_xx(x, &r.y, r.v)
}

fn unit(v: &[f64]) -> Option<Point> {
    let n = geom::norm(v);
    (n > 0.0).then(|| v.iter().map(|c| c / n).collect())
}

fn quad(m: &MatN, xi: &[f64]) -> f64 {
    let v = VecN::from_column_slice(xi);
    (v.transpose() * m * &v)[(0, 0)]
}

/// `D²_pp𝒜(x,p,u)[ξ, ξ, η, η]` by a central second difference of
/// `t ↦ 𝒜(x, p + tη̂, u)[ξ̂, ξ̂]` with one Richardson step, rescaled by
/// `|ξ|²|η|²`.
pub fn mtw_value(spec: &GenFun, x: &[f64], p: &[f64], u: f64, xi: &[f64], eta: &[f64]) -> Result<f64> {
    let (Some(xh), Some(eh)) = (unit(xi), unit(eta)) else {
        return Ok(0.0);
    };
    let scale = geom::dot(xi, xi) * geom::dot(eta, eta);
    let centre = g_exp(spec, x, u, p, None)?;
    let f = |t: f64| -> Result<f64> {
        let pt: Point = p.iter().zip(&eh).map(|(a, b)| a + t * b).collect();
        Ok(quad(&a_matrix(spec, x, &pt, u, Some(&centre.y))?, &xh))
    };
    let h = 1e-3 * (1.0 + geom::norm(p));
    if h < 1e-12 {
        return Err(Error::Invalid("finite-difference step underflow".into()));
    }
    let f0 = quad(&spec.hess_xx(x, &centre.y, centre.v)?, &xh);
    let second = |h: f64| -> Result<f64> { Ok((f(h)? - 2.0 * f0 + f(-h)?) / (h * h)) };
    let coarse = second(h)?;
    let fine = second(0.5 * h)?;
    Ok((4.0 * fine - coarse) / 3.0 * scale)
}

/// Coordinate expression `(c_{ij,s} c^{s,a} c_{a,bt} − c_{ij,bt}) c^{b,k} c^{t,l}`
/// contracted on `ξ_i ξ_j η_k η_l`, where `c_{i,s} = ∂x_i∂y_s c` and `c^{s,a}`
/// is its inverse. `η` is a direction in gradient space.
pub fn ot_mtw_coordinate(cost: &Expr, x: &[f64], y: &[f64], xi: &[f64], eta: &[f64]) -> Result<f64> {
    if cost.uses_v() {
        return Err(Error::Invalid("cost must not depend on v".into()));
    }
    let n = x.len();
    let mut z = x.to_vec();
    z.extend_from_slice(y);
    z.push(0.0);
    let mut mixed = MatN::zeros(n, n);
    for i in 0..n {
        for s in 0..n {
            mixed[(i, s)] = cost.partial(&z, &[i, n + s])?;
        }
    }
    let inv = mixed.clone().try_inverse().ok_or_else(|| Error::Singular("mixed Hessian of the cost".into()))?;
    let zeta = &inv * VecN::from_column_slice(eta);
    // a_s = Σ ξ_i ξ_j c_{ij,s}
    let mut a = VecN::zeros(n);
    for s in 0..n {
        for i in 0..n {
            for j in 0..n {
                a[s] += xi[i] * xi[j] * cost.partial(&z, &[i, j, n + s])?;
            }
        }
    }
    let w = inv.transpose() * a; // w_a = Σ_s a_s c^{s,a}
    let mut total = 0.0;
    for b in 0..n {
        for t in 0..n {
            let zz = zeta[b] * zeta[t];
            if zz == 0.0 {
                continue;
            }
            let mut first = 0.0;
            for (idx, wa) in w.iter().enumerate() {
                first += wa * cost.partial(&z, &[idx, n + b, n + t])?;
            }
            let mut fourth = 0.0;
            for i in 0..n {
                for j in 0..n {
                    fourth += xi[i] * xi[j] * cost.partial(&z, &[i, j, n + b, n + t])?;
                }
            }
            total += (first - fourth) * zz;
        }
    }
    Ok(total)
}

/// Generating function `−c − v` for a v-free cost expression.
pub fn genfun_from_cost(cost_text: &str, params: &BTreeMap<String, f64>, n: usize, x: geom::Domain, y: geom::Domain) -> Result<GenFun> {
    let expr = format!("-({cost_text}) - v");
    let spec = serde_json::json!({ "expression": expr, "n": n, "params": params, "a": -1e6, "b": 1e6 });
    GenFun::from_json(&spec.to_string())?.with_domains(x, y)
}

// ---------------------------------------------------------------------------
// scanning

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorSample {
    pub x: Point,
    pub p: Point,
    pub u: f64,
    pub xi: Point,
    pub eta: Point,
    pub value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum G3Verdict {
    #[serde(rename = "G3s")]
    G3s,
    #[serde(rename = "G3w-degenerate")]
    G3wDegenerate,
    #[serde(rename = "violated")]
    Violated,
}

impl G3Verdict {
    pub fn from_min(min: f64) -> Self {
        if min > G3_TOL {
            G3Verdict::G3s
        } else if min >= -G3_TOL {
            G3Verdict::G3wDegenerate
        } else {
            G3Verdict::Violated
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct G3Report {
    pub samples: Vec<TensorSample>,
    /// Empirical α; `None` when the orthogonal pair set is empty.
    pub min_value: Option<f64>,
    pub verdict: G3Verdict,
    /// True in dimension one, where no unit `ξ ⊥ η` exists.
    pub vacuous: bool,
    pub attempted: usize,
    pub skipped: usize,
}

impl G3Report {
    pub fn skip_rate(&self) -> f64 {
        if self.attempted == 0 {
            0.0
        } else {
            self.skipped as f64 / self.attempted as f64
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample,coord,x,p,xi,eta,u,value\n");
        for (k, s) in self.samples.iter().enumerate() {
            for i in 0..s.x.len() {
                out.push_str(&format!(
                    "{k},{i},{},{},{},{},{},{}\n",
                    csv_num(s.x[i]),
                    csv_num(s.p[i]),
                    csv_num(s.xi[i]),
                    csv_num(s.eta[i]),
                    csv_num(s.u),
                    csv_num(s.value)
                ));
            }
        }
        out
    }
}

/// Random orthonormal pair from Gaussian draws and one Gram–Schmidt step.
pub fn orthonormal_pair<R: Rng>(rng: &mut R, n: usize) -> (Point, Point) {
    loop {
        let a: Point = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let b: Point = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let Some(xi) = unit(&a) else { continue };
        let proj = geom::dot(&b, &xi);
        let rest: Point = b.iter().zip(&xi).map(|(c, e)| c - proj * e).collect();
        if let Some(eta) = unit(&rest) {
            // second pass keeps the pairing at rounding level
            let proj = geom::dot(&eta, &xi);
            let eta: Point = eta.iter().zip(&xi).map(|(c, e)| c - proj * e).collect();
            return (xi, unit(&eta).unwrap());
        }
    }
}

/// Samples the tensor on the window lattice with `directions` random
/// orthonormal pairs per point and records `α` when positive.
pub fn scan_g3(spec: &GenFun, window: &WindowS, k: usize, directions: usize, seed: u64, ledger: &mut ConstantsLedger) -> G3Report {
    let n = spec.n();
    if n == 1 {
        let report = G3Report {
            samples: Vec::new(),
            min_value: None,
            verdict: G3Verdict::G3s,
            vacuous: true,
            attempted: 0,
            skipped: 0,
        };
        ledger.g3_verdict = Some(G3Verdict::G3s);
        return report;
    }
    let pts = window.lattice(spec, k);
    let per_point: Vec<Option<Vec<TensorSample>>> = pts
        .par_iter()
        .enumerate()
        .map(|(idx, w)| {
            let p = spec.p_of(&w.x, &w.y, w.u).ok()?;
            let mut rng = stream_rng(seed, idx as u64);
            let mut out = Vec::with_capacity(directions);
            for _ in 0..directions {
                let (xi, eta) = orthonormal_pair(&mut rng, n);
                let value = mtw_value(spec, &w.x, p.as_slice(), w.u, &xi, &eta).ok()?;
                out.push(TensorSample { x: w.x.clone(), p: p.as_slice().to_vec(), u: w.u, xi, eta, value });
            }
            Some(out)
        })
        .collect();
    let attempted = per_point.len();
    let skipped = per_point.iter().filter(|s| s.is_none()).count();
    let samples: Vec<TensorSample> = per_point.into_iter().flatten().flatten().collect();
    let min = samples.iter().map(|s| s.value).fold(f64::INFINITY, f64::min);
    let (min_value, verdict) = if samples.is_empty() {
        (None, G3Verdict::Violated)
    } else {
        (Some(min), G3Verdict::from_min(min))
    };
    if verdict == G3Verdict::G3s {
        let _ = ledger.set(Constant::Alpha, min, window.clone());
    }
    ledger.g3_verdict = Some(verdict);
    G3Report { samples, min_value, verdict, vacuous: false, attempted, skipped }
}

#[derive(Clone, Debug, Serialize)]
pub struct CrossCheckReport {
    pub points: usize,
    pub max_abs_diff: f64,
    pub max_rel_diff: f64,
    pub max_abs_value: f64,
}

/// Compares `mtw_value` on `−c − v` with `ot_mtw_coordinate` on `c` at
/// random `(x, y)` pairs and random orthonormal directions.
pub fn cross_check(
    cost_text: &str,
    params: &BTreeMap<String, f64>,
    n: usize,
    x: geom::Domain,
    y: geom::Domain,
    points: usize,
    seed: u64,
) -> Result<CrossCheckReport> {
    let cost = Expr::parse(cost_text, n, params)?;
    let spec = genfun_from_cost(cost_text, params, n, x, y)?;
    let rows: Vec<(f64, f64)> = (0..points)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream_rng(seed, k as u64);
            let x = spec.x_domain().sample(&mut rng);
            let y = spec.y_domain().sample(&mut rng);
            let (xi, eta) = orthonormal_pair(&mut rng, n);
            let u = spec.value(&x, &y, 0.0)?;
            let p = spec.grad_x(&x, &y, 0.0)?;
            let fd = mtw_value(&spec, &x, p.as_slice(), u, &xi, &eta)?;
            let exact = ot_mtw_coordinate(&cost, &x, &y, &xi, &eta)?;
            Ok((fd, exact))
        })
        .collect::<Result<_>>()?;
    let mut rep = CrossCheckReport { points, max_abs_diff: 0.0, max_rel_diff: 0.0, max_abs_value: 0.0 };
    for (fd, exact) in rows {
        let d = (fd - exact).abs();
        rep.max_abs_diff = rep.max_abs_diff.max(d);
        rep.max_rel_diff = rep.max_rel_diff.max(d / exact.abs().max(1e-12));
        rep.max_abs_value = rep.max_abs_value.max(exact.abs());
    }
    Ok(rep)
}

// ---------------------------------------------------------------------------
// Loeper property and interpolation inequalities

/// `max{G(x,y0,v0), G(x,y1,v1)} − G(x,y_θ,v_θ)` minimised over the grids.
#[derive(Clone, Debug, Serialize)]
pub struct LoeperReport {
    pub worst_margin: f64,
    pub worst_x: Point,
    pub worst_theta: f64,
    pub checked: usize,
}

pub fn loeper_check(spec: &GenFun, x_m: &[f64], u: f64, y0: &[f64], y1: &[f64], thetas: &[f64], xs: &[Point]) -> Result<LoeperReport> {
    let seg = expmaps::g_segment(spec, x_m, u, y0, y1, thetas)?;
    let v0 = spec.invert_h(x_m, y0, u)?;
    let v1 = spec.invert_h(x_m, y1, u)?;
    let mut rep = LoeperReport { worst_margin: f64::INFINITY, worst_x: Vec::new(), worst_theta: 0.0, checked: 0 };
    for x in xs {
        let top = spec.value(x, y0, v0)?.max(spec.value(x, y1, v1)?);
        for (f, &t) in seg.iter().zip(thetas) {
            let m = top - spec.value(x, &f.y, f.v)?;
            rep.checked += 1;
            if m < rep.worst_margin {
                rep.worst_margin = m;
                rep.worst_x = x.clone();
                rep.worst_theta = t;
            }
        }
    }
    Ok(rep)
}

/// Sup norms over a window used by the interpolation constants.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WindowNorms {
    pub d2xx: f64,
    pub d3xxx: f64,
    pub d3xxy: f64,
    pub d3xxv: f64,
    pub dyh: f64,
    pub d2pp_a: f64,
    pub gv_min: f64,
    pub gv_max: f64,
    pub c4: f64,
    pub points: usize,
}

fn frob(spec: &GenFun, x: &[f64], y: &[f64], v: f64, blocks: &[crate::genfun::Block]) -> Result<f64> {
    Ok(spec.eval_g(x, y, v, &crate::genfun::DerivativeRequest::new(blocks)?)?.frobenius())
}

/// Frobenius norm of the 4-tensor `D²_pp𝒜` by central differences.
pub fn d2pp_a_norm(spec: &GenFun, x: &[f64], p: &[f64], u: f64) -> Result<f64> {
    let n = p.len();
    let y0 = g_exp(spec, x, u, p, None)?.y;
    let h = 1e-3 * (1.0 + geom::norm(p));
    let a_at = |dk: usize, sk: f64, dl: usize, sl: f64| -> Result<MatN> {
        let mut q = p.to_vec();
        q[dk] += sk * h;
        q[dl] += sl * h;
        a_matrix(spec, x, &q, u, Some(&y0))
    };
    let mut total = 0.0;
    for k in 0..n {
        for l in 0..n {
            let d = (a_at(k, 1.0, l, 1.0)? - a_at(k, 1.0, l, -1.0)? - a_at(k, -1.0, l, 1.0)? + a_at(k, -1.0, l, -1.0)?)
                / (4.0 * h * h);
            total += d.norm_squared();
        }
    }
    Ok(total.sqrt())
}

/// Window norms on the lattice; `C4 = sup‖D²_xyG + D²_xvG ⊗ D_yH‖` and the
/// range of `D_vG` are collected on the same points.
pub fn window_norms(spec: &GenFun, window: &WindowS, k: usize) -> Result<WindowNorms> {
    use crate::genfun::Block::{V, X, Y};
    let pts = window.lattice(spec, k);
    if pts.is_empty() {
        return Err(Error::NoWindow("window lattice has no in-band points".into()));
    }
    let rows: Vec<WindowNorms> = pts
        .par_iter()
        .map(|w| {
            let v = spec.invert_h(&w.x, &w.y, w.u)?;
            let gv = spec.d_v(&w.x, &w.y, v)?;
            let dyh = spec.d_y_h_at_v(&w.x, &w.y, v)?;
            let m = spec.hess_xy(&w.x, &w.y, v)? + spec.grad_xv(&w.x, &w.y, v)? * dyh.transpose();
            let p = spec.grad_x(&w.x, &w.y, v)?;
            Ok(WindowNorms {
                d2xx: frob(spec, &w.x, &w.y, v, &[X, X])?,
                d3xxx: frob(spec, &w.x, &w.y, v, &[X, X, X])?,
                d3xxy: frob(spec, &w.x, &w.y, v, &[X, X, Y])?,
                d3xxv: frob(spec, &w.x, &w.y, v, &[X, X, V])?,
                dyh: dyh.norm(),
                d2pp_a: d2pp_a_norm(spec, &w.x, p.as_slice(), w.u)?,
                gv_min: gv.abs(),
                gv_max: gv.abs(),
                c4: m.norm(),
                points: 1,
            })
        })
        .collect::<Result<_>>()?;
    Ok(rows.into_iter().fold(
        WindowNorms { gv_min: f64::INFINITY, ..Default::default() },
        |a, b| WindowNorms {
            d2xx: a.d2xx.max(b.d2xx),
            d3xxx: a.d3xxx.max(b.d3xxx),
            d3xxy: a.d3xxy.max(b.d3xxy),
            d3xxv: a.d3xxv.max(b.d3xxv),
            dyh: a.dyh.max(b.dyh),
            d2pp_a: a.d2pp_a.max(b.d2pp_a),
            gv_min: a.gv_min.min(b.gv_min),
            gv_max: a.gv_max.max(b.gv_max),
            c4: a.c4.max(b.c4),
            points: a.points + b.points,
        },
    ))
}

/// Constants of the interpolation lemmas in closed form.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LemmaConstants {
    pub c_e: f64,
    pub alpha: f64,
    pub c1: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub c2: f64,
    pub delta0: f64,
    pub gamma: f64,
}

impl LemmaConstants {
    /// `C1 = (‖D³xxy‖ + ‖D³xxv‖‖D_yH‖)C_e`, `Δ1 = α/4`,
    /// `Δ2 = α⁻¹(1.5‖D²pp𝒜‖ + α)²`, `C2 = max{½‖D³xxx‖, ¼C1Δ2, ¼(Δ1Δ2 + Δ2²)}`,
    /// `δ0 = Δ1/C_e²`, `γ = C2(1 + C_e²d² + C_e³d³)` with `d = diam Y`.
    pub fn derive(norms: &WindowNorms, c_e: f64, alpha: f64, diam_y: f64) -> Self {
        let c1 = (norms.d3xxy + norms.d3xxv * norms.dyh) * c_e;
        let delta1 = alpha / 4.0;
        let delta2 = (1.5 * norms.d2pp_a + alpha).powi(2) / alpha;
        let c2 = (0.5 * norms.d3xxx).max(0.25 * c1 * delta2).max(0.25 * (delta1 * delta2 + delta2 * delta2));
        let delta0 = delta1 / (c_e * c_e);
        let gamma = c2 * (1.0 + (c_e * diam_y).powi(2) + (c_e * diam_y).powi(3));
        Self { c_e, alpha, c1, delta1, delta2, c2, delta0, gamma }
    }

    pub fn record(&self, window: &WindowS, ledger: &mut ConstantsLedger) -> Result<()> {
        for (c, v) in [
            (Constant::C1, self.c1),
            (Constant::Delta1, self.delta1),
            (Constant::Delta2, self.delta2),
            (Constant::C2, self.c2),
            (Constant::Delta0, self.delta0),
            (Constant::Gamma, self.gamma),
        ] {
            if v > 0.0 {
                ledger.set(c, v, window.clone())?;
            }
        }
        Ok(())
    }
}

/// A G-segment fixture: focus `(x_m, u)` and endpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentFixture {
    pub x_m: Point,
    pub u: f64,
    pub y0: Point,
    pub y1: Point,
}

/// Random fixtures with `x_m` in the window ball, endpoints at depth
/// `inset` inside Y, and `u` in the window's u-range.
pub fn random_segments(spec: &GenFun, window: &WindowS, count: usize, inset: f64, seed: u64) -> Vec<SegmentFixture> {
    let mut rng = stream_rng(seed, 0x5e6);
    let mut out = Vec::with_capacity(count);
    let body_depth = |y: &[f64]| spec.y_domain().bodies().iter().map(|b| b.depth(y)).fold(f64::NEG_INFINITY, f64::max);
    let mut attempts = 0;
    while out.len() < count && attempts < 100 * count {
        attempts += 1;
        let x_m = geom::sample_ball(&mut rng, &window.x0, window.r1);
        let y0 = spec.y_domain().sample(&mut rng);
        let y1 = spec.y_domain().sample(&mut rng);
        let u = window.u0 + window.r3 * rng.gen_range(-0.9..0.9);
        if body_depth(&y0) < inset || body_depth(&y1) < inset || geom::dist(&y0, &y1) < 1e-3 {
            continue;
        }
        if !(spec.x_domain().contains(&x_m) && spec.in_h(&x_m, &y0, u) && spec.in_h(&x_m, &y1, u)) {
            continue;
        }
        out.push(SegmentFixture { x_m, u, y0, y1 });
    }
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct InequalityReport {
    pub name: String,
    pub probes: usize,
    pub skipped: usize,
    pub worst_margin: f64,
    pub pass: bool,
    /// Largest empirical ratio (Lipschitz-type checks only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub empirical_constant: Option<f64>,
}

impl InequalityReport {
    pub fn from_margins(name: &str, margins: &[Option<f64>], threshold: f64) -> Self {
        let skipped = margins.iter().filter(|m| m.is_none()).count();
        let worst = margins.iter().flatten().copied().fold(f64::INFINITY, f64::min);
        let probes = margins.len() - skipped;
        Self { name: name.to_string(), probes, skipped, worst_margin: worst, pass: probes > 0 && worst >= threshold, empirical_constant: None }
    }
}

/// Lipschitz bound of `θ ↦ D²_xxG(x_m, y_θ, v_θ)[ξ, ξ]` and the convexity
/// interpolation inequality, `probes` random `(θ, θ', ξ)` per lemma.
pub fn verify_interpolation_bounds(spec: &GenFun, fixtures: &[SegmentFixture], constants: &LemmaConstants, probes: usize, seed: u64) -> (InequalityReport, InequalityReport) {
    let n = spec.n();
    let per: Vec<(Vec<Option<f64>>, Vec<Option<f64>>, f64)> = fixtures
        .par_iter()
        .enumerate()
        .map(|(idx, fx)| {
            let mut rng = stream_rng(seed, idx as u64);
            let count = probes.div_ceil(fixtures.len().max(1));
            let mut thetas: Vec<f64> = Vec::with_capacity(2 * count + 2);
            thetas.push(0.0);
            thetas.push(1.0);
            for _ in 0..2 * count {
                thetas.push(rng.gen_range(0.0..1.0));
            }
            let xis: Vec<Point> = (0..count).map(|_| (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).collect();
            let Ok((p0, p1)) = expmaps::segment_gradients(spec, &fx.x_m, fx.u, &fx.y0, &fx.y1) else {
                return (vec![None; count], vec![None; count], 0.0);
            };
            let dp = (&p1 - &p0).norm();
            let mut order: Vec<usize> = (0..thetas.len()).collect();
            order.sort_by(|&a, &b| thetas[a].total_cmp(&thetas[b]));
            let sorted: Vec<f64> = order.iter().map(|&i| thetas[i]).collect();
            let Ok(seg) = expmaps::g_segment(spec, &fx.x_m, fx.u, &fx.y0, &fx.y1, &sorted) else {
                return (vec![None; count], vec![None; count], 0.0);
            };
            let hess: Vec<Option<MatN>> = seg.iter().map(|f| spec.hess_xx(&fx.x_m, &f.y, f.v).ok()).collect();
            let mut at = vec![0; thetas.len()];
            for (pos, &i) in order.iter().enumerate() {
                at[i] = pos;
            }
            let (h0, h1) = (hess[at[0]].clone(), hess[at[1]].clone());
            let dpv: Point = (&p1 - &p0).as_slice().to_vec();
            let mut lip_margins = Vec::with_capacity(count);
            let mut conv_margins = Vec::with_capacity(count);
            let mut ratio: f64 = 0.0;
            for (c, xi) in xis.iter().enumerate() {
                let (ia, ib) = (at[2 + 2 * c], at[3 + 2 * c]);
                let (ta, tb) = (sorted[ia], sorted[ib]);
                let xi2 = geom::dot(xi, xi);
                match (&hess[ia], &hess[ib]) {
                    (Some(ha), Some(hb)) => {
                        let lhs = quad(&(ha - hb), xi).abs();
                        let rhs = constants.c1 * (ta - tb).abs() * dp * xi2;
                        let denom = (ta - tb).abs() * dp * xi2;
                        if denom > 0.0 {
                            ratio = ratio.max(lhs / denom);
                        }
                        lip_margins.push(Some(rhs - lhs));
                    }
                    _ => lip_margins.push(None),
                }
                match (&hess[ia], &h0, &h1) {
                    (Some(ht), Some(h0), Some(h1)) => {
                        let t = ta;
                        let proj = if dp > 0.0 { geom::dot(xi, &dpv) / dp } else { 0.0 };
                        let lhs = quad(ht, xi);
                        let rhs = (1.0 - t) * quad(h0, xi)
                            + t * quad(h1, xi)
                            + t * (1.0 - t) * dp * dp * (-constants.delta1 * xi2 + constants.delta2 * proj * proj);
                        conv_margins.push(Some(rhs - lhs));
                    }
                    _ => conv_margins.push(None),
                }
            }
            (lip_margins, conv_margins, ratio)
        })
        .collect();
    let lip_margins: Vec<Option<f64>> = per.iter().flat_map(|p| p.0.clone()).collect();
    let conv_margins: Vec<Option<f64>> = per.iter().flat_map(|p| p.1.clone()).collect();
    let ratio = per.iter().map(|p| p.2).fold(0.0, f64::max);
    let mut lip = InequalityReport::from_margins("hessian_lipschitz_along_segment", &lip_margins, -1e-8);
    lip.empirical_constant = Some(ratio);
    let conv = InequalityReport::from_margins("hessian_convexity_interpolation", &conv_margins, -1e-8);
    (lip, conv)
}

/// Quantitative Loeper inequality
/// `φ̄(x) ≥ G(x,y_θ,v_θ) + δ0 θ(1−θ)|y1−y0|²|x−x_m|² − γ|x−x_m|³` for
/// `θ ∈ [ε, 1−ε]` and `|x − x_m|` up to `4ε/(Δ2|p1−p0|)`.
#[derive(Clone, Debug, Serialize)]
pub struct QglpReport {
    pub radius_bound: f64,
    pub worst_margin: f64,
    pub probes: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn verify_qglp(
    spec: &GenFun,
    fx: &SegmentFixture,
    epsilon: f64,
    delta0: f64,
    gamma: f64,
    delta2: Option<f64>,
    thetas: &[f64],
    offsets: &[Point],
) -> Result<QglpReport> {
    let (p0, p1) = expmaps::segment_gradients(spec, &fx.x_m, fx.u, &fx.y0, &fx.y1)?;
    let dp = (&p1 - &p0).norm();
    let radius_bound = match delta2 {
        Some(d2) if d2 > 0.0 && dp > 0.0 => 4.0 * epsilon / (d2 * dp),
        _ => f64::INFINITY,
    };
    for off in offsets {
        if geom::norm(off) > radius_bound * (1.0 + 1e-12) {
            return Err(Error::Precondition(format!("|x - x_m| = {} exceeds the admissible radius {radius_bound}", geom::norm(off))));
        }
    }
    if thetas.iter().any(|&t| t < epsilon - 1e-15 || t > 1.0 - epsilon + 1e-15) {
        return Err(Error::Precondition(format!("theta outside [{epsilon}, {}]", 1.0 - epsilon)));
    }
    let seg = expmaps::g_segment(spec, &fx.x_m, fx.u, &fx.y0, &fx.y1, thetas)?;
    let v0 = spec.invert_h(&fx.x_m, &fx.y0, fx.u)?;
    let v1 = spec.invert_h(&fx.x_m, &fx.y1, fx.u)?;
    let dy2 = geom::dist(&fx.y0, &fx.y1).powi(2);
    let mut worst = f64::INFINITY;
    let mut probes = 0;
    for off in offsets {
        let x: Point = fx.x_m.iter().zip(off).map(|(a, b)| a + b).collect();
        let r = geom::norm(off);
        let bar = spec.value(&x, &fx.y0, v0)?.max(spec.value(&x, &fx.y1, v1)?);
        for (f, &t) in seg.iter().zip(thetas) {
            let rhs = spec.value(&x, &f.y, f.v)? + delta0 * t * (1.0 - t) * dy2 * r * r - gamma * r.powi(3);
            worst = worst.min(bar - rhs);
            probes += 1;
        }
    }
    Ok(QglpReport { radius_bound, worst_margin: worst, probes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genfun::Builtin;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn g2() -> GenFun {
        GenFun::builtin(Builtin::NonFlat, 2).unwrap()
    }

    #[test]
    fn flat_builtins_have_zero_a() {
        for kind in [Builtin::Quadratic, Builtin::CubicV] {
            let g = GenFun::builtin(kind, 2).unwrap();
            let a = a_matrix(&g, &[0.5, 0.5], &[0.3, 0.6], 0.1, None).unwrap();
            assert_eq!(a.norm(), 0.0);
            let v = mtw_value(&g, &[0.5, 0.5], &[0.3, 0.6], 0.1, &[1.0, 0.0], &[0.0, 1.0]).unwrap();
            assert!(v.abs() < 1e-8);
        }
    }

    #[test]
    fn nonflat_a_matches_direct_hessian() {
        let g = g2();
        let (x, p, u) = ([0.2, -0.1], [0.4, 0.3], 0.05);
        let r = g_exp(&g, &x, u, &p, None).unwrap();
        let a = a_matrix(&g, &x, &p, u, None).unwrap();
        let y2 = geom::dot(&r.y, &r.y);
        // D²_xx of eps|x|²|y|² is 2 eps |y|² I
        assert_relative_eq!(a, MatN::identity(2, 2) * (0.2 * y2), epsilon = 1e-12);
        assert!((a.clone() - a.transpose()).norm() < 1e-10);
    }

    #[test]
    fn tensoriality_and_symmetry() {
        let g = g2();
        let (x, p, u) = ([0.2, -0.1], [0.4, 0.3], 0.05);
        let xi = [0.6, 0.8];
        let eta = [-0.8, 0.6];
        let base = mtw_value(&g, &x, &p, u, &xi, &eta).unwrap();
        let scaled = mtw_value(&g, &x, &p, u, &[1.2, 1.6], &[-2.4, 1.8]).unwrap();
        assert_relative_eq!(scaled, 36.0 * base, max_relative = 1e-6);
        let flipped = mtw_value(&g, &x, &p, u, &[-0.6, -0.8], &[0.8, -0.6]).unwrap();
        assert!((flipped - base).abs() <= 1e-10 * base.abs().max(1.0));
        assert_eq!(mtw_value(&g, &x, &p, u, &[0.0, 0.0], &eta).unwrap(), 0.0);
    }

    #[test]
    fn quadratic_and_bilinear_costs_vanish() {
        let n = 2;
        for cost in ["norm2(x-y)/2", "-dot(x,y)"] {
            let dom = geom::Domain::unit_cube(n);
            let rep = cross_check(cost, &Default::default(), n, dom.clone(), dom, 20, 4).unwrap();
            assert!(rep.max_abs_diff < 1e-8, "{cost} {rep:?}");
            assert!(rep.max_abs_value < 1e-8);
            let e = Expr::parse(cost, n, &Default::default()).unwrap();
            assert_eq!(ot_mtw_coordinate(&e, &[0.1, 0.2], &[0.7, 0.4], &[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        }
    }

    #[test]
    fn log_cost_cross_check() {
        let n = 2;
        let x = geom::Domain::cube(n, 0.0, 1.0).unwrap();
        let y = geom::Domain::cube(n, 2.0, 3.0).unwrap();
        let rep = cross_check("-0.5*log(norm2(x-y))", &Default::default(), n, x, y, 12, 5).unwrap();
        assert!(rep.max_rel_diff < 1e-4, "{rep:?}");
    }

    #[test]
    fn scan_verdicts() {
        let g0 = GenFun::builtin(Builtin::Quadratic, 2).unwrap();
        let w = WindowS::covering_y(&g0, vec![0.5, 0.5], 0.3, 0.0, 0.5, 3).unwrap();
        let mut ledger = ConstantsLedger::default();
        let rep = scan_g3(&g0, &w, 3, 2, 1, &mut ledger);
        assert_eq!(rep.verdict, G3Verdict::G3wDegenerate);
        assert!(!ledger.has(Constant::Alpha));

        let g1d = GenFun::builtin(Builtin::NonFlat, 1).unwrap();
        let w = WindowS::covering_y(&g1d, vec![0.0], 0.3, 0.0, 0.5, 3).unwrap();
        let rep = scan_g3(&g1d, &w, 3, 2, 1, &mut ConstantsLedger::default());
        assert!(rep.vacuous);
        assert_eq!(rep.verdict, G3Verdict::G3s);
        assert_eq!(rep.min_value, None);
    }

    #[test]
    fn loeper_endpoints_and_flat_case() {
        let g0 = GenFun::builtin(Builtin::Quadratic, 2).unwrap();
        let xs = g0.x_domain().grid(5);
        let rep = loeper_check(&g0, &[0.5, 0.5], 0.0, &[0.1, 0.1], &[0.9, 0.4], &[0.0, 0.3, 0.7, 1.0], &xs).unwrap();
        assert!(rep.worst_margin >= -1e-12);
        let rep = loeper_check(&g0, &[0.5, 0.5], 0.0, &[0.1, 0.1], &[0.9, 0.4], &[0.0, 1.0], &[vec![0.5, 0.5]]).unwrap();
        assert!(rep.worst_margin.abs() <= 1e-10);
    }

    #[test]
    fn qglp_degenerate_constants_and_center() {
        let g0 = GenFun::builtin(Builtin::Quadratic, 2).unwrap();
        let fx = SegmentFixture { x_m: vec![0.5, 0.5], u: 0.0, y0: vec![0.1, 0.2], y1: vec![0.8, 0.7] };
        let offsets = vec![vec![0.0, 0.0], vec![0.1, -0.05], vec![-0.2, 0.1]];
        let rep = verify_qglp(&g0, &fx, 0.1, 0.0, 0.0, None, &[0.1, 0.5, 0.9], &offsets).unwrap();
        assert!(rep.worst_margin >= -1e-12);
        let err = verify_qglp(&g0, &fx, 0.1, 1.0, 1.0, Some(10.0), &[0.5], &[vec![1.0, 0.0]]);
        assert!(matches!(err, Err(Error::Precondition(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn orthonormal_pairs_are_orthonormal(seed in 0u64..u64::MAX, n in 2usize..6) {
            let mut rng = stream_rng(seed, 9);
            let (a, b) = orthonormal_pair(&mut rng, n);
            prop_assert!((geom::norm(&a) - 1.0).abs() <= 1e-12);
            prop_assert!((geom::norm(&b) - 1.0).abs() <= 1e-12);
            prop_assert!(geom::dot(&a, &b).abs() <= 1e-10);
        }
    }
}
