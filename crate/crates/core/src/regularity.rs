//! Source-measure conditions, Hölder exponents of semi-discrete solutions,
//! and the composite estimates of the regularity argument: tube inclusion
//! in the subdifferential image, the tube volume bound, the ball-mass
//! profile `F(V)` and the modulus of continuity of `∂_Gφ`.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alexandrov::{self, DiscreteMeasure, GridMeasure, SolverState};
use crate::error::{Error, Result};
use crate::expmaps;
use crate::gconvex::{self, Envelope, TIE_TOL};
use crate::genfun::{Constant, ConstantsLedger, GenFun, WindowS};
use crate::geom::{self, ConvexBody, Domain, McEstimate, Point, Region, SampledCurve};
use crate::mtw::WindowNorms;
use crate::report::extended;
use crate::rng::stream_rng;

// ---------------------------------------------------------------------------
// exponents

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exponents {
    pub rho: f64,
    pub sigma: f64,
}

/// `ρ = 1 − n/p` and `σ = ρ/(4n − 2 + ρ)` for `p ∈ (n, ∞]`.
pub fn sigma_formula(n: usize, p: f64) -> Result<Exponents> {
    if n == 0 {
        return Err(Error::OutOfRange("dimension 0".into()));
    }
    let nf = n as f64;
    if p.is_nan() || p <= nf {
        return Err(Error::OutOfRange(format!("p = {p} (need p > n = {n})")));
    }
    if p.is_infinite() {
        let rho = 1.0;
        return Ok(Exponents { rho, sigma: rho / (4.0 * nf - 2.0 + rho) });
    }
    // cleared of the inner fraction so σ is one rounding from exact
    Ok(Exponents { rho: (p - nf) / p, sigma: (p - nf) / ((4.0 * nf - 1.0) * p - nf) })
}

// ---------------------------------------------------------------------------
// measure conditions

/// A sample `(arg, value)` of a monotone profile.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfilePoint {
    pub arg: f64,
    pub value: f64,
}

/// Largest ratio seen at one radius.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadiusSup {
    pub r: f64,
    pub sup_ratio: f64,
    pub x: Point,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasureConditionReport {
    #[serde(with = "extended")]
    pub p: f64,
    /// `n(1 − 1/p)`.
    pub exponent: f64,
    /// Empirical `C_μ`; infinite when the ratio blows up at small radii.
    #[serde(with = "extended")]
    pub c_mu: f64,
    pub observed_sup: f64,
    pub worst_x: Point,
    pub worst_r: f64,
    pub radius_floor: f64,
    /// Sup over the smallest radii divided by the sup over mid radii.
    pub growth_ratio: f64,
    pub holds: bool,
    pub balls: usize,
    pub buckets: Vec<RadiusSup>,
    /// Smallest nondecreasing `f` with `μ(B_r) ≤ f(r) r^{n−1}` on the samples.
    pub f_envelope: Vec<ProfilePoint>,
    pub f_vanishes: bool,
}

const RADIUS_BUCKETS: usize = 16;
const GROWTH_LIMIT: f64 = 2.0;

/// Samples balls on a log grid of radii from two cell diameters to
/// `1.5 diam X` and reports the sup of `μ(B_r(x))/r^{n(1−1/p)}`.
///
/// The condition is declared violated when the sup over the four smallest
/// radii exceeds twice the sup over the middle ones.
pub fn check_measure_condition(mu: &GridMeasure, p: f64, ball_samples: usize, seed: u64) -> Result<MeasureConditionReport> {
    let n = mu.dim();
    if p.is_nan() || p <= n as f64 {
        return Err(Error::OutOfRange(format!("p = {p} (need p > n = {n})")));
    }
    let exponent = if p.is_infinite() { n as f64 } else { n as f64 * (1.0 - 1.0 / p) };
    let r_floor = 2.0 * mu.cell_diameter();
    let r_top = 1.5 * geom::dist(&mu.lo, &mu.hi);
    let per = ball_samples.div_ceil(RADIUS_BUCKETS).max(1);
    let heaviest = mu
        .masses
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("grid is nonempty");
    let h = mu.spacing();
    let rows: Vec<(RadiusSup, f64)> = (0..RADIUS_BUCKETS)
        .into_par_iter()
        .map(|b| {
            let r = r_floor * (r_top / r_floor).powf(b as f64 / (RADIUS_BUCKETS - 1) as f64);
            let mut rng = stream_rng(seed, b as u64);
            let mut best = RadiusSup { r, sup_ratio: -1.0, x: Vec::new() };
            let mut best2: f64 = 0.0;
            for s in 0..per {
                let x: Point = if s == 0 {
                    mu.centers[heaviest].clone()
                } else {
                    let c = &mu.centers[rng.gen_range(0..mu.centers.len())];
                    c.iter().zip(&h).map(|(ci, hi)| ci + hi * rng.gen_range(-0.5..0.5)).collect()
                };
                let mass = mu.ball_mass(&x, r);
                let ratio = mass / r.powf(exponent);
                if ratio > best.sup_ratio {
                    best.sup_ratio = ratio;
                    best.x = x;
                }
                best2 = best2.max(mass / r.powi(n as i32 - 1));
            }
            (best, best2)
        })
        .collect();
    let (buckets, cond2): (Vec<RadiusSup>, Vec<f64>) = rows.into_iter().unzip();
    let worst = buckets.iter().max_by(|a, b| a.sup_ratio.total_cmp(&b.sup_ratio)).expect("buckets are nonempty");
    let sup_of = |range: std::ops::Range<usize>| buckets[range].iter().map(|b| b.sup_ratio).fold(0.0, f64::max);
    let small = sup_of(0..RADIUS_BUCKETS / 4);
    let mid = sup_of(RADIUS_BUCKETS / 4..3 * RADIUS_BUCKETS / 4);
    let growth_ratio = if mid > 0.0 { small / mid } else { f64::INFINITY };
    let holds = growth_ratio <= GROWTH_LIMIT;
    let mut running: f64 = 0.0;
    let f_envelope: Vec<ProfilePoint> = buckets
        .iter()
        .zip(&cond2)
        .map(|(b, &g)| {
            running = running.max(g);
            ProfilePoint { arg: b.r, value: running }
        })
        .collect();
    let f_vanishes = f_envelope[0].value <= 0.5 * f_envelope[RADIUS_BUCKETS / 2].value;
    Ok(MeasureConditionReport {
        p,
        exponent,
        c_mu: if holds { worst.sup_ratio } else { f64::INFINITY },
        observed_sup: worst.sup_ratio,
        worst_x: worst.x.clone(),
        worst_r: worst.r,
        radius_floor: r_floor,
        growth_ratio,
        holds,
        balls: per * RADIUS_BUCKETS,
        buckets,
        f_envelope,
        f_vanishes,
    })
}

const MAX_PROFILE_CENTERS: usize = 4096;

fn ball_fits(domain: &Domain, c: &[f64], r: f64) -> bool {
    domain.bodies().iter().any(|b| b.depth(c) >= r)
}

/// `F(V) = sup{μ(B) : B ⊂ X a ball of volume V}` over balls centred at the
/// grid cells (strided beyond 4096 cells), the insphere centers of X, and
/// the heaviest cell pulled inwards until the ball fits. Volumes for which
/// no ball fits get `F = 1`. A running max makes the output nondecreasing;
/// it is returned sorted by volume.
pub fn f_profile(mu: &GridMeasure, x_domain: &Domain, volumes: &[f64]) -> Result<Vec<ProfilePoint>> {
    if volumes.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::Invalid("volumes must be positive and finite".into()));
    }
    let n = mu.dim();
    let omega = geom::unit_ball_volume(n);
    let stride = mu.centers.len().div_ceil(MAX_PROFILE_CENTERS).max(1);
    let mut base: Vec<Point> = mu.centers.iter().step_by(stride).cloned().collect();
    base.extend(x_domain.bodies().iter().map(|b| b.inradius().1));
    let heaviest = mu
        .masses
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| mu.centers[i].clone())
        .expect("grid is nonempty");
    let mut sorted = volumes.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut running: f64 = 0.0;
    let mut out = Vec::with_capacity(sorted.len());
    for &v in &sorted {
        let r = (v / omega).powf(1.0 / n as f64);
        let mut cands: Vec<&Point> = base.iter().filter(|c| ball_fits(x_domain, c, r)).collect();
        let pulled = pull_inside(x_domain, &heaviest, r);
        if let Some(c) = &pulled {
            cands.push(c);
        }
        let value = if cands.is_empty() {
            1.0
        } else {
            cands.par_iter().map(|c| mu.ball_mass(c, r)).reduce(|| 0.0, f64::max)
        };
        running = running.max(value);
        out.push(ProfilePoint { arg: v, value: running });
    }
    Ok(out)
}

/// Moves `c` towards the insphere center of the deepest body until a ball of
/// radius `r` fits, if it can.
fn pull_inside(domain: &Domain, c: &[f64], r: f64) -> Option<Point> {
    let body = domain.bodies().iter().max_by(|a, b| a.depth(c).total_cmp(&b.depth(c)))?;
    let (rin, center) = body.inradius();
    if rin < r {
        return None;
    }
    if body.depth(c) >= r {
        return Some(c.to_vec());
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if body.depth(&geom::lerp(c, &center, mid)) >= r {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(geom::lerp(c, &center, hi))
}

// ---------------------------------------------------------------------------
// exponent fits

/// A pair of source points with the foci selected in their subdifferentials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubdiffPair {
    pub x0: Point,
    pub x1: Point,
    pub atom0: usize,
    pub atom1: usize,
    pub dx: f64,
    pub dy: f64,
}

/// `count` pairs with `|x1 − x0|` uniform in `[lo, hi]`.
///
/// The focus at `x0` is its lowest-index attaining atom; at `x1` the
/// attaining atom nearest to the one chosen at `x0`.
pub fn sample_pairs(
    spec: &GenFun,
    state: &SolverState,
    nu: &DiscreteMeasure,
    range: (f64, f64),
    count: usize,
    seed: u64,
) -> Result<Vec<SubdiffPair>> {
    let (lo, hi) = range;
    if !(lo > 0.0 && hi >= lo) {
        return Err(Error::Invalid(format!("pair distance range [{lo}, {hi}] is empty")));
    }
    let phi = alexandrov::envelope_of(&nu.atoms, &state.heights)?;
    let x_dom = spec.x_domain();
    let n = spec.n();
    let picked: Vec<Option<SubdiffPair>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            for _ in 0..64 {
                let x0 = x_dom.sample(&mut rng);
                let d = lo + (hi - lo) * rng.gen::<f64>();
                let dir: Point = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let len = geom::norm(&dir);
                let x1: Point = x0.iter().zip(&dir).map(|(a, b)| a + d * b / len).collect();
                if !x_dom.contains(&x1) {
                    continue;
                }
                let s0 = gconvex::g_subdifferential(spec, &phi, &x0, TIE_TOL)?;
                let s1 = gconvex::g_subdifferential(spec, &phi, &x1, TIE_TOL)?;
                let a0 = *s0.attaining.iter().min().expect("attaining set is nonempty");
                let a1 = *s1
                    .attaining
                    .iter()
                    .min_by(|&&a, &&b| {
                        geom::dist(&nu.atoms[a], &nu.atoms[a0]).total_cmp(&geom::dist(&nu.atoms[b], &nu.atoms[a0])).then(a.cmp(&b))
                    })
                    .expect("attaining set is nonempty");
                let dx = geom::dist(&x0, &x1);
                let dy = geom::dist(&nu.atoms[a0], &nu.atoms[a1]);
                return Ok(Some(SubdiffPair { x0, x1, atom0: a0, atom1: a1, dx, dy }));
            }
            Ok(None)
        })
        .collect::<Result<_>>()?;
    Ok(picked.into_iter().flatten().collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogPair {
    pub log_dx: f64,
    pub log_dy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExponentFit {
    pub pairs: Vec<LogPair>,
    pub sigma_hat: f64,
    pub intercept: f64,
    pub r2: f64,
    pub scale_window: (f64, f64),
    pub max_cell_diameter: f64,
    pub mesoscale: f64,
    /// Pairs dropped because both points fell in the same cell.
    pub same_cell: usize,
    #[serde(with = "extended")]
    pub p: f64,
    pub sigma_bound: f64,
    pub pass: bool,
}

impl ExponentFit {
    /// `log_dx,log_dy` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("log_dx,log_dy\n");
        for p in &self.pairs {
            out.push_str(&format!("{},{}\n", crate::report::csv_num(p.log_dx), crate::report::csv_num(p.log_dy)));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub pairs: usize,
    pub h_min: Option<f64>,
    pub h_max: Option<f64>,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { pairs: 2000, h_min: None, h_max: None, seed: 0 }
    }
}

const MIN_FIT_PAIRS: usize = 10;

/// Twice the largest Laguerre cell diameter of a solved state.
pub fn mesoscale(spec: &GenFun, state: &SolverState, mu: &GridMeasure, nu: &DiscreteMeasure) -> Result<(f64, f64)> {
    let cells = alexandrov::cell_decomposition(spec, &nu.atoms, &state.heights, mu)?;
    let max_cell = alexandrov::cell_diameters(mu, &cells, nu.len()).into_iter().fold(0.0, f64::max);
    Ok((max_cell, 2.0 * max_cell))
}

/// Least-squares slope of `log|y0 − y1|` against `log|x0 − x1|` over pairs
/// whose distance lies in the scale window, which defaults to
/// `[2·max cell diameter, diam X / 2]` and may not start below it.
pub fn fit_holder_exponent(
    spec: &GenFun,
    state: &SolverState,
    mu: &GridMeasure,
    nu: &DiscreteMeasure,
    p: f64,
    opts: &FitOptions,
) -> Result<ExponentFit> {
    let bound = sigma_formula(spec.n(), p)?;
    let (max_cell, meso) = mesoscale(spec, state, mu, nu)?;
    let h_min = opts.h_min.unwrap_or(meso);
    if h_min < meso * (1.0 - 1e-12) {
        return Err(Error::Precondition(format!(
            "h_min = {h_min} is below the mesoscale 2·max cell diameter = {meso}"
        )));
    }
    let h_max = opts.h_max.unwrap_or(0.5 * spec.x_domain().diameter());
    if !(h_max > h_min) {
        return Err(Error::InsufficientData(format!("scale window [{h_min}, {h_max}] is empty")));
    }
    let raw = sample_pairs(spec, state, nu, (h_min, h_max), opts.pairs, opts.seed)?;
    let same_cell = raw.iter().filter(|q| q.dy == 0.0).count();
    let pairs: Vec<LogPair> = raw
        .iter()
        .filter(|q| q.dy > 0.0 && q.dx >= h_min && q.dx <= h_max)
        .map(|q| LogPair { log_dx: q.dx.ln(), log_dy: q.dy.ln() })
        .collect();
    if pairs.len() < MIN_FIT_PAIRS {
        return Err(Error::InsufficientData(format!("{} usable pairs, need {MIN_FIT_PAIRS}", pairs.len())));
    }
    let m = pairs.len() as f64;
    let mx = pairs.iter().map(|q| q.log_dx).sum::<f64>() / m;
    let my = pairs.iter().map(|q| q.log_dy).sum::<f64>() / m;
    let sxx: f64 = pairs.iter().map(|q| (q.log_dx - mx).powi(2)).sum();
    let sxy: f64 = pairs.iter().map(|q| (q.log_dx - mx) * (q.log_dy - my)).sum();
    let syy: f64 = pairs.iter().map(|q| (q.log_dy - my).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(Error::InsufficientData("all pair distances coincide".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy > 0.0 { (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0) } else { 1.0 };
    Ok(ExponentFit {
        pairs,
        sigma_hat: slope,
        intercept,
        r2,
        scale_window: (h_min, h_max),
        max_cell_diameter: max_cell,
        mesoscale: meso,
        same_cell,
        p,
        sigma_bound: bound.sigma,
        pass: slope >= bound.sigma - 0.05,
    })
}

// ---------------------------------------------------------------------------
// modulus of continuity

/// Nondecreasing profile sampled at increasing arguments, read by log-log
/// interpolation and clamped to the end values outside the sampled range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotoneProfile {
    pub points: Vec<ProfilePoint>,
}

impl MonotoneProfile {
    /// Sorts by argument and applies a running max; the flag reports whether
    /// monotonization changed any value.
    pub fn from_samples(mut points: Vec<ProfilePoint>) -> Result<(Self, bool)> {
        if points.is_empty() || points.iter().any(|q| !(q.arg > 0.0 && q.value.is_finite() && q.value >= 0.0)) {
            return Err(Error::Invalid("profile samples need positive arguments and finite nonnegative values".into()));
        }
        points.sort_by(|a, b| a.arg.total_cmp(&b.arg));
        points.dedup_by(|b, a| b.arg == a.arg);
        let mut changed = false;
        let mut running: f64 = 0.0;
        for q in &mut points {
            if q.value < running {
                q.value = running;
                changed = true;
            }
            running = q.value;
        }
        Ok((Self { points }, changed))
    }

    pub fn eval(&self, x: f64) -> f64 {
        let pts = &self.points;
        if x <= pts[0].arg {
            return pts[0].value;
        }
        let last = pts[pts.len() - 1];
        if x >= last.arg {
            return last.value;
        }
        let i = pts.partition_point(|q| q.arg <= x);
        let (a, b) = (pts[i - 1], pts[i]);
        let t = (x.ln() - a.arg.ln()) / (b.arg.ln() - a.arg.ln());
        if a.value > 0.0 && b.value > 0.0 {
            (a.value.ln() + t * (b.value.ln() - a.value.ln())).exp()
        } else {
            a.value + t * (b.value - a.value)
        }
    }

    pub fn range(&self) -> (f64, f64) {
        (self.points[0].arg, self.points[self.points.len() - 1].arg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModulusVerdict {
    Holds,
    Violated,
    #[serde(rename = "condition-2 unmet")]
    ConditionUnmet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModulusSample {
    pub u: f64,
    pub g: f64,
    pub omega: f64,
    pub bound: f64,
    pub below_mesoscale: bool,
    /// `u` lies below the smallest argument at which `ω` is sampled.
    pub unresolved: bool,
    pub holds: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModulusProfile {
    pub f: MonotoneProfile,
    pub f_tilde: MonotoneProfile,
    pub omega: MonotoneProfile,
    pub samples: Vec<ModulusSample>,
    pub mesoscale: f64,
    pub c_prime: f64,
    pub c_double_prime: f64,
    pub kappa: f64,
    pub monotonized: bool,
    pub g_vanishes: bool,
    pub verdict: ModulusVerdict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModulusOptions {
    pub c_prime: f64,
    pub c_double_prime: f64,
    pub kappa: f64,
    /// Number of `u` levels on the log grid spanned by the pairs.
    pub levels: usize,
}

impl Default for ModulusOptions {
    fn default() -> Self {
        Self { c_prime: 1.0, c_double_prime: 1.0, kappa: 0.0, levels: 24 }
    }
}

/// `f̃` from `f` by `f̃(V)^{2n−1} = ω_n^{−(1−1/n)} f(ω_n^{−1/n} V^{1/2})`,
/// node by node.
pub fn f_tilde_of(f: &MonotoneProfile, n: usize) -> MonotoneProfile {
    let nf = n as f64;
    let omega_n = geom::unit_ball_volume(n);
    let scale = omega_n.powf(-(1.0 - 1.0 / nf));
    let arg_scale = omega_n.powf(-1.0 / nf);
    let points = f
        .points
        .iter()
        .map(|q| ProfilePoint { arg: (q.arg / arg_scale).powi(2), value: (scale * q.value).powf(1.0 / (2.0 * nf - 1.0)) })
        .collect();
    MonotoneProfile { points }
}

/// `ω`, the inverse of `z ↦ f̃⁻¹(C″z)·z/C′`. Each node `(V, f̃(V))` gives
/// `z = f̃(V)/C″` and `Φ(z) = V z / C′`; flat stretches of `f̃` keep their
/// smallest `V`, matching the generalized inverse.
pub fn omega_of(f_tilde: &MonotoneProfile, c_prime: f64, c_double_prime: f64) -> MonotoneProfile {
    let mut points: Vec<ProfilePoint> = Vec::new();
    let mut last_value = f64::NEG_INFINITY;
    for q in &f_tilde.points {
        if q.value <= last_value || q.value <= 0.0 {
            continue;
        }
        last_value = q.value;
        let z = q.value / c_double_prime;
        points.push(ProfilePoint { arg: q.arg * z / c_prime, value: z });
    }
    if points.is_empty() {
        let q = f_tilde.points[0];
        points.push(ProfilePoint { arg: q.arg, value: q.value / c_double_prime });
    }
    MonotoneProfile { points }
}

/// Builds `f̃` and `ω` from the condition-2 envelope and tests
/// `g(u) ≤ max{u, κu^{1/5}, ω(u)}` at `u` above the mesoscale, where `g(u)`
/// is the largest `|y0 − y1|` over pairs with `|x0 − x1| ≤ u`.
pub fn modulus_analysis(
    n: usize,
    pairs: &[SubdiffPair],
    measure: &MeasureConditionReport,
    mesoscale: f64,
    opts: &ModulusOptions,
) -> Result<ModulusProfile> {
    if pairs.is_empty() {
        return Err(Error::InsufficientData("no pairs for the modulus".into()));
    }
    let (f, monotonized) = MonotoneProfile::from_samples(measure.f_envelope.clone())?;
    let f_tilde = f_tilde_of(&f, n);
    let omega = omega_of(&f_tilde, opts.c_prime, opts.c_double_prime);
    let mut sorted: Vec<&SubdiffPair> = pairs.iter().collect();
    sorted.sort_by(|a, b| a.dx.total_cmp(&b.dx));
    let (u_lo, u_hi) = (sorted[0].dx, sorted[sorted.len() - 1].dx);
    let levels = opts.levels.max(2);
    let condition_met = measure.f_vanishes;
    let omega_floor = omega.range().0;
    let mut samples = Vec::with_capacity(levels);
    let mut cursor = 0;
    let mut g: f64 = 0.0;
    for j in 0..levels {
        let u = if u_hi > u_lo { u_lo * (u_hi / u_lo).powf(j as f64 / (levels - 1) as f64) } else { u_lo };
        while cursor < sorted.len() && sorted[cursor].dx <= u {
            g = g.max(sorted[cursor].dy);
            cursor += 1;
        }
        let w = omega.eval(u);
        let bound = u.max(opts.kappa * u.powf(0.2)).max(w);
        let below_mesoscale = u < mesoscale;
        let unresolved = u < omega_floor;
        let holds = (condition_met && !below_mesoscale && !unresolved).then_some(g <= bound);
        samples.push(ModulusSample { u, g, omega: w, bound, below_mesoscale, unresolved, holds });
    }
    let resolved: Vec<&ModulusSample> = samples.iter().filter(|s| !s.below_mesoscale).collect();
    let g_vanishes = match (resolved.first(), resolved.last()) {
        (Some(a), Some(b)) if b.u > a.u => a.g <= 0.5 * b.g,
        _ => false,
    };
    let verdict = if !condition_met {
        ModulusVerdict::ConditionUnmet
    } else if samples.iter().all(|s| s.holds != Some(false)) {
        ModulusVerdict::Holds
    } else {
        ModulusVerdict::Violated
    };
    Ok(ModulusProfile {
        f,
        f_tilde,
        omega,
        samples,
        mesoscale,
        c_prime: opts.c_prime,
        c_double_prime: opts.c_double_prime,
        kappa: opts.kappa,
        monotonized,
        g_vanishes,
        verdict,
    })
}

// ---------------------------------------------------------------------------
// tube inclusion

/// Constants of the tube-inclusion estimate.
///
/// `C3 = C_e² + (9/8)‖D²xxG‖`, `C4 = sup‖D²xyG + D²xvG ⊗ D_yH‖`,
/// `C5 = (sup|D_vG| / inf|D_vG|)·C3` and `κ = (16³γ²C5/δ0³)^{1/5}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InclusionConstants {
    pub c3: f64,
    pub c4: f64,
    pub c5: f64,
    pub kappa: f64,
}

pub fn kappa(gamma: f64, c5: f64, delta0: f64) -> f64 {
    (16f64.powi(3) * gamma * gamma * c5 / delta0.powi(3)).powf(0.2)
}

impl InclusionConstants {
    pub fn derive(norms: &WindowNorms, c_e: f64, delta0: f64, gamma: f64) -> Self {
        let c3 = gconvex::c3_constant(c_e, norms.d2xx);
        let c5 = norms.gv_max / norms.gv_min * c3;
        Self { c3, c4: norms.c4, c5, kappa: kappa(gamma, c5, delta0) }
    }

    pub fn record(&self, window: &WindowS, ledger: &mut ConstantsLedger) -> Result<()> {
        for (c, v) in [(Constant::C3, self.c3), (Constant::C4, self.c4), (Constant::C5, self.c5), (Constant::Kappa, self.kappa)] {
            if v > 0.0 && v.is_finite() {
                ledger.set(c, v, window.clone())?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InclusionOptions {
    pub tube_points: usize,
    /// Directions sampled on `∂B_r(x_t)` (equally spaced when `n = 2`).
    pub directions: usize,
    pub radial_levels: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for InclusionOptions {
    fn default() -> Self {
        Self { tube_points: 64, directions: 64, radial_levels: 16, tol: 1e-7, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TubeProbe {
    pub theta: f64,
    pub offset: f64,
    pub y: Point,
    /// `min_{∂B_r(x_t)} φ − G(·, y, H(x_t, y, φ(x_t)))`.
    pub boundary_margin: f64,
    /// Height `h_y` at which `G(·, y, H(x_t, y, h))` first touches `φ`.
    pub height: f64,
    pub height_in_interval: bool,
    pub touch_radius: f64,
    pub interior: bool,
    pub in_band: bool,
    pub included: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InclusionReport {
    pub constants: InclusionConstants,
    pub dx: f64,
    pub dy: f64,
    pub r: f64,
    pub l: f64,
    pub x_t: Point,
    pub u: f64,
    pub phi_xt: f64,
    pub probes: Vec<TubeProbe>,
    pub skipped: usize,
    pub included: usize,
    pub worst_boundary_margin: f64,
    pub pass: bool,
}

fn unit_directions(n: usize, count: usize, seed: u64) -> Vec<Point> {
    match n {
        1 => vec![vec![1.0], vec![-1.0]],
        2 => (0..count)
            .map(|k| {
                let a = std::f64::consts::TAU * k as f64 / count as f64;
                vec![a.cos(), a.sin()]
            })
            .collect(),
        _ => {
            let mut rng = stream_rng(seed, 0xd1);
            (0..count)
                .map(|_| {
                    let d: Point = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                    let len = geom::norm(&d);
                    d.into_iter().map(|c| c / len).collect()
                })
                .collect()
        }
    }
}

/// Samples `N_l({y_θ : θ ∈ [¼, ¾]}) ∩ Y` for the G-segment with focus
/// `(x_t, u)` and checks that every sample is attained by `φ` at an interior
/// point of `B_r(x_t)`, with `r, l` set from the ledger constants.
///
/// For each `y` the height `h` of `G(·, y, H(x_t, y, h))` is lowered from
/// `φ(x_t)` by bisection until the piece first touches `φ` on the ball
/// sample; the touching point must not lie on the boundary sphere.
pub fn check_gsub_image_inclusion(
    spec: &GenFun,
    phi: &Envelope,
    x0: &[f64],
    x1: &[f64],
    ledger: &ConstantsLedger,
    opts: &InclusionOptions,
) -> Result<InclusionReport> {
    let c4 = ledger.get(Constant::C4)?;
    let c5 = ledger.get(Constant::C5)?;
    let delta0 = ledger.get(Constant::Delta0)?;
    let gamma = ledger.get(Constant::Gamma)?;
    let c3 = ledger.get(Constant::C3).unwrap_or(0.0);
    let kap = kappa(gamma, c5, delta0);
    let constants = InclusionConstants { c3, c4, c5, kappa: kap };
    let n = spec.n();
    let dx = geom::dist(x0, x1);
    if !(dx > 0.0) {
        return Err(Error::Precondition("x0 and x1 coincide".into()));
    }
    let cross = gconvex::crossing(spec, phi, x0, x1)?;
    let (y0, y1) = (&cross.support0.y, &cross.support1.y);
    let dy = geom::dist(y0, y1);
    let need = dx.max(kap * dx.powf(0.2));
    if dy < need {
        return Err(Error::Precondition(format!(
            "|y1 − y0| = {dy} is below max{{|x1 − x0|, κ|x1 − x0|^(1/5)}} = {need} with κ = {kap}"
        )));
    }
    let r = (16.0 * c5 / delta0 * dx / dy).sqrt();
    let l = delta0 / (16.0 * c4) * r * dy * dy;
    let x_t = cross.x_t.clone();
    let u = cross.u;
    let phi_xt = phi.value(spec, &x_t)?;

    let dirs = unit_directions(n, opts.directions.max(2), opts.seed);
    let levels = opts.radial_levels.max(1);
    let mut ball = vec![x_t.clone()];
    for j in 1..levels {
        for d in &dirs {
            ball.push(x_t.iter().zip(d).map(|(c, e)| c + r * (j as f64 / levels as f64) * e).collect());
        }
    }
    let boundary_start = ball.len();
    for d in &dirs {
        ball.push(x_t.iter().zip(d).map(|(c, e)| c + r * e).collect());
    }
    if ball.iter().any(|x| !spec.x_domain().contains(x)) {
        return Err(Error::Precondition(format!("B_r(x_t) with r = {r} leaves X")));
    }
    let phi_vals: Vec<f64> = ball.par_iter().map(|x| phi.value(spec, x)).collect::<Result<_>>()?;
    let separable = spec.is_v_separable();

    let probes: Vec<Option<TubeProbe>> = (0..opts.tube_points)
        .into_par_iter()
        .map(|i| -> Result<Option<TubeProbe>> {
            let mut rng = stream_rng(opts.seed, 0x7b00 + i as u64);
            // the first two probes sit on the closed tube's end caps
            let theta = match i {
                0 => 0.25,
                1 => 0.75,
                _ => rng.gen_range(0.25..=0.75),
            };
            let offset = if i < 2 || i % 4 == 0 { l } else { l * rng.gen::<f64>().powf(1.0 / n as f64) };
            let w: Point = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let wl = geom::norm(&w);
            let center = &expmaps::g_segment(spec, &x_t, u, y0, y1, &[theta])?[0].y;
            let y: Point = center.iter().zip(&w).map(|(c, e)| c + offset * e / wl).collect();
            if !spec.y_domain().contains(&y) {
                return Ok(None);
            }
            let fail = |boundary_margin| TubeProbe {
                theta,
                offset,
                y: y.clone(),
                boundary_margin,
                height: f64::NAN,
                height_in_interval: false,
                touch_radius: f64::NAN,
                interior: false,
                in_band: false,
                included: false,
            };
            let Ok(v_top) = spec.invert_h(&x_t, &y, phi_xt) else {
                return Ok(Some(fail(f64::NEG_INFINITY)));
            };
            let base: Vec<f64> = if separable {
                ball.iter().map(|x| spec.value(x, &y, 0.0)).collect::<Result<_>>()?
            } else {
                Vec::new()
            };
            let piece = |k: usize, v: f64| -> Result<f64> {
                if separable {
                    Ok(base[k] - v)
                } else {
                    spec.value(&ball[k], &y, v)
                }
            };
            let excess = |h: f64| -> Result<(f64, usize)> {
                let v = spec.invert_h_raw(&x_t, &y, h)?;
                let mut best = (f64::NEG_INFINITY, 0);
                for k in 0..ball.len() {
                    let e = piece(k, v)? - phi_vals[k];
                    if e > best.0 {
                        best = (e, k);
                    }
                }
                Ok(best)
            };
            let mut boundary_margin = f64::INFINITY;
            for k in boundary_start..ball.len() {
                boundary_margin = boundary_margin.min(phi_vals[k] - piece(k, v_top)?);
            }
            let hi0 = phi_xt;
            let mut lo = u.min(phi_xt);
            let mut step = (phi_xt - u).max(r * l).max(f64::MIN_POSITIVE);
            let mut tries = 0;
            while excess(lo)?.0 > 0.0 && tries < 200 {
                lo = hi0 - step;
                step *= 2.0;
                tries += 1;
            }
            let mut hi = hi0;
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if excess(mid)?.0 >= 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            let (_, k) = excess(hi)?;
            let touch = &ball[k];
            let v = spec.invert_h_raw(&x_t, &y, hi)?;
            let in_band = spec.in_h(touch, &y, piece(k, v)?);
            let interior = k < boundary_start;
            let slack = gconvex::tie_tolerance(phi_xt);
            Ok(Some(TubeProbe {
                theta,
                offset,
                y: y.clone(),
                boundary_margin,
                height: hi,
                height_in_interval: hi >= u - slack && hi <= phi_xt + slack,
                touch_radius: geom::dist(touch, &x_t),
                interior,
                in_band,
                included: interior && in_band,
            }))
        })
        .collect::<Result<_>>()?;
    let skipped = probes.iter().filter(|p| p.is_none()).count();
    let probes: Vec<TubeProbe> = probes.into_iter().flatten().collect();
    let included = probes.iter().filter(|p| p.included).count();
    let worst = probes.iter().map(|p| p.boundary_margin).fold(f64::INFINITY, f64::min);
    let pass = !probes.is_empty() && included == probes.len() && worst >= -opts.tol;
    Ok(InclusionReport {
        constants,
        dx,
        dy,
        r,
        l,
        x_t,
        u,
        phi_xt,
        probes,
        skipped,
        included,
        worst_boundary_margin: worst,
        pass,
    })
}

// ---------------------------------------------------------------------------
// tube volume bound

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeOptions {
    pub samples: usize,
    /// Points per axis of the Y lattice whose gradient image spans `A`.
    pub hull_grid: usize,
    pub seed: u64,
}

impl Default for VolumeOptions {
    fn default() -> Self {
        Self { samples: geom::MIN_MC_SAMPLES, hull_grid: 17, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeBoundReport {
    pub x_t: Point,
    pub u: f64,
    pub dy: f64,
    pub l: f64,
    pub l_max: f64,
    pub r_a: f64,
    pub k_a: f64,
    pub c_v: f64,
    pub estimate: McEstimate,
    pub bound: f64,
    /// `estimate − bound + 3·stderr`.
    pub margin: f64,
    pub pass: bool,
}

/// Gradient image `{D_xG(x0, y, H(x0, y, φ(x0))) : y ∈ Y}` as a convex body.
pub fn gradient_image(spec: &GenFun, phi: &Envelope, x0: &[f64], k: usize) -> Result<ConvexBody> {
    let u0 = phi.value(spec, x0)?;
    let pts: Vec<Point> = spec
        .y_domain()
        .grid(k)
        .into_iter()
        .filter(|y| spec.in_h(x0, y, u0))
        .map(|y| spec.p_of(x0, &y, u0).map(|p| p.as_slice().to_vec()))
        .collect::<Result<_>>()?;
    if pts.len() < 2 {
        return Err(Error::Degenerate("gradient image has fewer than two points".into()));
    }
    ConvexBody::from_vertices(&pts)
}

/// Monte-Carlo `vol(N_l({y_θ : θ ∈ [¼, ¾]}) ∩ Y)` against
/// `C_V l^{n−1}|y1 − y0|` with `C_V = 2K_A/C_e^{2n+2}`, for `l ≤ r_A/(8C_e⁵)`.
pub fn check_cv_volume(
    spec: &GenFun,
    phi: &Envelope,
    x0: &[f64],
    x1: &[f64],
    l: f64,
    ledger: &ConstantsLedger,
    opts: &VolumeOptions,
) -> Result<VolumeBoundReport> {
    let c_e = ledger.get(Constant::Ce)?;
    let n = spec.n();
    if !(l >= 0.0) {
        return Err(Error::Precondition(format!("tube width l = {l} must be nonnegative")));
    }
    let a = gradient_image(spec, phi, x0, opts.hull_grid)?;
    let r_a = a.inradius().0;
    let l_max = r_a / (8.0 * c_e.powi(5));
    if l > l_max {
        return Err(Error::Precondition(format!("l = {l} exceeds r_A/(8C_e⁵) = {l_max}")));
    }
    let k_a = geom::tube_constant(&a);
    let c_v = 2.0 * k_a / c_e.powi(2 * n as i32 + 2);
    let cross = gconvex::crossing(spec, phi, x0, x1)?;
    let (y0, y1) = (&cross.support0.y, &cross.support1.y);
    let dy = geom::dist(y0, y1);
    let bound = c_v * l.powi(n as i32 - 1) * dy;
    let estimate = if l == 0.0 {
        McEstimate { estimate: 0.0, stderr: 0.0 }
    } else {
        let thetas: Vec<f64> = (0..=64).map(|k| 0.25 + 0.5 * k as f64 / 64.0).collect();
        let seg = expmaps::g_segment(spec, &cross.x_t, cross.u, y0, y1, &thetas)?;
        let curve = SampledCurve::new(thetas, seg.into_iter().map(|f| f.y).collect())?;
        geom::tube_volume(&curve, l, spec.y_domain(), opts.samples, opts.seed)?
    };
    let margin = estimate.estimate - bound + 3.0 * estimate.stderr;
    Ok(VolumeBoundReport {
        x_t: cross.x_t,
        u: cross.u,
        dy,
        l,
        l_max,
        r_a,
        k_a,
        c_v,
        estimate,
        bound,
        margin,
        pass: margin >= 0.0,
    })
}
