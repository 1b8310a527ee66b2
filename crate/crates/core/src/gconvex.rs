//! G-convex functions as finite envelopes `φ(x) = maxᵢ G(x, yᵢ, vᵢ)`, their
//! G-subdifferentials and sampled checks of the structural properties used
//! by the regularity argument.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expmaps::{self, Focus};
use crate::genfun::{GenFun, WindowS};
use crate::geom::{self, Point, Region};
use crate::rng::stream_rng;

/// Relative tie tolerance for attainment.
pub const TIE_TOL: f64 = 1e-9;

pub fn tie_tolerance(value: f64) -> f64 {
    TIE_TOL * (1.0 + value.abs())
}

/// A G-affine function `x ↦ G(x, y, v)`; `label` is the atom index when
/// the piece comes from a discrete target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GAffinePiece {
    #[serde(flatten)]
    pub focus: Focus,
    #[serde(default)]
    pub label: Option<usize>,
}

impl GAffinePiece {
    pub fn new(y: Point, v: f64, label: Option<usize>) -> Self {
        Self { focus: Focus { y, v }, label }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubdiffResult {
    pub attaining: Vec<usize>,
    pub ys: Vec<Point>,
    pub tolerance: f64,
    /// Smallest band margin of `φ(x)` over the attaining foci.
    pub margin: f64,
    pub nicew_warning: bool,
}

/// Nonempty finite envelope of G-affine pieces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Envelope {
    pieces: Vec<GAffinePiece>,
}

impl Envelope {
    pub fn new(pieces: Vec<GAffinePiece>) -> Result<Self> {
        if pieces.is_empty() {
            return Err(Error::Invalid("an envelope needs at least one piece".into()));
        }
        Ok(Self { pieces })
    }

    /// Pieces labelled by position.
    pub fn from_foci(foci: &[(Point, f64)]) -> Result<Self> {
        Self::new(foci.iter().enumerate().map(|(i, (y, v))| GAffinePiece::new(y.clone(), *v, Some(i))).collect())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let pieces: Vec<GAffinePiece> = serde_json::from_str(text)?;
        Self::new(pieces)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.pieces)?)
    }

    pub fn pieces(&self) -> &[GAffinePiece] {
        &self.pieces
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn add_piece(&mut self, piece: GAffinePiece) {
        self.pieces.push(piece);
    }

    /// Values of every piece at `x`; a piece outside the closed band is an error.
    pub fn piece_values(&self, spec: &GenFun, x: &[f64]) -> Result<Vec<f64>> {
        self.pieces
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let g = spec.value(x, &p.focus.y, p.focus.v)?;
                let (lo, hi) = spec.band(x, &p.focus.y)?;
                if !(g >= lo && g <= hi) {
                    return Err(Error::PieceOutOfBand { piece: i, x: x.to_vec(), value: g, lo, hi });
                }
                Ok(g)
            })
            .collect()
    }

    /// `φ(x)` and the pieces attaining it within `1e-9(1 + |φ(x)|)`.
    pub fn eval(&self, spec: &GenFun, x: &[f64]) -> Result<(f64, SubdiffResult)> {
        self.eval_with_tol(spec, x, None)
    }

    /// The value alone.
    pub fn value(&self, spec: &GenFun, x: &[f64]) -> Result<f64> {
        Ok(self.piece_values(spec, x)?.into_iter().fold(f64::NEG_INFINITY, f64::max))
    }

    fn eval_with_tol(&self, spec: &GenFun, x: &[f64], tol: Option<f64>) -> Result<(f64, SubdiffResult)> {
        let vals = self.piece_values(spec, x)?;
        let value = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let tolerance = tol.unwrap_or_else(|| tie_tolerance(value));
        let attaining: Vec<usize> = (0..vals.len()).filter(|&i| vals[i] >= value - tolerance).collect();
        let ys: Vec<Point> = attaining.iter().map(|&i| self.pieces[i].focus.y.clone()).collect();
        let margin = ys
            .iter()
            .map(|y| spec.band_margin(x, y, value))
            .collect::<Result<Vec<f64>>>()?
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        Ok((value, SubdiffResult { attaining, ys, tolerance, margin, nicew_warning: margin <= 0.0 }))
    }

    /// Drops pieces that attain the max nowhere on `grid`.
    pub fn prune(&mut self, spec: &GenFun, grid: &[Point]) -> Result<usize> {
        let mut alive = vec![false; self.pieces.len()];
        for x in grid {
            for i in self.eval(spec, x)?.1.attaining {
                alive[i] = true;
            }
        }
        let before = self.pieces.len();
        let mut k = 0;
        self.pieces.retain(|_| {
            k += 1;
            alive[k - 1]
        });
        Ok(before - self.pieces.len())
    }
}

/// Subdifferential with an explicit tie tolerance.
pub fn g_subdifferential(spec: &GenFun, phi: &Envelope, x: &[f64], tol: f64) -> Result<SubdiffResult> {
    if !spec.x_domain().contains(x) {
        return Err(Error::Precondition(format!("x = {x:?} is outside X")));
    }
    Ok(phi.eval_with_tol(spec, x, Some(tol))?.1)
}

/// `sup ‖D²_xxG(x, yᵢ, vᵢ)‖` (Frobenius) over `grid` and all pieces.
pub fn hessian_bound(spec: &GenFun, phi: &Envelope, grid: &[Point]) -> Result<f64> {
    let rows = grid
        .par_iter()
        .map(|x| {
            phi.pieces()
                .iter()
                .map(|p| Ok(spec.hess_xx(x, &p.focus.y, p.focus.v)?.norm()))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(rows.into_iter().flatten().fold(0.0, f64::max))
}

// ---------------------------------------------------------------------------
// semi-convexity

#[derive(Clone, Debug, Serialize)]
pub struct SemiconvexityReport {
    pub trials: usize,
    pub skipped: usize,
    pub hessian_bound: f64,
    /// `(1−t)φ(x0) + tφ(x1) + ½t(1−t)K|x0−x1|² − φ(x_t)`, worst case.
    pub worst_margin: f64,
    /// Midpoint convexity of `φ + ½K|x|²`, worst case.
    pub midpoint_worst: f64,
    pub pass: bool,
}

/// Random `(x0, x1, t)` triples; a triple with `x_t ∉ X` is skipped.
pub fn check_semiconvexity(spec: &GenFun, phi: &Envelope, hessian_bound: f64, trials: usize, seed: u64) -> Result<SemiconvexityReport> {
    let k = hessian_bound;
    let rows = (0..trials)
        .into_par_iter()
        .map(|i| -> Result<Option<(f64, f64)>> {
            let mut rng = stream_rng(seed, i as u64);
            let a = spec.x_domain().sample(&mut rng);
            let b = spec.x_domain().sample(&mut rng);
            let t: f64 = match i % 10 {
                0 => 0.0,
                1 => 1.0,
                _ => rng.gen_range(0.0..1.0),
            };
            let xt = geom::lerp(&a, &b, t);
            let mid = geom::lerp(&a, &b, 0.5);
            if !spec.x_domain().contains(&xt) || !spec.x_domain().contains(&mid) {
                return Ok(None);
            }
            let (fa, fb, ft, fm) = (phi.value(spec, &a)?, phi.value(spec, &b)?, phi.value(spec, &xt)?, phi.value(spec, &mid)?);
            let d2 = geom::dot(&geom::sub(&a, &b), &geom::sub(&a, &b));
            let scale = tie_tolerance(fa.abs().max(fb.abs()));
            let m = (1.0 - t) * fa + t * fb + 0.5 * t * (1.0 - t) * k * d2 - ft + scale;
            let psi = |f: f64, z: &[f64]| f + 0.5 * k * geom::dot(z, z);
            let mm = 0.5 * (psi(fa, &a) + psi(fb, &b)) - psi(fm, &mid) + scale;
            Ok(Some((m, mm)))
        })
        .collect::<Result<Vec<_>>>()?;
    let skipped = rows.iter().filter(|r| r.is_none()).count();
    let worst = rows.iter().flatten().map(|r| r.0).fold(f64::INFINITY, f64::min);
    let mid = rows.iter().flatten().map(|r| r.1).fold(f64::INFINITY, f64::min);
    Ok(SemiconvexityReport {
        trials: trials - skipped,
        skipped,
        hessian_bound: k,
        worst_margin: worst,
        midpoint_worst: mid,
        pass: trials > skipped && worst >= 0.0 && mid >= 0.0,
    })
}

// ---------------------------------------------------------------------------
// local to global support

#[derive(Clone, Debug, Serialize)]
pub struct LocalToGlobalReport {
    pub global: bool,
    /// `max_x G(x, y, v) − φ(x)` over the grid.
    pub worst_excess: f64,
    pub worst_x: Point,
    /// Counterexample although the caller certified the convexity conditions.
    pub hard_failure: bool,
}

/// Whether a local support at `x0` is a global support on `grid`.
///
/// `certified` states that domain convexity and the band condition were
/// verified for this envelope; a non-global support is then a hard failure.
pub fn check_local_to_global(
    spec: &GenFun,
    phi: &Envelope,
    x0: &[f64],
    candidate: &Focus,
    radius: f64,
    grid: &[Point],
    certified: bool,
) -> Result<LocalToGlobalReport> {
    let f0 = phi.value(spec, x0)?;
    let g0 = spec.value(x0, &candidate.y, candidate.v)?;
    if (g0 - f0).abs() > tie_tolerance(f0) {
        return Err(Error::Precondition(format!("candidate misses φ(x0) by {:e}", g0 - f0)));
    }
    let excess: Vec<(f64, &Point)> = grid
        .par_iter()
        .map(|x| Ok((spec.value(x, &candidate.y, candidate.v)? - phi.value(spec, x)?, x)))
        .collect::<Result<_>>()?;
    for (e, x) in &excess {
        if geom::dist(x, x0) <= radius && *e > tie_tolerance(f0) {
            return Err(Error::Precondition(format!("candidate exceeds φ by {e:e} at {x:?} inside the neighborhood")));
        }
    }
    let (worst, wx) = excess.iter().fold((f64::NEG_INFINITY, x0), |acc, (e, x)| if *e > acc.0 { (*e, x) } else { acc });
    let global = excess.iter().all(|(e, x)| *e <= tie_tolerance(phi.value(spec, x).unwrap_or(0.0)));
    Ok(LocalToGlobalReport { global, worst_excess: worst, worst_x: wx.to_vec(), hard_failure: certified && !global })
}

// ---------------------------------------------------------------------------
// continuity of the subdifferential

#[derive(Clone, Debug, Serialize)]
pub struct ContinuityReport {
    pub delta: f64,
    pub probe_range: f64,
    /// The answer is below the probe spacing, so only the resolution bounds it.
    pub resolution_limited: bool,
}

const CONTINUITY_STEPS: usize = 64;
const BISECTION_STEPS: usize = 30;

fn probe_directions(n: usize) -> Vec<Point> {
    let mut dirs = Vec::new();
    for i in 0..n {
        for s in [-1.0, 1.0] {
            let mut d = vec![0.0; n];
            d[i] = s;
            dirs.push(d);
        }
    }
    if n > 1 {
        let mut rng = stream_rng(0xd1, n as u64);
        for _ in 0..8 * n {
            let (d, _) = crate::mtw::orthonormal_pair(&mut rng, n);
            dirs.push(d);
        }
    }
    dirs
}

fn excursion(a: &[Point], b: &[Point]) -> f64 {
    a.iter()
        .map(|y| b.iter().map(|z| geom::dist(y, z)).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max)
}

/// Largest probed `δ` with `∂φ(z) ⊂ N_ε(∂φ(x))` for all probes `|z − x| ≤ δ`.
pub fn check_subdiff_continuity(spec: &GenFun, phi: &Envelope, x: &[f64], epsilon: f64, probe_range: f64) -> Result<ContinuityReport> {
    let base = phi.eval(spec, x)?.1.ys;
    let dirs = probe_directions(x.len());
    let passes = |delta: f64| -> bool {
        dirs.iter().all(|d| {
            (1..=CONTINUITY_STEPS).all(|j| {
                let s = delta * j as f64 / CONTINUITY_STEPS as f64;
                let z: Point = x.iter().zip(d).map(|(a, b)| a + s * b).collect();
                if !spec.x_domain().contains(&z) {
                    return true;
                }
                match phi.eval(spec, &z) {
                    Ok((_, r)) => excursion(&r.ys, &base) <= epsilon,
                    Err(_) => false,
                }
            })
        })
    };
    if passes(probe_range) {
        return Ok(ContinuityReport { delta: probe_range, probe_range, resolution_limited: false });
    }
    let step = probe_range / CONTINUITY_STEPS as f64;
    let mut k = 1;
    while passes(k as f64 * step) {
        k += 1;
    }
    let (mut lo, mut hi) = ((k - 1) as f64 * step, k as f64 * step);
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if passes(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(ContinuityReport { delta: lo, probe_range, resolution_limited: k == 1 })
}

// ---------------------------------------------------------------------------
// the local window

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaParts {
    pub delta_x: f64,
    pub delta_u: f64,
    pub delta_1: f64,
    pub delta_2: f64,
    pub r1: f64,
    pub r3: f64,
}

impl DeltaParts {
    pub fn min(&self) -> f64 {
        [self.delta_x, self.delta_u, self.delta_1, self.delta_2, self.r1, self.r3].into_iter().fold(f64::INFINITY, f64::min)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowReport {
    pub window: WindowS,
    pub delta: f64,
    pub parts: DeltaParts,
    pub shrink_steps: usize,
}

/// Initial radii of the outward search.
pub const WINDOW_CAPS: (f64, f64, f64) = (0.25, 0.25, 0.25);
const WINDOW_LATTICE: usize = 5;
const MAX_SHRINK: usize = 30;
const SEGMENT_THETAS: usize = 8;

fn x_depth(spec: &GenFun, x: &[f64]) -> f64 {
    spec.x_domain().bodies().iter().map(|b| b.depth(x)).fold(f64::NEG_INFINITY, f64::max)
}

fn segment_points(spec: &GenFun, x: &[f64], u: f64, ys: &[Point]) -> Result<Vec<Point>> {
    let thetas: Vec<f64> = (0..=SEGMENT_THETAS).map(|k| k as f64 / SEGMENT_THETAS as f64).collect();
    let mut out: Vec<Point> = ys.to_vec();
    for i in 0..ys.len() {
        for j in i + 1..ys.len() {
            for f in expmaps::g_segment(spec, x, u, &ys[i], &ys[j], &thetas)? {
                out.push(f.y);
            }
        }
    }
    Ok(out)
}

/// Local window around `x0`: the core is `∂φ(x0)` together with the
/// G-segments joining its points; radii start at `WINDOW_CAPS` and halve
/// until the window lattice lies in 𝔥 with positive margin.
///
/// `δ(x0) = min{δ_x, δ_u, δ₁, δ₂, r1, r3}` with `δ_x = r1/2`, `δ_u` from the
/// sampled Lipschitz modulus of φ, `δ₁` from the subdifferential continuity
/// at `ε = r2/2` and `δ₂` the largest tested radius whose foci keep their
/// G-segments inside the window; the sampled moduli carry a factor ½.
pub fn build_window_s(spec: &GenFun, phi: &Envelope, x0: &[f64]) -> Result<WindowReport> {
    let depth = x_depth(spec, x0);
    if depth <= 0.0 {
        return Err(Error::NoWindow(format!("x0 = {x0:?} is not interior to X")));
    }
    let (u0, sub) = phi.eval(spec, x0)?;
    if sub.nicew_warning {
        return Err(Error::NoWindow(format!("φ(x0) = {u0} sits on the band edge (margin {:e})", sub.margin)));
    }
    let core = segment_points(spec, x0, u0, &sub.ys)
        .map_err(|e| Error::NoWindow(format!("G-segment of the subdifferential failed: {e}")))?;
    let (mut r1, mut r2, mut r3) = (WINDOW_CAPS.0.min(depth), WINDOW_CAPS.1, WINDOW_CAPS.2);
    let mut steps = 0;
    let window = loop {
        let w = WindowS::new(x0.to_vec(), r1, r2, r3, core.clone(), u0)?;
        if matches!(w.membership_margin(spec, WINDOW_LATTICE), Some(m) if m > 0.0) {
            break w;
        }
        steps += 1;
        if steps > MAX_SHRINK {
            return Err(Error::NoWindow(format!("no radii down to {r1:e} keep the window in-band")));
        }
        r1 *= 0.5;
        r2 *= 0.5;
        r3 *= 0.5;
    };

    let probes = geom::lattice(
        &x0.iter().map(|c| c - window.r1).collect::<Vec<_>>(),
        &x0.iter().map(|c| c + window.r1).collect::<Vec<_>>(),
        9,
    );
    let inside: Vec<&Point> = probes.iter().filter(|x| geom::dist(x, x0) <= window.r1 && spec.x_domain().contains(x)).collect();
    let mut lipschitz: f64 = 0.0;
    for x in &inside {
        let d = geom::dist(x, x0);
        if d > 0.0 {
            lipschitz = lipschitz.max((phi.value(spec, x)? - u0).abs() / d);
        }
    }
    let delta_x = 0.5 * window.r1;
    let delta_u = if lipschitz > 0.0 { 0.5 * (0.5 * window.r3) / lipschitz } else { window.r1 };
    let delta_1 = 0.5 * check_subdiff_continuity(spec, phi, x0, 0.5 * window.r2, window.r1)?.delta;
    let mut delta_2 = delta_x.min(delta_u).min(delta_1);
    let dirs = probe_directions(x0.len());
    let contained = |delta: f64| -> bool {
        dirs.iter().all(|d| {
            let z: Point = x0.iter().zip(d).map(|(a, b)| a + delta * b).collect();
            let Ok((u, r)) = phi.eval(spec, &z) else { return false };
            let Ok(pts) = segment_points(spec, &z, u, &r.ys) else { return false };
            pts.iter().all(|y| {
                spec.in_h(&z, y, u) && window.y_core.iter().any(|c| geom::dist(c, y) <= window.r2) && (u - u0).abs() < window.r3
            })
        })
    };
    let mut shrink = 0;
    while !contained(delta_2) {
        delta_2 *= 0.5;
        shrink += 1;
        if shrink > MAX_SHRINK {
            return Err(Error::NoWindow("G-segments leave the window at every tested radius".into()));
        }
    }
    let parts = DeltaParts { delta_x, delta_u, delta_1, delta_2, r1: window.r1, r3: window.r3 };
    Ok(WindowReport { delta: parts.min(), parts, window, shrink_steps: steps })
}

// ---------------------------------------------------------------------------
// touching-point estimate

#[derive(Clone, Debug, Serialize)]
pub struct C3Report {
    pub support0: Focus,
    pub support1: Focus,
    pub x_t: Point,
    pub u: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub c3: f64,
    pub margin: f64,
}

/// `C₃ = C_e² + (9/8)‖D²_xxG‖`.
pub fn c3_constant(c_e: f64, d2xx: f64) -> f64 {
    c_e * c_e + 9.0 / 8.0 * d2xx
}

/// Supports at `x0` and `x1` and the point `x_t` on the segment where
/// they cross, with `u = G(x_t, y0, v0)`.
#[derive(Clone, Debug, Serialize)]
pub struct Crossing {
    pub support0: Focus,
    pub support1: Focus,
    pub x_t: Point,
    pub u: f64,
}

/// The support at `x0` is its first attaining piece; at `x1` the attaining
/// piece farthest from it. Requires `|y1 − y0| ≥ |x1 − x0|`.
pub fn crossing(spec: &GenFun, phi: &Envelope, x0: &[f64], x1: &[f64]) -> Result<Crossing> {
    let dx = geom::dist(x0, x1);
    let (_, s0) = phi.eval(spec, x0)?;
    let (_, s1) = phi.eval(spec, x1)?;
    let p0 = &phi.pieces()[s0.attaining[0]].focus;
    let p1 = s1
        .attaining
        .iter()
        .map(|&j| &phi.pieces()[j].focus)
        .max_by(|a, b| geom::dist(&a.y, &p0.y).total_cmp(&geom::dist(&b.y, &p0.y)))
        .expect("attaining set is nonempty");
    let dy = geom::dist(&p0.y, &p1.y);
    if dy < dx {
        return Err(Error::Precondition(format!("|y1 − y0| = {dy} is below |x1 − x0| = {dx}")));
    }
    let gap = |t: f64| -> Result<f64> {
        let x = geom::lerp(x0, x1, t);
        Ok(spec.value(&x, &p0.y, p0.v)? - spec.value(&x, &p1.y, p1.v)?)
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    if dx > 0.0 {
        if gap(0.0)? < 0.0 || gap(1.0)? > 0.0 {
            return Err(Error::Precondition("supports do not cross on [x0, x1]".into()));
        }
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if gap(mid)? >= 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }
    let x_t = geom::lerp(x0, x1, 0.5 * (lo + hi));
    let u = spec.value(&x_t, &p0.y, p0.v)?;
    Ok(Crossing { support0: p0.clone(), support1: p1.clone(), x_t, u })
}

/// Checks `φ(x_t) − u ≤ C₃|x1 − x0||y1 − y0|` at the crossing point.
/// `delta` is the window radius `δ(x0)` when known.
pub fn check_c3_estimate(
    spec: &GenFun,
    phi: &Envelope,
    x0: &[f64],
    x1: &[f64],
    c_e: f64,
    d2xx: f64,
    delta: Option<f64>,
) -> Result<C3Report> {
    let dx = geom::dist(x0, x1);
    if let Some(d) = delta {
        if dx >= d {
            return Err(Error::Precondition(format!("|x1 − x0| = {dx} is not below δ(x0) = {d}")));
        }
    }
    let Crossing { support0, support1, x_t, u } = crossing(spec, phi, x0, x1)?;
    let dy = geom::dist(&support0.y, &support1.y);
    let lhs = phi.value(spec, &x_t)? - u;
    let c3 = c3_constant(c_e, d2xx);
    let rhs = c3 * dx * dy;
    Ok(C3Report { support0, support1, x_t, u, lhs, rhs, c3, margin: rhs - lhs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genfun::{BandSpec, Builtin, SpecFile};
    use crate::geom::{BodySpec, DomainSpec};
    use proptest::prelude::*;
    use rand::Rng;

    fn g0(n: usize) -> GenFun {
        GenFun::builtin(Builtin::Quadratic, n).unwrap()
    }

    fn two_piece() -> Envelope {
        Envelope::from_foci(&[(vec![0.0], 0.0), (vec![1.0], 0.5)]).unwrap()
    }

    #[test]
    fn eval_two_piece() {
        let spec = g0(1);
        let (v, s) = two_piece().eval(&spec, &[0.25]).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(s.attaining, vec![0]);
        let (v, s) = two_piece().eval(&spec, &[0.5]).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(s.attaining, vec![0, 1]);
    }

    #[test]
    fn single_piece_attains() {
        let spec = g0(1);
        let e = Envelope::from_foci(&[(vec![0.3], 0.1)]).unwrap();
        let (v, s) = e.eval(&spec, &[0.7]).unwrap();
        assert!((v - (0.21 - 0.1)).abs() < 1e-15);
        assert_eq!(s.attaining, vec![0]);
    }

    #[test]
    fn empty_envelope_rejected() {
        assert!(Envelope::new(vec![]).is_err());
    }

    #[test]
    fn out_of_band_piece_is_named() {
        let spec = g0(1);
        let e = Envelope::from_foci(&[(vec![0.0], 0.0), (vec![0.5], -20.0)]).unwrap();
        match e.eval(&spec, &[0.5]) {
            Err(Error::PieceOutOfBand { piece, .. }) => assert_eq!(piece, 1),
            other => panic!("expected band error, got {other:?}"),
        }
    }

    #[test]
    fn subdifferential_tie_and_singleton() {
        let spec = g0(1);
        let e = two_piece();
        let s = g_subdifferential(&spec, &e, &[0.5], 1e-9).unwrap();
        assert_eq!(s.ys, vec![vec![0.0], vec![1.0]]);
        assert!(s.margin > 0.0 && !s.nicew_warning);
        let s = g_subdifferential(&spec, &e, &[0.9], 1e-9).unwrap();
        assert_eq!(s.ys, vec![vec![1.0]]);
    }

    #[test]
    fn band_edge_piece_warns() {
        let spec = g0(1);
        let e = Envelope::from_foci(&[(vec![0.0], -10.0)]).unwrap();
        let s = g_subdifferential(&spec, &e, &[0.5], 1e-9).unwrap();
        assert!(s.nicew_warning);
        assert_eq!(s.margin, 0.0);
    }

    #[test]
    fn json_shape() {
        let e = two_piece();
        let text = e.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v[1]["y"][0], 1.0);
        assert_eq!(v[1]["v"], 0.5);
        assert_eq!(v[1]["label"], 1);
        assert_eq!(Envelope::from_json(&text).unwrap(), e);
    }

    #[test]
    fn prune_removes_dead_pieces() {
        let spec = g0(1);
        let mut e = Envelope::from_foci(&[(vec![0.0], 0.0), (vec![1.0], 0.5), (vec![0.5], 5.0)]).unwrap();
        let removed = e.prune(&spec, &spec.x_domain().grid(33)).unwrap();
        assert_eq!(removed, 1);
        assert_eq!(e.len(), 2);
    }

    #[test]
    fn semiconvexity_flat_case() {
        let spec = g0(2);
        let e = Envelope::from_foci(&[(vec![0.0, 0.0], 0.0), (vec![1.0, 0.2], 0.4), (vec![0.3, 0.9], 0.3)]).unwrap();
        let k = hessian_bound(&spec, &e, &spec.x_domain().grid(5)).unwrap();
        assert_eq!(k, 0.0);
        let r = check_semiconvexity(&spec, &e, k, 500, 1).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn semiconvexity_nonflat() {
        let spec = GenFun::builtin(Builtin::NonFlat, 2).unwrap();
        let mut rng = stream_rng(3, 0);
        let foci: Vec<(Point, f64)> = (0..12).map(|_| (spec.y_domain().sample(&mut rng), rng.gen_range(-0.5..0.5))).collect();
        let e = Envelope::from_foci(&foci).unwrap();
        let k = hessian_bound(&spec, &e, &spec.x_domain().grid(9)).unwrap();
        let r = check_semiconvexity(&spec, &e, k, 1000, 4).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.worst_margin >= -1e-8);
    }

    #[test]
    fn local_to_global_member_piece() {
        let spec = g0(1);
        let e = two_piece();
        let grid = spec.x_domain().grid(101);
        let r = check_local_to_global(&spec, &e, &[0.25], &e.pieces()[0].focus, 0.1, &grid, true).unwrap();
        assert!(r.global && !r.hard_failure);
        // tangent line y = 0.5 through the kink
        let c = Focus { y: vec![0.5], v: 0.25 };
        let r = check_local_to_global(&spec, &e, &[0.5], &c, 0.1, &grid, true).unwrap();
        assert!(r.global);
    }

    #[test]
    fn local_support_precondition() {
        let spec = g0(1);
        let e = two_piece();
        let grid = spec.x_domain().grid(101);
        let c = Focus { y: vec![2.0], v: 1.0 };
        assert!(matches!(check_local_to_global(&spec, &e, &[0.5], &c, 0.2, &grid, false), Err(Error::Precondition(_))));
    }

    fn twisted_fixture() -> GenFun {
        GenFun::from_spec_file(&SpecFile {
            kind: None,
            expression: Some("dot(x,y) + eps*norm2(x)*norm2(y) - v".into()),
            n: 1,
            params: [("eps".to_string(), -0.5)].into_iter().collect(),
            a: Some(BandSpec::Const(-10.0)),
            b: Some(BandSpec::Const(10.0)),
            x_domain: Some(DomainSpec::Body(BodySpec::Box { lo: vec![-1.0], hi: vec![1.0] })),
            y_domain: Some(DomainSpec::Body(BodySpec::Box { lo: vec![0.5], hi: vec![1.5] })),
        })
        .unwrap()
    }

    #[test]
    fn local_not_global_without_twist() {
        let spec = twisted_fixture();
        let e = Envelope::from_foci(&[(vec![0.5], 0.0), (vec![1.5], 0.0)]).unwrap();
        let grid = spec.x_domain().grid(201);
        let c = Focus { y: vec![1.0], v: 0.0 };
        let r = check_local_to_global(&spec, &e, &[0.0], &c, 0.5, &grid, false).unwrap();
        assert!(!r.global);
        assert!((r.worst_excess - 0.125).abs() < 1e-9);
        assert!(!r.hard_failure);
        let conv = expmaps::check_domain_convexity(&spec, &[(vec![0.8], 0.0)], &[], 5, 1);
        assert!(conv.twist_collisions > 0);
    }

    #[test]
    fn continuity_examples() {
        let spec = g0(1);
        let single = Envelope::from_foci(&[(vec![0.3], 0.0)]).unwrap();
        let r = check_subdiff_continuity(&spec, &single, &[0.5], 0.01, 0.4).unwrap();
        assert_eq!(r.delta, 0.4);
        let e = two_piece();
        let r = check_subdiff_continuity(&spec, &e, &[0.5], 1.0, 0.4).unwrap();
        assert_eq!(r.delta, 0.4);
        let r = check_subdiff_continuity(&spec, &e, &[0.4], 0.1, 0.4).unwrap();
        assert!((r.delta - 0.1).abs() < 1e-6, "{r:?}");
        assert!(!r.resolution_limited);
    }

    #[test]
    fn window_at_caps_for_flat_case() {
        let spec = g0(1);
        let r = build_window_s(&spec, &two_piece(), &[0.5]).unwrap();
        assert_eq!(r.shrink_steps, 0);
        assert_eq!((r.window.r1, r.window.r2, r.window.r3), WINDOW_CAPS);
        assert!(r.delta > 0.0 && r.delta <= r.window.r1);
    }

    #[test]
    fn window_rejects_band_edge() {
        let spec = g0(1);
        let e = Envelope::from_foci(&[(vec![0.0], -10.0)]).unwrap();
        assert!(matches!(build_window_s(&spec, &e, &[0.5]), Err(Error::NoWindow(_))));
        assert!(matches!(build_window_s(&spec, &two_piece(), &[0.0]), Err(Error::NoWindow(_))));
    }

    #[test]
    fn c3_two_piece() {
        let spec = g0(1);
        let r = check_c3_estimate(&spec, &two_piece(), &[0.25], &[0.75], 1.0, 0.0, None).unwrap();
        assert!((r.x_t[0] - 0.5).abs() < 1e-12);
        assert!(r.u.abs() < 1e-12);
        assert!(r.lhs.abs() < 1e-12);
        assert!(r.margin >= 0.0);
    }

    #[test]
    fn c3_degenerate_and_precondition() {
        let spec = g0(1);
        let r = check_c3_estimate(&spec, &two_piece(), &[0.5], &[0.5], 1.0, 0.0, None).unwrap();
        assert!(r.margin >= 0.0);
        let close = Envelope::from_foci(&[(vec![0.0], 0.0), (vec![0.1], 0.05)]).unwrap();
        let err = check_c3_estimate(&spec, &close, &[0.1], &[0.9], 1.0, 0.0, None);
        assert!(matches!(err, Err(Error::Precondition(_))));
    }

    proptest! {
        #[test]
        fn adding_a_piece_never_lowers(y in 0.0..1.0f64, v in -1.0..1.0f64, x in 0.0..1.0f64) {
            let spec = g0(1);
            let mut e = two_piece();
            let before = e.value(&spec, &[x]).unwrap();
            e.add_piece(GAffinePiece::new(vec![y], v, None));
            prop_assert!(e.value(&spec, &[x]).unwrap() >= before);
        }

        #[test]
        fn focus_consistency(x in -1.0..1.0f64, x2 in -1.0..1.0f64, seed in 0u64..50) {
            let spec = GenFun::builtin(Builtin::NonFlat, 2).unwrap();
            let mut rng = stream_rng(seed, 9);
            let foci: Vec<(Point, f64)> = (0..6).map(|_| (spec.y_domain().sample(&mut rng), rng.gen_range(-0.5..0.5))).collect();
            let e = Envelope::from_foci(&foci).unwrap();
            let pt = vec![x, x2];
            let (val, s) = e.eval(&spec, &pt).unwrap();
            for &i in &s.attaining {
                let f = &e.pieces()[i].focus;
                prop_assert!((spec.value(&pt, &f.y, f.v).unwrap() - val).abs() <= s.tolerance);
                let h = spec.invert_h(&pt, &f.y, val).unwrap();
                prop_assert!((h - f.v).abs() <= 10.0 * s.tolerance);
            }
            prop_assert!(s.margin > 0.0);
        }
    }
}
