//! The G-exponential and G*-exponential, the matrix `E`, G-segments and the
//! sampled domain-convexity and twist checks.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genfun::{Constant, ConstantsLedger, GenFun, MatN, VecN, WindowS};
use crate::geom::{self, Domain, Point};
use crate::rng::stream_rng;

/// Residual target of the Newton solves.
pub const EXP_TOL: f64 = 1e-10;
const MAX_NEWTON: usize = 40;
const MAX_HALVINGS: usize = 12;
/// Relative margin around the bounding box of the target domain within
/// which Newton iterates may roam.
const ROAM_MARGIN: f64 = 0.25;
/// Largest θ increment per continuation substep.
const SEGMENT_SUBSTEP: f64 = 1.0 / 16.0;

/// A focus `(y, v)` of a G-affine function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Focus {
    pub y: Point,
    pub v: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExpResult {
    pub y: Point,
    pub v: f64,
    pub residual: f64,
    pub iterations: usize,
}

impl ExpResult {
    pub fn focus(&self) -> Focus {
        Focus { y: self.y.clone(), v: self.v }
    }
}

/// `E = D²_xyG − D²_xvG ⊗ D_yG / D_vG`, rows indexed by x.
pub fn e_matrix(spec: &GenFun, x: &[f64], y: &[f64], v: f64) -> Result<MatN> {
    let gv = spec.d_v(x, y, v)?;
    if gv == 0.0 {
        return Err(Error::ZeroGv);
    }
    let gxy = spec.hess_xy(x, y, v)?;
    let gxv = spec.grad_xv(x, y, v)?;
    let gy = spec.grad_y(x, y, v)?;
    Ok(gxy - gxv * gy.transpose() / gv)
}

/// Spectral norms `(‖E‖, ‖E⁻¹‖)`; the second is infinite when singular.
pub fn e_norms(e: &MatN) -> (f64, f64) {
    let sv = e.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    (max, if min > 0.0 { 1.0 / min } else { f64::INFINITY })
}

fn roam_box(domain: &Domain) -> (Point, Point) {
    let (lo, hi) = domain.bbox();
    let lo2 = lo.iter().zip(&hi).map(|(l, h)| l - ROAM_MARGIN * (h - l)).collect();
    let hi2 = lo.iter().zip(&hi).map(|(l, h)| h + ROAM_MARGIN * (h - l)).collect();
    (lo2, hi2)
}

fn in_box(z: &[f64], lo: &[f64], hi: &[f64]) -> bool {
    z.iter().zip(lo.iter().zip(hi)).all(|(c, (l, h))| *c >= *l && *c <= *h)
}

fn solve_linear(m: MatN, rhs: &VecN) -> Result<VecN> {
    m.lu().solve(rhs).ok_or_else(|| Error::Singular("Newton Jacobian".into()))
}

/// Damped Newton on `z ↦ residual(z)` with Jacobian `jac`, iterates kept in
/// the box `[lo, hi]`.
fn damped_newton<R, J>(start: Point, lo: &[f64], hi: &[f64], residual: R, jac: J) -> Result<(Point, f64, usize)>
where
    R: Fn(&[f64]) -> Result<VecN>,
    J: Fn(&[f64]) -> Result<MatN>,
{
    let mut z = start;
    let mut r = residual(&z)?;
    let mut rn = r.norm();
    for it in 0..MAX_NEWTON {
        if rn <= EXP_TOL {
            // one polishing step, kept only if it helps
            if let Ok(step) = jac(&z).and_then(|m| solve_linear(m, &(-&r))) {
                let trial: Point = z.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
                if let Ok(r2) = residual(&trial) {
                    if r2.norm() < rn {
                        return Ok((trial, r2.norm(), it + 1));
                    }
                }
            }
            return Ok((z, rn, it));
        }
        let step = solve_linear(jac(&z)?, &(-&r))?;
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let trial: Point = z.iter().zip(step.iter()).map(|(a, b)| a + lambda * b).collect();
            if in_box(&trial, lo, hi) {
                if let Ok(r2) = residual(&trial) {
                    let n2 = r2.norm();
                    if n2 < (1.0 - 1e-4 * lambda) * rn || n2 <= EXP_TOL {
                        z = trial;
                        r = r2;
                        rn = n2;
                        accepted = true;
                        break;
                    }
                }
            }
            lambda *= 0.5;
        }
        if !accepted {
            return Err(Error::NoConvergence { iterations: it + 1, residual: rn });
        }
    }
    if rn <= EXP_TOL {
        Ok((z, rn, MAX_NEWTON))
    } else {
        Err(Error::NoConvergence { iterations: MAX_NEWTON, residual: rn })
    }
}

/// `(y, v)` with `D_xG(x, y, v) = p` and `G(x, y, v) = u`.
pub fn g_exp(spec: &GenFun, x: &[f64], u: f64, p: &[f64], guess: Option<&[f64]>) -> Result<ExpResult> {
    let target = VecN::from_column_slice(p);
    let start = guess.map_or_else(|| spec.y_domain().center(), |g| g.to_vec());
    let (lo, hi) = roam_box(spec.y_domain());
    let residual = |y: &[f64]| -> Result<VecN> {
        let v = spec.invert_h(x, y, u)?;
        Ok(spec.grad_x(x, y, v)? - &target)
    };
    let jac = |y: &[f64]| -> Result<MatN> {
        let v = spec.invert_h(x, y, u)?;
        e_matrix(spec, x, y, v)
    };
    let (y, residual, iterations) = damped_newton(start, &lo, &hi, residual, jac)?;
    let v = spec.invert_h(x, &y, u)?;
    Ok(ExpResult { y, v, residual, iterations })
}

/// `x` with `−D_yG / D_vG (x, y, v) = q`.
pub fn g_star_exp(spec: &GenFun, y: &[f64], v: f64, q: &[f64], guess: Option<&[f64]>) -> Result<ExpResult> {
    let target = VecN::from_column_slice(q);
    let start = guess.map_or_else(|| spec.x_domain().center(), |g| g.to_vec());
    let (lo, hi) = roam_box(spec.x_domain());
    let residual = |x: &[f64]| -> Result<VecN> { Ok(spec.q_of(x, y, v)? - &target) };
    let jac = |x: &[f64]| -> Result<MatN> {
        let gv = spec.d_v(x, y, v)?;
        if gv == 0.0 {
            return Err(Error::ZeroGv);
        }
        Ok(-e_matrix(spec, x, y, v)?.transpose() / gv)
    };
    let (x, residual, iterations) = damped_newton(start, &lo, &hi, residual, jac)?;
    Ok(ExpResult { y: x, v, residual, iterations })
}

/// Gradient-space endpoints `(p0, p1)` of the G-segment from `y0` to `y1`.
pub fn segment_gradients(spec: &GenFun, x: &[f64], u: f64, y0: &[f64], y1: &[f64]) -> Result<(VecN, VecN)> {
    Ok((spec.p_of(x, y0, u)?, spec.p_of(x, y1, u)?))
}

/// Foci `g_exp(x, u, (1−θ)p0 + θp1)` for the requested θ values, solved by
/// continuation from `y0`.
pub fn g_segment(spec: &GenFun, x: &[f64], u: f64, y0: &[f64], y1: &[f64], thetas: &[f64]) -> Result<Vec<Focus>> {
    let (p0, p1) = segment_gradients(spec, x, u, y0, y1)?;
    let at = |t: f64| -> Point { p0.iter().zip(p1.iter()).map(|(a, b)| (1.0 - t) * a + t * b).collect() };
    let mut current_t = 0.0;
    let mut current_y = y0.to_vec();
    let mut out = Vec::with_capacity(thetas.len());
    for &theta in thetas {
        let steps = ((theta - current_t).abs() / SEGMENT_SUBSTEP).ceil().max(1.0) as usize;
        for s in 1..=steps {
            let t = current_t + (theta - current_t) * s as f64 / steps as f64;
            let r = g_exp(spec, x, u, &at(t), Some(&current_y))
                .map_err(|e| Error::SegmentBroken { theta: t, reason: e.to_string() })?;
            current_y = r.y;
        }
        current_t = theta;
        let v = spec.invert_h(x, &current_y, u).map_err(|e| Error::SegmentBroken { theta, reason: e.to_string() })?;
        out.push(Focus { y: current_y.clone(), v });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// domain convexity and twist witnesses

#[derive(Clone, Debug, Serialize)]
pub struct CloudConvexity {
    pub anchor: Point,
    pub level: f64,
    pub points: usize,
    /// Largest midpoint distance to the cloud.
    pub worst_gap: f64,
    /// Largest nearest-neighbour spacing of the cloud.
    pub tolerance: f64,
    /// `worst_gap − tolerance`; positive means a convexity violation.
    pub violation: f64,
    /// Distinct preimages whose images lie within `COLLISION_DIST`.
    pub collisions: usize,
    pub failed_maps: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct DomainConvexityReport {
    pub h_side: Vec<CloudConvexity>,
    pub g_side: Vec<CloudConvexity>,
    pub worst_violation: f64,
    pub convex: bool,
    pub twist_collisions: usize,
}

pub const COLLISION_DIST: f64 = 1e-6;
const MIDPOINT_PAIRS: usize = 4000;

fn nearest(cloud: &[Point], z: &[f64], skip: Option<usize>) -> f64 {
    cloud
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != skip)
        .map(|(_, c)| geom::dist(c, z))
        .fold(f64::INFINITY, f64::min)
}

fn analyse_cloud(anchor: &[f64], level: f64, pre: &[Point], cloud: Vec<Option<Point>>, seed: u64) -> CloudConvexity {
    let failed = cloud.iter().filter(|c| c.is_none()).count();
    let pairs: Vec<(&Point, Point)> = pre.iter().zip(cloud).filter_map(|(a, c)| c.map(|c| (a, c))).collect();
    let images: Vec<Point> = pairs.iter().map(|(_, c)| c.clone()).collect();
    let m = images.len();
    let mut collisions = 0;
    for i in 0..m {
        for j in i + 1..m {
            if geom::dist(&images[i], &images[j]) < COLLISION_DIST && geom::dist(pairs[i].0, pairs[j].0) > COLLISION_DIST {
                collisions += 1;
            }
        }
    }
    if m < 2 {
        return CloudConvexity {
            anchor: anchor.to_vec(),
            level,
            points: m,
            worst_gap: 0.0,
            tolerance: 0.0,
            violation: 0.0,
            collisions,
            failed_maps: failed,
        };
    }
    let tolerance = (0..m).map(|i| nearest(&images, &images[i], Some(i))).fold(0.0, f64::max);
    let mut rng = stream_rng(seed, 0xc0);
    let picks: Vec<(usize, usize)> = (0..MIDPOINT_PAIRS).map(|_| (rng.gen_range(0..m), rng.gen_range(0..m))).collect();
    let worst_gap = picks
        .par_iter()
        .map(|&(i, j)| nearest(&images, &geom::lerp(&images[i], &images[j], 0.5), None))
        .reduce(|| 0.0, f64::max);
    CloudConvexity {
        anchor: anchor.to_vec(),
        level,
        points: m,
        worst_gap,
        tolerance,
        violation: worst_gap - tolerance,
        collisions,
        failed_maps: failed,
    }
}

/// Maps a `k`-lattice of Y through `p = D_xG(x,·,H(x,·,u))` for every
/// `(x, u)` anchor and a lattice of X through `−D_yG/D_vG(·, y, v)` for every
/// `(y, v)` anchor, then tests each image cloud for convexity.
pub fn check_domain_convexity(
    spec: &GenFun,
    h_anchors: &[(Point, f64)],
    g_anchors: &[(Point, f64)],
    k: usize,
    seed: u64,
) -> DomainConvexityReport {
    let ys = spec.y_domain().grid(k);
    let xs = spec.x_domain().grid(k);
    let h_side: Vec<CloudConvexity> = h_anchors
        .iter()
        .enumerate()
        .map(|(a, (x, u))| {
            let pre: Vec<Point> = ys.iter().filter(|y| spec.in_h(x, y, *u)).cloned().collect();
            let cloud = pre.par_iter().map(|y| spec.p_of(x, y, *u).ok().map(|p| p.as_slice().to_vec())).collect();
            analyse_cloud(x, *u, &pre, cloud, seed.wrapping_add(a as u64))
        })
        .collect();
    let g_side: Vec<CloudConvexity> = g_anchors
        .iter()
        .enumerate()
        .map(|(a, (y, v))| {
            let pre: Vec<Point> = xs
                .iter()
                .filter(|x| spec.value(x, y, *v).map(|u| spec.in_h(x, y, u)).unwrap_or(false))
                .cloned()
                .collect();
            let cloud = pre.par_iter().map(|x| spec.q_of(x, y, *v).ok().map(|q| q.as_slice().to_vec())).collect();
            analyse_cloud(y, *v, &pre, cloud, seed.wrapping_add(1000 + a as u64))
        })
        .collect();
    let worst_violation = h_side.iter().chain(&g_side).map(|c| c.violation).fold(f64::NEG_INFINITY, f64::max);
    let twist_collisions = h_side.iter().chain(&g_side).map(|c| c.collisions).sum();
    DomainConvexityReport { convex: worst_violation <= 0.0, worst_violation, h_side, g_side, twist_collisions }
}

// ---------------------------------------------------------------------------
// window constants and derivative verification

/// `C_e = max(‖E‖, ‖E⁻¹‖)` over the window lattice; recorded in the ledger.
pub fn estimate_ce(spec: &GenFun, window: &WindowS, k: usize, ledger: &mut ConstantsLedger) -> Result<f64> {
    let pts = window.lattice(spec, k);
    if pts.is_empty() {
        return Err(Error::NoWindow("window lattice has no in-band points".into()));
    }
    let ce = pts
        .par_iter()
        .map(|w| {
            let v = spec.invert_h(&w.x, &w.y, w.u)?;
            let (a, b) = e_norms(&e_matrix(spec, &w.x, &w.y, v)?);
            Ok(a.max(b))
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    if !ce.is_finite() {
        return Err(Error::Singular("E is singular on the window".into()));
    }
    ledger.set(Constant::Ce, ce, window.clone())?;
    Ok(ce)
}

#[derive(Clone, Debug, Serialize)]
pub struct ExpDerivativeReport {
    pub trials: usize,
    pub max_relative_error: f64,
    pub round_trip_error: f64,
    pub sandwich_checked: usize,
    pub sandwich_violations: usize,
    pub skipped: usize,
    pub pass: bool,
}

/// Central-difference Jacobian of `p ↦ g_exp(x, u, p)`.
pub fn g_exp_jacobian_fd(spec: &GenFun, x: &[f64], u: f64, p: &[f64], y_guess: &[f64], h: f64) -> Result<MatN> {
    let n = p.len();
    let mut jac = DMatrix::zeros(n, n);
    for k in 0..n {
        let mut pp = p.to_vec();
        let mut pm = p.to_vec();
        pp[k] += h;
        pm[k] -= h;
        let yp = g_exp(spec, x, u, &pp, Some(y_guess))?.y;
        let ym = g_exp(spec, x, u, &pm, Some(y_guess))?.y;
        for i in 0..n {
            jac[(i, k)] = (yp[i] - ym[i]) / (2.0 * h);
        }
    }
    Ok(jac)
}

/// Checks `D_p g_exp = E⁻¹` by finite differences, the round trip
/// `g_exp ∘ p = id`, and the sandwich `|Δp|/C_e ≤ |Δy| ≤ C_e|Δp|` with the
/// ledger's `C_e` inflated by 5%.
pub fn verify_exp_derivative(
    spec: &GenFun,
    window: &WindowS,
    trials: usize,
    seed: u64,
    ce: Option<f64>,
) -> Result<ExpDerivativeReport> {
    let pts = window.sample(spec, trials, seed);
    let n = spec.n();
    let outcomes: Vec<Option<(f64, f64, Option<bool>)>> = pts
        .par_iter()
        .enumerate()
        .map(|(i, w)| {
            let v = spec.invert_h(&w.x, &w.y, w.u).ok()?;
            let p = spec.grad_x(&w.x, &w.y, v).ok()?;
            let solved = g_exp(spec, &w.x, w.u, p.as_slice(), None).ok()?;
            let rt = geom::dist(&solved.y, &w.y);
            let e = e_matrix(spec, &w.x, &w.y, v).ok()?;
            let inv = e.try_inverse()?;
            let fd = g_exp_jacobian_fd(spec, &w.x, w.u, p.as_slice(), &w.y, 1e-6 * (1.0 + p.norm())).ok()?;
            let rel = (&fd - &inv).norm() / inv.norm();
            let sandwich = ce.and_then(|c| {
                let mut rng = stream_rng(seed, 10_000 + i as u64);
                let y1 = geom::sample_ball(&mut rng, &w.y, 0.05);
                if !spec.in_h(&w.x, &y1, w.u) {
                    return None;
                }
                let p1 = spec.p_of(&w.x, &y1, w.u).ok()?;
                let dp = (&p1 - &p).norm();
                let dy = geom::dist(&y1, &w.y);
                let c = 1.05 * c;
                Some(dp / c <= dy * (1.0 + 1e-12) && dy <= c * dp * (1.0 + 1e-12))
            });
            Some((rel, rt, sandwich))
        })
        .collect();
    let _ = n;
    let mut report = ExpDerivativeReport {
        trials: pts.len(),
        max_relative_error: 0.0,
        round_trip_error: 0.0,
        sandwich_checked: 0,
        sandwich_violations: 0,
        skipped: 0,
        pass: false,
    };
    for o in outcomes {
        match o {
            None => report.skipped += 1,
            Some((rel, rt, s)) => {
                report.max_relative_error = report.max_relative_error.max(rel);
                report.round_trip_error = report.round_trip_error.max(rt);
                if let Some(ok) = s {
                    report.sandwich_checked += 1;
                    if !ok {
                        report.sandwich_violations += 1;
                    }
                }
            }
        }
    }
    report.pass = report.trials > 0
        && report.skipped == 0
        && report.max_relative_error <= 1e-4
        && report.round_trip_error <= 1e-8
        && report.sandwich_violations == 0;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genfun::Builtin;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn e_is_identity_for_flat_builtins() {
        for kind in [Builtin::Quadratic, Builtin::CubicV] {
            let g = GenFun::builtin(kind, 2).unwrap();
            let e = e_matrix(&g, &[0.3, 0.4], &[0.2, 0.9], 0.7).unwrap();
            assert_relative_eq!(e, MatN::identity(2, 2), epsilon = 1e-14);
        }
    }

    #[test]
    fn quadratic_exponential_closed_form() {
        let g = GenFun::builtin(Builtin::Quadratic, 2).unwrap();
        let r = g_exp(&g, &[1.0, 1.0], 0.2, &[0.3, -0.1], None).unwrap();
        assert_relative_eq!(r.y[0], 0.3, epsilon = 1e-12);
        assert_relative_eq!(r.y[1], -0.1, epsilon = 1e-12);
        assert_relative_eq!(r.v, 0.0, epsilon = 1e-12);
        assert!(matches!(g_exp(&g, &[1.0, 1.0], 0.2, &[30.0, -10.0], None), Err(Error::NoConvergence { .. })));
    }

    #[test]
    fn cubic_exponential_reduces_to_inversion() {
        let g = GenFun::builtin(Builtin::CubicV, 1).unwrap();
        let u = -(0.5 + 0.125 / 3.0);
        let r = g_exp(&g, &[0.0], u, &[0.0], None).unwrap();
        assert!(r.y[0].abs() < 1e-12);
        assert!((r.v - 0.5).abs() < 1e-10);
    }

    #[test]
    fn star_exponential_examples() {
        let g = GenFun::builtin(Builtin::Quadratic, 2).unwrap();
        let r = g_star_exp(&g, &[0.5, 0.5], 0.1, &[0.25, 0.75], None).unwrap();
        assert_relative_eq!(r.y[0], 0.25, epsilon = 1e-12);
        assert_relative_eq!(r.y[1], 0.75, epsilon = 1e-12);
        let g = GenFun::builtin(Builtin::CubicV, 1).unwrap();
        let r = g_star_exp(&g, &[0.3], 0.5, &[0.8], None).unwrap();
        assert_relative_eq!(r.y[0], 1.0, epsilon = 1e-11);
        let flat = GenFun::from_json(r#"{"expression": "dot(x,y)", "n": 1}"#).unwrap();
        assert!(matches!(g_star_exp(&flat, &[0.3], 0.5, &[0.8], None), Err(Error::ZeroGv)));
    }

    #[test]
    fn quadratic_segment_is_straight() {
        let g = GenFun::builtin(Builtin::Quadratic, 2).unwrap();
        let (y0, y1) = ([0.1, 0.2], [0.9, 0.6]);
        let seg = g_segment(&g, &[0.5, 0.5], 0.0, &y0, &y1, &[0.0, 0.25, 0.5, 1.0]).unwrap();
        for (f, t) in seg.iter().zip([0.0, 0.25, 0.5, 1.0]) {
            let expect = geom::lerp(&y0, &y1, t);
            assert!(geom::dist(&f.y, &expect) < 1e-10);
        }
    }

    #[test]
    fn nonflat_segment_bends_and_matches_dense_continuation() {
        let g = GenFun::builtin(Builtin::NonFlat, 2).unwrap();
        let x = [0.6, -0.4];
        let (y0, y1) = ([-0.8, 0.7], [0.7, -0.6]);
        let u = 0.0;
        let mid = g_segment(&g, &x, u, &y0, &y1, &[0.5]).unwrap().remove(0);
        // oracle: continuation with 1e-3 steps
        let (p0, p1) = segment_gradients(&g, &x, u, &y0, &y1).unwrap();
        let mut y = y0.to_vec();
        for k in 1..=500 {
            let t = k as f64 * 1e-3;
            let p: Vec<f64> = p0.iter().zip(p1.iter()).map(|(a, b)| (1.0 - t) * a + t * b).collect();
            y = g_exp(&g, &x, u, &p, Some(&y)).unwrap().y;
        }
        assert!(geom::dist(&mid.y, &y) < 1e-9);
        assert!(geom::dist(&mid.y, &geom::lerp(&y0, &y1, 0.5)) > 1e-3);
    }

    #[test]
    fn convexity_of_box_and_l_shape() {
        let g = GenFun::builtin(Builtin::Quadratic, 2).unwrap();
        let r = check_domain_convexity(&g, &[(vec![0.5, 0.5], 0.0)], &[(vec![0.5, 0.5], 0.0)], 11, 3);
        assert!(r.convex, "{r:?}");
        assert_eq!(r.twist_collisions, 0);
        let l = GenFun::from_json(
            r#"{"kind": "quadratic", "n": 2,
                "Y": {"union": [{"lo": [0,0], "hi": [1,0.4]}, {"lo": [0,0], "hi": [0.4,1]}]}}"#,
        )
        .unwrap();
        let r = check_domain_convexity(&l, &[(vec![0.5, 0.5], 0.0)], &[], 11, 3);
        assert!(!r.convex);
        assert!(r.worst_violation > 0.0);
    }

    #[test]
    fn ce_of_quadratic_is_one() {
        let g = GenFun::builtin(Builtin::Quadratic, 2).unwrap();
        let w = WindowS::covering_y(&g, vec![0.5, 0.5], 0.3, 0.0, 1.0, 4).unwrap();
        let mut ledger = ConstantsLedger::default();
        assert_relative_eq!(estimate_ce(&g, &w, 3, &mut ledger).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn derivative_check_on_every_builtin() {
        for kind in Builtin::ALL {
            let g = GenFun::builtin(kind, 2).unwrap();
            let x0 = g.x_domain().center();
            let y = g.y_domain().center();
            let u0 = g.value(&x0, &y, 0.0).unwrap();
            let w = WindowS::covering_y(&g, x0, 0.3, u0, 0.5, 4).unwrap();
            let mut ledger = ConstantsLedger::default();
            let ce = estimate_ce(&g, &w, 3, &mut ledger).unwrap();
            let rep = verify_exp_derivative(&g, &w, 20, 1, Some(ce)).unwrap();
            assert!(rep.max_relative_error <= 1e-4, "{kind:?} {rep:?}");
            assert!(rep.round_trip_error <= 1e-8, "{kind:?} {rep:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn round_trips(seed in 0u64..u64::MAX, which in 0usize..4) {
            let g = GenFun::builtin(Builtin::ALL[which], 2).unwrap();
            let mut rng = stream_rng(seed, 2);
            let x = g.x_domain().sample(&mut rng);
            let y = g.y_domain().sample(&mut rng);
            let v: f64 = rng.gen_range(-1.0..1.0);
            let u = g.value(&x, &y, v).unwrap();
            prop_assume!(g.in_h(&x, &y, u));
            let p = g.grad_x(&x, &y, v).unwrap();
            let r = g_exp(&g, &x, u, p.as_slice(), None).unwrap();
            prop_assert!(geom::dist(&r.y, &y) <= 1e-8);
            let q = g.q_of(&x, &y, v).unwrap();
            let s = g_star_exp(&g, &y, v, q.as_slice(), None).unwrap();
            prop_assert!(geom::dist(&s.y, &x) <= 1e-8);
        }

        #[test]
        fn half_segments_compose(seed in 0u64..u64::MAX) {
            let g = GenFun::builtin(Builtin::NonFlat, 2).unwrap();
            let mut rng = stream_rng(seed, 3);
            let x = g.x_domain().sample(&mut rng);
            let y0 = g.y_domain().sample(&mut rng);
            let y1 = g.y_domain().sample(&mut rng);
            let u = 0.0;
            let full = g_segment(&g, &x, u, &y0, &y1, &[0.5, 0.75]).unwrap();
            let mid = full[0].y.clone();
            let second = g_segment(&g, &x, u, &mid, &y1, &[0.5]).unwrap();
            prop_assert!(geom::dist(&second[0].y, &full[1].y) <= 1e-8);
        }
    }
}
