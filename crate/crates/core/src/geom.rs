//! Convex bodies, sampled curves and Monte-Carlo volume estimates.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;

pub type Point = Vec<f64>;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

pub fn sub(a: &[f64], b: &[f64]) -> Point {
    a.iter().zip(b).map(|(p, q)| p - q).collect()
}

pub fn lerp(a: &[f64], b: &[f64], t: f64) -> Point {
    a.iter().zip(b).map(|(p, q)| (1.0 - t) * p + t * q).collect()
}

/// Volume of the unit ball in R^n.
pub fn unit_ball_volume(n: usize) -> f64 {
    match n {
        0 => 1.0,
        1 => 2.0,
        _ => unit_ball_volume(n - 2) * 2.0 * std::f64::consts::PI / n as f64,
    }
}

/// Anything with a membership test.
pub trait Region: Sync {
    fn contains(&self, z: &[f64]) -> bool;
}

/// `{ z : normal . z <= offset }`.
#[derive(Clone, Debug)]
pub struct HalfSpace {
    pub normal: Point,
    pub offset: f64,
}

impl Region for HalfSpace {
    fn contains(&self, z: &[f64]) -> bool {
        dot(&self.normal, z) <= self.offset
    }
}

/// The whole ambient space.
pub struct FreeSpace;

impl Region for FreeSpace {
    fn contains(&self, _z: &[f64]) -> bool {
        true
    }
}

// ---------------------------------------------------------------------------
// convex bodies

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BodySpec {
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Polytope { vertices: Vec<Vec<f64>> },
}

/// Compact convex polytope stored both as vertices and as half-spaces
/// `a_i . z <= b_i` with unit normals.
#[derive(Clone, Debug)]
pub struct ConvexBody {
    dim: usize,
    normals: Vec<Point>,
    offsets: Vec<f64>,
    vertices: Vec<Point>,
    lo: Point,
    hi: Point,
    spec: BodySpec,
}

const MEMBER_TOL: f64 = 1e-12;

impl ConvexBody {
    pub fn from_box(lo: &[f64], hi: &[f64]) -> Result<Self> {
        let dim = lo.len();
        if dim == 0 || hi.len() != dim {
            return Err(Error::Invalid("box corners must have equal nonzero length".into()));
        }
        if lo.iter().chain(hi).any(|c| !c.is_finite()) {
            return Err(Error::Invalid("box corners must be finite".into()));
        }
        if lo.iter().zip(hi).any(|(a, b)| !(b > a)) {
            return Err(Error::Degenerate(format!("box {lo:?}..{hi:?} has an empty side")));
        }
        let mut normals = Vec::with_capacity(2 * dim);
        let mut offsets = Vec::with_capacity(2 * dim);
        for i in 0..dim {
            let mut e = vec![0.0; dim];
            e[i] = 1.0;
            normals.push(e.clone());
            offsets.push(hi[i]);
            e[i] = -1.0;
            normals.push(e);
            offsets.push(-lo[i]);
        }
        let vertices = if dim <= 12 {
            (0..1usize << dim)
                .map(|mask| (0..dim).map(|i| if mask >> i & 1 == 1 { hi[i] } else { lo[i] }).collect())
                .collect()
        } else {
            vec![lo.to_vec(), hi.to_vec()]
        };
        Ok(Self {
            dim,
            normals,
            offsets,
            vertices,
            lo: lo.to_vec(),
            hi: hi.to_vec(),
            spec: BodySpec::Box { lo: lo.to_vec(), hi: hi.to_vec() },
        })
    }

    pub fn unit_cube(n: usize) -> Self {
        Self::from_box(&vec![0.0; n], &vec![1.0; n]).expect("unit cube is valid")
    }

    /// Convex hull of the given points; supported in one and two dimensions.
    pub fn from_vertices(points: &[Point]) -> Result<Self> {
        let dim = points.first().map(|p| p.len()).unwrap_or(0);
        if dim == 0 || points.iter().any(|p| p.len() != dim) {
            return Err(Error::Invalid("vertices must share a nonzero dimension".into()));
        }
        if points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::Invalid("vertices must be finite".into()));
        }
        match dim {
            1 => {
                let lo = points.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
                let hi = points.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
                let mut body = Self::from_box(&[lo], &[hi])?;
                body.spec = BodySpec::Polytope { vertices: points.to_vec() };
                Ok(body)
            }
            2 => Self::polygon(points),
            _ => Err(Error::Invalid(format!("vertex input is supported for n <= 2 only (got n = {dim}); use a box"))),
        }
    }

    fn polygon(points: &[Point]) -> Result<Self> {
        let hull = convex_hull_2d(points);
        let area = polygon_area(&hull);
        let scale = points
            .iter()
            .flat_map(|p| points.iter().map(move |q| dist(p, q)))
            .fold(0.0, f64::max);
        if hull.len() < 3 || area <= 1e-12 * scale * scale {
            return Err(Error::Degenerate("polygon has no interior".into()));
        }
        let m = hull.len();
        let mut normals = Vec::with_capacity(m);
        let mut offsets = Vec::with_capacity(m);
        for i in 0..m {
            let a = &hull[i];
            let b = &hull[(i + 1) % m];
            // counter-clockwise hull: outward normal is (dy, -dx)
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let len = (dx * dx + dy * dy).sqrt();
            let nrm = vec![dy / len, -dx / len];
            offsets.push(dot(&nrm, a));
            normals.push(nrm);
        }
        let lo = vec![
            hull.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min),
            hull.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min),
        ];
        let hi = vec![
            hull.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max),
            hull.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max),
        ];
        Ok(Self { dim: 2, normals, offsets, vertices: hull.clone(), lo, hi, spec: BodySpec::Polytope { vertices: hull } })
    }

    /// Regular `m`-gon inscribed in the circle of the given radius.
    pub fn regular_polygon(center: [f64; 2], radius: f64, m: usize) -> Result<Self> {
        if m < 3 || !(radius > 0.0) {
            return Err(Error::Degenerate("regular polygon needs m >= 3 and radius > 0".into()));
        }
        let pts: Vec<Point> = (0..m)
            .map(|k| {
                let t = 2.0 * std::f64::consts::PI * k as f64 / m as f64;
                vec![center[0] + radius * t.cos(), center[1] + radius * t.sin()]
            })
            .collect();
        Self::polygon(&pts)
    }

    pub fn from_spec(spec: &BodySpec) -> Result<Self> {
        match spec {
            BodySpec::Box { lo, hi } => Self::from_box(lo, hi),
            BodySpec::Polytope { vertices } => Self::from_vertices(vertices),
        }
    }

    pub fn spec(&self) -> &BodySpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn bbox(&self) -> (&[f64], &[f64]) {
        (&self.lo, &self.hi)
    }

    /// Signed distance to the boundary, positive inside.
    pub fn depth(&self, z: &[f64]) -> f64 {
        self.normals
            .iter()
            .zip(&self.offsets)
            .map(|(a, b)| b - dot(a, z))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn diameter(&self) -> f64 {
        let mut d: f64 = 0.0;
        for (i, p) in self.vertices.iter().enumerate() {
            for q in &self.vertices[i + 1..] {
                d = d.max(dist(p, q));
            }
        }
        if self.vertices.len() < 2 {
            d = dist(&self.lo, &self.hi);
        }
        d
    }

    pub fn centroid(&self) -> Point {
        let m = self.vertices.len() as f64;
        (0..self.dim).map(|i| self.vertices.iter().map(|v| v[i]).sum::<f64>() / m).collect()
    }

    /// Radius of the largest inscribed ball (maximised depth), with its center.
    pub fn inradius(&self) -> (f64, Point) {
        if let BodySpec::Box { lo, hi } = &self.spec {
            let r = lo.iter().zip(hi).map(|(a, b)| 0.5 * (b - a)).fold(f64::INFINITY, f64::min);
            return (r, lerp(lo, hi, 0.5));
        }
        // depth is concave; coordinate pattern search from the centroid
        let mut best = self.centroid();
        let mut best_depth = self.depth(&best);
        let mut step = 0.25 * self.diameter();
        while step > 1e-12 * self.diameter().max(1.0) {
            let mut improved = false;
            for i in 0..self.dim {
                for s in [-1.0, 1.0] {
                    let mut cand = best.clone();
                    cand[i] += s * step;
                    let d = self.depth(&cand);
                    if d > best_depth {
                        best = cand;
                        best_depth = d;
                        improved = true;
                    }
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        (best_depth, best)
    }

    pub fn volume(&self) -> f64 {
        match &self.spec {
            BodySpec::Box { lo, hi } => lo.iter().zip(hi).map(|(a, b)| b - a).product(),
            BodySpec::Polytope { .. } if self.dim == 1 => self.hi[0] - self.lo[0],
            BodySpec::Polytope { .. } => polygon_area(&self.vertices),
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Point {
        loop {
            let z: Point = self.lo.iter().zip(&self.hi).map(|(a, b)| rng.gen_range(*a..*b)).collect();
            if self.contains(&z) {
                return z;
            }
        }
    }
}

impl Region for ConvexBody {
    fn contains(&self, z: &[f64]) -> bool {
        self.normals.iter().zip(&self.offsets).all(|(a, b)| dot(a, z) <= b + MEMBER_TOL)
    }
}

fn cross(o: &[f64], a: &[f64], b: &[f64]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Andrew's monotone chain; counter-clockwise, collinear points dropped.
pub fn convex_hull_2d(points: &[Point]) -> Vec<Point> {
    let mut pts: Vec<Point> = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<Point> = Vec::new();
    for p in &pts {
        while lower.len() >= 2 && cross(&lower[lower.len() - 2], &lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p.clone());
    }
    let mut upper: Vec<Point> = Vec::new();
    for p in pts.iter().rev() {
        while upper.len() >= 2 && cross(&upper[upper.len() - 2], &upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p.clone());
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

fn polygon_area(hull: &[Point]) -> f64 {
    let m = hull.len();
    if m < 3 {
        return 0.0;
    }
    0.5 * (0..m)
        .map(|i| {
            let a = &hull[i];
            let b = &hull[(i + 1) % m];
            a[0] * b[1] - a[1] * b[0]
        })
        .sum::<f64>()
        .abs()
}

/// Finite union of convex bodies; the general shape of X and Y.
#[derive(Clone, Debug)]
pub struct Domain {
    bodies: Vec<ConvexBody>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DomainSpec {
    Body(BodySpec),
    Union { union: Vec<BodySpec> },
}

impl Domain {
    pub fn new(bodies: Vec<ConvexBody>) -> Result<Self> {
        let dim = bodies.first().map(|b| b.dim()).ok_or_else(|| Error::Invalid("empty domain".into()))?;
        if bodies.iter().any(|b| b.dim() != dim) {
            return Err(Error::Invalid("domain pieces differ in dimension".into()));
        }
        Ok(Self { bodies })
    }

    pub fn from_body(body: ConvexBody) -> Self {
        Self { bodies: vec![body] }
    }

    pub fn unit_cube(n: usize) -> Self {
        Self::from_body(ConvexBody::unit_cube(n))
    }

    pub fn cube(n: usize, lo: f64, hi: f64) -> Result<Self> {
        Ok(Self::from_body(ConvexBody::from_box(&vec![lo; n], &vec![hi; n])?))
    }

    pub fn from_spec(spec: &DomainSpec) -> Result<Self> {
        match spec {
            DomainSpec::Body(b) => Ok(Self::from_body(ConvexBody::from_spec(b)?)),
            DomainSpec::Union { union } => Self::new(union.iter().map(ConvexBody::from_spec).collect::<Result<_>>()?),
        }
    }

    pub fn spec(&self) -> DomainSpec {
        if self.bodies.len() == 1 {
            DomainSpec::Body(self.bodies[0].spec().clone())
        } else {
            DomainSpec::Union { union: self.bodies.iter().map(|b| b.spec().clone()).collect() }
        }
    }

    pub fn bodies(&self) -> &[ConvexBody] {
        &self.bodies
    }

    pub fn is_convex_body(&self) -> bool {
        self.bodies.len() == 1
    }

    pub fn dim(&self) -> usize {
        self.bodies[0].dim()
    }

    pub fn bbox(&self) -> (Point, Point) {
        let n = self.dim();
        let mut lo = vec![f64::INFINITY; n];
        let mut hi = vec![f64::NEG_INFINITY; n];
        for b in &self.bodies {
            let (blo, bhi) = b.bbox();
            for i in 0..n {
                lo[i] = lo[i].min(blo[i]);
                hi[i] = hi[i].max(bhi[i]);
            }
        }
        (lo, hi)
    }

    /// A point inside the domain used as default initial guess.
    pub fn center(&self) -> Point {
        self.bodies[0].inradius().1
    }

    pub fn diameter(&self) -> f64 {
        let verts: Vec<&Point> = self.bodies.iter().flat_map(|b| b.vertices()).collect();
        let mut d: f64 = 0.0;
        for (i, p) in verts.iter().enumerate() {
            for q in &verts[i + 1..] {
                d = d.max(dist(p, q));
            }
        }
        d.max(self.bodies.iter().map(|b| b.diameter()).fold(0.0, f64::max))
    }

    /// Lattice with `k` nodes per axis over the bounding box, restricted to the domain.
    pub fn grid(&self, k: usize) -> Vec<Point> {
        let (lo, hi) = self.bbox();
        lattice(&lo, &hi, k).into_iter().filter(|z| self.contains(z)).collect()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Point {
        let (lo, hi) = self.bbox();
        loop {
            let z: Point = lo.iter().zip(&hi).map(|(a, b)| rng.gen_range(*a..*b)).collect();
            if self.contains(&z) {
                return z;
            }
        }
    }
}

impl Region for Domain {
    fn contains(&self, z: &[f64]) -> bool {
        self.bodies.iter().any(|b| b.contains(z))
    }
}

/// `k` nodes per axis including both endpoints (one midpoint node when `k == 1`).
pub fn lattice(lo: &[f64], hi: &[f64], k: usize) -> Vec<Point> {
    let n = lo.len();
    let axis = |i: usize, j: usize| {
        if k == 1 {
            0.5 * (lo[i] + hi[i])
        } else {
            lo[i] + (hi[i] - lo[i]) * j as f64 / (k - 1) as f64
        }
    };
    let total = k.pow(n as u32);
    (0..total)
        .map(|mut idx| {
            (0..n)
                .map(|i| {
                    let j = idx % k;
                    idx /= k;
                    axis(i, j)
                })
                .collect()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// curves

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampledCurve {
    params: Vec<f64>,
    points: Vec<Point>,
}

impl SampledCurve {
    pub fn new(params: Vec<f64>, points: Vec<Point>) -> Result<Self> {
        if points.len() < 2 || params.len() != points.len() {
            return Err(Error::Invalid("a curve needs at least 2 samples with matching parameters".into()));
        }
        let n = points[0].len();
        if n == 0 || points.iter().any(|p| p.len() != n || p.iter().any(|c| !c.is_finite())) {
            return Err(Error::Invalid("curve samples must be finite and of equal dimension".into()));
        }
        if params.windows(2).any(|w| !(w[1] > w[0])) || params[0] < 0.0 || params[params.len() - 1] > 1.0 {
            return Err(Error::Invalid("curve parameters must increase strictly inside [0,1]".into()));
        }
        Ok(Self { params, points })
    }

    /// Polyline through `points`, parametrised proportionally to arc length.
    pub fn polyline(points: Vec<Point>) -> Result<Self> {
        let mut acc = vec![0.0];
        for w in points.windows(2) {
            acc.push(acc[acc.len() - 1] + dist(&w[0], &w[1]));
        }
        let total = acc[acc.len() - 1];
        if !(total > 0.0) {
            return Err(Error::Invalid("polyline has zero length".into()));
        }
        Self::new(acc.iter().map(|s| s / total).collect(), points)
    }

    /// Uniform parameters `i / (m - 1)`.
    pub fn uniform(points: Vec<Point>) -> Result<Self> {
        let m = points.len();
        let params = (0..m).map(|i| i as f64 / (m.max(2) - 1) as f64).collect();
        Self::new(params, points)
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    /// Distance from `z` to the polyline.
    pub fn distance(&self, z: &[f64]) -> f64 {
        self.points
            .windows(2)
            .map(|w| segment_distance(z, &w[0], &w[1]))
            .fold(f64::INFINITY, f64::min)
    }

    /// Concatenation with a curve starting where this one ends; parameters
    /// are rescaled to [0, 1/2] and [1/2, 1].
    pub fn concat(&self, other: &SampledCurve) -> Result<SampledCurve> {
        if dist(self.points.last().unwrap(), &other.points[0]) > 0.0 {
            return Err(Error::Invalid("curves do not share an endpoint".into()));
        }
        let rescale = |t: f64, p: &[f64]| {
            let (a, b) = (p[0], p[p.len() - 1]);
            (t - a) / (b - a)
        };
        let mut params: Vec<f64> = self.params.iter().map(|&t| 0.5 * rescale(t, &self.params)).collect();
        let mut points = self.points.clone();
        params.extend(other.params.iter().skip(1).map(|&t| 0.5 + 0.5 * rescale(t, &other.params)));
        points.extend(other.points.iter().skip(1).cloned());
        SampledCurve::new(params, points)
    }
}

pub fn segment_distance(z: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let ab = sub(b, a);
    let len2 = dot(&ab, &ab);
    let t = if len2 > 0.0 { (dot(&sub(z, a), &ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    dist(z, &lerp(a, b, t))
}

pub fn curve_length(curve: &SampledCurve) -> f64 {
    curve.points.windows(2).map(|w| dist(&w[0], &w[1])).sum()
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct BiLipschitz {
    pub lower: f64,
    pub upper: f64,
    pub degenerate: bool,
}

/// Relative size of the lower constant below which a curve is flagged.
pub const BILIPSCHITZ_FLAG_RATIO: f64 = 1e-2;

pub fn bilipschitz_constants(curve: &SampledCurve) -> BiLipschitz {
    let m = curve.points.len();
    let mut lower = f64::INFINITY;
    let mut upper: f64 = 0.0;
    for i in 0..m {
        for j in i + 1..m {
            let r = dist(&curve.points[i], &curve.points[j]) / (curve.params[j] - curve.params[i]);
            lower = lower.min(r);
            upper = upper.max(r);
        }
    }
    let degenerate = lower <= BILIPSCHITZ_FLAG_RATIO * upper;
    BiLipschitz { lower, upper, degenerate }
}

// ---------------------------------------------------------------------------
// Monte Carlo

/// Monte-Carlo estimate with its binomial standard error.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    pub stderr: f64,
}

const MC_CHUNKS: u64 = 64;

/// Hit count of `hit` over `samples` draws from `draw`, split into a fixed
/// number of independently seeded chunks so the result does not depend on
/// the worker count.
fn mc_hits<D, H>(seed: u64, samples: usize, draw: D, hit: H) -> usize
where
    D: Fn(&mut rand_chacha::ChaCha8Rng) -> Point + Sync,
    H: Fn(&[f64]) -> bool + Sync,
{
    let per = samples.div_ceil(MC_CHUNKS as usize);
    (0..MC_CHUNKS)
        .into_par_iter()
        .map(|c| {
            let count = per.min(samples.saturating_sub(c as usize * per));
            let mut rng = stream_rng(seed, c);
            (0..count).filter(|_| hit(&draw(&mut rng))).count()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .sum()
}

fn binomial(hits: usize, samples: usize, volume: f64) -> McEstimate {
    let p = hits as f64 / samples as f64;
    McEstimate { estimate: volume * p, stderr: volume * (p * (1.0 - p) / samples as f64).sqrt() }
}

pub fn sample_ball<R: Rng>(rng: &mut R, center: &[f64], r: f64) -> Point {
    let n = center.len();
    let dir: Point = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let len = norm(&dir);
    let rad = r * rng.gen::<f64>().powf(1.0 / n as f64);
    center.iter().zip(&dir).map(|(c, d)| c + rad * d / len).collect()
}

/// Minimum sample count accepted by the volume estimators.
pub const MIN_MC_SAMPLES: usize = 10_000;

/// vol(B_r(x) ∩ A) by uniform sampling of the ball.
pub fn ball_cap_volume<A: Region>(a: &A, x: &[f64], r: f64, samples: usize, seed: u64) -> Result<McEstimate> {
    if !a.contains(x) {
        return Err(Error::Precondition("ball center lies outside the body".into()));
    }
    if !(r > 0.0) {
        return Err(Error::Precondition("radius must be positive".into()));
    }
    if samples < MIN_MC_SAMPLES {
        return Err(Error::Precondition(format!("need at least {MIN_MC_SAMPLES} samples")));
    }
    let vol = unit_ball_volume(x.len()) * r.powi(x.len() as i32);
    let hits = mc_hits(seed, samples, |rng| sample_ball(rng, x, r), |z| a.contains(z));
    Ok(binomial(hits, samples, vol))
}

/// vol(N_l(γ) ∩ A) by uniform sampling of the tube's bounding box.
pub fn tube_volume<A: Region>(curve: &SampledCurve, l: f64, a: &A, samples: usize, seed: u64) -> Result<McEstimate> {
    if l < 0.0 {
        return Err(Error::Precondition("tube radius must be non-negative".into()));
    }
    if l == 0.0 {
        return Ok(McEstimate { estimate: 0.0, stderr: 0.0 });
    }
    if samples < MIN_MC_SAMPLES {
        return Err(Error::Precondition(format!("need at least {MIN_MC_SAMPLES} samples")));
    }
    let n = curve.dim();
    let mut lo = vec![f64::INFINITY; n];
    let mut hi = vec![f64::NEG_INFINITY; n];
    for p in curve.points() {
        for i in 0..n {
            lo[i] = lo[i].min(p[i] - l);
            hi[i] = hi[i].max(p[i] + l);
        }
    }
    let vol: f64 = lo.iter().zip(&hi).map(|(a, b)| b - a).product();
    let hits = mc_hits(
        seed,
        samples,
        |rng| lo.iter().zip(&hi).map(|(a, b)| rng.gen_range(*a..*b)).collect(),
        |z| curve.distance(z) <= l && a.contains(z),
    );
    Ok(binomial(hits, samples, vol))
}

/// Fraction of a ball covered by a circular cone of half-angle `psi` with
/// apex at the center.
pub fn cone_sector_fraction(n: usize, psi: f64) -> f64 {
    match n {
        1 => 0.5,
        2 => psi / std::f64::consts::PI,
        _ => {
            let f = |t: f64| t.sin().powi(n as i32 - 2);
            simpson(f, 0.0, psi, 2000) / simpson(f, 0.0, std::f64::consts::PI, 2000)
        }
    }
}

fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, m: usize) -> f64 {
    let m = m + m % 2;
    let h = (b - a) / m as f64;
    let inner: f64 = (1..m).map(|i| f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 }).sum();
    h / 3.0 * (f(a) + f(b) + inner)
}

/// Boundary Lipschitz constant `L = diam(A) / r` with `r = 2 r_A`.
pub fn boundary_lipschitz(body: &ConvexBody) -> f64 {
    body.diameter() / (2.0 * body.inradius().0)
}

/// Half-angle of the supporting cone `{ q^n >= L |q'| }`.
pub fn cone_half_angle(lipschitz: f64) -> f64 {
    (1.0 / lipschitz).atan()
}

/// Inscribed-ball ratio `L'` of the cone sector and the tube constant
/// `K_A = (L')^{n-1} / 2`.
pub fn tube_constant(body: &ConvexBody) -> f64 {
    let s = cone_half_angle(boundary_lipschitz(body)).sin();
    let l_prime = s / (1.0 + s);
    0.5 * l_prime.powi(body.dim() as i32 - 1)
}

#[derive(Clone, Debug, Serialize)]
pub struct BallTrial {
    pub center: Point,
    pub radius: f64,
    pub ratio: f64,
    pub ratio_stderr: f64,
    pub cone_fraction: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TubeTrial {
    pub vertices: Vec<Point>,
    pub l: f64,
    pub lower_lipschitz: f64,
    pub volume: McEstimate,
    pub bound: f64,
    pub ratio: f64,
    pub margin: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct VolumeLemmaReport {
    pub r_a: f64,
    pub lipschitz: f64,
    pub c_a: f64,
    pub c_a_stderr: f64,
    pub c_a_center: Point,
    pub c_a_radius: f64,
    pub cone_fraction: f64,
    pub k_a: f64,
    pub k_a_analytic: f64,
    pub k_a_curve: Vec<Point>,
    pub k_a_l: f64,
    pub l_threshold_half: f64,
    pub tube_bound_violations: usize,
    pub worst_ball_margin: f64,
    pub ball_trials: Vec<BallTrial>,
    pub tube_trials: Vec<TubeTrial>,
    pub pass: bool,
}

/// Empirical ball-cap and tube constants of a convex body.
///
/// Ball trials use every vertex plus `trials` random interior points, with
/// radii log-uniform in `[1e-3, 1e-2] * r_A` (`r_A` the inradius). Tube
/// trials use `trials` random polylines inside the body with `l` at most
/// `min(r_A / 2, C'/(8C) r_A)`.
pub fn verify_volume_lemmas(body: &ConvexBody, trials: usize, samples: usize, seed: u64) -> Result<VolumeLemmaReport> {
    let n = body.dim();
    let (r_a, _) = body.inradius();
    if !(r_a > 0.0) {
        return Err(Error::Degenerate("body has empty interior".into()));
    }
    let lipschitz = boundary_lipschitz(body);
    let psi = cone_half_angle(lipschitz);
    let cone_fraction = cone_sector_fraction(n, psi);
    let k_a_analytic = tube_constant(body);

    let mut rng = stream_rng(seed, u64::MAX);
    let mut centers: Vec<Point> = body.vertices().to_vec();
    centers.extend((0..trials).map(|_| body.sample(&mut rng)));
    let radii: Vec<f64> = centers
        .iter()
        .map(|_| r_a * 10f64.powf(rng.gen_range(-3.0..-2.0)))
        .collect();

    let ball_trials: Vec<BallTrial> = centers
        .iter()
        .zip(&radii)
        .enumerate()
        .map(|(i, (c, &r))| {
            let est = ball_cap_volume(body, c, r, samples, seed.wrapping_add(1 + i as u64))?;
            let vol = unit_ball_volume(n) * r.powi(n as i32);
            Ok(BallTrial {
                center: c.clone(),
                radius: r,
                ratio: est.estimate / vol,
                ratio_stderr: est.stderr / vol,
                cone_fraction,
            })
        })
        .collect::<Result<_>>()?;
    let worst = ball_trials
        .iter()
        .min_by(|a, b| a.ratio.total_cmp(&b.ratio))
        .expect("at least one vertex");
    let worst_ball_margin = ball_trials
        .iter()
        .map(|t| t.ratio + 3.0 * t.ratio_stderr - cone_fraction)
        .fold(f64::INFINITY, f64::min);

    let mut tube_trials = Vec::with_capacity(trials);
    for i in 0..trials {
        let k = rng.gen_range(2..=4);
        let verts: Vec<Point> = (0..k).map(|_| body.sample(&mut rng)).collect();
        let curve = match SampledCurve::polyline(verts.clone()) {
            Ok(c) => c,
            Err(_) => continue,
        };
        let bl = bilipschitz_constants(&densify(&curve, 16)?);
        let l_max = (0.5 * r_a).min(bl.lower / bl.upper * r_a / 8.0);
        let l = l_max * rng.gen_range(0.1..1.0);
        let tube_seed = seed.wrapping_add(10_000 + i as u64);
        let volume = tube_volume(&curve, l, body, samples, tube_seed)?;
        let scale = bl.lower * l.powi(n as i32 - 1);
        let bound = k_a_analytic * scale;
        tube_trials.push(TubeTrial {
            vertices: verts,
            l,
            lower_lipschitz: bl.lower,
            volume,
            bound,
            ratio: volume.estimate / scale,
            margin: volume.estimate + 3.0 * volume.stderr - bound,
        });
    }
    let worst_tube = tube_trials
        .iter()
        .min_by(|a, b| a.ratio.total_cmp(&b.ratio))
        .ok_or_else(|| Error::InsufficientData("no valid tube trials".into()))?;
    let tube_bound_violations = tube_trials.iter().filter(|t| t.margin < 0.0).count();
    let pass = worst.ratio - 3.0 * worst.ratio_stderr > 0.0
        && worst_tube.ratio - 3.0 * worst_tube.volume.stderr / (worst_tube.lower_lipschitz * worst_tube.l.powi(n as i32 - 1)) > 0.0
        && tube_bound_violations == 0;

    Ok(VolumeLemmaReport {
        r_a,
        lipschitz,
        c_a: worst.ratio,
        c_a_stderr: worst.ratio_stderr,
        c_a_center: worst.center.clone(),
        c_a_radius: worst.radius,
        cone_fraction,
        k_a: worst_tube.ratio,
        k_a_analytic,
        k_a_curve: worst_tube.vertices.clone(),
        k_a_l: worst_tube.l,
        l_threshold_half: 0.5 * r_a,
        tube_bound_violations,
        worst_ball_margin,
        ball_trials,
        tube_trials,
        pass,
    })
}

/// Inserts `per_segment - 1` evenly spaced samples inside every segment.
pub fn densify(curve: &SampledCurve, per_segment: usize) -> Result<SampledCurve> {
    let mut params = vec![curve.params[0]];
    let mut points = vec![curve.points[0].clone()];
    for i in 0..curve.points.len() - 1 {
        for k in 1..=per_segment {
            let t = k as f64 / per_segment as f64;
            params.push((1.0 - t) * curve.params[i] + t * curve.params[i + 1]);
            points.push(lerp(&curve.points[i], &curve.points[i + 1], t));
        }
    }
    SampledCurve::new(params, points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn triangle() -> ConvexBody {
        ConvexBody::from_vertices(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()
    }

    #[test]
    fn segment_length() {
        let c = SampledCurve::uniform(vec![vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(curve_length(&c), 5.0);
        let c = SampledCurve::uniform(vec![vec![1.0, 1.0]; 5]).unwrap();
        assert_eq!(curve_length(&c), 0.0);
    }

    #[test]
    fn quarter_circle_length() {
        let pts = (0..1000)
            .map(|i| {
                let t = 0.5 * PI * i as f64 / 999.0;
                vec![t.cos(), t.sin()]
            })
            .collect();
        let c = SampledCurve::uniform(pts).unwrap();
        assert!((curve_length(&c) - PI / 2.0).abs() < 1e-4);
    }

    #[test]
    fn bilipschitz_of_affine_and_squared() {
        let pts = (0..11).map(|i| vec![3.0 * i as f64 / 10.0, 4.0 * i as f64 / 10.0]).collect();
        let b = bilipschitz_constants(&SampledCurve::uniform(pts).unwrap());
        assert_relative_eq!(b.lower, 5.0, epsilon = 1e-12);
        assert_relative_eq!(b.upper, 5.0, epsilon = 1e-12);
        assert!(!b.degenerate);

        let pts = (0..1000).map(|i| vec![(i as f64 / 999.0).powi(2), 0.0]).collect();
        let b = bilipschitz_constants(&SampledCurve::uniform(pts).unwrap());
        assert!(b.lower < 1e-2);
        assert!(b.degenerate);

        let m = 400;
        let pts = (0..m)
            .map(|i| {
                let t = 0.5 * PI * i as f64 / (m - 1) as f64;
                vec![t.cos(), t.sin()]
            })
            .collect();
        let b = bilipschitz_constants(&SampledCurve::uniform(pts).unwrap());
        // chord/arc over [0, π/2] ranges from 2√2/π·(π/2) to π/2
        assert!((b.upper - PI / 2.0).abs() < 1e-3);
        assert!((b.lower - 2f64.sqrt()).abs() < 1e-3);
    }

    #[test]
    fn coincident_samples_give_zero_lower_constant() {
        let c = SampledCurve::uniform(vec![vec![0.0], vec![1.0], vec![1.0], vec![2.0]]).unwrap();
        let b = bilipschitz_constants(&c);
        assert_eq!(b.lower, 0.0);
        assert!(b.degenerate);
    }

    #[test]
    fn invalid_curves() {
        assert!(SampledCurve::uniform(vec![vec![0.0]]).is_err());
        assert!(SampledCurve::new(vec![0.5, 0.5], vec![vec![0.0], vec![1.0]]).is_err());
    }

    #[test]
    fn ball_caps_in_square() {
        let sq = ConvexBody::unit_cube(2);
        let e = ball_cap_volume(&sq, &[0.0, 0.0], 0.1, 200_000, 1).unwrap();
        assert!((e.estimate - PI * 0.01 / 4.0).abs() <= 3.0 * e.stderr);
        let e = ball_cap_volume(&sq, &[0.5, 0.5], 0.1, 200_000, 2).unwrap();
        assert_relative_eq!(e.estimate, PI * 0.01, max_relative = 1e-12);
        assert!(ball_cap_volume(&sq, &[1.5, 0.5], 0.1, 20_000, 0).is_err());
    }

    #[test]
    fn ball_caps_in_triangle() {
        let tri = triangle();
        let r: f64 = 0.05;
        // right-angle corner: quarter ball; 45° corner: eighth ball
        let e = ball_cap_volume(&tri, &[0.0, 0.0], r, 200_000, 3).unwrap();
        assert!((e.estimate - PI * r * r / 4.0).abs() <= 3.0 * e.stderr);
        let e = ball_cap_volume(&tri, &[1.0, 0.0], r, 200_000, 4).unwrap();
        assert!((e.estimate - PI * r * r / 8.0).abs() <= 3.0 * e.stderr);
    }

    #[test]
    fn tube_around_segment() {
        let c = SampledCurve::uniform(vec![vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let free = tube_volume(&c, 0.1, &FreeSpace, 400_000, 5).unwrap();
        let exact = 2.0 * 0.1 + PI * 0.01;
        assert!((free.estimate - exact).abs() <= 3.0 * free.stderr);
        let half = HalfSpace { normal: vec![0.0, -1.0], offset: 0.0 };
        let h = tube_volume(&c, 0.1, &half, 400_000, 6).unwrap();
        assert!((h.estimate - exact / 2.0).abs() <= 3.0 * h.stderr);
        assert_eq!(tube_volume(&c, 0.0, &FreeSpace, 0, 0).unwrap().estimate, 0.0);
    }

    #[test]
    fn tube_inside_large_box_matches_free_space() {
        let c = SampledCurve::uniform(vec![vec![0.2, 0.3], vec![0.6, 0.5], vec![0.4, 0.8]]).unwrap();
        let big = ConvexBody::from_box(&[-5.0, -5.0], &[5.0, 5.0]).unwrap();
        let a = tube_volume(&c, 0.05, &big, 100_000, 9).unwrap();
        let b = tube_volume(&c, 0.05, &FreeSpace, 100_000, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn monte_carlo_is_deterministic() {
        let sq = ConvexBody::unit_cube(2);
        let a = ball_cap_volume(&sq, &[0.1, 0.0], 0.3, 50_000, 17).unwrap();
        let b = ball_cap_volume(&sq, &[0.1, 0.0], 0.3, 50_000, 17).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn degenerate_bodies_rejected() {
        let seg = ConvexBody::from_vertices(&[vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 2.0]]);
        assert!(matches!(seg, Err(Error::Degenerate(_))));
        assert!(matches!(ConvexBody::from_box(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn square_corner_limits_ball_constant() {
        let rep = verify_volume_lemmas(&ConvexBody::unit_cube(2), 100, 40_000, 7).unwrap();
        assert!(rep.c_a >= 0.24, "{}", rep.c_a);
        assert!((rep.c_a - 0.25).abs() <= 3.0 * rep.c_a_stderr + 1e-12);
        assert!(rep.pass);
    }

    #[test]
    fn disk_ball_constant_is_half() {
        let disk = ConvexBody::regular_polygon([0.0, 0.0], 1.0, 512).unwrap();
        let rep = verify_volume_lemmas(&disk, 100, 40_000, 8).unwrap();
        assert!(rep.c_a + 3.0 * rep.c_a_stderr >= 0.49, "{}", rep.c_a);
        assert!(rep.pass);
    }

    #[test]
    fn cone_fraction_quadrature_matches_planar_formula() {
        // n = 3 closed form: (1 - cos ψ) / 2
        let psi = 0.7;
        assert_relative_eq!(cone_sector_fraction(3, psi), (1.0 - psi.cos()) / 2.0, max_relative = 1e-9);
        assert_relative_eq!(cone_sector_fraction(2, PI), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn unit_ball_volumes() {
        assert_relative_eq!(unit_ball_volume(2), PI, epsilon = 1e-15);
        assert_relative_eq!(unit_ball_volume(3), 4.0 * PI / 3.0, epsilon = 1e-14);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn length_is_additive(
            a in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 2..6),
            b in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..6),
        ) {
            let first: Vec<Point> = a.iter().map(|&(p, q)| vec![p, q]).collect();
            let mut second = vec![first.last().unwrap().clone()];
            second.extend(b.iter().map(|&(p, q)| vec![p, q]));
            let c1 = SampledCurve::uniform(first).unwrap();
            let c2 = SampledCurve::uniform(second).unwrap();
            let joined = c1.concat(&c2).unwrap();
            let sum = curve_length(&c1) + curve_length(&c2);
            prop_assert!((curve_length(&joined) - sum).abs() <= 1e-12 * sum.max(1.0));
        }

        #[test]
        fn cap_never_exceeds_ball(x in 0.0f64..1.0, y in 0.0f64..1.0, r in 0.01f64..0.29, seed in 0u64..1000) {
            let tri = triangle();
            prop_assume!(tri.contains(&[x, y]));
            let e = ball_cap_volume(&tri, &[x, y], r, MIN_MC_SAMPLES, seed).unwrap();
            let ball = PI * r * r;
            prop_assert!(e.estimate <= ball * (1.0 + 1e-12));
            let cone = cone_sector_fraction(2, cone_half_angle(boundary_lipschitz(&tri)));
            prop_assert!(e.estimate >= cone * ball - 3.0 * e.stderr);
        }

        #[test]
        fn interior_ball_is_full(x in 0.3f64..0.7, y in 0.3f64..0.7, r in 0.01f64..0.29, seed in 0u64..1000) {
            let sq = ConvexBody::unit_cube(2);
            let e = ball_cap_volume(&sq, &[x, y], r, MIN_MC_SAMPLES, seed).unwrap();
            prop_assert!((e.estimate - PI * r * r).abs() <= 3.0 * e.stderr + 1e-12);
        }
    }
}
