//! Generating functions `G(x, y, v)`, the inverse `H` in the scalar slot,
//! the band `a(x,y) < u < b(x,y)`, sampled windows and the constants ledger.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::geom::{self, Domain, DomainSpec, Region};
use crate::mtw::G3Verdict;
use crate::rng::stream_rng;

pub type VecN = DVector<f64>;
pub type MatN = DMatrix<f64>;

/// Relative widening of the band accepted by `invert_h`.
pub const BAND_EXPANSION: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BandSpec {
    Const(f64),
    Expr(String),
}

#[derive(Clone, Debug)]
enum Band {
    Const(f64),
    Expr(Expr),
}

impl Band {
    fn from_spec(spec: &BandSpec, n: usize, params: &BTreeMap<String, f64>) -> Result<Self> {
        match spec {
            BandSpec::Const(c) if c.is_finite() => Ok(Band::Const(*c)),
            BandSpec::Const(c) => Err(Error::Invalid(format!("band value {c} is not finite"))),
            BandSpec::Expr(text) => {
                let e = Expr::parse(text, n, params)?;
                if e.uses_v() {
                    return Err(Error::Invalid("band expressions may depend on x and y only".into()));
                }
                Ok(Band::Expr(e))
            }
        }
    }

    fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        match self {
            Band::Const(c) => Ok(*c),
            Band::Expr(e) => e.eval(x, y, 0.0),
        }
    }
}

/// JSON description of a generating function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expression: Option<String>,
    pub n: usize,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<BandSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<BandSpec>,
    #[serde(rename = "X", default, skip_serializing_if = "Option::is_none")]
    pub x_domain: Option<DomainSpec>,
    #[serde(rename = "Y", default, skip_serializing_if = "Option::is_none")]
    pub y_domain: Option<DomainSpec>,
}

/// Shipped generating functions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Builtin {
    /// `x·y − v`
    Quadratic,
    /// `x·y − v − v³/3`
    CubicV,
    /// `x·y + eps |x|²|y|² − v`
    NonFlat,
    /// `log|x − y| − v` on separated boxes
    LogCost,
}

impl Builtin {
    pub const ALL: [Builtin; 4] = [Builtin::Quadratic, Builtin::CubicV, Builtin::NonFlat, Builtin::LogCost];

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "quadratic" | "G0" => Ok(Builtin::Quadratic),
            "cubic_v" | "G1" => Ok(Builtin::CubicV),
            "nonflat" | "G2" => Ok(Builtin::NonFlat),
            "log_cost" => Ok(Builtin::LogCost),
            other => Err(Error::UnknownIdentifier(other.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Builtin::Quadratic => "quadratic",
            Builtin::CubicV => "cubic_v",
            Builtin::NonFlat => "nonflat",
            Builtin::LogCost => "log_cost",
        }
    }

    pub fn expression(self) -> &'static str {
        match self {
            Builtin::Quadratic => "dot(x,y) - v",
            Builtin::CubicV => "dot(x,y) - v - v^3/3",
            Builtin::NonFlat => "dot(x,y) + eps*norm2(x)*norm2(y) - v",
            Builtin::LogCost => "0.5*log(norm2(x-y)) - v",
        }
    }

    pub fn default_params(self) -> BTreeMap<String, f64> {
        let mut p = BTreeMap::new();
        if self == Builtin::NonFlat {
            p.insert("eps".to_string(), 0.1);
        }
        p
    }

    pub fn default_domains(self) -> (f64, f64, f64, f64) {
        match self {
            Builtin::Quadratic | Builtin::CubicV => (0.0, 1.0, 0.0, 1.0),
            Builtin::NonFlat => (-1.0, 1.0, -1.0, 1.0),
            Builtin::LogCost => (0.0, 1.0, 2.0, 3.0),
        }
    }

    pub fn spec_file(self, n: usize) -> SpecFile {
        let (xl, xh, yl, yh) = self.default_domains();
        SpecFile {
            kind: Some(self.name().to_string()),
            expression: None,
            n,
            params: self.default_params(),
            a: Some(BandSpec::Const(-10.0)),
            b: Some(BandSpec::Const(10.0)),
            x_domain: Some(DomainSpec::Body(geom::BodySpec::Box { lo: vec![xl; n], hi: vec![xh; n] })),
            y_domain: Some(DomainSpec::Body(geom::BodySpec::Box { lo: vec![yl; n], hi: vec![yh; n] })),
        }
    }
}

/// Component of the packed variable `z = (x, y, v)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X(usize),
    Y(usize),
    V,
}

/// Variable block of a derivative request.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Block {
    X,
    Y,
    V,
}

/// Derivative `D_{b1} … D_{bk} G` with `k <= 4`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DerivativeRequest {
    blocks: Vec<Block>,
}

impl DerivativeRequest {
    pub fn new(blocks: &[Block]) -> Result<Self> {
        if blocks.len() > crate::ad::MAX_ORDER {
            return Err(Error::OrderTooHigh(blocks.len()));
        }
        Ok(Self { blocks: blocks.to_vec() })
    }

    pub fn order(&self) -> usize {
        self.blocks.len()
    }
}

/// Dense row-major tensor; a scalar has empty shape.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn scalar(&self) -> f64 {
        self.data[0]
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        let mut flat = 0;
        for (i, s) in idx.iter().zip(&self.shape) {
            flat = flat * s + i;
        }
        self.data[flat]
    }

    /// Frobenius norm; an upper bound for the operator norm.
    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// A generating function with its band and domains; immutable after build.
#[derive(Clone, Debug)]
pub struct GenFun {
    kind: Option<Builtin>,
    n: usize,
    expr: Expr,
    separable: Option<Expr>,
    params: BTreeMap<String, f64>,
    band_specs: (BandSpec, BandSpec),
    band_lo: Band,
    band_hi: Band,
    x_domain: Domain,
    y_domain: Domain,
}

impl GenFun {
    pub fn builtin(kind: Builtin, n: usize) -> Result<Self> {
        Self::from_spec_file(&kind.spec_file(n))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_spec_file(&serde_json::from_str(text)?)
    }

    pub fn from_spec_file(spec: &SpecFile) -> Result<Self> {
        let n = spec.n;
        if n == 0 {
            return Err(Error::Invalid("n must be at least 1".into()));
        }
        let (kind, text, mut params) = match (&spec.kind, &spec.expression) {
            (Some(k), None) => {
                let b = Builtin::from_name(k)?;
                (Some(b), b.expression().to_string(), b.default_params())
            }
            (None, Some(e)) => (None, e.clone(), BTreeMap::new()),
            (Some(_), Some(_)) => return Err(Error::Invalid("give either kind or expression, not both".into())),
            (None, None) => return Err(Error::Invalid("spec needs a kind or an expression".into())),
        };
        params.extend(spec.params.iter().map(|(k, v)| (k.clone(), *v)));
        let expr = Expr::parse(&text, n, &params)?;
        let separable = expr.v_separable_part();
        let (xl, xh, yl, yh) = kind.map_or((0.0, 1.0, 0.0, 1.0), |k| k.default_domains());
        let x_domain = match &spec.x_domain {
            Some(d) => Domain::from_spec(d)?,
            None => Domain::cube(n, xl, xh)?,
        };
        let y_domain = match &spec.y_domain {
            Some(d) => Domain::from_spec(d)?,
            None => Domain::cube(n, yl, yh)?,
        };
        if x_domain.dim() != n || y_domain.dim() != n {
            return Err(Error::Invalid("domain dimension does not match n".into()));
        }
        let a = spec.a.clone().unwrap_or(BandSpec::Const(-10.0));
        let b = spec.b.clone().unwrap_or(BandSpec::Const(10.0));
        let band_lo = Band::from_spec(&a, n, &params)?;
        let band_hi = Band::from_spec(&b, n, &params)?;
        Ok(Self { kind, n, expr, separable, params, band_specs: (a, b), band_lo, band_hi, x_domain, y_domain })
    }

    /// Normalized spec: builtins keep their kind, everything else is explicit.
    pub fn to_spec_file(&self) -> SpecFile {
        SpecFile {
            kind: self.kind.map(|k| k.name().to_string()),
            expression: if self.kind.is_some() { None } else { Some(self.expr.source().to_string()) },
            n: self.n,
            params: self.params.clone(),
            a: Some(self.band_specs.0.clone()),
            b: Some(self.band_specs.1.clone()),
            x_domain: Some(self.x_domain.spec()),
            y_domain: Some(self.y_domain.spec()),
        }
    }

    pub fn with_domains(mut self, x: Domain, y: Domain) -> Result<Self> {
        if x.dim() != self.n || y.dim() != self.n {
            return Err(Error::Invalid("domain dimension does not match n".into()));
        }
        self.x_domain = x;
        self.y_domain = y;
        Ok(self)
    }

    pub fn with_band(mut self, lo: BandSpec, hi: BandSpec) -> Result<Self> {
        self.band_lo = Band::from_spec(&lo, self.n, &self.params)?;
        self.band_hi = Band::from_spec(&hi, self.n, &self.params)?;
        self.band_specs = (lo, hi);
        Ok(self)
    }

    pub fn name(&self) -> String {
        self.kind.map_or_else(|| self.expr.source().to_string(), |k| k.name().to_string())
    }

    pub fn kind(&self) -> Option<Builtin> {
        self.kind
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }

    pub fn is_v_separable(&self) -> bool {
        self.separable.is_some()
    }

    pub fn params(&self) -> &BTreeMap<String, f64> {
        &self.params
    }

    /// Cost `c` with `G = −c − v`, when the expression is written that way.
    pub fn cost_expression(&self) -> Option<String> {
        let text = self.expr.source().trim();
        let prefix = text.strip_suffix("- v").or_else(|| text.strip_suffix("-v"))?;
        let f = Expr::parse(prefix, self.n, &self.params).ok()?;
        (!f.uses_v()).then(|| format!("-({})", prefix.trim()))
    }

    pub fn x_domain(&self) -> &Domain {
        &self.x_domain
    }

    pub fn y_domain(&self) -> &Domain {
        &self.y_domain
    }

    fn pack(&self, x: &[f64], y: &[f64], v: f64) -> Vec<f64> {
        let mut z = Vec::with_capacity(2 * self.n + 1);
        z.extend_from_slice(x);
        z.extend_from_slice(y);
        z.push(v);
        z
    }

    fn axis_index(&self, a: Axis) -> Result<usize> {
        match a {
            Axis::X(i) | Axis::Y(i) if i >= self.n => Err(Error::IndexOutOfRange { index: i, n: self.n }),
            Axis::X(i) => Ok(i),
            Axis::Y(i) => Ok(self.n + i),
            Axis::V => Ok(2 * self.n),
        }
    }

    fn check_dims(&self, x: &[f64], y: &[f64]) -> Result<()> {
        if x.len() != self.n || y.len() != self.n {
            return Err(Error::Invalid(format!("expected points of dimension {}", self.n)));
        }
        Ok(())
    }

    pub fn value(&self, x: &[f64], y: &[f64], v: f64) -> Result<f64> {
        self.check_dims(x, y)?;
        self.expr.eval(x, y, v)
    }

    /// Mixed partial along the listed axes (order ≤ 4) by nested duals.
    pub fn partial(&self, x: &[f64], y: &[f64], v: f64, axes: &[Axis]) -> Result<f64> {
        self.check_dims(x, y)?;
        let idx: Vec<usize> = axes.iter().map(|&a| self.axis_index(a)).collect::<Result<_>>()?;
        self.expr.partial(&self.pack(x, y, v), &idx)
    }

    /// Central-difference counterpart of `partial`.
    pub fn partial_fd(&self, x: &[f64], y: &[f64], v: f64, axes: &[Axis], h: f64) -> Result<f64> {
        self.check_dims(x, y)?;
        let idx: Vec<usize> = axes.iter().map(|&a| self.axis_index(a)).collect::<Result<_>>()?;
        self.expr.partial_fd(&self.pack(x, y, v), &idx, h)
    }

    /// Every component of the requested derivative block.
    pub fn eval_g(&self, x: &[f64], y: &[f64], v: f64, req: &DerivativeRequest) -> Result<Tensor> {
        self.check_dims(x, y)?;
        let shape: Vec<usize> = req.blocks.iter().map(|b| if *b == Block::V { 1 } else { self.n }).collect();
        let total: usize = shape.iter().product();
        let z = self.pack(x, y, v);
        let mut data = Vec::with_capacity(total);
        for flat in 0..total {
            let mut rem = flat;
            let mut idx = vec![0; shape.len()];
            for k in (0..shape.len()).rev() {
                idx[k] = rem % shape[k];
                rem /= shape[k];
            }
            let axes: Vec<usize> = req
                .blocks
                .iter()
                .zip(&idx)
                .map(|(b, &i)| match b {
                    Block::X => i,
                    Block::Y => self.n + i,
                    Block::V => 2 * self.n,
                })
                .collect();
            data.push(self.expr.partial(&z, &axes)?);
        }
        Ok(Tensor { shape, data })
    }

    pub fn grad_x(&self, x: &[f64], y: &[f64], v: f64) -> Result<VecN> {
        let z = self.pack(x, y, v);
        let g: Vec<f64> = (0..self.n).map(|i| self.expr.partial(&z, &[i])).collect::<Result<_>>()?;
        Ok(VecN::from_vec(g))
    }

    pub fn grad_y(&self, x: &[f64], y: &[f64], v: f64) -> Result<VecN> {
        let z = self.pack(x, y, v);
        let g: Vec<f64> = (0..self.n).map(|i| self.expr.partial(&z, &[self.n + i])).collect::<Result<_>>()?;
        Ok(VecN::from_vec(g))
    }

    pub fn d_v(&self, x: &[f64], y: &[f64], v: f64) -> Result<f64> {
        self.expr.partial(&self.pack(x, y, v), &[2 * self.n])
    }

    pub fn hess_xx(&self, x: &[f64], y: &[f64], v: f64) -> Result<MatN> {
        let z = self.pack(x, y, v);
        let n = self.n;
        let mut m = MatN::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let val = self.expr.partial(&z, &[i, j])?;
                m[(i, j)] = val;
                m[(j, i)] = val;
            }
        }
        Ok(m)
    }

    /// `[i][j] = ∂x_i ∂y_j G`.
    pub fn hess_xy(&self, x: &[f64], y: &[f64], v: f64) -> Result<MatN> {
        let z = self.pack(x, y, v);
        let n = self.n;
        let mut m = MatN::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = self.expr.partial(&z, &[i, n + j])?;
            }
        }
        Ok(m)
    }

    pub fn grad_xv(&self, x: &[f64], y: &[f64], v: f64) -> Result<VecN> {
        let z = self.pack(x, y, v);
        let g: Vec<f64> = (0..self.n).map(|i| self.expr.partial(&z, &[i, 2 * self.n])).collect::<Result<_>>()?;
        Ok(VecN::from_vec(g))
    }

    /// `(a(x,y), b(x,y))`.
    pub fn band(&self, x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
        Ok((self.band_lo.eval(x, y)?, self.band_hi.eval(x, y)?))
    }

    /// Strict membership `a(x,y) < u < b(x,y)` with `x ∈ X`, `y ∈ Y`.
    pub fn in_h(&self, x: &[f64], y: &[f64], u: f64) -> bool {
        self.x_domain.contains(x)
            && self.y_domain.contains(y)
            && matches!(self.band(x, y), Ok((lo, hi)) if lo < u && u < hi)
    }

    /// Distance of `u` to the band edges (negative outside).
    pub fn band_margin(&self, x: &[f64], y: &[f64], u: f64) -> Result<f64> {
        let (lo, hi) = self.band(x, y)?;
        Ok((u - lo).min(hi - u))
    }

    /// `v` with `G(x, y, v) = u`, for `u` inside the band widened by 10%.
    pub fn invert_h(&self, x: &[f64], y: &[f64], u: f64) -> Result<f64> {
        self.check_dims(x, y)?;
        let (lo, hi) = self.band(x, y)?;
        let pad = BAND_EXPANSION * (hi - lo).abs();
        if !(u >= lo - pad && u <= hi + pad) {
            return Err(Error::OutOfBand { u, lo, hi });
        }
        self.invert_h_raw(x, y, u).map_err(|e| match e {
            Error::Precondition(_) => Error::OutOfBand { u, lo, hi },
            other => other,
        })
    }

    /// Inversion without the band check.
    pub fn invert_h_raw(&self, x: &[f64], y: &[f64], u: f64) -> Result<f64> {
        if let Some(f) = &self.separable {
            return Ok(f.eval(x, y, 0.0)? - u);
        }
        invert_monotone(|v| Ok((self.value(x, y, v)? - u, self.d_v(x, y, v)?)), u)
    }

    /// `D_u H = 1 / D_vG` at `(x, y, H(x,y,u))`.
    pub fn d_u_h(&self, x: &[f64], y: &[f64], u: f64) -> Result<f64> {
        let v = self.invert_h(x, y, u)?;
        let gv = self.d_v(x, y, v)?;
        if gv == 0.0 {
            return Err(Error::ZeroGv);
        }
        Ok(1.0 / gv)
    }

    /// `D_y H = −D_yG / D_vG` evaluated at `(x, y, v)`.
    pub fn d_y_h_at_v(&self, x: &[f64], y: &[f64], v: f64) -> Result<VecN> {
        let gv = self.d_v(x, y, v)?;
        if gv == 0.0 {
            return Err(Error::ZeroGv);
        }
        Ok(-self.grad_y(x, y, v)? / gv)
    }

    /// Gradient `p = D_xG(x, y, H(x, y, u))`, the inverse of the G-exponential.
    pub fn p_of(&self, x: &[f64], y: &[f64], u: f64) -> Result<VecN> {
        let v = self.invert_h(x, y, u)?;
        self.grad_x(x, y, v)
    }

    /// `q = −D_yG / D_vG (x, y, v)`, the inverse of the G*-exponential.
    pub fn q_of(&self, x: &[f64], y: &[f64], v: f64) -> Result<VecN> {
        self.d_y_h_at_v(x, y, v)
    }
}

/// Safeguarded Newton for a decreasing scalar function `f` with derivative;
/// stops at `|f| <= 1e-12 (1 + |u|)`.
fn invert_monotone<F>(f: F, u: f64) -> Result<f64>
where
    F: Fn(f64) -> Result<(f64, f64)>,
{
    let tol = 1e-12 * (1.0 + u.abs());
    let (f0, d0) = f(0.0)?;
    if f0.abs() <= tol {
        return Ok(0.0);
    }
    let guess = if d0 < 0.0 { -f0 / d0 } else { 0.0 };
    let (fg, _) = f(guess)?;
    if fg.abs() <= tol {
        return Ok(guess);
    }
    // Bracket [lo, hi] with f(lo) > 0 > f(hi).
    let mut width = 1e-3 * (1.0 + guess.abs());
    let (mut lo, mut hi);
    let (mut flo, mut fhi);
    if fg > 0.0 {
        lo = guess;
        flo = fg;
        hi = guess + width;
        fhi = f(hi)?.0;
        let mut k = 0;
        while fhi > 0.0 {
            lo = hi;
            flo = fhi;
            width *= 2.0;
            hi = guess + width;
            fhi = f(hi)?.0;
            k += 1;
            if k > 80 {
                return Err(Error::Precondition("no bracketing interval".into()));
            }
        }
    } else {
        hi = guess;
        fhi = fg;
        lo = guess - width;
        flo = f(lo)?.0;
        let mut k = 0;
        while flo < 0.0 {
            hi = lo;
            fhi = flo;
            width *= 2.0;
            lo = guess - width;
            flo = f(lo)?.0;
            k += 1;
            if k > 80 {
                return Err(Error::Precondition("no bracketing interval".into()));
            }
        }
    }
    if flo.abs() <= tol {
        return Ok(lo);
    }
    if fhi.abs() <= tol {
        return Ok(hi);
    }
    let mut v = 0.5 * (lo + hi);
    let mut best = (f64::INFINITY, v);
    for _ in 0..200 {
        let (fv, dv) = f(v)?;
        if fv.abs() < best.0 {
            best = (fv.abs(), v);
        }
        if fv.abs() <= tol {
            return Ok(v);
        }
        if fv > 0.0 {
            lo = v;
        } else {
            hi = v;
        }
        let newton = if dv < 0.0 { v - fv / dv } else { f64::NAN };
        v = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if hi - lo <= 4.0 * f64::EPSILON * (1.0 + v.abs()) {
            let (fv, _) = f(v)?;
            if fv.abs() <= 16.0 * tol {
                return Ok(v);
            }
            break;
        }
    }
    Err(Error::NoConvergence { iterations: 200, residual: best.0 })
}

// ---------------------------------------------------------------------------
// windows

/// Product window `B_{r1}(x0) × (N_{r2}(y_core) ∩ Y) × (u0 − r3, u0 + r3)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowS {
    pub x0: Vec<f64>,
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
    pub y_core: Vec<Vec<f64>>,
    pub u0: f64,
}

/// A sampled point of a window in `(x, y, u)` coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowPoint {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub u: f64,
}

impl WindowS {
    pub fn new(x0: Vec<f64>, r1: f64, r2: f64, r3: f64, y_core: Vec<Vec<f64>>, u0: f64) -> Result<Self> {
        if !(r1 > 0.0 && r2 >= 0.0 && r3 > 0.0) || y_core.is_empty() {
            return Err(Error::Invalid("window radii must be positive and the core nonempty".into()));
        }
        Ok(Self { x0, r1, r2, r3, y_core, u0 })
    }

    /// Window that covers the whole of Y: `y_core` is a `k`-lattice of Y.
    pub fn covering_y(spec: &GenFun, x0: Vec<f64>, r1: f64, u0: f64, r3: f64, k: usize) -> Result<Self> {
        let core = spec.y_domain().grid(k);
        Self::new(x0, r1, 0.0, r3, core, u0)
    }

    /// Window centred in X: `r1` is half the depth of the centre, the core
    /// a 9-lattice of Y, and the u-range a quarter of the band (at most 0.5)
    /// around its midpoint at the centres of X and Y.
    pub fn default_for(spec: &GenFun) -> Result<Self> {
        let x0 = spec.x_domain().center();
        let depth = spec.x_domain().bodies().iter().map(|b| b.depth(&x0)).fold(f64::NEG_INFINITY, f64::max);
        if !(depth > 0.0) {
            return Err(Error::NoWindow("the centre of X is not interior".into()));
        }
        let (lo, hi) = spec.band(&x0, &spec.y_domain().center())?;
        let r3 = (0.25 * (hi - lo)).min(0.5);
        Self::covering_y(spec, x0, 0.5 * depth, 0.5 * (lo + hi), r3, 9)
    }

    /// Random points of the window that lie in the open set 𝔥.
    pub fn sample(&self, spec: &GenFun, count: usize, seed: u64) -> Vec<WindowPoint> {
        let mut rng = stream_rng(seed, 0x57);
        let mut out = Vec::with_capacity(count);
        let mut attempts = 0;
        while out.len() < count && attempts < 200 * count.max(1) {
            attempts += 1;
            let x = geom::sample_ball(&mut rng, &self.x0, self.r1);
            let core = &self.y_core[rng.gen_range(0..self.y_core.len())];
            let y = if self.r2 > 0.0 { geom::sample_ball(&mut rng, core, self.r2) } else { core.clone() };
            let u = self.u0 + self.r3 * rng.gen_range(-1.0..1.0);
            if spec.in_h(&x, &y, u) {
                out.push(WindowPoint { x, y, u });
            }
        }
        out
    }

    /// Deterministic lattice of the window restricted to 𝔥: `k` per axis in
    /// the x-ball, the core with ±r2 axis offsets, `k` levels of u.
    pub fn lattice(&self, spec: &GenFun, k: usize) -> Vec<WindowPoint> {
        let n = self.x0.len();
        let lo: Vec<f64> = self.x0.iter().map(|c| c - self.r1).collect();
        let hi: Vec<f64> = self.x0.iter().map(|c| c + self.r1).collect();
        let xs: Vec<Vec<f64>> = geom::lattice(&lo, &hi, k)
            .into_iter()
            .filter(|x| geom::dist(x, &self.x0) <= self.r1 * (1.0 + 1e-12))
            .collect();
        let mut ys = Vec::new();
        for c in &self.y_core {
            ys.push(c.clone());
            if self.r2 > 0.0 {
                for i in 0..n {
                    for s in [-1.0, 1.0] {
                        let mut y = c.clone();
                        y[i] += s * self.r2;
                        ys.push(y);
                    }
                }
            }
        }
        let us: Vec<f64> = (0..k.max(2))
            .map(|j| self.u0 - self.r3 + 2.0 * self.r3 * (j as f64 + 0.5) / k.max(2) as f64)
            .collect();
        let mut out = Vec::new();
        for x in &xs {
            for y in &ys {
                for &u in &us {
                    if spec.in_h(x, y, u) {
                        out.push(WindowPoint { x: x.clone(), y: y.clone(), u });
                    }
                }
            }
        }
        out
    }

    /// Smallest band margin over the lattice, `None` when some lattice
    /// point leaves 𝔥.
    pub fn membership_margin(&self, spec: &GenFun, k: usize) -> Option<f64> {
        let n = self.x0.len();
        let lo: Vec<f64> = self.x0.iter().map(|c| c - self.r1).collect();
        let hi: Vec<f64> = self.x0.iter().map(|c| c + self.r1).collect();
        let mut worst = f64::INFINITY;
        for x in geom::lattice(&lo, &hi, k) {
            if geom::dist(&x, &self.x0) > self.r1 || !spec.x_domain().contains(&x) {
                continue;
            }
            for c in &self.y_core {
                let mut ys = vec![c.clone()];
                for i in 0..n {
                    for s in [-1.0, 1.0] {
                        let mut y = c.clone();
                        y[i] += s * self.r2;
                        if spec.y_domain().contains(&y) {
                            ys.push(y);
                        }
                    }
                }
                for y in ys {
                    for u in [self.u0 - self.r3, self.u0 + self.r3] {
                        match spec.band_margin(&x, &y, u) {
                            Ok(m) if m > 0.0 => worst = worst.min(m),
                            _ => return None,
                        }
                    }
                }
            }
        }
        Some(worst)
    }
}

// ---------------------------------------------------------------------------
// condition checks

#[derive(Clone, Debug, Serialize)]
pub struct GmonoReport {
    pub holds: bool,
    pub beta: Option<f64>,
    pub max_dv: f64,
    pub samples: usize,
    pub inversion_failures: usize,
}

/// Samples `D_vG` over the window lattice and records `β = −max D_vG`.
///
/// Where `H` cannot be evaluated the check falls back to the raw `v`
/// levels of the window's u-range, so a sign violation is still detected.
pub fn check_gmono(spec: &GenFun, window: &WindowS, k: usize, ledger: &mut ConstantsLedger) -> GmonoReport {
    let mut max_dv = f64::NEG_INFINITY;
    let mut samples = 0;
    let mut failures = 0;
    for p in window.lattice(spec, k) {
        let vs: Vec<f64> = match spec.invert_h(&p.x, &p.y, p.u) {
            Ok(v) => vec![v],
            Err(_) => {
                failures += 1;
                vec![p.u]
            }
        };
        for v in vs {
            if let Ok(dv) = spec.d_v(&p.x, &p.y, v) {
                max_dv = max_dv.max(dv);
                samples += 1;
            }
        }
    }
    let holds = samples > 0 && max_dv < 0.0;
    let beta = holds.then_some(-max_dv);
    if let Some(b) = beta {
        let _ = ledger.set(Constant::Beta, b, window.clone());
    }
    GmonoReport { holds, beta, max_dv, samples, inversion_failures: failures }
}

#[derive(Clone, Debug, Serialize)]
pub struct NicewReport {
    pub holds: bool,
    pub worst_margin: f64,
    pub worst_x: Vec<f64>,
}

/// `a(x,y) < φ(x) < b(x,y)` for every grid point and attaining focus.
pub fn check_nicew(spec: &GenFun, envelope: &crate::gconvex::Envelope, grid: &[Vec<f64>]) -> Result<NicewReport> {
    if envelope.pieces().is_empty() {
        return Err(Error::Invalid("empty envelope".into()));
    }
    let mut worst = f64::INFINITY;
    let mut worst_x = Vec::new();
    for x in grid {
        let (val, att) = envelope.eval(spec, x)?;
        for y in &att.ys {
            let m = spec.band_margin(x, y, val)?;
            if m < worst {
                worst = m;
                worst_x = x.clone();
            }
        }
    }
    Ok(NicewReport { holds: worst > 0.0, worst_margin: worst, worst_x })
}

// ---------------------------------------------------------------------------
// ledger

/// Window constants tracked across pipeline phases.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Constant {
    #[serde(rename = "C_e")]
    Ce,
    #[serde(rename = "alpha")]
    Alpha,
    #[serde(rename = "beta")]
    Beta,
    C1,
    C2,
    Delta1,
    Delta2,
    #[serde(rename = "delta0")]
    Delta0,
    #[serde(rename = "gamma")]
    Gamma,
    C3,
    C4,
    C5,
    #[serde(rename = "kappa")]
    Kappa,
    #[serde(rename = "C_A")]
    CA,
    #[serde(rename = "K_A")]
    KA,
    #[serde(rename = "C_V")]
    CV,
    #[serde(rename = "C_mu")]
    CMu,
}

impl Constant {
    pub fn label(self) -> &'static str {
        match self {
            Constant::Ce => "C_e",
            Constant::Alpha => "alpha",
            Constant::Beta => "beta",
            Constant::C1 => "C1",
            Constant::C2 => "C2",
            Constant::Delta1 => "Delta1",
            Constant::Delta2 => "Delta2",
            Constant::Delta0 => "delta0",
            Constant::Gamma => "gamma",
            Constant::C3 => "C3",
            Constant::C4 => "C4",
            Constant::C5 => "C5",
            Constant::Kappa => "kappa",
            Constant::CA => "C_A",
            Constant::KA => "K_A",
            Constant::CV => "C_V",
            Constant::CMu => "C_mu",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub value: f64,
    pub window: WindowS,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstantsLedger {
    pub entries: BTreeMap<Constant, LedgerEntry>,
    /// Verdict of the last curvature scan, if one ran.
    #[serde(default)]
    pub g3_verdict: Option<G3Verdict>,
}

impl ConstantsLedger {
    pub fn set(&mut self, c: Constant, value: f64, window: WindowS) -> Result<()> {
        if !(value > 0.0 && value.is_finite()) {
            return Err(Error::Invalid(format!("{} must be positive and finite, got {value}", c.label())));
        }
        self.entries.insert(c, LedgerEntry { value, window });
        Ok(())
    }

    pub fn get(&self, c: Constant) -> Result<f64> {
        self.entries.get(&c).map(|e| e.value).ok_or_else(|| Error::MissingConstant(c.label().to_string()))
    }

    pub fn has(&self, c: Constant) -> bool {
        self.entries.contains_key(&c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn g0(n: usize) -> GenFun {
        GenFun::builtin(Builtin::Quadratic, n).unwrap()
    }

    fn g1(n: usize) -> GenFun {
        GenFun::builtin(Builtin::CubicV, n).unwrap()
    }

    #[test]
    fn default_window_is_centred_in_x() {
        let g = GenFun::builtin(Builtin::NonFlat, 2).unwrap();
        let w = WindowS::default_for(&g).unwrap();
        assert_eq!(w, WindowS::covering_y(&g, vec![0.0, 0.0], 0.5, 0.0, 0.5, 9).unwrap());
        let q = WindowS::default_for(&g0(2)).unwrap();
        assert_eq!((q.x0.as_slice(), q.r1, q.y_core.len()), ([0.5, 0.5].as_slice(), 0.25, 81));
    }

    #[test]
    fn quadratic_value_and_dv() {
        let g = g0(2);
        assert_relative_eq!(g.value(&[1.0, 0.0], &[0.5, 0.5], 0.2).unwrap(), 0.3, epsilon = 1e-15);
        assert_eq!(g.partial(&[0.3, 0.1], &[0.7, 0.2], 1.3, &[Axis::V]).unwrap(), -1.0);
    }

    #[test]
    fn cubic_second_v_derivative() {
        let g = g1(1);
        let d = g.partial(&[0.2], &[0.4], 0.5, &[Axis::V, Axis::V]).unwrap();
        assert_relative_eq!(d, -1.0, epsilon = 1e-14);
        let dv = g.d_v(&[0.2], &[0.4], 0.5).unwrap();
        assert_relative_eq!(dv, -1.25, epsilon = 1e-14);
    }

    #[test]
    fn invert_quadratic() {
        let g = g0(2);
        let v = g.invert_h(&[1.0, 0.0], &[0.5, 0.7], 0.2).unwrap();
        assert_relative_eq!(v, 0.3, epsilon = 1e-15);
    }

    #[test]
    fn invert_cubic_against_bisection() {
        let g = g1(1);
        let u = -(0.5 + 0.5f64.powi(3) / 3.0);
        // independent oracle: plain bisection on the decreasing map
        let (mut lo, mut hi) = (-2.0f64, 2.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if -mid - mid.powi(3) / 3.0 > u {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let v = g.invert_h(&[0.0], &[0.7], u).unwrap();
        assert!((v - 0.5).abs() < 1e-10);
        assert!((v - 0.5 * (lo + hi)).abs() < 1e-12);
        let resid = (g.value(&[0.0], &[0.7], v).unwrap() - u).abs();
        assert!(resid <= 1e-12 * (1.0 + u.abs()));
    }

    #[test]
    fn out_of_band_rejected() {
        let g = g0(1);
        assert!(matches!(g.invert_h(&[0.5], &[0.5], 12.5), Err(Error::OutOfBand { .. })));
        assert!(g.invert_h(&[0.5], &[0.5], 10.5).is_ok());
    }

    #[test]
    fn gmono_checks() {
        let mut ledger = ConstantsLedger::default();
        let g = g0(2);
        let w = WindowS::covering_y(&g, vec![0.5, 0.5], 0.3, 0.0, 1.0, 4).unwrap();
        let r = check_gmono(&g, &w, 4, &mut ledger);
        assert!(r.holds);
        assert_eq!(r.beta, Some(1.0));
        assert_eq!(ledger.get(Constant::Beta).unwrap(), 1.0);

        let g = g1(1);
        // u levels around 0 with x·y = 0 give v levels around 0
        let w = WindowS::new(vec![0.0], 0.05, 0.0, 0.5, vec![vec![0.0]], 0.0).unwrap();
        let r = check_gmono(&g, &w, 5, &mut ConstantsLedger::default());
        assert!(r.holds);
        let beta = r.beta.unwrap();
        assert!((1.0..1.02).contains(&beta), "{beta}");

        let bad = GenFun::from_json(r#"{"expression": "dot(x,y) + v", "n": 1}"#).unwrap();
        let w = WindowS::new(vec![0.5], 0.2, 0.0, 0.5, vec![vec![0.5]], 0.0).unwrap();
        let r = check_gmono(&bad, &w, 3, &mut ConstantsLedger::default());
        assert!(!r.holds);
        assert_eq!(r.beta, None);
    }

    #[test]
    fn ledger_rejects_non_positive() {
        let w = WindowS::new(vec![0.0], 1.0, 0.0, 1.0, vec![vec![0.0]], 0.0).unwrap();
        let mut l = ConstantsLedger::default();
        assert!(l.set(Constant::Alpha, 0.0, w.clone()).is_err());
        assert!(matches!(l.get(Constant::Alpha), Err(Error::MissingConstant(s)) if s == "alpha"));
        l.set(Constant::Alpha, 0.5, w).unwrap();
        let json = serde_json::to_string(&l).unwrap();
        let back: ConstantsLedger = serde_json::from_str(&json).unwrap();
        assert_eq!(back, l);
    }

    #[test]
    fn spec_file_round_trip() {
        let g = GenFun::builtin(Builtin::NonFlat, 2).unwrap();
        let s = g.to_spec_file();
        let text = serde_json::to_string(&s).unwrap();
        let g2 = GenFun::from_json(&text).unwrap();
        assert_eq!(g2.to_spec_file(), s);
        let custom = GenFun::from_json(
            r#"{"expression": "dot(x,y) - k*v", "n": 2, "params": {"k": 2.0},
                "a": "-5 - dot(x,y)", "b": 5.0, "X": {"lo": [0,0], "hi": [1,1]},
                "Y": {"union": [{"lo": [0,0], "hi": [1,0.5]}, {"lo": [0,0], "hi": [0.5,1]}]}}"#,
        )
        .unwrap();
        assert_eq!(custom.band(&[1.0, 1.0], &[1.0, 0.0]).unwrap(), (-6.0, 5.0));
        assert!(!custom.y_domain().contains(&[0.8, 0.8]));
        assert!(custom.y_domain().contains(&[0.8, 0.2]));
        assert!(GenFun::from_json(r#"{"n": 2}"#).is_err());
        assert!(matches!(GenFun::from_json(r#"{"kind": "nope", "n": 2}"#), Err(Error::UnknownIdentifier(_))));
    }

    #[test]
    fn derivative_tensor_shapes() {
        let g = GenFun::builtin(Builtin::NonFlat, 2).unwrap();
        let req = DerivativeRequest::new(&[Block::X, Block::X, Block::Y]).unwrap();
        let t = g.eval_g(&[0.3, -0.2], &[0.5, 0.1], 0.0, &req).unwrap();
        assert_eq!(t.shape, vec![2, 2, 2]);
        // ∂x_i∂x_j∂y_k of eps|x|²|y|² = 4 eps δ_ij y_k
        assert_relative_eq!(t.get(&[0, 0, 0]), 0.4 * 0.5, epsilon = 1e-14);
        assert_relative_eq!(t.get(&[0, 1, 0]), 0.0, epsilon = 1e-14);
        assert!(DerivativeRequest::new(&[Block::X; 5]).is_err());
    }

    fn random_point(kind: Builtin, seed: u64) -> (GenFun, Vec<f64>, Vec<f64>, f64) {
        let n = 2;
        let g = GenFun::builtin(kind, n).unwrap();
        let mut rng = stream_rng(seed, 1);
        let x = g.x_domain().sample(&mut rng);
        let y = g.y_domain().sample(&mut rng);
        let v = rng.gen_range(-1.0..1.0);
        (g, x, y, v)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn ad_agrees_with_fd(seed in 0u64..u64::MAX, which in 0usize..4, picks in proptest::collection::vec(0usize..5, 0..=4)) {
            let (g, x, y, v) = random_point(Builtin::ALL[which], seed);
            let axes: Vec<Axis> = picks.iter().map(|&k| match k {
                0 => Axis::X(0), 1 => Axis::X(1), 2 => Axis::Y(0), 3 => Axis::Y(1), _ => Axis::V,
            }).collect();
            let ad = g.partial(&x, &y, v, &axes).unwrap();
            let fd = g.partial_fd(&x, &y, v, &axes, 1e-3).unwrap();
            let tol = if axes.len() <= 2 { 1e-4 } else { 1e-2 };
            prop_assert!((ad - fd).abs() <= tol * ad.abs().max(1.0), "ad {} fd {}", ad, fd);
        }

        #[test]
        fn invert_after_eval_is_identity(seed in 0u64..u64::MAX, which in 0usize..4) {
            let (g, x, y, v) = random_point(Builtin::ALL[which], seed);
            let u = g.value(&x, &y, v).unwrap();
            prop_assume!(g.in_h(&x, &y, u));
            let back = g.invert_h(&x, &y, u).unwrap();
            prop_assert!((back - v).abs() <= 1e-10, "{} vs {}", back, v);
        }

        #[test]
        fn implicit_derivative_consistency(seed in 0u64..u64::MAX, which in 0usize..4) {
            let (g, x, y, v) = random_point(Builtin::ALL[which], seed);
            let u = g.value(&x, &y, v).unwrap();
            prop_assume!(g.in_h(&x, &y, u));
            // numerical D_uH by central differences of the inverse
            let h = 1e-5;
            let duh = (g.invert_h(&x, &y, u + h).unwrap() - g.invert_h(&x, &y, u - h).unwrap()) / (2.0 * h);
            let gv = g.d_v(&x, &y, g.invert_h(&x, &y, u).unwrap()).unwrap();
            prop_assert!(duh < 0.0);
            prop_assert!((duh * gv - 1.0).abs() <= 1e-8);
        }
    }
}
