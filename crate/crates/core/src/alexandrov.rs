//! Semi-discrete weak Alexandrov solver: a grid source measure, a discrete
//! target, and heights `v_j` balancing the masses of the cells
//! `{x : G(x, y_j, v_j) attains maxᵢ G(x, yᵢ, vᵢ)}`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::gconvex::{Envelope, GAffinePiece};
use crate::genfun::{GenFun, SpecFile};
use crate::geom::{self, Domain, Point, Region};

// ---------------------------------------------------------------------------
// measures

/// Cell-centred lattice on the bounding box of X restricted to X, with a
/// normalized mass per cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridMeasure {
    pub lo: Point,
    pub hi: Point,
    pub k: usize,
    pub centers: Vec<Point>,
    pub masses: Vec<f64>,
}

impl GridMeasure {
    /// Cell masses `density(center)·h^n`, normalized to 1.
    pub fn from_density<F: Fn(&[f64]) -> f64>(domain: &Domain, k: usize, density: F) -> Result<Self> {
        if k == 0 {
            return Err(Error::Invalid("the grid needs at least one cell per axis".into()));
        }
        let (lo, hi) = domain.bbox();
        let n = lo.len();
        let h: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| (b - a) / k as f64).collect();
        let mut centers = Vec::new();
        let mut idx = vec![0usize; n];
        loop {
            let c: Point = (0..n).map(|i| lo[i] + (idx[i] as f64 + 0.5) * h[i]).collect();
            if domain.contains(&c) {
                centers.push(c);
            }
            let mut axis = 0;
            while axis < n {
                idx[axis] += 1;
                if idx[axis] < k {
                    break;
                }
                idx[axis] = 0;
                axis += 1;
            }
            if axis == n {
                break;
            }
        }
        let raw: Vec<f64> = centers.iter().map(|c| density(c)).collect();
        if raw.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::Invalid("density must be finite and nonnegative".into()));
        }
        let total: f64 = raw.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Invalid("density has zero total mass".into()));
        }
        let masses = raw.into_iter().map(|d| d / total).collect();
        Ok(Self { lo, hi, k, centers, masses })
    }

    pub fn uniform(domain: &Domain, k: usize) -> Result<Self> {
        Self::from_density(domain, k, |_| 1.0)
    }

    /// Density given as an expression in `x`.
    pub fn from_expression(domain: &Domain, k: usize, text: &str) -> Result<Self> {
        let n = domain.dim();
        let e = Expr::parse(text, n, &Default::default())?;
        let zeros = vec![0.0; n];
        let err = std::sync::Mutex::new(None);
        let m = Self::from_density(domain, k, |x| match e.eval(x, &zeros, 0.0) {
            Ok(v) => v,
            Err(ex) => {
                *err.lock().expect("poisoned") = Some(ex);
                0.0
            }
        });
        if let Some(ex) = err.into_inner().expect("poisoned") {
            return Err(ex);
        }
        m
    }

    /// All mass on the grid cell nearest to `at`.
    pub fn spike(domain: &Domain, k: usize, at: &[f64]) -> Result<Self> {
        let mut m = Self::uniform(domain, k)?;
        let best = m
            .centers
            .iter()
            .enumerate()
            .min_by(|a, b| geom::dist(a.1, at).total_cmp(&geom::dist(b.1, at)))
            .map(|(i, _)| i)
            .expect("grid is nonempty");
        m.masses.iter_mut().enumerate().for_each(|(i, w)| *w = if i == best { 1.0 } else { 0.0 });
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn spacing(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(a, b)| (b - a) / self.k as f64).collect()
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing().iter().product()
    }

    pub fn cell_diameter(&self) -> f64 {
        geom::norm(&self.spacing())
    }

    pub fn density_sup(&self) -> f64 {
        self.masses.iter().copied().fold(0.0, f64::max) / self.cell_volume()
    }

    /// `μ(B_r(x))` by quadrature on cell centers.
    pub fn ball_mass(&self, x: &[f64], r: f64) -> f64 {
        self.centers.iter().zip(&self.masses).filter(|(c, _)| geom::dist(c, x) <= r).map(|(_, m)| m).sum()
    }
}

/// `Σ ν_j δ_{y_j}` with distinct atoms in Y.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMeasure {
    pub atoms: Vec<Point>,
    pub weights: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(atoms: Vec<Point>, weights: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() || atoms.len() != weights.len() {
            return Err(Error::Invalid("need one positive weight per atom".into()));
        }
        if weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::Invalid("atom weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Invalid(format!("atom weights sum to {total}, not 1")));
        }
        for i in 0..atoms.len() {
            for j in i + 1..atoms.len() {
                if atoms[i] == atoms[j] {
                    return Err(Error::Invalid(format!("atoms {i} and {j} coincide")));
                }
            }
        }
        Ok(Self { atoms, weights })
    }

    pub fn uniform(atoms: Vec<Point>) -> Result<Self> {
        let m = atoms.len();
        Self::new(atoms, vec![1.0 / m as f64; m])
    }

    /// Weights proportional to `raw`.
    pub fn normalized(atoms: Vec<Point>, raw: Vec<f64>) -> Result<Self> {
        let total: f64 = raw.iter().sum();
        Self::new(atoms, raw.into_iter().map(|w| w / total).collect())
    }

    /// Atoms at the centers of a `k`-per-axis cell lattice of Y.
    pub fn uniform_lattice(domain: &Domain, k: usize) -> Result<Self> {
        let g = GridMeasure::uniform(domain, k)?;
        Self::new(g.centers, g.masses)
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn check_in(&self, y: &Domain) -> Result<()> {
        match self.atoms.iter().position(|a| !y.contains(a)) {
            Some(j) => Err(Error::Invalid(format!("atom {j} lies outside Y"))),
            None => Ok(()),
        }
    }

    /// `min_j ν_j / vol(V_j)` with `V_j` the Voronoi cell of atom `j` in Y,
    /// measured on a `k`-lattice of Y.
    pub fn density_lower_bound(&self, y: &Domain, k: usize) -> Result<f64> {
        let grid = GridMeasure::uniform(y, k)?;
        let vol_y: f64 = y.bodies().iter().map(|b| b.volume()).sum();
        let mut share = vec![0.0; self.len()];
        for (c, m) in grid.centers.iter().zip(&grid.masses) {
            let j = nearest_atom(&self.atoms, c);
            share[j] += m;
        }
        Ok(self
            .weights
            .iter()
            .zip(&share)
            .map(|(w, s)| if *s > 0.0 { w / (s * vol_y) } else { f64::INFINITY })
            .fold(f64::INFINITY, f64::min))
    }
}

pub fn nearest_atom(atoms: &[Point], z: &[f64]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (j, a) in atoms.iter().enumerate() {
        let d = geom::dist(a, z);
        if d < best.0 {
            best = (d, j);
        }
    }
    best.1
}

// ---------------------------------------------------------------------------
// cells

pub fn envelope_of(atoms: &[Point], heights: &[f64]) -> Result<Envelope> {
    Envelope::new(atoms.iter().zip(heights).enumerate().map(|(j, (y, v))| GAffinePiece::new(y.clone(), *v, Some(j))).collect())
}

/// Index of the maximizing piece at every cell center; ties go to the
/// lowest index.
pub fn cell_decomposition(spec: &GenFun, atoms: &[Point], heights: &[f64], grid: &GridMeasure) -> Result<Vec<usize>> {
    let env = envelope_of(atoms, heights)?;
    grid.centers
        .par_iter()
        .map(|x| {
            let vals = env.piece_values(spec, x)?;
            let mut best = 0;
            for (j, v) in vals.iter().enumerate() {
                if *v > vals[best] {
                    best = j;
                }
            }
            Ok(best)
        })
        .collect()
}

pub fn cell_masses(mu: &GridMeasure, cells: &[usize], atoms: usize) -> Vec<f64> {
    let mut out = vec![0.0; atoms];
    for (c, m) in cells.iter().zip(&mu.masses) {
        out[*c] += m;
    }
    out
}

// ---------------------------------------------------------------------------
// solver

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverState {
    pub heights: Vec<f64>,
    pub cell_masses: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SolverWarning {
    /// The atom's cell stayed empty for the last sweeps although `ν_j > 0`.
    Starvation { atom: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Solution {
    pub state: SolverState,
    pub cells: Vec<usize>,
    pub warnings: Vec<SolverWarning>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Height of atom 0; defaults to the band midpoint.
    pub gauge: Option<f64>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: 1e-3, max_iter: 2000, gauge: None }
    }
}

const INITIAL_DAMPING: f64 = 0.9;
const MIN_DAMPING: f64 = 1.0 / 64.0;
const STARVATION_SWEEPS: usize = 10;

/// Best and runner-up piece of one cell (index, value); ties favour the
/// lower index.
#[derive(Clone, Copy)]
struct TopTwo {
    best: (usize, f64),
    second: (usize, f64),
}

fn top_two(row: &[f64]) -> TopTwo {
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    let mut second = (usize::MAX, f64::NEG_INFINITY);
    for (j, &v) in row.iter().enumerate() {
        if best.0 == usize::MAX || v > best.1 {
            second = best;
            best = (j, v);
        } else if second.0 == usize::MAX || v > second.1 {
            second = (j, v);
        }
    }
    TopTwo { best, second }
}

/// Piece values at every cell center as a cells × atoms table.
struct Table<'a> {
    spec: &'a GenFun,
    centers: &'a [Point],
    atoms: &'a [Point],
    /// `F(x, y_j)` when `G = F(x,y) − v`.
    separable: Option<Vec<Vec<f64>>>,
    values: Vec<Vec<f64>>,
    top: Vec<TopTwo>,
}

impl<'a> Table<'a> {
    fn new(spec: &'a GenFun, centers: &'a [Point], atoms: &'a [Point], heights: &[f64]) -> Result<Self> {
        let separable = if spec.is_v_separable() {
            Some(
                centers
                    .par_iter()
                    .map(|x| atoms.iter().map(|y| spec.invert_h_raw(x, y, 0.0)).collect::<Result<Vec<f64>>>())
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let values: Vec<Vec<f64>> = centers
            .par_iter()
            .enumerate()
            .map(|(i, x)| {
                atoms
                    .iter()
                    .zip(heights)
                    .enumerate()
                    .map(|(j, (y, v))| match &separable {
                        Some(f) => Ok(f[i][j] - v),
                        None => spec.value(x, y, *v),
                    })
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<_>>()?;
        let top = values.iter().map(|r| top_two(r)).collect();
        Ok(Self { spec, centers, atoms, separable, values, top })
    }

    fn set_height(&mut self, j: usize, v: f64) -> Result<()> {
        let spec = self.spec;
        let y = &self.atoms[j];
        let separable = &self.separable;
        let centers = self.centers;
        self.values
            .par_iter_mut()
            .zip(self.top.par_iter_mut())
            .enumerate()
            .try_for_each(|(i, (row, top))| -> Result<()> {
                let c = match separable {
                    Some(f) => f[i][j] - v,
                    None => spec.value(&centers[i], y, v)?,
                };
                row[j] = c;
                if top.best.0 == j || top.second.0 == j || c >= top.second.1 {
                    *top = top_two(row);
                }
                Ok(())
            })
    }

    /// Height below which atom `j` wins cell `i`: `H(x_i, y_j, maxₖ≠ⱼ G)`.
    fn thresholds(&self, j: usize) -> Vec<f64> {
        let spec = self.spec;
        let y = &self.atoms[j];
        self.top
            .par_iter()
            .enumerate()
            .map(|(i, top)| {
                let other = if top.best.0 == j { top.second.1 } else { top.best.1 };
                if other == f64::NEG_INFINITY {
                    return f64::INFINITY;
                }
                match &self.separable {
                    Some(f) => f[i][j] - other,
                    None => spec.invert_h_raw(&self.centers[i], y, other).unwrap_or(f64::NEG_INFINITY),
                }
            })
            .collect()
    }

    fn assignment(&self) -> Vec<usize> {
        self.top.iter().map(|t| t.best.0).collect()
    }
}

/// Height giving atom `j` the mass closest to `target`, given the other
/// pieces: cells are ranked by threshold and the height is placed midway
/// between the thresholds around the best cumulative mass.
fn quantile_height(thresholds: &[f64], masses: &[f64], target: f64) -> Option<f64> {
    let mut order: Vec<usize> = (0..thresholds.len()).filter(|&i| thresholds[i] > f64::NEG_INFINITY).collect();
    if order.is_empty() {
        return None;
    }
    let desc = |a: &usize, b: &usize| thresholds[*b].total_cmp(&thresholds[*a]);
    let mean = masses.iter().sum::<f64>() / masses.len() as f64;
    let mut head = ((2.0 * target / mean.max(f64::MIN_POSITIVE)).ceil() as usize + 2).min(order.len());
    loop {
        if head < order.len() {
            order.select_nth_unstable_by(head, desc);
        }
        order[..head].sort_by(desc);
        let total: f64 = order[..head].iter().map(|&i| masses[i]).sum();
        if total >= target || head == order.len() {
            break;
        }
        head = (2 * head).min(order.len());
    }
    let mut cum = 0.0;
    let mut best = (target, 0usize);
    for (pos, &i) in order[..head].iter().enumerate() {
        cum += masses[i];
        let err = (cum - target).abs();
        if err < best.0 {
            best = (err, pos + 1);
        }
    }
    let taken = best.1;
    let upper = if taken == 0 { None } else { Some(thresholds[order[taken - 1]]) };
    let lower = if taken < head {
        Some(thresholds[order[taken]])
    } else {
        order[head..].iter().map(|&i| thresholds[i]).max_by(f64::total_cmp)
    };
    match (upper, lower) {
        (Some(a), Some(b)) if a.is_finite() && b.is_finite() => Some(0.5 * (a + b)),
        (Some(a), _) if a.is_finite() => Some(a - 1.0),
        (_, Some(b)) if b.is_finite() => Some(b + 1.0),
        _ => None,
    }
}

fn max_mass_error(masses: &[f64], weights: &[f64]) -> f64 {
    masses.iter().zip(weights).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

fn band_midpoint_height(spec: &GenFun, y: &[f64]) -> Result<f64> {
    let xc = spec.x_domain().center();
    let (lo, hi) = spec.band(&xc, y)?;
    spec.invert_h(&xc, y, 0.5 * (lo + hi))
}

/// Damped Gauss–Seidel sweep over atoms `1..m`: each atom's height moves
/// toward the value balancing its own cell mass, with damping halved when
/// its mass error changes sign and grows. Atom 0 is pinned to the gauge.
pub fn solve_alexandrov(spec: &GenFun, mu: &GridMeasure, nu: &DiscreteMeasure, opts: &SolverOptions) -> Result<Solution> {
    nu.check_in(spec.y_domain())?;
    if mu.dim() != spec.n() {
        return Err(Error::Invalid("grid dimension does not match n".into()));
    }
    let m = nu.len();
    let mut heights: Vec<f64> = nu.atoms.iter().map(|y| band_midpoint_height(spec, y)).collect::<Result<_>>()?;
    if let Some(g) = opts.gauge {
        heights[0] = g;
    }
    let mut table = Table::new(spec, &mu.centers, &nu.atoms, &heights)?;
    let mut damping = vec![INITIAL_DAMPING; m];
    let mut last_err = vec![0.0f64; m];
    let mut empty_for = vec![0usize; m];
    let mut best: Option<SolverState> = None;
    let mut iterations = 0;
    let quantum = mu.masses.iter().copied().fold(0.0, f64::max);
    loop {
        let cells = table.assignment();
        let masses = cell_masses(mu, &cells, m);
        let residual = max_mass_error(&masses, &nu.weights);
        for j in 0..m {
            empty_for[j] = if masses[j] == 0.0 { empty_for[j] + 1 } else { 0 };
        }
        let state = SolverState { heights: heights.clone(), cell_masses: masses, residual, iterations };
        if best.as_ref().is_none_or(|b| residual < b.residual) {
            best = Some(state.clone());
        }
        if residual <= opts.tol {
            return finish(spec, nu, mu, state, cells, &empty_for);
        }
        if iterations >= opts.max_iter {
            return Err(Error::SolverNonConvergence(Box::new(best.expect("at least one sweep"))));
        }
        iterations += 1;
        for j in 1..m {
            let thr = table.thresholds(j);
            let current: f64 = thr.iter().zip(&mu.masses).filter(|(t, _)| **t > heights[j]).map(|(_, w)| w).sum();
            let err = current - nu.weights[j];
            if err * last_err[j] < 0.0 && err.abs() > last_err[j].abs() {
                damping[j] = (0.5 * damping[j]).max(MIN_DAMPING);
            }
            last_err[j] = err;
            let Some(target) = quantile_height(&thr, &mu.masses, nu.weights[j]) else { continue };
            // within a couple of grid cells the damped step can overshoot the
            // admissible interval indefinitely, so take the exact target
            let w = if err.abs() <= 2.0 * quantum { 1.0 } else { damping[j] };
            heights[j] += w * (target - heights[j]);
            table.set_height(j, heights[j])?;
        }
        // Coarse step: the slowest mode moves all free heights together
        // against the pinned atom, so balance atom 0 by a common shift.
        if m > 1 {
            let thr = table.thresholds(0);
            if let Some(v0) = quantile_height(&thr, &mu.masses, nu.weights[0]) {
                let shift = heights[0] - v0;
                for j in 1..m {
                    heights[j] += shift;
                    table.set_height(j, heights[j])?;
                }
            }
        }
    }
}

fn finish(spec: &GenFun, nu: &DiscreteMeasure, mu: &GridMeasure, state: SolverState, cells: Vec<usize>, empty_for: &[usize]) -> Result<Solution> {
    // the band check of the final envelope on every cell
    cell_decomposition(spec, &nu.atoms, &state.heights, mu)?;
    let warnings = (0..nu.len())
        .filter(|&j| empty_for[j] >= STARVATION_SWEEPS.min(state.iterations.max(1)) && state.cell_masses[j] == 0.0)
        .map(|atom| SolverWarning::Starvation { atom })
        .collect();
    Ok(Solution { state, cells, warnings })
}

// ---------------------------------------------------------------------------
// push-forward verification

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestSet {
    /// A union of grid cells (indices into the grid).
    Cells(Vec<usize>),
    /// A set of atoms.
    Atoms(Vec<usize>),
}

#[derive(Clone, Debug, Serialize)]
pub struct PushforwardCheck {
    pub set: TestSet,
    pub source_mass: f64,
    pub target_mass: f64,
    pub gap: f64,
    pub bound: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct PushforwardReport {
    pub checks: Vec<PushforwardCheck>,
    pub worst_gap: f64,
    pub pass: bool,
}

/// `|μ(A) − ν(∂_Gφ(A))|` for cell unions and `|μ(∂_G⁻¹φ(B)) − ν(B)|` for atom
/// sets. The cell-union bound adds the mass of cells that belong to an atom
/// touched by `A` but lie outside `A`, which is where a grid boundary cuts.
pub fn verify_pushforward(
    spec: &GenFun,
    sol: &Solution,
    mu: &GridMeasure,
    nu: &DiscreteMeasure,
    tol: f64,
    sets: &[TestSet],
) -> Result<PushforwardReport> {
    let env = envelope_of(&nu.atoms, &sol.state.heights)?;
    let mut checks = Vec::with_capacity(sets.len());
    for set in sets {
        let (source, target, bound) = match set {
            TestSet::Cells(idx) => {
                let mut inside = vec![false; mu.centers.len()];
                idx.iter().for_each(|&i| inside[i] = true);
                let mut touched = vec![false; nu.len()];
                for &i in idx {
                    for j in env.eval(spec, &mu.centers[i])?.1.attaining {
                        touched[j] = true;
                    }
                }
                let source: f64 = idx.iter().map(|&i| mu.masses[i]).sum();
                let target: f64 = (0..nu.len()).filter(|&j| touched[j]).map(|j| nu.weights[j]).sum();
                let band: f64 = (0..mu.centers.len()).filter(|&i| !inside[i] && touched[sol.cells[i]]).map(|i| mu.masses[i]).sum();
                let count = touched.iter().filter(|t| **t).count() as f64;
                (source, target, tol * count.max(1.0) + band)
            }
            TestSet::Atoms(js) => {
                let mut chosen = vec![false; nu.len()];
                js.iter().for_each(|&j| chosen[j] = true);
                let source: f64 = sol.cells.iter().zip(&mu.masses).filter(|(c, _)| chosen[**c]).map(|(_, w)| w).sum();
                let target: f64 = js.iter().map(|&j| nu.weights[j]).sum();
                (source, target, tol * js.len().max(1) as f64)
            }
        };
        let gap = (source - target).abs();
        checks.push(PushforwardCheck { set: set.clone(), source_mass: source, target_mass: target, gap, bound, pass: gap <= bound + 1e-12 });
    }
    let worst_gap = checks.iter().map(|c| c.gap).fold(0.0, f64::max);
    let pass = checks.iter().all(|c| c.pass);
    Ok(PushforwardReport { checks, worst_gap, pass })
}

// ---------------------------------------------------------------------------
// problem files

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub k: usize,
    /// Density expression in `x`; uniform when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<String>,
    /// All mass on the cell containing this point; overrides `density`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spike: Option<Point>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemFile {
    pub spec: SpecFile,
    pub mu: SourceSpec,
    pub nu: DiscreteMeasure,
    pub tol: f64,
    pub max_iter: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gauge: Option<f64>,
}

pub struct Problem {
    pub spec: GenFun,
    pub mu: GridMeasure,
    pub nu: DiscreteMeasure,
    pub options: SolverOptions,
}

impl ProblemFile {
    pub fn build(&self) -> Result<Problem> {
        let spec = GenFun::from_spec_file(&self.spec)?;
        let mu = match (&self.mu.spike, &self.mu.density) {
            (Some(at), _) => GridMeasure::spike(spec.x_domain(), self.mu.k, at)?,
            (None, Some(text)) => GridMeasure::from_expression(spec.x_domain(), self.mu.k, text)?,
            (None, None) => GridMeasure::uniform(spec.x_domain(), self.mu.k)?,
        };
        let nu = DiscreteMeasure::new(self.nu.atoms.clone(), self.nu.weights.clone())?;
        let options = SolverOptions { tol: self.tol, max_iter: self.max_iter, gauge: self.gauge };
        Ok(Problem { spec, mu, nu, options })
    }
}

/// Heights, residual and iteration count as written to solution files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolutionFile {
    pub heights: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub cell_masses: Vec<f64>,
    pub warnings: Vec<SolverWarning>,
}

impl From<&Solution> for SolutionFile {
    fn from(s: &Solution) -> Self {
        Self {
            heights: s.state.heights.clone(),
            residual: s.state.residual,
            iterations: s.state.iterations,
            cell_masses: s.state.cell_masses.clone(),
            warnings: s.warnings.clone(),
        }
    }
}

/// `x_1,…,x_n,atom` rows.
pub fn cells_csv(mu: &GridMeasure, cells: &[usize]) -> String {
    let n = mu.dim();
    let mut out = String::new();
    let header: Vec<String> = (0..n).map(|i| format!("x{i}")).chain(["atom".to_string()]).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for (c, a) in mu.centers.iter().zip(cells) {
        let row: Vec<String> = c.iter().map(|v| crate::report::csv_num(*v)).chain([a.to_string()]).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Largest extent of the grid points assigned to each atom.
pub fn cell_diameters(mu: &GridMeasure, cells: &[usize], atoms: usize) -> Vec<f64> {
    let n = mu.dim();
    let mut lo = vec![vec![f64::INFINITY; n]; atoms];
    let mut hi = vec![vec![f64::NEG_INFINITY; n]; atoms];
    for (c, &a) in mu.centers.iter().zip(cells) {
        for i in 0..n {
            lo[a][i] = lo[a][i].min(c[i]);
            hi[a][i] = hi[a][i].max(c[i]);
        }
    }
    let h = mu.spacing();
    (0..atoms)
        .map(|a| {
            if lo[a][0].is_infinite() {
                return 0.0;
            }
            let ext: Vec<f64> = (0..n).map(|i| hi[a][i] - lo[a][i] + h[i]).collect();
            geom::norm(&ext)
        })
        .collect()
}
