//! Sample grids used as integration domains of the approximation problems.
//!
//! Two families are provided: domain-based grids (uniform lattice `U`, i.i.d.
//! random `R`, and the boundary band `B` obtained by rejection sampling) and
//! trajectory-based grids (`S` rollouts started from a steady state, `T`
//! rollouts started from a random state). Grids can be labeled with the
//! constraint value and feasibility of each point, filtered to the feasible
//! set, thinned by a distance threshold and concatenated.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::distributions::{Distribution, Open01};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optim::{self, JacobianBuilder, LsqConfig, LsqProblem, SparseJacobian};
use crate::seeding::{derive_seed, sub_rng};
use crate::vehicle::{Bounds, AXIS_NAMES, POINT_DIM};

/// Hard cap on the size of a uniform lattice.
pub const DEFAULT_UNIFORM_CAP: usize = 50_000_000;
/// Residual tolerance of the steady-state solve.
pub const STEADY_STATE_TOL: f64 = 1e-8;

const REJECTION_BATCH: usize = 4096;
const REJECTION_WINDOW: usize = 1_000_000;
const REJECTION_MIN_RATE: f64 = 1e-5;

/// A system that can be sampled: continuous-time dynamics and a signed
/// constraint function on joint points `z = (x, u)`.
///
/// Both methods return `None` where the model is undefined.
pub trait SampledSystem: Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn derivative(&self, z: &[f64]) -> Option<Vec<f64>>;
    fn constraint(&self, z: &[f64]) -> Option<f64>;

    fn point_dim(&self) -> usize {
        self.state_dim() + self.input_dim()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("uniform grid of {n_samp}^{dim} points exceeds the cap of {cap}")]
    SizeOverflow { n_samp: usize, dim: usize, cap: usize },
    #[error("no steady state found for {attempts} drawn inputs")]
    SteadyStateNotFound { attempts: usize },
    #[error("boundary rejection sampling stalled: {accepted} accepted out of {drawn} draws")]
    RejectionStalled { accepted: usize, drawn: usize },
    #[error("no grid point survived the feasibility filter")]
    EmptyResult,
    #[error("invalid grid configuration: {0}")]
    InvalidConfig(String),
    #[error("grid is not labeled with constraint values")]
    Unlabeled,
    #[error("grid csv parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for GridError {
    fn from(e: std::io::Error) -> Self {
        GridError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GridKind {
    U,
    R,
    S,
    T,
    B,
    C,
}

impl GridKind {
    pub fn tag(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for GridKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            GridKind::U => "U",
            GridKind::R => "R",
            GridKind::S => "S",
            GridKind::T => "T",
            GridKind::B => "B",
            GridKind::C => "C",
        };
        f.write_str(s)
    }
}

impl FromStr for GridKind {
    type Err = GridError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "U" => Ok(GridKind::U),
            "R" => Ok(GridKind::R),
            "S" => Ok(GridKind::S),
            "T" => Ok(GridKind::T),
            "B" => Ok(GridKind::B),
            "C" => Ok(GridKind::C),
            other => Err(GridError::InvalidConfig(format!("unknown grid kind {other:?}"))),
        }
    }
}

/// Generation parameters shared by all grid kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridGenConfig {
    pub n_samp: usize,
    pub n_rand: usize,
    pub n_sim: usize,
    pub n_step: usize,
    /// Per-input bound on the increment between consecutive rollout inputs.
    pub delta_u_star: Vec<f64>,
    pub eps_b: f64,
    /// Thinning threshold in normalized coordinates.
    pub dedup_radius: f64,
    pub seed: u64,
    /// Euler step of the rollouts [s].
    pub dt: f64,
}

impl GridGenConfig {
    /// Defaults with `delta_u_star` at 5% of each input range.
    pub fn with_bounds(bounds: &Bounds, n_state: usize) -> Self {
        Self {
            n_samp: 6,
            n_rand: 7000,
            n_sim: 500,
            n_step: 1000,
            delta_u_star: default_delta_u_star(bounds, n_state),
            eps_b: 0.1,
            dedup_radius: 0.0,
            seed: 0,
            dt: 0.01,
        }
    }

    pub fn validate(&self) -> Result<(), GridError> {
        let counts = [
            ("n_samp", self.n_samp),
            ("n_rand", self.n_rand),
            ("n_sim", self.n_sim),
            ("n_step", self.n_step),
        ];
        for (name, v) in counts {
            if v < 1 {
                return Err(GridError::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if !(self.eps_b > 0.0) {
            return Err(GridError::InvalidConfig("eps_b must be positive".into()));
        }
        if !(self.dedup_radius >= 0.0) {
            return Err(GridError::InvalidConfig("dedup_radius must be >= 0".into()));
        }
        if !(self.dt > 0.0) {
            return Err(GridError::InvalidConfig("dt must be positive".into()));
        }
        if self.delta_u_star.iter().any(|d| !(*d > 0.0)) {
            return Err(GridError::InvalidConfig("delta_u_star must be positive".into()));
        }
        Ok(())
    }
}

/// 5% of each input range per step.
pub fn default_delta_u_star(bounds: &Bounds, n_state: usize) -> Vec<f64> {
    (n_state..bounds.dim()).map(|k| 0.05 * bounds.width(k)).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_samp: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_rand: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_sim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_step: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps_b: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Point count straight out of the generator.
    pub raw_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub survival_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dedup_radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub members: Vec<MemberInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberInfo {
    pub kind: GridKind,
    pub seed: u64,
    pub count: usize,
}

/// Provenance of a single point: generating grid kind, seed and index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PointOrigin {
    pub kind: GridKind,
    pub seed: u64,
    pub idx: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Labels {
    g: Vec<f64>,
    feasible: Vec<bool>,
}

/// An ordered set of sample points with optional constraint labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub kind: GridKind,
    dim: usize,
    coords: Vec<f64>,
    origin: Vec<PointOrigin>,
    labels: Option<Labels>,
    pub meta: GridMeta,
}

impl Grid {
    /// Builds an unlabeled grid from row points.
    pub fn from_points(kind: GridKind, dim: usize, points: &[Vec<f64>], seed: u64) -> Self {
        let mut coords = Vec::with_capacity(points.len() * dim);
        for p in points {
            assert_eq!(p.len(), dim, "point dimension mismatch");
            coords.extend_from_slice(p);
        }
        let origin = (0..points.len())
            .map(|idx| PointOrigin { kind, seed, idx })
            .collect();
        Self {
            kind,
            dim,
            coords,
            origin,
            labels: None,
            meta: GridMeta {
                seed: Some(seed),
                raw_count: points.len(),
                ..GridMeta::default()
            },
        }
    }

    fn from_flat(kind: GridKind, dim: usize, coords: Vec<f64>, seed: u64) -> Self {
        let n = coords.len() / dim;
        Self {
            kind,
            dim,
            coords,
            origin: (0..n).map(|idx| PointOrigin { kind, seed, idx }).collect(),
            labels: None,
            meta: GridMeta {
                seed: Some(seed),
                raw_count: n,
                ..GridMeta::default()
            },
        }
    }

    /// Attaches externally computed labels (used for synthetic problems).
    pub fn with_labels(mut self, g: Vec<f64>, feasible: Vec<bool>) -> Self {
        assert_eq!(g.len(), self.len());
        assert_eq!(feasible.len(), self.len());
        self.labels = Some(Labels { g, feasible });
        self
    }

    /// Evaluates `G` and the feasibility of every point.
    pub fn label(mut self, system: &dyn SampledSystem, bounds: &Bounds) -> Self {
        let pairs: Vec<(f64, bool)> = (0..self.len())
            .into_par_iter()
            .map(|i| label_point(system, bounds, self.point(i)))
            .collect();
        let (g, feasible) = pairs.into_iter().unzip();
        self.labels = Some(Labels { g, feasible });
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.origin.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origin.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks_exact(self.dim)
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn origin(&self, i: usize) -> PointOrigin {
        self.origin[i]
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.is_some()
    }

    /// Constraint values (`NaN` where the model is undefined).
    pub fn g_values(&self) -> Option<&[f64]> {
        self.labels.as_ref().map(|l| l.g.as_slice())
    }

    pub fn feasible_mask(&self) -> Option<&[bool]> {
        self.labels.as_ref().map(|l| l.feasible.as_slice())
    }

    pub fn feasible_count(&self) -> usize {
        self.feasible_mask()
            .map(|m| m.iter().filter(|f| **f).count())
            .unwrap_or(0)
    }

    pub fn feasible_ratio(&self) -> Option<f64> {
        self.labels
            .as_ref()
            .filter(|_| !self.is_empty())
            .map(|_| self.feasible_count() as f64 / self.len() as f64)
    }

    /// Keeps the points at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Grid {
        let mut coords = Vec::with_capacity(indices.len() * self.dim);
        let mut origin = Vec::with_capacity(indices.len());
        for &i in indices {
            coords.extend_from_slice(self.point(i));
            origin.push(self.origin[i]);
        }
        let labels = self.labels.as_ref().map(|l| Labels {
            g: indices.iter().map(|&i| l.g[i]).collect(),
            feasible: indices.iter().map(|&i| l.feasible[i]).collect(),
        });
        Grid {
            kind: self.kind,
            dim: self.dim,
            coords,
            origin,
            labels,
            meta: self.meta.clone(),
        }
    }

    fn axis_names(&self) -> Vec<String> {
        if self.dim == POINT_DIM {
            AXIS_NAMES.iter().map(|s| s.to_string()).collect()
        } else {
            (0..self.dim).map(|k| format!("z{k}")).collect()
        }
    }

    /// Writes the grid as CSV with 17 significant digits per float.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<(), GridError> {
        writeln!(out, "kind,seed,idx,{},G,feasible", self.axis_names().join(","))?;
        for i in 0..self.len() {
            let o = self.origin[i];
            write!(out, "{},{},{}", o.kind, o.seed, o.idx)?;
            for v in self.point(i) {
                write!(out, ",{}", fmt_float(*v))?;
            }
            match &self.labels {
                Some(l) => writeln!(out, ",{},{}", fmt_float(l.g[i]), u8::from(l.feasible[i]))?,
                None => writeln!(out, ",NaN,0")?,
            }
        }
        Ok(())
    }

    /// Reads a grid written by [`Grid::write_csv`]; the result is labeled.
    pub fn read_csv<R: BufRead>(input: R, kind: GridKind) -> Result<Grid, GridError> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| GridError::Parse { line: 1, msg: "empty file".into() })??;
        let n_cols = header.split(',').count();
        if n_cols < 6 || !header.starts_with("kind,seed,idx,") || !header.ends_with(",G,feasible") {
            return Err(GridError::Parse { line: 1, msg: format!("bad header {header:?}") });
        }
        let dim = n_cols - 5;
        let mut coords = Vec::new();
        let mut origin = Vec::new();
        let mut g = Vec::new();
        let mut feasible = Vec::new();
        for (k, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let line_no = k + 2;
            let err = |msg: String| GridError::Parse { line: line_no, msg };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != n_cols {
                return Err(err(format!("expected {n_cols} fields, got {}", fields.len())));
            }
            let parse_f = |s: &str| s.parse::<f64>().map_err(|e| err(format!("{s:?}: {e}")));
            origin.push(PointOrigin {
                kind: fields[0].parse()?,
                seed: fields[1].parse().map_err(|e| err(format!("seed: {e}")))?,
                idx: fields[2].parse().map_err(|e| err(format!("idx: {e}")))?,
            });
            for f in &fields[3..3 + dim] {
                coords.push(parse_f(f)?);
            }
            g.push(parse_f(fields[3 + dim])?);
            feasible.push(match fields[4 + dim] {
                "1" | "true" => true,
                "0" | "false" => false,
                other => return Err(err(format!("bad feasible flag {other:?}"))),
            });
        }
        let n = origin.len();
        Ok(Grid {
            kind,
            dim,
            coords,
            origin,
            labels: Some(Labels { g, feasible }),
            meta: GridMeta {
                raw_count: n,
                ..GridMeta::default()
            },
        })
    }
}

fn fmt_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

fn label_point(system: &dyn SampledSystem, bounds: &Bounds, z: &[f64]) -> (f64, bool) {
    let g = system.constraint(z).unwrap_or(f64::NAN);
    (g, bounds.contains(z) && g <= 0.0)
}

/// Cartesian lattice of `n_samp` evenly spaced values per axis, endpoints
/// included. The last axis varies fastest.
pub fn uniform_grid(bounds: &Bounds, n_samp: usize) -> Result<Grid, GridError> {
    uniform_grid_capped(bounds, n_samp, DEFAULT_UNIFORM_CAP)
}

pub fn uniform_grid_capped(bounds: &Bounds, n_samp: usize, cap: usize) -> Result<Grid, GridError> {
    if n_samp < 2 {
        return Err(GridError::InvalidConfig("n_samp must be >= 2".into()));
    }
    let dim = bounds.dim();
    let overflow = GridError::SizeOverflow { n_samp, dim, cap };
    let total = (0..dim)
        .try_fold(1usize, |acc, _| acc.checked_mul(n_samp))
        .filter(|t| *t <= cap)
        .ok_or(overflow)?;
    let index = lattice_index(n_samp);
    let axes: Vec<Vec<f64>> = (0..dim)
        .map(|k| index.iter().map(|t| bounds.lower[k] + bounds.width(k) * t).collect())
        .collect();
    let mut coords = Vec::with_capacity(total * dim);
    let mut digits = vec![0usize; dim];
    for _ in 0..total {
        for k in 0..dim {
            coords.push(axes[k][digits[k]]);
        }
        for k in (0..dim).rev() {
            digits[k] += 1;
            if digits[k] < n_samp {
                break;
            }
            digits[k] = 0;
        }
    }
    let mut grid = Grid::from_flat(GridKind::U, dim, coords, 0);
    grid.meta.seed = None;
    grid.meta.n_samp = Some(n_samp);
    Ok(grid)
}

/// `(0, 1/(n-1), ..., 1)` with exact endpoints.
pub fn lattice_index(n_samp: usize) -> Vec<f64> {
    let last = (n_samp - 1) as f64;
    (0..n_samp).map(|i| i as f64 / last).collect()
}

fn draw_in_box<R: Rng>(rng: &mut R, lower: &[f64], upper: &[f64], out: &mut Vec<f64>) {
    for (lo, hi) in lower.iter().zip(upper) {
        out.push(lo + (hi - lo) * rng.gen::<f64>());
    }
}

/// `n_rand` i.i.d. uniform points in the box.
pub fn random_grid(bounds: &Bounds, n_rand: usize, seed: u64) -> Result<Grid, GridError> {
    if n_rand < 1 {
        return Err(GridError::InvalidConfig("n_rand must be >= 1".into()));
    }
    let mut rng = sub_rng(seed, &[GridKind::R.tag()]);
    let mut coords = Vec::with_capacity(n_rand * bounds.dim());
    for _ in 0..n_rand {
        draw_in_box(&mut rng, &bounds.lower, &bounds.upper, &mut coords);
    }
    let mut grid = Grid::from_flat(GridKind::R, bounds.dim(), coords, seed);
    grid.meta.n_rand = Some(n_rand);
    Ok(grid)
}

struct SteadyStateResidual<'a> {
    system: &'a dyn SampledSystem,
    input: &'a [f64],
}

impl SteadyStateResidual<'_> {
    fn eval(&self, x: &[f64]) -> Option<Vec<f64>> {
        let mut z = x.to_vec();
        z.extend_from_slice(self.input);
        self.system.derivative(&z).filter(|d| d.iter().all(|v| v.is_finite()))
    }

    fn jacobian(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        let n = x.len();
        let mut jac = DMatrix::zeros(n, n);
        let mut xp = x.to_vec();
        for k in 0..n {
            let h = 1e-6 * x[k].abs().max(1.0);
            xp[k] = x[k] + h;
            let fp = self.eval(&xp)?;
            xp[k] = x[k] - h;
            let fm = self.eval(&xp)?;
            xp[k] = x[k];
            for i in 0..n {
                jac[(i, k)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        Some(jac)
    }
}

impl LsqProblem for SteadyStateResidual<'_> {
    fn dim(&self) -> usize {
        self.system.state_dim()
    }

    fn residuals(&self, x: &[f64]) -> Vec<f64> {
        self.eval(x)
            .unwrap_or_else(|| vec![f64::NAN; self.system.state_dim()])
    }

    fn residuals_and_jacobian(&self, x: &[f64]) -> (Vec<f64>, SparseJacobian) {
        let r = self.residuals(x);
        let n = x.len();
        let jac = self
            .jacobian(x)
            .unwrap_or_else(|| DMatrix::from_element(n, n, f64::NAN));
        let mut rows = JacobianBuilder::new(n);
        for i in 0..n {
            let row: Vec<f64> = (0..n).map(|k| jac[(i, k)]).collect();
            rows.push_dense(&row);
        }
        (r, rows.finish())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Solves `F(x, u) = 0` for the state by damped Newton from `x0`, falling
/// back to Levenberg-Marquardt on `|F|^2`. Returns `None` unless the residual
/// norm reaches [`STEADY_STATE_TOL`].
pub fn steady_state(system: &dyn SampledSystem, input: &[f64], x0: &[f64]) -> Option<Vec<f64>> {
    let res = SteadyStateResidual { system, input };
    let mut x = x0.to_vec();
    let mut f = res.eval(&x)?;
    let mut fnorm = norm(&f);
    for _ in 0..60 {
        if fnorm <= STEADY_STATE_TOL {
            return Some(x);
        }
        let Some(step) = res
            .jacobian(&x)
            .and_then(|j| j.lu().solve(&-DVector::from_column_slice(&f)))
        else {
            break;
        };
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, d)| a + t * d).collect();
            if let Some(ft) = res.eval(&trial) {
                let n = norm(&ft);
                if n < fnorm {
                    x = trial;
                    f = ft;
                    fnorm = n;
                    improved = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !improved {
            break;
        }
    }
    if fnorm <= STEADY_STATE_TOL {
        return Some(x);
    }
    let cfg = LsqConfig {
        max_iter: 200,
        tol_grad: 0.0,
        tol_step: 1e-15,
        tol_cost: 0.0,
    };
    let out = optim::solve_lsq(&res, &x, &cfg).ok()?;
    (out.cost.sqrt() * std::f64::consts::SQRT_2 <= STEADY_STATE_TOL).then_some(out.x)
}

/// Trajectory grid variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RolloutStart {
    /// Start at a steady state of the first input (`S`).
    SteadyState,
    /// Start at a uniformly drawn state (`T`).
    Random,
}

impl RolloutStart {
    pub fn kind(self) -> GridKind {
        match self {
            RolloutStart::SteadyState => GridKind::S,
            RolloutStart::Random => GridKind::T,
        }
    }
}

/// Maximum number of input redraws per rollout when no steady state exists.
pub const MAX_STEADY_STATE_DRAWS: usize = 2000;

/// One open-loop rollout; returns the joint points kept inside the domain.
fn rollout(
    system: &dyn SampledSystem,
    bounds: &Bounds,
    cfg: &GridGenConfig,
    start: RolloutStart,
    rollout_seed: u64,
) -> Result<Vec<f64>, GridError> {
    let n = system.state_dim();
    let dim = system.point_dim();
    let mut rng = crate::seeding::rng_from_seed(rollout_seed);
    let (u_lo, u_hi) = (&bounds.lower[n..], &bounds.upper[n..]);
    let (x_lo, x_hi) = (&bounds.lower[..n], &bounds.upper[..n]);

    let mut u = Vec::with_capacity(dim - n);
    let mut x = Vec::with_capacity(n);
    match start {
        RolloutStart::Random => {
            draw_in_box(&mut rng, u_lo, u_hi, &mut u);
            draw_in_box(&mut rng, x_lo, x_hi, &mut x);
        }
        RolloutStart::SteadyState => {
            let mid: Vec<f64> = x_lo.iter().zip(x_hi).map(|(a, b)| 0.5 * (a + b)).collect();
            let mut found = false;
            for _ in 0..MAX_STEADY_STATE_DRAWS {
                u.clear();
                draw_in_box(&mut rng, u_lo, u_hi, &mut u);
                if let Some(xs) = steady_state(system, &u, &mid) {
                    let mut z = xs.clone();
                    z.extend_from_slice(&u);
                    if bounds.contains(&z) {
                        x = xs;
                        found = true;
                        break;
                    }
                }
            }
            if !found {
                return Err(GridError::SteadyStateNotFound {
                    attempts: MAX_STEADY_STATE_DRAWS,
                });
            }
        }
    }

    let mut kept = Vec::new();
    let mut z: Vec<f64> = x.iter().chain(&u).copied().collect();
    if !bounds.contains(&z) {
        return Ok(kept);
    }
    kept.extend_from_slice(&z);
    for _ in 1..cfg.n_step {
        let Some(dx) = system.derivative(&z) else { break };
        for k in 0..n {
            z[k] += cfg.dt * dx[k];
        }
        for (j, d) in cfg.delta_u_star.iter().enumerate() {
            let w: f64 = Open01.sample(&mut rng);
            let k = n + j;
            z[k] = (z[k] + d * (2.0 * w - 1.0)).clamp(bounds.lower[k], bounds.upper[k]);
        }
        if !bounds.contains(&z) {
            break;
        }
        kept.extend_from_slice(&z);
    }
    Ok(kept)
}

/// `n_sim` rollouts of at most `n_step` points each; every rollout stops at
/// the first point leaving the domain. Point `k` of rollout `s` has origin
/// index `s * n_step + k`.
pub fn trajectory_grid(
    system: &dyn SampledSystem,
    bounds: &Bounds,
    cfg: &GridGenConfig,
    start: RolloutStart,
) -> Result<Grid, GridError> {
    cfg.validate()?;
    if cfg.delta_u_star.len() != system.input_dim() {
        return Err(GridError::InvalidConfig(format!(
            "delta_u_star has {} entries, system has {} inputs",
            cfg.delta_u_star.len(),
            system.input_dim()
        )));
    }
    let kind = start.kind();
    let chunks: Vec<Result<Vec<f64>, GridError>> = (0..cfg.n_sim)
        .into_par_iter()
        .map(|s| {
            let seed = derive_seed(cfg.seed, &[kind.tag(), s as u64]);
            rollout(system, bounds, cfg, start, seed)
        })
        .collect();
    let dim = system.point_dim();
    let mut coords = Vec::new();
    let mut origin = Vec::new();
    for (s, c) in chunks.into_iter().enumerate() {
        let c = c?;
        origin.extend((0..c.len() / dim).map(|k| PointOrigin {
            kind,
            seed: cfg.seed,
            idx: s * cfg.n_step + k,
        }));
        coords.extend(c);
    }
    let mut grid = Grid::from_flat(kind, dim, coords, cfg.seed);
    grid.origin = origin;
    grid.meta.n_sim = Some(cfg.n_sim);
    grid.meta.n_step = Some(cfg.n_step);
    Ok(grid)
}

/// Rejection sample of `n_rand` points with `|G| <= eps_b`, labeled.
pub fn boundary_grid(
    system: &dyn SampledSystem,
    bounds: &Bounds,
    n_rand: usize,
    eps_b: f64,
    seed: u64,
) -> Result<Grid, GridError> {
    if !(eps_b > 0.0) {
        return Err(GridError::InvalidConfig("eps_b must be positive".into()));
    }
    if n_rand < 1 {
        return Err(GridError::InvalidConfig("n_rand must be >= 1".into()));
    }
    let dim = bounds.dim();
    let mut coords = Vec::with_capacity(n_rand * dim);
    let mut g_values = Vec::with_capacity(n_rand);
    let mut drawn = 0usize;
    let mut window_start = (0usize, 0usize);
    let mut batch_idx = 0u64;
    let batches_per_round = rayon::current_num_threads().max(1) * 2;
    while g_values.len() < n_rand {
        let batch_ids: Vec<u64> = (batch_idx..batch_idx + batches_per_round as u64).collect();
        batch_idx += batches_per_round as u64;
        let accepted: Vec<Vec<(Vec<f64>, f64)>> = batch_ids
            .par_iter()
            .map(|&b| {
                let mut rng = sub_rng(seed, &[GridKind::B.tag(), b]);
                let mut out = Vec::new();
                let mut z = Vec::with_capacity(dim);
                for _ in 0..REJECTION_BATCH {
                    z.clear();
                    draw_in_box(&mut rng, &bounds.lower, &bounds.upper, &mut z);
                    if let Some(g) = system.constraint(&z) {
                        if g.abs() <= eps_b {
                            out.push((z.clone(), g));
                        }
                    }
                }
                out
            })
            .collect();
        for batch in accepted {
            if g_values.len() >= n_rand {
                break;
            }
            drawn += REJECTION_BATCH;
            for (z, g) in batch {
                if g_values.len() < n_rand {
                    coords.extend_from_slice(&z);
                    g_values.push(g);
                }
            }
            if drawn - window_start.0 >= REJECTION_WINDOW {
                let rate =
                    (g_values.len() - window_start.1) as f64 / (drawn - window_start.0) as f64;
                if rate < REJECTION_MIN_RATE {
                    return Err(GridError::RejectionStalled {
                        accepted: g_values.len(),
                        drawn,
                    });
                }
                window_start = (drawn, g_values.len());
            }
        }
    }
    let feasible = coords
        .chunks_exact(dim)
        .zip(&g_values)
        .map(|(z, g)| bounds.contains(z) && *g <= 0.0)
        .collect();
    let mut grid = Grid::from_flat(GridKind::B, dim, coords, seed);
    grid.meta.n_rand = Some(n_rand);
    grid.meta.eps_b = Some(eps_b);
    grid.meta.raw_count = drawn;
    Ok(grid.with_labels(g_values, feasible))
}

/// Keeps only the feasible points, labeling first if needed.
pub fn filter_feasible(
    grid: Grid,
    system: &dyn SampledSystem,
    bounds: &Bounds,
) -> Result<Grid, GridError> {
    let grid = if grid.is_labeled() { grid } else { grid.label(system, bounds) };
    let mask = grid.feasible_mask().expect("labeled");
    let keep: Vec<usize> = (0..grid.len()).filter(|&i| mask[i]).collect();
    if keep.is_empty() {
        return Err(GridError::EmptyResult);
    }
    let ratio = keep.len() as f64 / grid.len() as f64;
    let mut out = grid.select(&keep);
    out.meta.survival_ratio = Some(ratio);
    Ok(out)
}

/// Greedy thinning in point order: a point is kept only if its normalized
/// distance to every kept point exceeds `radius`. Radius zero is the identity.
pub fn deduplicate(grid: &Grid, bounds: &Bounds, radius: f64) -> Result<Grid, GridError> {
    if !(radius >= 0.0) {
        return Err(GridError::InvalidConfig("dedup_radius must be >= 0".into()));
    }
    if radius == 0.0 {
        return Ok(grid.clone());
    }
    let dim = grid.dim();
    let cell_of = |s: &[f64]| -> Vec<i64> { s.iter().map(|v| (v / radius).floor() as i64).collect() };
    let offsets = neighbor_offsets(dim);
    let mut cells: HashMap<Vec<i64>, Vec<usize>> = HashMap::new();
    let mut kept_norm: Vec<Vec<f64>> = Vec::new();
    let mut keep = Vec::new();
    let r2 = radius * radius;
    for i in 0..grid.len() {
        let s = bounds.normalize(grid.point(i));
        let cell = cell_of(&s);
        let close = offsets.iter().any(|off| {
            let key: Vec<i64> = cell.iter().zip(off).map(|(c, o)| c + o).collect();
            cells.get(&key).is_some_and(|members| {
                members.iter().any(|&j| {
                    let d2: f64 = kept_norm[j].iter().zip(&s).map(|(a, b)| (a - b).powi(2)).sum();
                    d2 <= r2
                })
            })
        });
        if !close {
            cells.entry(cell).or_default().push(kept_norm.len());
            kept_norm.push(s);
            keep.push(i);
        }
    }
    let mut out = grid.select(&keep);
    out.meta.dedup_radius = Some(radius);
    Ok(out)
}

fn neighbor_offsets(dim: usize) -> Vec<Vec<i64>> {
    let mut out = vec![Vec::new()];
    for _ in 0..dim {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (-1..=1).map(move |o| {
                    let mut p = prefix.clone();
                    p.push(o);
                    p
                })
            })
            .collect();
    }
    out
}

/// Concatenation of member grids with per-point provenance preserved.
pub fn combine(members: &[&Grid]) -> Result<Grid, GridError> {
    let first = members
        .first()
        .ok_or_else(|| GridError::InvalidConfig("no member grids".into()))?;
    let dim = first.dim();
    if members.iter().any(|g| g.dim() != dim) {
        return Err(GridError::InvalidConfig("member grids differ in dimension".into()));
    }
    let labeled = members.iter().all(|g| g.is_labeled());
    let mut coords = Vec::new();
    let mut origin = Vec::new();
    let mut g = Vec::new();
    let mut feasible = Vec::new();
    let mut infos = Vec::new();
    for m in members {
        coords.extend_from_slice(m.coords());
        origin.extend_from_slice(&m.origin);
        if labeled {
            g.extend_from_slice(m.g_values().expect("labeled"));
            feasible.extend_from_slice(m.feasible_mask().expect("labeled"));
        }
        infos.push(MemberInfo {
            kind: m.kind,
            seed: m.meta.seed.unwrap_or(0),
            count: m.len(),
        });
    }
    let n = origin.len();
    Ok(Grid {
        kind: GridKind::C,
        dim,
        coords,
        origin,
        labels: labeled.then_some(Labels { g, feasible }),
        meta: GridMeta {
            raw_count: n,
            members: infos,
            ..GridMeta::default()
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vehicle::{VehicleModel, STATE_DIM};

    /// `x' = u - x` in one dimension; the constraint is `|x| + |u| - 1`.
    struct Relax;

    impl SampledSystem for Relax {
        fn state_dim(&self) -> usize {
            1
        }
        fn input_dim(&self) -> usize {
            1
        }
        fn derivative(&self, z: &[f64]) -> Option<Vec<f64>> {
            Some(vec![z[1] - z[0]])
        }
        fn constraint(&self, z: &[f64]) -> Option<f64> {
            Some(z[0].abs() + z[1].abs() - 1.0)
        }
    }

    fn unit_box(dim: usize) -> Bounds {
        Bounds::new(vec![0.0; dim], vec![1.0; dim]).unwrap()
    }

    #[test]
    fn two_sample_lattice_is_the_corners() {
        let g = uniform_grid(&unit_box(2), 2).unwrap();
        let pts: Vec<Vec<f64>> = g.points().map(|p| p.to_vec()).collect();
        assert_eq!(
            pts,
            vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]]
        );
    }

    #[test]
    fn lattice_index_for_three_samples() {
        assert_eq!(lattice_index(3), vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn vehicle_lattice_has_six_to_the_sixth_points() {
        let g = uniform_grid(&Bounds::vehicle_default(), 6).unwrap();
        assert_eq!(g.len(), 46656);
        assert!(g.points().all(|p| Bounds::vehicle_default().contains(p)));
    }

    #[test]
    fn lattice_size_is_capped() {
        assert!(matches!(
            uniform_grid_capped(&unit_box(6), 10, 1000),
            Err(GridError::SizeOverflow { .. })
        ));
        assert!(uniform_grid(&unit_box(2), 1).is_err());
    }

    #[test]
    fn random_grid_is_seeded() {
        let b = Bounds::vehicle_default();
        let a = random_grid(&b, 50, 9).unwrap();
        assert_eq!(a, random_grid(&b, 50, 9).unwrap());
        assert_ne!(a.coords(), random_grid(&b, 50, 10).unwrap().coords());
        let one = random_grid(&b, 1, 0).unwrap();
        assert_eq!(one.len(), 1);
        assert!(b.contains(one.point(0)));
        assert!(random_grid(&b, 0, 0).is_err());
    }

    #[test]
    fn single_step_random_rollout_is_its_start() {
        let b = Bounds::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let mut cfg = GridGenConfig::with_bounds(&b, 1);
        cfg.n_sim = 1;
        cfg.n_step = 1;
        cfg.seed = 4;
        let g = trajectory_grid(&Relax, &b, &cfg, RolloutStart::Random).unwrap();
        assert_eq!(g.len(), 1);
        assert!(b.contains(g.point(0)));
    }

    #[test]
    fn steady_state_rollout_starts_at_equilibrium() {
        let b = Bounds::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let mut cfg = GridGenConfig::with_bounds(&b, 1);
        cfg.n_sim = 5;
        cfg.n_step = 20;
        let g = trajectory_grid(&Relax, &b, &cfg, RolloutStart::SteadyState).unwrap();
        let mut idx = 0;
        while idx < g.len() {
            let p = g.point(idx);
            assert!((p[0] - p[1]).abs() <= STEADY_STATE_TOL);
            // rollouts of the relaxation system never leave the box
            idx += 20;
        }
        assert_eq!(g.len(), 100);
    }

    #[test]
    fn rollout_inputs_respect_rate_bound() {
        let b = Bounds::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let mut cfg = GridGenConfig::with_bounds(&b, 1);
        cfg.n_sim = 3;
        cfg.n_step = 50;
        let g = trajectory_grid(&Relax, &b, &cfg, RolloutStart::Random).unwrap();
        for i in 1..g.len() {
            if g.origin(i).idx == g.origin(i - 1).idx + 1 && g.origin(i).idx % 50 != 0 {
                assert!((g.point(i)[1] - g.point(i - 1)[1]).abs() < cfg.delta_u_star[0]);
            }
        }
    }

    #[test]
    fn vehicle_zero_input_steady_state() {
        let m = VehicleModel::default();
        let b = Bounds::vehicle_default();
        let mid: Vec<f64> = (0..STATE_DIM).map(|k| 0.5 * (b.lower[k] + b.upper[k])).collect();
        let x = steady_state(&m, &[0.0, 0.0, 0.0], &mid).unwrap();
        let mut z = x.clone();
        z.extend([0.0, 0.0, 0.0]);
        let f = m.derivative(&z).unwrap();
        assert!(norm(&f) <= STEADY_STATE_TOL);
    }

    #[test]
    fn boundary_points_are_in_band() {
        let b = Bounds::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let g = boundary_grid(&Relax, &b, 200, 0.05, 1).unwrap();
        assert_eq!(g.len(), 200);
        for (i, v) in g.g_values().unwrap().iter().enumerate() {
            assert!(v.abs() <= 0.05);
            assert_eq!(g.feasible_mask().unwrap()[i], *v <= 0.0);
        }
        assert_eq!(g, boundary_grid(&Relax, &b, 200, 0.05, 1).unwrap());
    }

    #[test]
    fn boundary_sampling_stalls_on_empty_band() {
        struct Far;
        impl SampledSystem for Far {
            fn state_dim(&self) -> usize {
                1
            }
            fn input_dim(&self) -> usize {
                0
            }
            fn derivative(&self, _: &[f64]) -> Option<Vec<f64>> {
                None
            }
            fn constraint(&self, _: &[f64]) -> Option<f64> {
                Some(5.0)
            }
        }
        let b = unit_box(1);
        assert!(matches!(
            boundary_grid(&Far, &b, 1, 0.1, 0),
            Err(GridError::RejectionStalled { .. })
        ));
    }

    #[test]
    fn feasibility_filter() {
        let b = Bounds::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let inner = Grid::from_points(GridKind::R, 2, &[vec![0.1, 0.2], vec![-0.3, 0.3]], 0);
        let kept = filter_feasible(inner.clone(), &Relax, &b).unwrap();
        assert_eq!(kept.coords(), inner.coords());
        assert_eq!(kept.meta.survival_ratio, Some(1.0));

        let outer = Grid::from_points(GridKind::R, 2, &[vec![0.9, 0.9]], 0);
        assert_eq!(filter_feasible(outer, &Relax, &b), Err(GridError::EmptyResult));
    }

    #[test]
    fn dedup_rules() {
        let b = unit_box(2);
        let g = Grid::from_points(
            GridKind::R,
            2,
            &[vec![0.5, 0.5], vec![0.5, 0.5], vec![0.52, 0.5], vec![0.9, 0.1]],
            0,
        );
        assert_eq!(deduplicate(&g, &b, 0.0).unwrap(), g);
        let once = deduplicate(&g, &b, 1e-9).unwrap();
        assert_eq!(once.len(), 3);
        let thin = deduplicate(&g, &b, 0.05).unwrap();
        assert_eq!(thin.len(), 2);
        assert_eq!(thin.origin(1).idx, 3);
    }

    #[test]
    fn combine_preserves_counts_and_provenance() {
        let b = unit_box(2);
        let a = random_grid(&b, 5, 1).unwrap().label(&Relax, &b);
        let c = random_grid(&b, 7, 2).unwrap().label(&Relax, &b);
        let all = combine(&[&a, &c]).unwrap();
        assert_eq!(all.len(), 12);
        assert_eq!(all.kind, GridKind::C);
        assert_eq!(all.origin(5).seed, 2);
        assert_eq!(all.origin(5).idx, 0);
        assert_eq!(all.meta.members.iter().map(|m| m.count).sum::<usize>(), 12);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let b = Bounds::vehicle_default();
        let m = VehicleModel::default();
        let g = random_grid(&b, 20, 3).unwrap().label(&m, &b);
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("kind,seed,idx,v_x,v_y,r,F_xf,F_xr,delta,G,feasible\n"));
        let back = Grid::read_csv(std::io::Cursor::new(buf), GridKind::R).unwrap();
        assert_eq!(back.coords(), g.coords());
        assert_eq!(back.feasible_mask(), g.feasible_mask());
        for (a, c) in back.g_values().unwrap().iter().zip(g.g_values().unwrap()) {
            assert!(a == c || (a.is_nan() && c.is_nan()));
        }
    }
}
