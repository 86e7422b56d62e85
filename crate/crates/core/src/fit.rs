//! Model and constraint approximation problems.
//!
//! All fits run on points mapped to `[0, 1]^d` by the domain bounds; fitted
//! functions are converted back to physical coordinates before they leave
//! this module. Model targets are additionally divided by a per-grid output
//! scale so that parameters are of order one.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridgen::{Grid, SampledSystem};
use crate::mmps::{MmpsError, MmpsFunction, MmpsLayout};
use crate::optim::{
    multi_start_lsq, solve_pso_restarts, JacobianBuilder, LsqProblem, MultiStartConfig, OptimError,
    PsoConfig, PsoProblem, SparseJacobian, StartRecord,
};
use crate::regions::{
    mmps_from_normalized, mmps_region, pairwise_sum, tri_index, tri_len, ConeLayout,
    EllipsoidLayout, Misclassification, Region, RegionError,
};
use crate::seeding::rng_from_seed;
use crate::vehicle::Bounds;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Region(#[from] RegionError),
    #[error(transparent)]
    Mmps(#[from] MmpsError),
    #[error("dynamics undefined at grid point {0}")]
    TargetUndefined(usize),
    #[error("warm start cannot shrink ({from_plus},{from_minus}) to ({to_plus},{to_minus})")]
    SizeShrink {
        from_plus: usize,
        from_minus: usize,
        to_plus: usize,
        to_minus: usize,
    },
    #[error("invalid fit specification: {0}")]
    InvalidSpec(String),
    #[error("grid is empty or unlabeled")]
    EmptyGrid,
}

/// Per-point `dt * F(z)` targets, one row per grid point.
pub fn model_targets(
    system: &dyn SampledSystem,
    grid: &Grid,
    dt: f64,
) -> Result<Vec<Vec<f64>>, FitError> {
    grid.points()
        .enumerate()
        .map(|(i, z)| {
            system
                .derivative(z)
                .map(|d| d.into_iter().map(|v| dt * v).collect())
                .ok_or(FitError::TargetUndefined(i))
        })
        .collect()
}

/// Mean of `|F_i - f(z_i)| / (|F_i| + eps_0)`.
pub fn mean_relative_error<F: Fn(&[f64]) -> f64>(
    f: F,
    grid: &Grid,
    targets: &[f64],
    eps_0: f64,
) -> f64 {
    let terms: Vec<f64> = grid
        .points()
        .zip(targets)
        .map(|(z, t)| (t - f(z)).abs() / (t.abs() + eps_0))
        .collect();
    pairwise_sum(&terms) / terms.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFitSpec {
    pub component_index: usize,
    pub p_plus: usize,
    pub p_minus: usize,
    pub gamma_m: f64,
    pub eps_0: f64,
    pub dt: f64,
    #[serde(default)]
    pub training_grid_id: String,
    pub multistart: MultiStartConfig,
}

impl ModelFitSpec {
    pub fn validate(&self) -> Result<(), FitError> {
        if self.p_plus < 1 || self.p_minus < 1 {
            return Err(FitError::InvalidSpec("P+ and P- must be >= 1".into()));
        }
        if !(self.gamma_m >= 0.0) {
            return Err(FitError::InvalidSpec("gamma_m must be >= 0".into()));
        }
        if !(self.eps_0 > 0.0) {
            return Err(FitError::InvalidSpec("eps_0 must be positive".into()));
        }
        if !(self.dt > 0.0) {
            return Err(FitError::InvalidSpec("dt must be positive".into()));
        }
        self.multistart.validate()?;
        Ok(())
    }
}

/// Weighted residuals of one model component on normalized points.
#[derive(Debug, Clone)]
pub struct ModelProblem {
    pub layout: MmpsLayout,
    points: Vec<f64>,
    targets: Vec<f64>,
    weights: Vec<f64>,
    /// Divides the targets.
    pub output_scale: f64,
    sqrt_gamma: f64,
}

const PENALTY_FLOOR: f64 = 1e-12;

impl ModelProblem {
    /// `targets` are physical; the output scale is their largest magnitude.
    pub fn new(
        grid: &Grid,
        bounds: &Bounds,
        targets: &[f64],
        p_plus: usize,
        p_minus: usize,
        eps_0: f64,
        gamma_m: f64,
    ) -> Self {
        let scale = targets.iter().fold(0.0f64, |m, t| m.max(t.abs()));
        let output_scale = if scale > 0.0 { scale } else { 1.0 };
        Self {
            layout: MmpsLayout::new(grid.dim(), p_plus, p_minus),
            points: grid.points().flat_map(|z| bounds.normalize(z)).collect(),
            targets: targets.iter().map(|t| t / output_scale).collect(),
            weights: targets.iter().map(|t| output_scale / (t.abs() + eps_0)).collect(),
            output_scale,
            sqrt_gamma: gamma_m.sqrt(),
        }
    }

    fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.layout.dim..(i + 1) * self.layout.dim]
    }

    pub fn n_points(&self) -> usize {
        self.targets.len()
    }
}

impl LsqProblem for ModelProblem {
    fn dim(&self) -> usize {
        self.layout.n_params()
    }

    fn residuals(&self, theta: &[f64]) -> Vec<f64> {
        let mut r: Vec<f64> = (0..self.n_points())
            .map(|i| (self.targets[i] - self.layout.eval(theta, self.point(i))) * self.weights[i])
            .collect();
        if self.sqrt_gamma > 0.0 {
            r.extend(theta.iter().map(|t| self.sqrt_gamma * t.abs().sqrt()));
        }
        r
    }

    fn residuals_and_jacobian(&self, theta: &[f64]) -> (Vec<f64>, SparseJacobian) {
        let mut jb = JacobianBuilder::new(self.dim());
        let mut r = Vec::with_capacity(self.n_points() + theta.len());
        let mut row = Vec::with_capacity(2 * (self.layout.dim + 1));
        for i in 0..self.n_points() {
            let z = self.point(i);
            let (v, p, q) = self.layout.eval_active(theta, z);
            r.push((self.targets[i] - v) * self.weights[i]);
            row.clear();
            self.layout.push_gradient(z, p, q, -self.weights[i], &mut row);
            jb.push_sparse(row.iter().copied());
        }
        if self.sqrt_gamma > 0.0 {
            for (j, t) in theta.iter().enumerate() {
                r.push(self.sqrt_gamma * t.abs().sqrt());
                let d = if t.abs() < PENALTY_FLOOR {
                    0.0
                } else {
                    self.sqrt_gamma * t.signum() / (2.0 * t.abs().sqrt())
                };
                jb.push_sparse([(j, d)]);
            }
        }
        (r, jb.finish())
    }
}

/// Inverse of the export mapping: physical MMPS to normalized parameters.
pub fn mmps_to_normalized(f: &MmpsFunction, bounds: &Bounds, output_scale: f64) -> Vec<f64> {
    let layout = f.layout();
    let d = layout.dim;
    let mut out = Vec::with_capacity(layout.n_params());
    for row in f.flatten().chunks_exact(layout.stride()) {
        let mut h = row[d];
        for k in 0..d {
            out.push(row[k] * bounds.width(k) / output_scale);
            h += row[k] * bounds.lower[k];
        }
        out.push(h / output_scale);
    }
    out
}

/// Pads `prev` to the new sizes with copies of its last plus/minus term,
/// every copied coefficient scaled by `1 + noise * U(-1, 1)`.
pub fn nested_warm_start(
    prev: &MmpsFunction,
    new_plus: usize,
    new_minus: usize,
    noise: f64,
    seed: u64,
) -> Result<MmpsFunction, FitError> {
    let (pp, pm) = (prev.plus_terms().len(), prev.minus_terms().len());
    if new_plus < pp || new_minus < pm {
        return Err(FitError::SizeShrink {
            from_plus: pp,
            from_minus: pm,
            to_plus: new_plus,
            to_minus: new_minus,
        });
    }
    let mut rng = rng_from_seed(seed);
    let mut jitter = |v: f64| v * (1.0 + noise * (2.0 * rng.gen::<f64>() - 1.0));
    let mut pad = |terms: &[crate::mmps::AffineTerm], target: usize| {
        let mut out = terms.to_vec();
        let last = terms[terms.len() - 1].clone();
        while out.len() < target {
            let mut t = last.clone();
            t.a.iter_mut().for_each(|v| *v = jitter(*v));
            t.b.iter_mut().for_each(|v| *v = jitter(*v));
            t.h = jitter(t.h);
            out.push(t);
        }
        out
    };
    let plus = pad(prev.plus_terms(), new_plus);
    let minus = pad(prev.minus_terms(), new_minus);
    Ok(MmpsFunction::new(prev.state_dim(), prev.input_dim(), plus, minus)?)
}

pub const WARM_START_NOISE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFit {
    pub spec: ModelFitSpec,
    /// Physical coordinates, physical output units.
    pub function: MmpsFunction,
    pub training_error: f64,
    pub best_cost: f64,
    pub best_start: usize,
    pub output_scale: f64,
    pub log: Vec<StartRecord>,
}

/// Multi-start fit of one component; `warm` functions (physical) are added
/// as extra starts after the random ones.
pub fn fit_model(
    spec: &ModelFitSpec,
    grid: &Grid,
    bounds: &Bounds,
    targets: &[f64],
    n_state: usize,
    warm: &[MmpsFunction],
) -> Result<ModelFit, FitError> {
    spec.validate()?;
    if grid.is_empty() || targets.len() != grid.len() {
        return Err(FitError::EmptyGrid);
    }
    let problem = ModelProblem::new(
        grid,
        bounds,
        targets,
        spec.p_plus,
        spec.p_minus,
        spec.eps_0,
        spec.gamma_m,
    );
    let scale = spec.multistart.init_scale;
    let dim = problem.dim();
    let extra: Vec<Vec<f64>> = warm
        .iter()
        .filter(|w| w.layout() == problem.layout && w.state_dim() == n_state)
        .map(|w| mmps_to_normalized(w, bounds, problem.output_scale))
        .collect();
    let init = move |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        (0..dim).map(|_| rng.gen_range(-scale..=scale)).collect()
    };
    let ms = multi_start_lsq(&problem, &spec.multistart, init, &extra)?;
    let function = mmps_from_normalized(
        &problem.layout,
        &ms.best.x,
        n_state,
        bounds,
        problem.output_scale,
    )?;
    let training_error = mean_relative_error(|z| function.eval(z), grid, targets, spec.eps_0);
    Ok(ModelFit {
        spec: spec.clone(),
        function,
        training_error,
        best_cost: ms.best.cost,
        best_start: ms.best_idx,
        output_scale: problem.output_scale,
        log: ms.log,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Family {
    Mmps,
    Ellipsoid,
    Cone,
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Family::Mmps => "MMPS",
            Family::Ellipsoid => "ELLIPSOID",
            Family::Cone => "CONE",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Approach {
    Region,
    Boundary,
}

impl std::fmt::Display for Approach {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Approach::Region => "REGION",
            Approach::Boundary => "BOUNDARY",
        })
    }
}

/// Family together with its size parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Complexity {
    Mmps { p_plus: usize, p_minus: usize },
    Ellipsoid { n_e: usize },
    Cone { n_c: usize },
}

impl Complexity {
    pub fn family(&self) -> Family {
        match self {
            Complexity::Mmps { .. } => Family::Mmps,
            Complexity::Ellipsoid { .. } => Family::Ellipsoid,
            Complexity::Cone { .. } => Family::Cone,
        }
    }

    /// Total number of affine terms or members; orders a sweep.
    pub fn size(&self) -> usize {
        match *self {
            Complexity::Mmps { p_plus, p_minus } => p_plus + p_minus,
            Complexity::Ellipsoid { n_e } => n_e,
            Complexity::Cone { n_c } => n_c,
        }
    }

    fn family_layout(&self, dim: usize) -> FamilyLayout {
        match *self {
            Complexity::Mmps { p_plus, p_minus } => {
                FamilyLayout::Mmps(MmpsLayout::new(dim, p_plus, p_minus))
            }
            Complexity::Ellipsoid { n_e } => FamilyLayout::Ellipsoid(EllipsoidLayout { dim, n_e }),
            Complexity::Cone { n_c } => FamilyLayout::Cone(ConeLayout { dim, n_c }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintFitSpec {
    pub approach: Approach,
    pub complexity: Complexity,
    pub gamma_c: f64,
    pub eps_0: f64,
    #[serde(default)]
    pub training_grid_id: String,
    pub multistart: MultiStartConfig,
    #[serde(default)]
    pub pso: PsoConfig,
}

impl ConstraintFitSpec {
    pub fn family(&self) -> Family {
        self.complexity.family()
    }

    pub fn validate(&self) -> Result<(), FitError> {
        if self.family() == Family::Cone && self.approach == Approach::Region {
            return Err(FitError::InvalidSpec("cones are only fitted boundary-based".into()));
        }
        let ok = match self.complexity {
            Complexity::Mmps { p_plus, p_minus } => p_plus >= 1 && p_minus >= 1,
            Complexity::Ellipsoid { n_e } => n_e >= 1,
            Complexity::Cone { n_c } => n_c >= 1,
        };
        if !ok {
            return Err(FitError::InvalidSpec("complexity must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma_c) {
            return Err(FitError::InvalidSpec("gamma_c must lie in [0, 1]".into()));
        }
        if !(self.eps_0 > 0.0) {
            return Err(FitError::InvalidSpec("eps_0 must be positive".into()));
        }
        self.multistart.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum FamilyLayout {
    Mmps(MmpsLayout),
    Ellipsoid(EllipsoidLayout),
    Cone(ConeLayout),
}

impl FamilyLayout {
    fn n_params(&self) -> usize {
        match self {
            FamilyLayout::Mmps(l) => l.n_params(),
            FamilyLayout::Ellipsoid(l) => l.n_params(),
            FamilyLayout::Cone(l) => l.n_params(),
        }
    }

    fn eval(&self, theta: &[f64], s: &[f64]) -> f64 {
        match self {
            FamilyLayout::Mmps(l) => l.eval(theta, s),
            FamilyLayout::Ellipsoid(l) => l.eval_active(theta, s).0,
            FamilyLayout::Cone(l) => l.eval_active(theta, s).0,
        }
    }

    fn eval_with_gradient(
        &self,
        theta: &[f64],
        s: &[f64],
        scale: f64,
        out: &mut Vec<(usize, f64)>,
    ) -> f64 {
        match self {
            FamilyLayout::Mmps(l) => {
                let (v, p, q) = l.eval_active(theta, s);
                l.push_gradient(s, p, q, scale, out);
                v
            }
            FamilyLayout::Ellipsoid(l) => {
                let (v, e) = l.eval_active(theta, s);
                l.push_gradient(theta, s, e, scale, out);
                v
            }
            FamilyLayout::Cone(l) => {
                let (v, j) = l.eval_active(theta, s);
                l.push_gradient(theta, s, j, scale, out);
                v
            }
        }
    }

    fn to_region(&self, theta: &[f64], bounds: &Bounds, n_state: usize) -> Result<Region, FitError> {
        Ok(match self {
            FamilyLayout::Mmps(l) => mmps_region(mmps_from_normalized(l, theta, n_state, bounds, 1.0)?),
            FamilyLayout::Ellipsoid(l) => {
                let mut t = theta.to_vec();
                l.canonicalize(&mut t);
                Region::Ellipsoids(l.to_region(&t, bounds)?)
            }
            FamilyLayout::Cone(l) => Region::Cones(l.to_region(theta, bounds)?),
        })
    }

    /// Family-specific random start in normalized coordinates.
    fn random_start(&self, rng: &mut rand_chacha::ChaCha8Rng, init_scale: f64) -> Vec<f64> {
        match self {
            FamilyLayout::Mmps(l) => (0..l.n_params())
                .map(|_| rng.gen_range(-init_scale..=init_scale))
                .collect(),
            FamilyLayout::Ellipsoid(l) => {
                let d = l.dim;
                let mut out = Vec::with_capacity(l.n_params());
                for _ in 0..l.n_e {
                    out.extend((0..d).map(|_| rng.gen::<f64>()));
                    let mut chol = vec![0.0; tri_len(d)];
                    for i in 0..d {
                        for j in 0..i {
                            chol[tri_index(i, j)] = init_scale * rng.gen_range(-0.5..=0.5);
                        }
                        chol[tri_index(i, i)] = rng.gen_range(1.0..=4.0);
                    }
                    out.extend(chol);
                }
                out
            }
            FamilyLayout::Cone(l) => {
                let d = l.dim;
                let mut out = Vec::with_capacity(l.n_params());
                for _ in 0..l.n_c {
                    for a in 0..d {
                        for b in 0..d {
                            let v = init_scale * rng.gen_range(-0.5..=0.5);
                            out.push(if a == b { v + 1.0 } else { v });
                        }
                    }
                    out.extend((0..d).map(|_| rng.gen::<f64>()));
                    out.extend((0..d).map(|_| init_scale * rng.gen_range(-0.5..=0.5)));
                    out.push(rng.gen_range(0.5..=1.5));
                }
                out
            }
        }
    }
}

/// Relative boundary residuals `(G - g) / (|G| + eps_0)` on points where `G`
/// is defined.
#[derive(Debug, Clone)]
struct BoundaryProblem {
    layout: FamilyLayout,
    dim: usize,
    points: Vec<f64>,
    targets: Vec<f64>,
    weights: Vec<f64>,
}

impl BoundaryProblem {
    fn new(layout: FamilyLayout, grid: &Grid, bounds: &Bounds, eps_0: f64) -> Result<Self, FitError> {
        let g = grid.g_values().ok_or(FitError::EmptyGrid)?;
        let mut points = Vec::new();
        let mut targets = Vec::new();
        for (z, v) in grid.points().zip(g) {
            if v.is_finite() {
                points.extend(bounds.normalize(z));
                targets.push(*v);
            }
        }
        if targets.is_empty() {
            return Err(FitError::EmptyGrid);
        }
        let weights = targets.iter().map(|v| 1.0 / (v.abs() + eps_0)).collect();
        Ok(Self {
            layout,
            dim: grid.dim(),
            points,
            targets,
            weights,
        })
    }

    fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }
}

impl LsqProblem for BoundaryProblem {
    fn dim(&self) -> usize {
        self.layout.n_params()
    }

    fn residuals(&self, theta: &[f64]) -> Vec<f64> {
        (0..self.targets.len())
            .map(|i| (self.targets[i] - self.layout.eval(theta, self.point(i))) * self.weights[i])
            .collect()
    }

    fn residuals_and_jacobian(&self, theta: &[f64]) -> (Vec<f64>, SparseJacobian) {
        let mut jb = JacobianBuilder::new(self.dim());
        let mut r = Vec::with_capacity(self.targets.len());
        let mut row = Vec::new();
        for i in 0..self.targets.len() {
            row.clear();
            let v = self
                .layout
                .eval_with_gradient(theta, self.point(i), -self.weights[i], &mut row);
            r.push((self.targets[i] - v) * self.weights[i]);
            jb.push_sparse(row.iter().copied());
        }
        (r, jb.finish())
    }
}

/// Region objective on normalized points. Ellipsoid diagonals are searched
/// as `log10` values.
struct RegionProblem {
    layout: FamilyLayout,
    dim: usize,
    points: Vec<f64>,
    feasible: Vec<bool>,
    n_feasible: usize,
    gamma_c: f64,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl RegionProblem {
    fn new(layout: FamilyLayout, grid: &Grid, bounds: &Bounds, gamma_c: f64) -> Result<Self, FitError> {
        let feasible = grid.feasible_mask().ok_or(FitError::EmptyGrid)?.to_vec();
        let n_feasible = feasible.iter().filter(|f| **f).count();
        if n_feasible == 0 {
            return Err(RegionError::DegenerateGrid("feasible").into());
        }
        if n_feasible == feasible.len() {
            return Err(RegionError::DegenerateGrid("infeasible").into());
        }
        let (lower, upper) = match layout {
            FamilyLayout::Mmps(l) => (vec![-1.0; l.n_params()], vec![1.0; l.n_params()]),
            FamilyLayout::Ellipsoid(l) => {
                let d = l.dim;
                let mut lo = Vec::with_capacity(l.n_params());
                let mut hi = Vec::with_capacity(l.n_params());
                for _ in 0..l.n_e {
                    lo.extend(std::iter::repeat(0.0).take(d));
                    hi.extend(std::iter::repeat(1.0).take(d));
                    for i in 0..d {
                        for j in 0..=i {
                            let (a, b) = if i == j { (-2.0, 2.0) } else { (-10.0, 10.0) };
                            lo.push(a);
                            hi.push(b);
                        }
                    }
                }
                (lo, hi)
            }
            FamilyLayout::Cone(_) => {
                return Err(FitError::InvalidSpec("cones are only fitted boundary-based".into()))
            }
        };
        Ok(Self {
            layout,
            dim: grid.dim(),
            points: grid.points().flat_map(|z| bounds.normalize(z)).collect(),
            feasible,
            n_feasible,
            gamma_c,
            lower,
            upper,
        })
    }

    /// Search vector to layout parameters.
    fn decode(&self, x: &[f64]) -> Vec<f64> {
        match self.layout {
            FamilyLayout::Ellipsoid(l) => {
                let d = l.dim;
                let mut theta = x.to_vec();
                for e in 0..l.n_e {
                    let off = e * l.stride() + d;
                    for i in 0..d {
                        let k = off + tri_index(i, i);
                        theta[k] = 10f64.powf(x[k]);
                    }
                }
                theta
            }
            _ => x.to_vec(),
        }
    }

    fn misclassification(&self, theta: &[f64]) -> Misclassification {
        let (mut missed, mut covered) = (0usize, 0usize);
        for (s, &f) in self.points.chunks_exact(self.dim).zip(&self.feasible) {
            let inside = self.layout.eval(theta, s) <= 0.0;
            if f {
                missed += usize::from(!inside);
            } else {
                covered += usize::from(inside);
            }
        }
        Misclassification {
            inclusion: missed as f64 / self.n_feasible as f64,
            violation: covered as f64 / (self.feasible.len() - self.n_feasible) as f64,
        }
    }
}

impl PsoProblem for RegionProblem {
    fn dim(&self) -> usize {
        self.lower.len()
    }

    fn lower(&self) -> &[f64] {
        &self.lower
    }

    fn upper(&self) -> &[f64] {
        &self.upper
    }

    fn objective(&self, x: &[f64]) -> f64 {
        crate::regions::region_objective(&self.misclassification(&self.decode(x)), self.gamma_c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintFit {
    pub spec: ConstraintFitSpec,
    /// Physical coordinates.
    pub region: Region,
    /// Misclassification on the training grid.
    pub training: Misclassification,
    /// Final solver objective (least-squares cost or region objective).
    pub objective: f64,
    pub log: Vec<StartRecord>,
}

pub fn fit_constraint(
    spec: &ConstraintFitSpec,
    grid: &Grid,
    bounds: &Bounds,
    n_state: usize,
) -> Result<ConstraintFit, FitError> {
    spec.validate()?;
    if grid.is_empty() || !grid.is_labeled() {
        return Err(FitError::EmptyGrid);
    }
    let layout = spec.complexity.family_layout(grid.dim());
    let (theta, objective, log) = match spec.approach {
        Approach::Boundary => {
            let problem = BoundaryProblem::new(layout, grid, bounds, spec.eps_0)?;
            let scale = spec.multistart.init_scale;
            let ms = multi_start_lsq(
                &problem,
                &spec.multistart,
                |rng: &mut rand_chacha::ChaCha8Rng| layout.random_start(rng, scale),
                &[],
            )?;
            (ms.best.x, ms.best.cost, ms.log)
        }
        Approach::Region => {
            let problem = RegionProblem::new(layout, grid, bounds, spec.gamma_c)?;
            let (out, _, log) = solve_pso_restarts(&problem, &spec.pso, &[])?;
            (problem.decode(&out.x), out.cost, log)
        }
    };
    let region = layout.to_region(&theta, bounds, n_state)?;
    let training = crate::regions::misclassification(&region, grid)?;
    Ok(ConstraintFit {
        spec: spec.clone(),
        region,
        training,
        objective,
        log,
    })
}

/// Residual vector and jacobian of a boundary problem, exposed for audits.
pub fn boundary_residuals(
    complexity: Complexity,
    grid: &Grid,
    bounds: &Bounds,
    eps_0: f64,
    theta: &[f64],
) -> Result<(Vec<f64>, SparseJacobian), FitError> {
    let p = BoundaryProblem::new(complexity.family_layout(grid.dim()), grid, bounds, eps_0)?;
    Ok(p.residuals_and_jacobian(theta))
}
