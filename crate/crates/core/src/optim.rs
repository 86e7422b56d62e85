//! Levenberg-Marquardt least squares with multi-start, and a global-best
//! particle swarm optimizer.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding::{derive_seed, rng_from_seed};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("non-finite residuals or jacobian at the starting point")]
    NumericalBreakdown,
    #[error("all {0} starts failed")]
    AllStartsFailed(usize),
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
}

/// Row-compressed Jacobian.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseJacobian {
    n_cols: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseJacobian {
    pub fn n_rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[span.clone()].iter().copied().zip(self.vals[span].iter().copied())
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n_rows(), self.n_cols);
        for i in 0..self.n_rows() {
            for (j, v) in self.row(i) {
                m[(i, j)] += v;
            }
        }
        m
    }

    fn is_finite(&self) -> bool {
        self.vals.iter().all(|v| v.is_finite())
    }

    /// `(J^T J, J^T r)`.
    fn normal_equations(&self, r: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.n_cols;
        let mut a = DMatrix::zeros(n, n);
        let mut g = DVector::zeros(n);
        for (i, ri) in r.iter().enumerate() {
            let span = self.row_ptr[i]..self.row_ptr[i + 1];
            let cols = &self.cols[span.clone()];
            let vals = &self.vals[span];
            for (p, (&cp, &vp)) in cols.iter().zip(vals).enumerate() {
                g[cp] += vp * ri;
                for (&cq, &vq) in cols[p..].iter().zip(&vals[p..]) {
                    a[(cp.min(cq), cp.max(cq))] += vp * vq;
                }
            }
        }
        a.fill_lower_triangle_with_upper_triangle();
        (a, g)
    }
}

/// Incremental builder for [`SparseJacobian`].
#[derive(Debug, Clone)]
pub struct JacobianBuilder {
    jac: SparseJacobian,
}

impl JacobianBuilder {
    pub fn new(n_cols: usize) -> Self {
        Self {
            jac: SparseJacobian {
                n_cols,
                row_ptr: vec![0],
                cols: Vec::new(),
                vals: Vec::new(),
            },
        }
    }

    pub fn push_sparse<I: IntoIterator<Item = (usize, f64)>>(&mut self, entries: I) {
        for (c, v) in entries {
            debug_assert!(c < self.jac.n_cols);
            self.jac.cols.push(c);
            self.jac.vals.push(v);
        }
        self.jac.row_ptr.push(self.jac.cols.len());
    }

    pub fn push_dense(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.jac.n_cols);
        self.push_sparse(row.iter().copied().enumerate().filter(|(_, v)| *v != 0.0));
    }

    pub fn finish(self) -> SparseJacobian {
        self.jac
    }
}

pub trait LsqProblem: Sync {
    fn dim(&self) -> usize;
    fn residuals(&self, x: &[f64]) -> Vec<f64>;
    fn residuals_and_jacobian(&self, x: &[f64]) -> (Vec<f64>, SparseJacobian);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LsqConfig {
    pub max_iter: usize,
    pub tol_grad: f64,
    pub tol_step: f64,
    /// Relative cost decrease below which an accepted step ends the run.
    pub tol_cost: f64,
}

impl Default for LsqConfig {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol_grad: 1e-10,
            tol_step: 1e-10,
            tol_cost: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsqOutcome {
    pub x: Vec<f64>,
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Cost after each accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

fn half_sq(r: &[f64]) -> f64 {
    0.5 * r.iter().map(|v| v * v).sum::<f64>()
}

/// Levenberg-Marquardt with Marquardt scaling and Nielsen damping updates.
pub fn solve_lsq<P: LsqProblem + ?Sized>(
    problem: &P,
    x0: &[f64],
    cfg: &LsqConfig,
) -> Result<LsqOutcome, OptimError> {
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(OptimError::NumericalBreakdown);
    }
    let n = problem.dim();
    let mut x = x0.to_vec();
    let (mut r, mut jac) = problem.residuals_and_jacobian(&x);
    let mut cost = half_sq(&r);
    if !cost.is_finite() || !jac.is_finite() {
        return Err(OptimError::NumericalBreakdown);
    }
    let mut history = vec![cost];
    let done = |x: Vec<f64>, cost, iterations, converged, history| {
        Ok(LsqOutcome {
            x,
            cost,
            iterations,
            converged,
            cost_history: history,
        })
    };
    if cost == 0.0 {
        return done(x, cost, 0, true, history);
    }
    let (mut a, mut g) = jac.normal_equations(&r);
    if g.amax() <= cfg.tol_grad {
        return done(x, cost, 0, true, history);
    }
    let scale_of = |a: &DMatrix<f64>| {
        let max_diag = a.diagonal().amax().max(f64::MIN_POSITIVE);
        DVector::from_iterator(n, (0..n).map(|i| a[(i, i)].max(1e-8 * max_diag)))
    };
    let mut d = scale_of(&a);
    let mut mu = 1e-3 * a.diagonal().amax().max(1e-12);
    let mut nu = 2.0;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        iterations += 1;
        let mut lhs = a.clone();
        for i in 0..n {
            lhs[(i, i)] += mu * d[i];
        }
        let Some(h) = lhs.cholesky().map(|c| c.solve(&-&g)) else {
            mu *= nu;
            nu *= 2.0;
            continue;
        };
        let x_norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if h.norm() <= cfg.tol_step * (x_norm + cfg.tol_step) {
            converged = true;
            break;
        }
        let x_new: Vec<f64> = x.iter().zip(h.iter()).map(|(a, b)| a + b).collect();
        let r_new = problem.residuals(&x_new);
        let cost_new = half_sq(&r_new);
        let predicted = 0.5 * h.dot(&(h.component_mul(&d) * mu - &g));
        let rho = if cost_new.is_finite() && predicted > 0.0 {
            (cost - cost_new) / predicted
        } else {
            -1.0
        };
        if rho > 0.0 {
            let decrease = cost - cost_new;
            let (r2, j2) = problem.residuals_and_jacobian(&x_new);
            if !j2.is_finite() {
                mu *= nu;
                nu *= 2.0;
                continue;
            }
            x = x_new;
            r = r2;
            jac = j2;
            cost = half_sq(&r);
            history.push(cost);
            (a, g) = jac.normal_equations(&r);
            let new_d = scale_of(&a);
            d = d.zip_map(&new_d, f64::max);
            mu *= (1.0 - (2.0 * rho - 1.0).powi(3)).max(1.0 / 3.0);
            nu = 2.0;
            if cost == 0.0 || g.amax() <= cfg.tol_grad || decrease <= cfg.tol_cost * cost {
                converged = true;
                break;
            }
        } else {
            mu *= nu;
            nu *= 2.0;
            if !mu.is_finite() {
                converged = true;
                break;
            }
        }
    }
    done(x, cost, iterations, converged, history)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultiStartConfig {
    pub n_starts: usize,
    pub seed: u64,
    pub init_scale: f64,
    pub max_iter: usize,
    pub tol_grad: f64,
    pub tol_step: f64,
    #[serde(default = "default_tol_cost")]
    pub tol_cost: f64,
}

fn default_tol_cost() -> f64 {
    LsqConfig::default().tol_cost
}

impl Default for MultiStartConfig {
    fn default() -> Self {
        let lsq = LsqConfig::default();
        Self {
            n_starts: 50,
            seed: 0,
            init_scale: 1.0,
            max_iter: lsq.max_iter,
            tol_grad: lsq.tol_grad,
            tol_step: lsq.tol_step,
            tol_cost: lsq.tol_cost,
        }
    }
}

impl MultiStartConfig {
    pub fn lsq(&self) -> LsqConfig {
        LsqConfig {
            max_iter: self.max_iter,
            tol_grad: self.tol_grad,
            tol_step: self.tol_step,
            tol_cost: self.tol_cost,
        }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        if self.n_starts < 1 {
            return Err(OptimError::InvalidConfig("n_starts must be >= 1".into()));
        }
        if !(self.init_scale > 0.0) {
            return Err(OptimError::InvalidConfig("init_scale must be positive".into()));
        }
        Ok(())
    }

    /// Seed of random start `idx`.
    pub fn start_seed(&self, idx: usize) -> u64 {
        derive_seed(self.seed, &[idx as u64])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartRecord {
    pub start_idx: usize,
    pub seed: u64,
    pub iterations: usize,
    pub final_cost: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiStartResult {
    pub best: LsqOutcome,
    pub best_idx: usize,
    pub log: Vec<StartRecord>,
}

/// Writes the per-start log as CSV.
pub fn write_start_log<W: Write>(log: &[StartRecord], mut out: W) -> std::io::Result<()> {
    writeln!(out, "start_idx,seed,iterations,final_cost,converged")?;
    for s in log {
        writeln!(
            out,
            "{},{},{},{:.16e},{}",
            s.start_idx, s.seed, s.iterations, s.final_cost, s.converged
        )?;
    }
    Ok(())
}

pub fn uniform_init(dim: usize, scale: f64) -> impl Fn(&mut ChaCha8Rng) -> Vec<f64> + Sync {
    move |rng| (0..dim).map(|_| rng.gen_range(-scale..scale)).collect()
}

/// Random starts `0..n_starts` drawn by `init`, followed by the given extra
/// starts (logged with seed 0). The winner is the lexicographic minimum of
/// `(cost, start_idx)`.
pub fn multi_start_lsq<P, F>(
    problem: &P,
    cfg: &MultiStartConfig,
    init: F,
    extra_starts: &[Vec<f64>],
) -> Result<MultiStartResult, OptimError>
where
    P: LsqProblem + ?Sized,
    F: Fn(&mut ChaCha8Rng) -> Vec<f64> + Sync,
{
    cfg.validate()?;
    let lsq = cfg.lsq();
    let total = cfg.n_starts + extra_starts.len();
    let runs: Vec<(u64, Result<LsqOutcome, OptimError>)> = (0..total)
        .into_par_iter()
        .map(|idx| {
            if idx < cfg.n_starts {
                let seed = cfg.start_seed(idx);
                let x0 = init(&mut rng_from_seed(seed));
                (seed, solve_lsq(problem, &x0, &lsq))
            } else {
                (0, solve_lsq(problem, &extra_starts[idx - cfg.n_starts], &lsq))
            }
        })
        .collect();
    let mut log = Vec::with_capacity(total);
    let mut best: Option<(usize, LsqOutcome)> = None;
    for (idx, (seed, run)) in runs.into_iter().enumerate() {
        match run {
            Ok(out) => {
                log.push(StartRecord {
                    start_idx: idx,
                    seed,
                    iterations: out.iterations,
                    final_cost: out.cost,
                    converged: out.converged,
                });
                if best.as_ref().map_or(true, |(_, b)| out.cost < b.cost) {
                    best = Some((idx, out));
                }
            }
            Err(_) => log.push(StartRecord {
                start_idx: idx,
                seed,
                iterations: 0,
                final_cost: f64::NAN,
                converged: false,
            }),
        }
    }
    let (best_idx, best) = best.ok_or(OptimError::AllStartsFailed(total))?;
    Ok(MultiStartResult { best, best_idx, log })
}

pub trait PsoProblem: Sync {
    fn dim(&self) -> usize;
    fn lower(&self) -> &[f64];
    fn upper(&self) -> &[f64];
    fn objective(&self, x: &[f64]) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsoConfig {
    /// Defaults to ten particles per decision variable.
    pub swarm_size: Option<usize>,
    pub iterations: usize,
    pub omega: f64,
    pub c1: f64,
    pub c2: f64,
    pub seed: u64,
    /// Independent swarms; the best final global best is kept.
    #[serde(default = "one")]
    pub restarts: usize,
}

fn one() -> usize {
    1
}

impl PsoConfig {
    /// Seed of swarm `idx`.
    pub fn restart_seed(&self, idx: usize) -> u64 {
        derive_seed(self.seed, &[0x5253, idx as u64])
    }
}

impl Default for PsoConfig {
    fn default() -> Self {
        Self {
            swarm_size: None,
            iterations: 300,
            omega: 0.729,
            c1: 1.49445,
            c2: 1.49445,
            seed: 0,
            restarts: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsoOutcome {
    pub x: Vec<f64>,
    pub cost: f64,
    /// Global-best cost after initialization and after every iteration.
    pub history: Vec<f64>,
}

fn finite_or_inf(v: f64) -> f64 {
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

/// Global-best PSO. Positions are kept inside the box (velocity zeroed on
/// the clamped coordinate); `seeds` replace the first particles' positions.
pub fn solve_pso<P: PsoProblem + ?Sized>(
    problem: &P,
    cfg: &PsoConfig,
    seeds: &[Vec<f64>],
) -> Result<PsoOutcome, OptimError> {
    let dim = problem.dim();
    let (lo, hi) = (problem.lower(), problem.upper());
    if lo.len() != dim || hi.len() != dim {
        return Err(OptimError::InvalidConfig("box dimension mismatch".into()));
    }
    if lo.iter().zip(hi).any(|(a, b)| !(a.is_finite() && b.is_finite() && a <= b)) {
        return Err(OptimError::InvalidConfig("invalid box".into()));
    }
    let n = cfg.swarm_size.unwrap_or(10 * dim).max(1);
    let width: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| b - a).collect();
    let mut rng = rng_from_seed(derive_seed(cfg.seed, &[0x5057]));

    let mut pos: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..dim).map(|k| lo[k] + width[k] * rng.gen::<f64>()).collect())
        .collect();
    for (p, s) in pos.iter_mut().zip(seeds) {
        *p = s.iter().enumerate().map(|(k, v)| v.clamp(lo[k], hi[k])).collect();
    }
    let mut vel: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..dim).map(|k| width[k] * (2.0 * rng.gen::<f64>() - 1.0)).collect())
        .collect();

    let eval = |pos: &[Vec<f64>]| -> Vec<f64> {
        pos.par_iter().map(|p| finite_or_inf(problem.objective(p))).collect()
    };
    let mut cost = eval(&pos);
    let mut pbest = pos.clone();
    let mut pbest_cost = cost.clone();
    let argmin = |c: &[f64]| {
        c.iter()
            .enumerate()
            .fold(0, |b, (i, v)| if *v < c[b] { i } else { b })
    };
    let mut g = argmin(&pbest_cost);
    let mut gbest = pbest[g].clone();
    let mut gcost = pbest_cost[g];
    let mut history = vec![gcost];

    for _ in 0..cfg.iterations {
        for i in 0..n {
            for k in 0..dim {
                let (r1, r2): (f64, f64) = (rng.gen(), rng.gen());
                let v = cfg.omega * vel[i][k]
                    + cfg.c1 * r1 * (pbest[i][k] - pos[i][k])
                    + cfg.c2 * r2 * (gbest[k] - pos[i][k]);
                vel[i][k] = v.clamp(-width[k], width[k]);
                let p = pos[i][k] + vel[i][k];
                if p < lo[k] || p > hi[k] {
                    pos[i][k] = p.clamp(lo[k], hi[k]);
                    vel[i][k] = 0.0;
                } else {
                    pos[i][k] = p;
                }
            }
        }
        cost = eval(&pos);
        for i in 0..n {
            if cost[i] < pbest_cost[i] {
                pbest_cost[i] = cost[i];
                pbest[i].clone_from(&pos[i]);
            }
        }
        g = argmin(&pbest_cost);
        if pbest_cost[g] < gcost {
            gcost = pbest_cost[g];
            gbest.clone_from(&pbest[g]);
        }
        history.push(gcost);
    }
    Ok(PsoOutcome {
        x: gbest,
        cost: gcost,
        history,
    })
}

/// Runs `cfg.restarts` swarms with seeds [`PsoConfig::restart_seed`] and
/// keeps the lowest `(cost, idx)`; `seeds` go to the first swarm only.
pub fn solve_pso_restarts<P: PsoProblem + ?Sized>(
    problem: &P,
    cfg: &PsoConfig,
    seeds: &[Vec<f64>],
) -> Result<(PsoOutcome, usize, Vec<StartRecord>), OptimError> {
    if cfg.restarts < 1 {
        return Err(OptimError::InvalidConfig("restarts must be >= 1".into()));
    }
    let mut best: Option<(PsoOutcome, usize)> = None;
    let mut log = Vec::with_capacity(cfg.restarts);
    for idx in 0..cfg.restarts {
        let run_cfg = PsoConfig {
            seed: cfg.restart_seed(idx),
            ..*cfg
        };
        let out = solve_pso(problem, &run_cfg, if idx == 0 { seeds } else { &[] })?;
        log.push(StartRecord {
            start_idx: idx,
            seed: run_cfg.seed,
            iterations: cfg.iterations,
            final_cost: out.cost,
            converged: true,
        });
        if best.as_ref().map_or(true, |(b, _)| out.cost < b.cost) {
            best = Some((out, idx));
        }
    }
    let (out, idx) = best.expect("at least one restart");
    Ok((out, idx, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Linear {
        a: DMatrix<f64>,
        b: DVector<f64>,
    }

    impl LsqProblem for Linear {
        fn dim(&self) -> usize {
            self.a.ncols()
        }
        fn residuals(&self, x: &[f64]) -> Vec<f64> {
            (&self.a * DVector::from_column_slice(x) - &self.b).as_slice().to_vec()
        }
        fn residuals_and_jacobian(&self, x: &[f64]) -> (Vec<f64>, SparseJacobian) {
            let mut jb = JacobianBuilder::new(self.dim());
            for i in 0..self.a.nrows() {
                let row: Vec<f64> = self.a.row(i).iter().copied().collect();
                jb.push_dense(&row);
            }
            (self.residuals(x), jb.finish())
        }
    }

    struct Rosenbrock;

    impl LsqProblem for Rosenbrock {
        fn dim(&self) -> usize {
            2
        }
        fn residuals(&self, x: &[f64]) -> Vec<f64> {
            vec![10.0 * (x[1] - x[0] * x[0]), 1.0 - x[0]]
        }
        fn residuals_and_jacobian(&self, x: &[f64]) -> (Vec<f64>, SparseJacobian) {
            let mut jb = JacobianBuilder::new(2);
            jb.push_dense(&[-20.0 * x[0], 10.0]);
            jb.push_dense(&[-1.0, 0.0]);
            (self.residuals(x), jb.finish())
        }
    }

    fn linear() -> Linear {
        Linear {
            a: DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]),
            b: DVector::from_column_slice(&[1.0, 2.0, 2.0, 5.0]),
        }
    }

    #[test]
    fn linear_least_squares() {
        let p = linear();
        let out = solve_lsq(&p, &[10.0, -3.0], &LsqConfig::default()).unwrap();
        let exact = (p.a.transpose() * &p.a)
            .lu()
            .solve(&(p.a.transpose() * &p.b))
            .unwrap();
        for k in 0..2 {
            assert!((out.x[k] - exact[k]).abs() < 1e-8);
        }
        assert!(out.cost_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn rosenbrock_reaches_minimum() {
        let cfg = LsqConfig {
            max_iter: 500,
            ..LsqConfig::default()
        };
        let out = solve_lsq(&Rosenbrock, &[-1.2, 1.0], &cfg).unwrap();
        assert!((out.x[0] - 1.0).abs() < 1e-6 && (out.x[1] - 1.0).abs() < 1e-6);
        assert!(out.cost_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn zero_residual_start_returns_immediately() {
        let out = solve_lsq(&Rosenbrock, &[1.0, 1.0], &LsqConfig::default()).unwrap();
        assert_eq!(out.iterations, 0);
        assert_eq!(out.cost, 0.0);
    }

    #[test]
    fn breakdown_on_non_finite_start() {
        assert_eq!(
            solve_lsq(&Rosenbrock, &[f64::NAN, 0.0], &LsqConfig::default()),
            Err(OptimError::NumericalBreakdown)
        );
    }

    #[test]
    fn jacobian_normal_equations_match_dense() {
        let p = linear();
        let (r, j) = p.residuals_and_jacobian(&[0.3, -0.2]);
        let (a, g) = j.normal_equations(&r);
        let dense = j.to_dense();
        assert!((a - dense.transpose() * &dense).amax() < 1e-12);
        assert!((g - dense.transpose() * DVector::from_column_slice(&r)).amax() < 1e-12);
    }

    #[test]
    fn single_start_equals_direct_solve() {
        let cfg = MultiStartConfig {
            n_starts: 1,
            seed: 11,
            ..MultiStartConfig::default()
        };
        let init = uniform_init(2, cfg.init_scale);
        let ms = multi_start_lsq(&Rosenbrock, &cfg, &init, &[]).unwrap();
        let x0 = init(&mut rng_from_seed(cfg.start_seed(0)));
        let direct = solve_lsq(&Rosenbrock, &x0, &cfg.lsq()).unwrap();
        assert_eq!(ms.best, direct);
        assert_eq!(ms.log.len(), 1);
    }

    #[test]
    fn convex_problem_starts_agree() {
        let p = linear();
        let cfg = MultiStartConfig {
            n_starts: 8,
            init_scale: 5.0,
            ..MultiStartConfig::default()
        };
        let ms = multi_start_lsq(&p, &cfg, uniform_init(2, 5.0), &[]).unwrap();
        let costs: Vec<f64> = ms.log.iter().map(|s| s.final_cost).collect();
        for c in &costs {
            assert!((c - ms.best.cost).abs() < 1e-8);
        }
        let mut buf = Vec::new();
        write_start_log(&ms.log, &mut buf).unwrap();
        assert!(String::from_utf8(buf)
            .unwrap()
            .starts_with("start_idx,seed,iterations,final_cost,converged\n"));
    }

    struct Sphere(Vec<f64>, Vec<f64>);

    impl PsoProblem for Sphere {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn lower(&self) -> &[f64] {
            &self.0
        }
        fn upper(&self) -> &[f64] {
            &self.1
        }
        fn objective(&self, x: &[f64]) -> f64 {
            x.iter().map(|v| v * v).sum()
        }
    }

    #[test]
    fn pso_sphere() {
        let p = Sphere(vec![-5.0; 5], vec![5.0; 5]);
        let cfg = PsoConfig {
            iterations: 200,
            seed: 3,
            ..PsoConfig::default()
        };
        let out = solve_pso(&p, &cfg, &[]).unwrap();
        let norm = out.x.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm <= 1e-3, "{norm}");
        assert!(out.history.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(out, solve_pso(&p, &cfg, &[]).unwrap());
    }

    #[test]
    fn pso_constant_objective() {
        struct Flat;
        impl PsoProblem for Flat {
            fn dim(&self) -> usize {
                2
            }
            fn lower(&self) -> &[f64] {
                &[0.0, 0.0]
            }
            fn upper(&self) -> &[f64] {
                &[1.0, 1.0]
            }
            fn objective(&self, _: &[f64]) -> f64 {
                4.5
            }
        }
        let out = solve_pso(&Flat, &PsoConfig::default(), &[]).unwrap();
        assert_eq!(out.cost, 4.5);
        assert!(out.x.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
