//! Validation of fitted approximations, complexity sweeps with best-fit
//! selection, and the long-format report files.
//!
//! A sweep produces one [`FitReport`] per complexity. Reports flatten to
//! [`ReportRow`]s (`job_id,family,approach,Pp,Pm,ne,nc,grid,metric,value`)
//! and the best fit is selected from rows alone, so the same winner can be
//! recovered from an emitted `report.csv`.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fit::{
    fit_constraint, fit_model, mean_relative_error, nested_warm_start, Approach, Complexity,
    ConstraintFitSpec, Family, FitError, ModelFitSpec, WARM_START_NOISE,
};
use crate::gridgen::Grid;
use crate::mmps::{MmpsFunction, MmpsVectorFunction};
use crate::regions::{misclassification, Region, RegionError};
use crate::seeding::derive_seed;
use crate::vehicle::Bounds;

pub const REPORT_HEADER: &str = "job_id,family,approach,Pp,Pm,ne,nc,grid,metric,value";
/// Grid label used for metrics measured on the training grid.
pub const TRAIN_GRID: &str = "train";
pub const DEFAULT_VIOLATION_CAP: f64 = 0.06;
pub const OVERFIT_FACTOR: f64 = 1.5;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Region(#[from] RegionError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("report line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("grid {grid}: {targets} targets for {points} points")]
    TargetMismatch {
        grid: String,
        targets: usize,
        points: usize,
    },
    #[error("empty sweep")]
    EmptySweep,
}

/// A grid with one scalar target per point.
#[derive(Debug, Clone, Copy)]
pub struct ScalarGrid<'a> {
    pub id: &'a str,
    pub grid: &'a Grid,
    pub targets: &'a [f64],
}

/// A grid with a full target vector per point.
#[derive(Debug, Clone, Copy)]
pub struct VectorGrid<'a> {
    pub id: &'a str,
    pub grid: &'a Grid,
    pub targets: &'a [Vec<f64>],
}

/// Mean relative errors of every component on one grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridErrors {
    pub grid: String,
    pub errors: Vec<f64>,
}

pub fn validate_component(
    f: &MmpsFunction,
    grid: ScalarGrid<'_>,
    eps_0: f64,
) -> Result<f64, ReportError> {
    if grid.targets.len() != grid.grid.len() {
        return Err(ReportError::TargetMismatch {
            grid: grid.id.to_string(),
            targets: grid.targets.len(),
            points: grid.grid.len(),
        });
    }
    Ok(mean_relative_error(|z| f.eval(z), grid.grid, grid.targets, eps_0))
}

/// Per-grid, per-component mean of `|F_i - f_i| / (|F_i| + eps_0)`.
pub fn validate_model(
    f: &MmpsVectorFunction,
    grids: &[VectorGrid<'_>],
    eps_0: f64,
) -> Result<Vec<GridErrors>, ReportError> {
    grids
        .iter()
        .map(|g| {
            let errors = (0..f.components.len())
                .map(|i| {
                    let column: Vec<f64> = g.targets.iter().map(|row| row[i]).collect();
                    let scalar = ScalarGrid {
                        id: g.id,
                        grid: g.grid,
                        targets: &column,
                    };
                    validate_component(&f.components[i], scalar, eps_0)
                })
                .collect::<Result<_, _>>()?;
            Ok(GridErrors {
                grid: g.id.to_string(),
                errors,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub grid: String,
    pub metric: String,
    pub value: f64,
}

impl Metric {
    fn new(grid: &str, metric: &str, value: f64) -> Self {
        Self {
            grid: grid.to_string(),
            metric: metric.to_string(),
            value,
        }
    }
}

/// Outcome of one fit job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub job_id: String,
    pub family: Family,
    /// `None` for model fits.
    pub approach: Option<Approach>,
    pub complexity: Complexity,
    pub component: Option<usize>,
    pub metrics: Vec<Metric>,
    pub seed: u64,
    pub n_starts: usize,
    pub wall_time_s: f64,
    pub overfit: bool,
    pub spec: serde_json::Value,
}

impl FitReport {
    pub fn metric(&self, grid: &str, metric: &str) -> Option<f64> {
        self.metrics
            .iter()
            .find(|m| m.grid == grid && m.metric == metric)
            .map(|m| m.value)
    }

    pub fn rows(&self) -> Vec<ReportRow> {
        let (pp, pm, ne, nc) = match self.complexity {
            Complexity::Mmps { p_plus, p_minus } => (Some(p_plus), Some(p_minus), None, None),
            Complexity::Ellipsoid { n_e } => (None, None, Some(n_e), None),
            Complexity::Cone { n_c } => (None, None, None, Some(n_c)),
        };
        self.metrics
            .iter()
            .map(|m| ReportRow {
                job_id: self.job_id.clone(),
                family: self.family.to_string(),
                approach: self.approach.map(|a| a.to_string()).unwrap_or_default(),
                p_plus: pp,
                p_minus: pm,
                n_e: ne,
                n_c: nc,
                grid: m.grid.clone(),
                metric: m.metric.clone(),
                value: m.value,
            })
            .collect()
    }
}

/// One line of `report.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub job_id: String,
    pub family: String,
    pub approach: String,
    pub p_plus: Option<usize>,
    pub p_minus: Option<usize>,
    pub n_e: Option<usize>,
    pub n_c: Option<usize>,
    pub grid: String,
    pub metric: String,
    pub value: f64,
}

impl ReportRow {
    fn size(&self) -> usize {
        self.p_plus.unwrap_or(0) + self.p_minus.unwrap_or(0) + self.n_e.unwrap_or(0) + self.n_c.unwrap_or(0)
    }
}

fn opt(v: Option<usize>) -> String {
    v.map(|n| n.to_string()).unwrap_or_default()
}

pub fn write_report_csv<W: Write>(mut out: W, rows: &[ReportRow]) -> Result<(), ReportError> {
    writeln!(out, "{REPORT_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.job_id,
            r.family,
            r.approach,
            opt(r.p_plus),
            opt(r.p_minus),
            opt(r.n_e),
            opt(r.n_c),
            r.grid,
            r.metric,
            r.value
        )?;
    }
    Ok(())
}

pub fn read_report_csv<R: BufRead>(input: R) -> Result<Vec<ReportRow>, ReportError> {
    let mut lines = input.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header.trim() != REPORT_HEADER {
        return Err(ReportError::Parse {
            line: 1,
            msg: format!("unexpected header {header:?}"),
        });
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| ReportError::Parse { line: i + 2, msg };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(err(format!("expected 10 fields, got {}", f.len())));
        }
        let count = |s: &str| -> Result<Option<usize>, ReportError> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|e| err(format!("{s:?}: {e}")))
            }
        };
        rows.push(ReportRow {
            job_id: f[0].to_string(),
            family: f[1].to_string(),
            approach: f[2].to_string(),
            p_plus: count(f[3])?,
            p_minus: count(f[4])?,
            n_e: count(f[5])?,
            n_c: count(f[6])?,
            grid: f[7].to_string(),
            metric: f[8].to_string(),
            value: f[9].parse().map_err(|e| err(format!("{:?}: {e}", f[9])))?,
        });
    }
    Ok(rows)
}

/// How the winner of a sweep is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SelectionRule {
    /// Minimum `error` on `grid`.
    Model { grid: String },
    /// Minimum `inclusion + violation` on `grid` among fits whose violation
    /// does not exceed `violation_cap`.
    Constraint { grid: String, violation_cap: f64 },
}

impl SelectionRule {
    pub fn grid(&self) -> &str {
        match self {
            SelectionRule::Model { grid } | SelectionRule::Constraint { grid, .. } => grid,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestFit {
    pub job_id: String,
    pub score: f64,
    /// `false` when no fit met the violation cap and the winner is the
    /// unconstrained minimum.
    pub within_cap: bool,
}

#[derive(Debug, Clone, PartialEq)]
struct Scored {
    job_id: String,
    size: usize,
    score: f64,
    violation: f64,
}

/// Per-job scores in order of first appearance.
fn scores(rows: &[ReportRow], rule: &SelectionRule) -> Vec<Scored> {
    let mut order: Vec<&str> = Vec::new();
    let mut table: BTreeMap<&str, (usize, BTreeMap<&str, f64>)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.grid == rule.grid()) {
        let entry = table.entry(&r.job_id).or_insert_with(|| {
            order.push(&r.job_id);
            (r.size(), BTreeMap::new())
        });
        entry.1.insert(&r.metric, r.value);
    }
    order
        .into_iter()
        .filter_map(|id| {
            let (size, m) = &table[id];
            let (score, violation) = match rule {
                SelectionRule::Model { .. } => (*m.get("error")?, 0.0),
                SelectionRule::Constraint { .. } => {
                    let (inc, viol) = (*m.get("inclusion")?, *m.get("violation")?);
                    (inc + viol, viol)
                }
            };
            Some(Scored {
                job_id: id.to_string(),
                size: *size,
                score,
                violation,
            })
        })
        .collect()
}

fn argmin<'a>(candidates: impl Iterator<Item = &'a Scored>) -> Option<&'a Scored> {
    candidates.fold(None, |best: Option<&Scored>, s| match best {
        Some(b) if b.score <= s.score => Some(b),
        _ => Some(s),
    })
}

/// Winner of a sweep; ties go to the job listed first.
pub fn select_best(rows: &[ReportRow], rule: &SelectionRule) -> Option<BestFit> {
    let scored = scores(rows, rule);
    let pick = |s: &Scored, within_cap| BestFit {
        job_id: s.job_id.clone(),
        score: s.score,
        within_cap,
    };
    match rule {
        SelectionRule::Model { .. } => argmin(scored.iter()).map(|s| pick(s, true)),
        SelectionRule::Constraint { violation_cap, .. } => {
            argmin(scored.iter().filter(|s| s.violation <= *violation_cap))
                .map(|s| pick(s, true))
                .or_else(|| argmin(scored.iter()).map(|s| pick(s, false)))
        }
    }
}

/// Jobs whose score exceeds `OVERFIT_FACTOR` times the best score among
/// strictly smaller complexities.
pub fn overfit_jobs(rows: &[ReportRow], rule: &SelectionRule) -> Vec<String> {
    let scored = scores(rows, rule);
    scored
        .iter()
        .filter(|s| {
            scored
                .iter()
                .filter(|o| o.size < s.size)
                .map(|o| o.score)
                .reduce(f64::min)
                .is_some_and(|floor| s.score > OVERFIT_FACTOR * floor)
        })
        .map(|s| s.job_id.clone())
        .collect()
}

/// `best.json` content.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub sweep: String,
    pub rule: SelectionRule,
    pub best: Option<BestFit>,
    pub overfit: Vec<String>,
    pub jobs: Vec<String>,
}

impl SweepSummary {
    pub fn from_rows(sweep: &str, rule: SelectionRule, rows: &[ReportRow]) -> Self {
        let mut jobs: Vec<String> = Vec::new();
        for r in rows {
            if jobs.last() != Some(&r.job_id) && !jobs.contains(&r.job_id) {
                jobs.push(r.job_id.clone());
            }
        }
        Self {
            sweep: sweep.to_string(),
            best: select_best(rows, &rule),
            overfit: overfit_jobs(rows, &rule),
            rule,
            jobs,
        }
    }
}

/// Persistence hook for sweeps: completed jobs are loaded instead of refit.
pub trait JobStore<J> {
    fn load(&mut self, job_id: &str) -> Result<Option<J>, ReportError>;
    fn save(&mut self, job: &J) -> Result<(), ReportError>;
}

/// Store that remembers nothing.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoStore;

impl<J> JobStore<J> for NoStore {
    fn load(&mut self, _: &str) -> Result<Option<J>, ReportError> {
        Ok(None)
    }
    fn save(&mut self, _: &J) -> Result<(), ReportError> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelJob {
    pub report: FitReport,
    pub function: MmpsFunction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintJob {
    pub report: FitReport,
    pub region: Region,
}

pub trait HasReport {
    fn report(&self) -> &FitReport;
    fn report_mut(&mut self) -> &mut FitReport;
}

impl HasReport for ModelJob {
    fn report(&self) -> &FitReport {
        &self.report
    }
    fn report_mut(&mut self) -> &mut FitReport {
        &mut self.report
    }
}

impl HasReport for ConstraintJob {
    fn report(&self) -> &FitReport {
        &self.report
    }
    fn report_mut(&mut self) -> &mut FitReport {
        &mut self.report
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome<J> {
    pub jobs: Vec<J>,
    pub summary: SweepSummary,
}

impl<J: HasReport> SweepOutcome<J> {
    fn assemble(name: &str, rule: SelectionRule, mut jobs: Vec<J>) -> Self {
        let rows: Vec<ReportRow> = jobs.iter().flat_map(|j| j.report().rows()).collect();
        let summary = SweepSummary::from_rows(name, rule, &rows);
        for j in &mut jobs {
            let r = j.report_mut();
            r.overfit = summary.overfit.contains(&r.job_id);
        }
        Self { jobs, summary }
    }

    pub fn rows(&self) -> Vec<ReportRow> {
        self.jobs.iter().flat_map(|j| j.report().rows()).collect()
    }

    pub fn best(&self) -> Option<&J> {
        let id = &self.summary.best.as_ref()?.job_id;
        self.jobs.iter().find(|j| &j.report().job_id == id)
    }
}

pub fn model_job_id(component: usize, p_plus: usize, p_minus: usize) -> String {
    format!("model-c{component}-p{p_plus}-m{p_minus}")
}

pub fn constraint_job_id(approach: Approach, complexity: Complexity) -> String {
    let size = match complexity {
        Complexity::Mmps { p_plus, p_minus } => format!("p{p_plus}-m{p_minus}"),
        Complexity::Ellipsoid { n_e } => format!("ne{n_e}"),
        Complexity::Cone { n_c } => format!("nc{n_c}"),
    };
    format!(
        "{}-{}-{size}",
        complexity.family().to_string().to_lowercase(),
        approach.to_string().to_lowercase()
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSweepSpec {
    pub name: String,
    /// Complexity fields are overridden per job.
    pub template: ModelFitSpec,
    pub complexities: Vec<(usize, usize)>,
    pub selection_grid: String,
}

/// Fits every `(P+, P-)` in order of `P+ + P-`. Each fit also starts from
/// padded copies of all earlier fits it contains, so the training error is
/// non-increasing along nested complexities.
pub fn sweep_model(
    spec: &ModelSweepSpec,
    train: ScalarGrid<'_>,
    validation: &[ScalarGrid<'_>],
    bounds: &Bounds,
    n_state: usize,
    store: &mut dyn JobStore<ModelJob>,
) -> Result<SweepOutcome<ModelJob>, ReportError> {
    if spec.complexities.is_empty() {
        return Err(ReportError::EmptySweep);
    }
    let mut order = spec.complexities.clone();
    order.sort_by_key(|&(pp, pm)| (pp + pm, pp, pm));
    order.dedup();
    let mut jobs: Vec<ModelJob> = Vec::with_capacity(order.len());
    for &(pp, pm) in &order {
        let job_id = model_job_id(spec.template.component_index, pp, pm);
        if let Some(job) = store.load(&job_id)? {
            jobs.push(job);
            continue;
        }
        let mut fit_spec = spec.template.clone();
        fit_spec.p_plus = pp;
        fit_spec.p_minus = pm;
        let warm = jobs
            .iter()
            .enumerate()
            .filter(|(_, j)| {
                let (a, b) = (j.function.plus_terms().len(), j.function.minus_terms().len());
                a <= pp && b <= pm
            })
            .map(|(k, j)| {
                let seed = derive_seed(fit_spec.multistart.seed, &[pp as u64, pm as u64, k as u64]);
                nested_warm_start(&j.function, pp, pm, WARM_START_NOISE, seed)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let t0 = Instant::now();
        let fit = fit_model(&fit_spec, train.grid, bounds, train.targets, n_state, &warm)?;
        let mut metrics = vec![
            Metric::new(TRAIN_GRID, "error", fit.training_error),
            Metric::new(TRAIN_GRID, "cost", fit.best_cost),
        ];
        for v in validation {
            let e = validate_component(&fit.function, *v, fit_spec.eps_0)?;
            metrics.push(Metric::new(v.id, "error", e));
        }
        let job = ModelJob {
            report: FitReport {
                job_id,
                family: Family::Mmps,
                approach: None,
                complexity: Complexity::Mmps {
                    p_plus: pp,
                    p_minus: pm,
                },
                component: Some(fit_spec.component_index),
                metrics,
                seed: fit_spec.multistart.seed,
                n_starts: fit.log.len(),
                wall_time_s: t0.elapsed().as_secs_f64(),
                overfit: false,
                spec: serde_json::to_value(&fit_spec)?,
            },
            function: fit.function,
        };
        store.save(&job)?;
        jobs.push(job);
    }
    let rule = SelectionRule::Model {
        grid: spec.selection_grid.clone(),
    };
    Ok(SweepOutcome::assemble(&spec.name, rule, jobs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSweepSpec {
    pub name: String,
    /// Complexity is overridden per job.
    pub template: ConstraintFitSpec,
    pub complexities: Vec<Complexity>,
    pub selection_grid: String,
    #[serde(default = "default_cap")]
    pub violation_cap: f64,
}

fn default_cap() -> f64 {
    DEFAULT_VIOLATION_CAP
}

pub fn sweep_constraint(
    spec: &ConstraintSweepSpec,
    train: &Grid,
    validation: &[(&str, &Grid)],
    bounds: &Bounds,
    n_state: usize,
    store: &mut dyn JobStore<ConstraintJob>,
) -> Result<SweepOutcome<ConstraintJob>, ReportError> {
    if spec.complexities.is_empty() {
        return Err(ReportError::EmptySweep);
    }
    let mut jobs = Vec::with_capacity(spec.complexities.len());
    for &complexity in &spec.complexities {
        let job_id = constraint_job_id(spec.template.approach, complexity);
        if let Some(job) = store.load(&job_id)? {
            jobs.push(job);
            continue;
        }
        let mut fit_spec = spec.template.clone();
        fit_spec.complexity = complexity;
        let t0 = Instant::now();
        let fit = fit_constraint(&fit_spec, train, bounds, n_state)?;
        let mut metrics = vec![
            Metric::new(TRAIN_GRID, "inclusion", fit.training.inclusion),
            Metric::new(TRAIN_GRID, "violation", fit.training.violation),
            Metric::new(TRAIN_GRID, "objective", fit.objective),
        ];
        for (id, grid) in validation {
            let m = misclassification(&fit.region, grid)?;
            metrics.push(Metric::new(id, "inclusion", m.inclusion));
            metrics.push(Metric::new(id, "violation", m.violation));
        }
        let (seed, n_starts) = match fit_spec.approach {
            Approach::Boundary => (fit_spec.multistart.seed, fit.log.len()),
            Approach::Region => (fit_spec.pso.seed, 1),
        };
        let job = ConstraintJob {
            report: FitReport {
                job_id,
                family: complexity.family(),
                approach: Some(fit_spec.approach),
                complexity,
                component: None,
                metrics,
                seed,
                n_starts,
                wall_time_s: t0.elapsed().as_secs_f64(),
                overfit: false,
                spec: serde_json::to_value(&fit_spec)?,
            },
            region: fit.region,
        };
        store.save(&job)?;
        jobs.push(job);
    }
    let rule = SelectionRule::Constraint {
        grid: spec.selection_grid.clone(),
        violation_cap: spec.violation_cap,
    };
    Ok(SweepOutcome::assemble(&spec.name, rule, jobs))
}
