use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use hybrid_core::fit::{
    fit_constraint, fit_model, model_targets, ConstraintFitSpec, ModelFitSpec,
};
use hybrid_core::gridgen::{
    boundary_grid, combine, deduplicate, filter_feasible, random_grid, trajectory_grid,
    uniform_grid, Grid, GridGenConfig, GridKind, RolloutStart,
};
use hybrid_core::mmps::{MmpsFunction, MmpsVectorFunction};
use hybrid_core::optim::MultiStartConfig;
use hybrid_core::regions::{misclassification, Misclassification, Region};
use hybrid_core::report::{
    constraint_job_id, model_job_id, sweep_constraint, sweep_model, validate_component,
    write_report_csv, ConstraintJob, ConstraintSweepSpec, FitReport, HasReport, JobStore,
    Metric, ModelJob, ModelSweepSpec, ReportError, ScalarGrid, SweepSummary, TRAIN_GRID,
};
use hybrid_core::seeding::{derive_seed, tag_of};
use hybrid_core::vehicle::{VehicleModel, STATE_DIM};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{AffineTarget, ResolvedGrid, RunConfig};

/// One line of `grids/manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub spec: ResolvedGrid,
    /// Points produced by the generator (draws for boundary grids).
    pub raw_count: usize,
    /// Points left after thinning, before any feasibility filter.
    pub dedup_count: usize,
    /// Feasible share of the thinned points.
    pub feasible_ratio: f64,
    pub count: usize,
    pub file: String,
}

pub struct Workspace {
    pub cfg: RunConfig,
    pub out: PathBuf,
    model: VehicleModel,
    grids: HashMap<String, Grid>,
    manifest: Vec<ManifestEntry>,
    targets: HashMap<(String, usize), Vec<f64>>,
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(f)).with_context(|| format!("parsing {}", path.display()))
}

impl Workspace {
    pub fn new(cfg: RunConfig, out: PathBuf) -> Result<Self> {
        cfg.validate()?;
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        write_json(&out.join("config.json"), &cfg)?;
        let manifest_path = out.join("grids").join("manifest.json");
        let manifest = if manifest_path.exists() { read_json(&manifest_path)? } else { Vec::new() };
        Ok(Self {
            model: VehicleModel::new(cfg.vehicle_params()?),
            cfg,
            out,
            grids: HashMap::new(),
            manifest,
            targets: HashMap::new(),
        })
    }

    fn seed_for(&self, scope: &str, id: &str) -> u64 {
        derive_seed(self.cfg.seed, &[tag_of(scope), tag_of(id)])
    }

    pub fn manifest(&self) -> &[ManifestEntry] {
        &self.manifest
    }

    /// Builds (or reloads) grid `id` and its members.
    pub fn grid(&mut self, id: &str) -> Result<&Grid> {
        self.ensure_grid(id, &mut Vec::new())?;
        Ok(&self.grids[id])
    }

    fn ensure_grid(&mut self, id: &str, stack: &mut Vec<String>) -> Result<()> {
        if self.grids.contains_key(id) {
            return Ok(());
        }
        if stack.iter().any(|s| s == id) {
            bail!("grid {id:?} contains itself");
        }
        let spec = self
            .cfg
            .grid_spec(id)?
            .resolve(self.cfg.scale, self.seed_for("grid", id))?;
        stack.push(id.to_string());
        for m in &spec.members {
            self.ensure_grid(m, stack)?;
        }
        stack.pop();
        let file = format!("{}.csv", sanitize(id));
        let path = self.out.join("grids").join(&file);
        let cached = self.manifest.iter().any(|e| e.spec == spec) && path.exists();
        let grid = if cached {
            let f = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
            Grid::read_csv(BufReader::new(f), spec.kind).with_context(|| format!("reading {}", path.display()))?
        } else {
            let (grid, entry) = self.generate(&spec, file)?;
            fs::create_dir_all(path.parent().unwrap())?;
            let mut w = BufWriter::new(File::create(&path)?);
            grid.write_csv(&mut w)?;
            w.flush()?;
            self.manifest.retain(|e| e.spec.id != spec.id);
            self.manifest.push(entry);
            self.manifest.sort_by(|a, b| a.spec.id.cmp(&b.spec.id));
            write_json(&self.out.join("grids").join("manifest.json"), &self.manifest)?;
            grid
        };
        self.grids.insert(id.to_string(), grid);
        Ok(())
    }

    fn generate(&self, spec: &ResolvedGrid, file: String) -> Result<(Grid, ManifestEntry)> {
        let b = &self.cfg.bounds;
        let m = &self.model;
        let raw = match spec.kind {
            GridKind::U => uniform_grid(b, spec.n_samp)?,
            GridKind::R => random_grid(b, spec.n_rand, spec.seed)?,
            GridKind::B => boundary_grid(m, b, spec.n_rand, spec.eps_b, spec.seed)?,
            GridKind::S | GridKind::T => {
                let mut gc = GridGenConfig::with_bounds(b, STATE_DIM);
                gc.n_sim = spec.n_sim;
                gc.n_step = spec.n_step;
                gc.seed = spec.seed;
                gc.dt = self.cfg.model_defaults.dt;
                let start = if spec.kind == GridKind::S {
                    RolloutStart::SteadyState
                } else {
                    RolloutStart::Random
                };
                trajectory_grid(m, b, &gc, start)?
            }
            GridKind::C => {
                let members: Vec<&Grid> = spec.members.iter().map(|id| &self.grids[id]).collect();
                combine(&members)?
            }
        };
        let raw_count = match spec.kind {
            GridKind::C => raw.len(),
            _ => raw.meta.raw_count,
        };
        let thinned = deduplicate(&raw, b, spec.dedup_radius)?;
        let labeled = if thinned.is_labeled() { thinned } else { thinned.label(m, b) };
        let dedup_count = labeled.len();
        let feasible_ratio = labeled.feasible_ratio().unwrap_or(0.0);
        let grid = if spec.feasible_only { filter_feasible(labeled, m, b)? } else { labeled };
        let entry = ManifestEntry {
            spec: spec.clone(),
            raw_count,
            dedup_count,
            feasible_ratio,
            count: grid.len(),
            file,
        };
        Ok((grid, entry))
    }

    /// Column `component` of `dt * F` on grid `id`.
    pub fn targets(&mut self, id: &str, component: usize) -> Result<Vec<f64>> {
        if component >= STATE_DIM {
            bail!("component {component} out of range (state has {STATE_DIM} entries)");
        }
        let key = (id.to_string(), component);
        if !self.targets.contains_key(&key) {
            let dt = self.cfg.model_defaults.dt;
            self.grid(id)?;
            let rows = model_targets(&self.model, &self.grids[id], dt)
                .with_context(|| format!("model targets on grid {id:?} (model grids must be feasible-only)"))?;
            for c in 0..STATE_DIM {
                self.targets
                    .insert((id.to_string(), c), rows.iter().map(|r| r[c]).collect());
            }
        }
        Ok(self.targets[&key].clone())
    }

    fn entry_targets(&mut self, id: &str, component: usize, target: Option<&AffineTarget>) -> Result<Vec<f64>> {
        match target {
            None => self.targets(id, component),
            Some(t) => {
                let grid = self.grid(id)?;
                if t.coefficients.len() != grid.dim() {
                    bail!("target has {} coefficients for {}-dimensional points", t.coefficients.len(), grid.dim());
                }
                Ok(grid.points().map(|z| t.eval(z)).collect())
            }
        }
    }

    fn model_spec(&self, component: usize, pp: usize, pm: usize, train: &str, n_starts: Option<usize>, seed: u64) -> ModelFitSpec {
        let d = &self.cfg.model_defaults;
        ModelFitSpec {
            component_index: component,
            p_plus: pp,
            p_minus: pm,
            gamma_m: d.gamma_m,
            eps_0: d.eps_0,
            dt: d.dt,
            training_grid_id: train.to_string(),
            multistart: MultiStartConfig {
                n_starts: n_starts.unwrap_or_else(|| self.cfg.model_starts()),
                seed,
                init_scale: d.init_scale,
                ..MultiStartConfig::default()
            },
        }
    }

    fn constraint_spec(
        &self,
        entry_approach: hybrid_core::fit::Approach,
        complexity: hybrid_core::fit::Complexity,
        train: &str,
        n_starts: Option<usize>,
        pso_restarts: Option<usize>,
        seed: u64,
    ) -> ConstraintFitSpec {
        let d = &self.cfg.constraint_defaults;
        let mut pso = d.pso.clone();
        pso.seed = seed;
        if let Some(r) = pso_restarts {
            pso.restarts = r;
        }
        ConstraintFitSpec {
            approach: entry_approach,
            complexity,
            gamma_c: d.gamma_c,
            eps_0: d.eps_0,
            training_grid_id: train.to_string(),
            multistart: MultiStartConfig {
                n_starts: n_starts.unwrap_or_else(|| self.cfg.constraint_starts()),
                seed,
                init_scale: d.init_scale,
                ..MultiStartConfig::default()
            },
            pso,
        }
    }

    pub fn run_model_fits(&mut self) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        for entry in self.cfg.model_fits.clone() {
            let seed = entry.seed.unwrap_or_else(|| self.seed_for("fit", &entry.id));
            let spec = self.model_spec(entry.component, entry.p_plus, entry.p_minus, &entry.train, entry.n_starts, seed);
            let targets = self.entry_targets(&entry.train, entry.component, entry.target.as_ref())?;
            let t0 = Instant::now();
            self.grid(&entry.train)?;
            let fit = fit_model(&spec, &self.grids[&entry.train], &self.cfg.bounds, &targets, STATE_DIM, &[])
                .with_context(|| format!("model fit {:?}", entry.id))?;
            let wall = t0.elapsed().as_secs_f64();
            let mut metrics = vec![
                Metric { grid: TRAIN_GRID.into(), metric: "error".into(), value: fit.training_error },
                Metric { grid: TRAIN_GRID.into(), metric: "cost".into(), value: fit.best_cost },
            ];
            for v in &entry.validation {
                let t = self.entry_targets(v, entry.component, entry.target.as_ref())?;
                let g = ScalarGrid { id: v, grid: self.grid(v)?, targets: &t };
                metrics.push(Metric {
                    grid: v.clone(),
                    metric: "error".into(),
                    value: validate_component(&fit.function, g, spec.eps_0)?,
                });
            }
            let job = ModelJob {
                report: FitReport {
                    job_id: model_job_id(entry.component, entry.p_plus, entry.p_minus),
                    family: hybrid_core::fit::Family::Mmps,
                    approach: None,
                    complexity: hybrid_core::fit::Complexity::Mmps { p_plus: entry.p_plus, p_minus: entry.p_minus },
                    component: Some(entry.component),
                    metrics,
                    seed,
                    n_starts: fit.log.len(),
                    wall_time_s: wall,
                    overfit: false,
                    spec: serde_json::to_value(&spec)?,
                },
                function: fit.function,
            };
            let dir = self.out.join("fits");
            let path = dir.join(format!("{}.json", sanitize(&entry.id)));
            write_json(&path, &job)?;
            write_json(&dir.join(format!("{}.starts.json", sanitize(&entry.id))), &fit.log)?;
            written.push(path);
        }
        Ok(written)
    }

    pub fn run_constraint_fits(&mut self) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        for entry in self.cfg.constraint_fits.clone() {
            let seed = entry.seed.unwrap_or_else(|| self.seed_for("fit", &entry.id));
            let spec = self.constraint_spec(entry.approach, entry.complexity, &entry.train, entry.n_starts, None, seed);
            let t0 = Instant::now();
            self.grid(&entry.train)?;
            let fit = fit_constraint(&spec, &self.grids[&entry.train], &self.cfg.bounds, STATE_DIM)
                .with_context(|| format!("constraint fit {:?}", entry.id))?;
            let wall = t0.elapsed().as_secs_f64();
            let mut metrics = misclassification_metrics(TRAIN_GRID, &fit.training);
            metrics.push(Metric { grid: TRAIN_GRID.into(), metric: "objective".into(), value: fit.objective });
            for v in &entry.validation {
                let m = misclassification(&fit.region, self.grid(v)?)?;
                metrics.extend(misclassification_metrics(v, &m));
            }
            let job = ConstraintJob {
                report: FitReport {
                    job_id: constraint_job_id(entry.approach, entry.complexity),
                    family: entry.complexity.family(),
                    approach: Some(entry.approach),
                    complexity: entry.complexity,
                    component: None,
                    metrics,
                    seed,
                    n_starts: fit.log.len(),
                    wall_time_s: wall,
                    overfit: false,
                    spec: serde_json::to_value(&spec)?,
                },
                region: fit.region,
            };
            let dir = self.out.join("fits");
            let path = dir.join(format!("{}.json", sanitize(&entry.id)));
            write_json(&path, &job)?;
            write_json(&dir.join(format!("{}.starts.json", sanitize(&entry.id))), &fit.log)?;
            written.push(path);
        }
        Ok(written)
    }

    pub fn run_sweeps(&mut self) -> Result<Vec<SweepSummary>> {
        let mut summaries = Vec::new();
        for entry in self.cfg.model_sweeps.clone() {
            let seed = entry.seed.unwrap_or_else(|| self.seed_for("sweep", &entry.name));
            let template = self.model_spec(entry.component, 1, 1, &entry.train, entry.n_starts, seed);
            let spec = ModelSweepSpec {
                name: entry.name.clone(),
                template,
                complexities: entry.complexities.iter().map(|c| (c[0], c[1])).collect(),
                selection_grid: entry.selection_grid.clone(),
            };
            if !entry.validation.contains(&entry.selection_grid) {
                bail!("sweep {:?}: selection grid {:?} is not among its validation grids", entry.name, entry.selection_grid);
            }
            let train_t = self.targets(&entry.train, entry.component)?;
            let mut val_t = Vec::new();
            for v in &entry.validation {
                val_t.push(self.targets(v, entry.component)?);
            }
            for id in entry.validation.iter().chain([&entry.train]) {
                self.grid(id)?;
            }
            let train = ScalarGrid { id: TRAIN_GRID, grid: &self.grids[&entry.train], targets: &train_t };
            let validation: Vec<ScalarGrid> = entry
                .validation
                .iter()
                .zip(&val_t)
                .map(|(id, t)| ScalarGrid { id, grid: &self.grids[id], targets: t })
                .collect();
            let dir = self.out.join("sweeps").join(sanitize(&entry.name));
            let mut store = FileStore::new(dir.join("jobs"));
            let outcome = sweep_model(&spec, train, &validation, &self.cfg.bounds, STATE_DIM, &mut store)
                .with_context(|| format!("model sweep {:?}", entry.name))?;
            finish_sweep(&dir, &outcome.jobs, &outcome.summary)?;
            summaries.push(outcome.summary);
        }
        for entry in self.cfg.constraint_sweeps.clone() {
            let seed = entry.seed.unwrap_or_else(|| self.seed_for("sweep", &entry.name));
            let first = *entry
                .complexities
                .first()
                .with_context(|| format!("sweep {:?} lists no complexities", entry.name))?;
            let template = self.constraint_spec(entry.approach, first, &entry.train, entry.n_starts, entry.pso_restarts, seed);
            let spec = ConstraintSweepSpec {
                name: entry.name.clone(),
                template,
                complexities: entry.complexities.clone(),
                selection_grid: entry.selection_grid.clone(),
                violation_cap: entry.violation_cap,
            };
            if !entry.validation.contains(&entry.selection_grid) {
                bail!("sweep {:?}: selection grid {:?} is not among its validation grids", entry.name, entry.selection_grid);
            }
            for id in entry.validation.iter().chain([&entry.train]) {
                self.grid(id)?;
            }
            let validation: Vec<(&str, &Grid)> = entry
                .validation
                .iter()
                .map(|id| (id.as_str(), &self.grids[id]))
                .collect();
            let dir = self.out.join("sweeps").join(sanitize(&entry.name));
            let mut store = FileStore::new(dir.join("jobs"));
            let outcome = sweep_constraint(
                &spec,
                &self.grids[&entry.train],
                &validation,
                &self.cfg.bounds,
                STATE_DIM,
                &mut store,
            )
            .with_context(|| format!("constraint sweep {:?}", entry.name))?;
            finish_sweep(&dir, &outcome.jobs, &outcome.summary)?;
            summaries.push(outcome.summary);
        }
        Ok(summaries)
    }
}

fn misclassification_metrics(grid: &str, m: &Misclassification) -> Vec<Metric> {
    vec![
        Metric { grid: grid.into(), metric: "inclusion".into(), value: m.inclusion },
        Metric { grid: grid.into(), metric: "violation".into(), value: m.violation },
    ]
}

fn finish_sweep<J: HasReport + Serialize + DeserializeOwned>(dir: &Path, jobs: &[J], summary: &SweepSummary) -> Result<()> {
    // Overfit flags are only known once every job is in.
    let mut store = FileStore::new(dir.join("jobs"));
    for j in jobs {
        store.save(j)?;
    }
    let rows: Vec<_> = jobs.iter().flat_map(|j| j.report().rows()).collect();
    let mut w = BufWriter::new(File::create(dir.join("report.csv"))?);
    write_report_csv(&mut w, &rows)?;
    w.flush()?;
    write_json(&dir.join("best.json"), summary)
}

/// Completed sweep jobs as `jobs/<job_id>.json`.
pub struct FileStore {
    dir: PathBuf,
}

impl FileStore {
    pub fn new(dir: PathBuf) -> Self {
        Self { dir }
    }

    fn path(&self, job_id: &str) -> PathBuf {
        self.dir.join(format!("{}.json", sanitize(job_id)))
    }
}

impl<J: HasReport + Serialize + DeserializeOwned> JobStore<J> for FileStore {
    fn load(&mut self, job_id: &str) -> Result<Option<J>, ReportError> {
        let path = self.path(job_id);
        if !path.exists() {
            return Ok(None);
        }
        let f = File::open(path)?;
        Ok(Some(serde_json::from_reader(BufReader::new(f))?))
    }

    fn save(&mut self, job: &J) -> Result<(), ReportError> {
        fs::create_dir_all(&self.dir)?;
        let path = self.path(&job.report().job_id);
        let tmp = path.with_extension("json.tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            serde_json::to_writer_pretty(&mut w, job)?;
            writeln!(w)?;
            w.flush()?;
        }
        fs::rename(tmp, path)?;
        Ok(())
    }
}

/// Keeps file names portable.
pub fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect()
}

/// A model loaded for validation: a full vector function or one component.
pub enum LoadedModel {
    Vector(MmpsVectorFunction),
    Component(usize, MmpsFunction),
}

pub fn load_model(path: &Path, component: Option<usize>) -> Result<LoadedModel> {
    let value: serde_json::Value = read_json(path)?;
    if value.get("components").is_some() {
        return Ok(LoadedModel::Vector(serde_json::from_value(value)?));
    }
    if value.get("report").is_some() {
        let job: ModelJob = serde_json::from_value(value)?;
        let c = component
            .or(job.report.component)
            .context("model job does not name its component")?;
        return Ok(LoadedModel::Component(c, job.function));
    }
    let f: MmpsFunction = serde_json::from_value(value)
        .with_context(|| format!("{} is not a model file", path.display()))?;
    let c = component.context("a single MMPS function needs --component")?;
    Ok(LoadedModel::Component(c, f))
}

pub fn load_region(path: &Path) -> Result<Region> {
    let value: serde_json::Value = read_json(path)?;
    if value.get("report").is_some() {
        let job: ConstraintJob = serde_json::from_value(value)?;
        return Ok(job.region);
    }
    serde_json::from_value(value).with_context(|| format!("{} is not a region file", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRow {
    pub grid: String,
    pub component: Option<usize>,
    pub metric: String,
    pub value: f64,
}

impl Workspace {
    pub fn validate_model(&mut self, model: &LoadedModel, grids: &[String]) -> Result<Vec<ValidationRow>> {
        let eps_0 = self.cfg.model_defaults.eps_0;
        let pairs: Vec<(usize, &MmpsFunction)> = match model {
            LoadedModel::Vector(v) => v.components.iter().enumerate().collect(),
            LoadedModel::Component(c, f) => vec![(*c, f)],
        };
        let mut rows = Vec::new();
        for id in grids {
            for &(c, f) in &pairs {
                let t = self.targets(id, c)?;
                let g = ScalarGrid { id, grid: self.grid(id)?, targets: &t };
                rows.push(ValidationRow {
                    grid: id.clone(),
                    component: Some(c),
                    metric: "error".into(),
                    value: validate_component(f, g, eps_0)?,
                });
            }
        }
        Ok(rows)
    }

    pub fn validate_region(&mut self, region: &Region, grids: &[String]) -> Result<Vec<ValidationRow>> {
        let mut rows = Vec::new();
        for id in grids {
            let m = misclassification(region, self.grid(id)?)?;
            for (metric, value) in [("inclusion", m.inclusion), ("violation", m.violation)] {
                rows.push(ValidationRow { grid: id.clone(), component: None, metric: metric.into(), value });
            }
        }
        Ok(rows)
    }

    /// Combines the winning component of each model sweep trained on
    /// `train` into one vector function.
    pub fn best_model(&self, summaries: &[SweepSummary], train: &str) -> Result<Option<MmpsVectorFunction>> {
        let mut components: Vec<Option<MmpsFunction>> = vec![None; STATE_DIM];
        for entry in self.cfg.model_sweeps.iter().filter(|e| e.train == train) {
            let Some(best) = summaries
                .iter()
                .find(|s| s.sweep == entry.name)
                .and_then(|s| s.best.as_ref())
            else {
                continue;
            };
            let path = self
                .out
                .join("sweeps")
                .join(sanitize(&entry.name))
                .join("jobs")
                .join(format!("{}.json", sanitize(&best.job_id)));
            let job: ModelJob = read_json(&path)?;
            components[entry.component] = Some(job.function);
        }
        if components.iter().any(Option::is_none) {
            return Ok(None);
        }
        Ok(Some(MmpsVectorFunction::new(components.into_iter().flatten().collect())?))
    }
}
