//! Run configuration, named grid profiles and the built-in reproduction plans.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hybrid_core::fit::{Approach, Complexity};
use hybrid_core::gridgen::GridKind;
use hybrid_core::optim::PsoConfig;
use hybrid_core::report::DEFAULT_VIOLATION_CAP;
use hybrid_core::vehicle::{Bounds, VehicleParams};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    #[default]
    Desk,
    Paper,
}

/// Vehicle parameters inline or as a path to a JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VehicleSource {
    Path(PathBuf),
    Inline(VehicleParams),
}

impl Default for VehicleSource {
    fn default() -> Self {
        VehicleSource::Inline(VehicleParams::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub scale: Scale,
    #[serde(default)]
    pub vehicle: VehicleSource,
    #[serde(default = "Bounds::vehicle_default")]
    pub bounds: Bounds,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub grids: Vec<GridSpec>,
    #[serde(default)]
    pub model_defaults: ModelDefaults,
    #[serde(default)]
    pub constraint_defaults: ConstraintDefaults,
    #[serde(default)]
    pub model_fits: Vec<ModelFitEntry>,
    #[serde(default)]
    pub constraint_fits: Vec<ConstraintFitEntry>,
    #[serde(default)]
    pub model_sweeps: Vec<ModelSweepEntry>,
    #[serde(default)]
    pub constraint_sweeps: Vec<ConstraintSweepEntry>,
    /// Grids used by `validate` when none are given on the command line.
    #[serde(default)]
    pub validation: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<GridKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_samp: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_rand: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_sim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_step: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_b: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dedup_radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feasible_only: Option<bool>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub members: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// A grid specification with every field settled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedGrid {
    pub id: String,
    pub kind: GridKind,
    pub n_samp: usize,
    pub n_rand: usize,
    pub n_sim: usize,
    pub n_step: usize,
    pub eps_b: f64,
    pub dedup_radius: f64,
    pub feasible_only: bool,
    pub members: Vec<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDefaults {
    #[serde(default = "default_gamma_m")]
    pub gamma_m: f64,
    #[serde(default = "one")]
    pub eps_0: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Falls back to the scale default.
    #[serde(default)]
    pub n_starts: Option<usize>,
    #[serde(default = "one")]
    pub init_scale: f64,
}

impl Default for ModelDefaults {
    fn default() -> Self {
        Self {
            gamma_m: default_gamma_m(),
            eps_0: 1.0,
            dt: default_dt(),
            n_starts: None,
            init_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintDefaults {
    #[serde(default = "default_gamma_c")]
    pub gamma_c: f64,
    #[serde(default = "default_constraint_eps")]
    pub eps_0: f64,
    #[serde(default)]
    pub n_starts: Option<usize>,
    #[serde(default = "one")]
    pub init_scale: f64,
    #[serde(default)]
    pub pso: PsoConfig,
}

impl Default for ConstraintDefaults {
    fn default() -> Self {
        Self {
            gamma_c: default_gamma_c(),
            eps_0: default_constraint_eps(),
            n_starts: None,
            init_scale: 1.0,
            pso: PsoConfig::default(),
        }
    }
}

fn default_gamma_m() -> f64 {
    1e-6
}
fn default_gamma_c() -> f64 {
    0.4
}
fn default_constraint_eps() -> f64 {
    1e-3
}
fn default_dt() -> f64 {
    0.01
}
fn one() -> f64 {
    1.0
}
fn default_cap() -> f64 {
    DEFAULT_VIOLATION_CAP
}
fn default_selection() -> String {
    "C".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFitEntry {
    pub id: String,
    pub component: usize,
    pub p_plus: usize,
    pub p_minus: usize,
    pub train: String,
    /// Replaces `dt * F_component` on every grid of this entry.
    #[serde(default)]
    pub target: Option<AffineTarget>,
    #[serde(default)]
    pub validation: Vec<String>,
    #[serde(default)]
    pub n_starts: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

/// `coefficients . z + offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineTarget {
    pub coefficients: Vec<f64>,
    pub offset: f64,
}

impl AffineTarget {
    pub fn eval(&self, z: &[f64]) -> f64 {
        self.coefficients.iter().zip(z).map(|(a, v)| a * v).sum::<f64>() + self.offset
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintFitEntry {
    pub id: String,
    pub approach: Approach,
    pub complexity: Complexity,
    pub train: String,
    #[serde(default)]
    pub validation: Vec<String>,
    #[serde(default)]
    pub n_starts: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSweepEntry {
    pub name: String,
    pub component: usize,
    pub train: String,
    #[serde(default)]
    pub validation: Vec<String>,
    /// `[P+, P-]` pairs.
    pub complexities: Vec<[usize; 2]>,
    /// Grid id whose error picks the winner.
    #[serde(default = "default_selection")]
    pub selection_grid: String,
    #[serde(default)]
    pub n_starts: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSweepEntry {
    pub name: String,
    pub approach: Approach,
    pub complexities: Vec<Complexity>,
    pub train: String,
    #[serde(default)]
    pub validation: Vec<String>,
    #[serde(default = "default_selection")]
    pub selection_grid: String,
    #[serde(default = "default_cap")]
    pub violation_cap: f64,
    #[serde(default)]
    pub n_starts: Option<usize>,
    #[serde(default)]
    pub pso_restarts: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        if let VehicleSource::Path(p) = &cfg.vehicle {
            let full = path.parent().unwrap_or(Path::new(".")).join(p);
            let text = std::fs::read_to_string(&full)
                .with_context(|| format!("reading vehicle parameters {}", full.display()))?;
            let params: VehicleParams = serde_json::from_str(&text)
                .with_context(|| format!("parsing vehicle parameters {}", full.display()))?;
            cfg.vehicle = VehicleSource::Inline(params);
        }
        Ok(cfg)
    }

    pub fn vehicle_params(&self) -> Result<VehicleParams> {
        match &self.vehicle {
            VehicleSource::Inline(p) => {
                p.validate()?;
                Ok(*p)
            }
            VehicleSource::Path(p) => bail!("vehicle parameters {} were not loaded", p.display()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        self.vehicle_params()?;
        let mut ids: Vec<&str> = self.grids.iter().map(|g| g.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            bail!("grid id {:?} is defined twice", w[0]);
        }
        let mut names: Vec<&str> = self
            .model_sweeps
            .iter()
            .map(|s| s.name.as_str())
            .chain(self.constraint_sweeps.iter().map(|s| s.name.as_str()))
            .collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            bail!("sweep name {:?} is used twice", w[0]);
        }
        for g in &self.grids {
            if g.profile.is_none() && g.kind.is_none() {
                bail!("grid {:?} needs a profile or a kind", g.id);
            }
        }
        Ok(())
    }

    /// The configured spec for `id`, or an implicit one when `id` names a profile.
    pub fn grid_spec(&self, id: &str) -> Result<GridSpec> {
        if let Some(g) = self.grids.iter().find(|g| g.id == id) {
            return Ok(g.clone());
        }
        if profile(id, self.scale).is_some() {
            return Ok(GridSpec {
                id: id.to_string(),
                profile: Some(id.to_string()),
                ..GridSpec::default()
            });
        }
        bail!("unknown grid {id:?}: not configured and not a profile")
    }

    pub fn model_starts(&self) -> usize {
        self.model_defaults.n_starts.unwrap_or(match self.scale {
            Scale::Desk => 20,
            Scale::Paper => 1000,
        })
    }

    pub fn constraint_starts(&self) -> usize {
        self.constraint_defaults.n_starts.unwrap_or(match self.scale {
            Scale::Desk => 10,
            Scale::Paper => 1000,
        })
    }
}

impl GridSpec {
    /// Overlays explicit fields on the profile (if any).
    pub fn resolve(&self, scale: Scale, default_seed: u64) -> Result<ResolvedGrid> {
        let base = match &self.profile {
            Some(name) => profile(name, scale).with_context(|| format!("unknown profile {name:?}"))?,
            None => GridSpec::default(),
        };
        let kind = self
            .kind
            .or(base.kind)
            .with_context(|| format!("grid {:?} has no kind", self.id))?;
        let members = if self.members.is_empty() { base.members } else { self.members.clone() };
        if kind == GridKind::C && members.is_empty() {
            bail!("combined grid {:?} lists no members", self.id);
        }
        Ok(ResolvedGrid {
            id: self.id.clone(),
            kind,
            n_samp: self.n_samp.or(base.n_samp).unwrap_or(6),
            n_rand: self.n_rand.or(base.n_rand).unwrap_or(7000),
            n_sim: self.n_sim.or(base.n_sim).unwrap_or(500),
            n_step: self.n_step.or(base.n_step).unwrap_or(1000),
            eps_b: self.eps_b.or(base.eps_b).unwrap_or(0.1),
            dedup_radius: self.dedup_radius.or(base.dedup_radius).unwrap_or(0.0),
            feasible_only: self.feasible_only.or(base.feasible_only).unwrap_or(false),
            members,
            seed: self.seed.unwrap_or(default_seed),
        })
    }
}

pub const PROFILE_NAMES: [&str; 15] = [
    "table3-train-U",
    "table3-train-R",
    "table3-train-S",
    "table3-train-T",
    "table3-val-U",
    "table3-val-R",
    "table3-val-S",
    "table3-val-T",
    "table3-val-C",
    "table3-ctrain-U",
    "table3-ctrain-R",
    "table3-ctrain-C",
    "table3-cval-U",
    "table3-cval-R",
    "table3-cval-C",
];

/// Named grid presets. Desk values shrink every size.
pub fn profile(name: &str, scale: Scale) -> Option<GridSpec> {
    let paper = scale == Scale::Paper;
    let pick = |p: usize, d: usize| Some(if paper { p } else { d });
    let model = |kind: GridKind| GridSpec {
        id: name.to_string(),
        kind: Some(kind),
        feasible_only: Some(true),
        ..GridSpec::default()
    };
    // Paper-scale radii bring the training grids near 7000 points.
    let rollout = |kind: GridKind, n_sim: (usize, usize)| GridSpec {
        n_sim: pick(n_sim.0, n_sim.1),
        n_step: pick(1000, 500),
        dedup_radius: Some(match (paper, kind) {
            (false, _) => 0.05,
            (true, GridKind::S) => 0.14,
            (true, _) => 0.12,
        }),
        ..model(kind)
    };
    let labeled = |kind: GridKind| GridSpec {
        id: name.to_string(),
        kind: Some(kind),
        feasible_only: Some(false),
        ..GridSpec::default()
    };
    let combined = |members: &[&str]| GridSpec {
        id: name.to_string(),
        kind: Some(GridKind::C),
        members: members.iter().map(|m| m.to_string()).collect(),
        ..GridSpec::default()
    };
    let spec = match name {
        "table3-train-U" => GridSpec { n_samp: pick(6, 4), ..model(GridKind::U) },
        "table3-train-R" => GridSpec { n_rand: pick(7000, 2100), ..model(GridKind::R) },
        "table3-train-S" => rollout(GridKind::S, (500, 12)),
        "table3-train-T" => rollout(GridKind::T, (300, 20)),
        "table3-val-U" => GridSpec { n_samp: pick(7, 5), ..model(GridKind::U) },
        "table3-val-R" => GridSpec { n_rand: pick(21000, 6000), ..model(GridKind::R) },
        "table3-val-S" => rollout(GridKind::S, (3000, 36)),
        "table3-val-T" => rollout(GridKind::T, (1200, 60)),
        "table3-val-C" => combined(&["table3-val-U", "table3-val-R", "table3-val-S", "table3-val-T"]),
        "table3-ctrain-U" => GridSpec { n_samp: pick(5, 4), ..labeled(GridKind::U) },
        "table3-ctrain-R" => GridSpec {
            n_rand: pick(15000, 2000),
            eps_b: Some(0.1),
            ..labeled(GridKind::B)
        },
        "table3-ctrain-C" => combined(&["table3-ctrain-U", "table3-ctrain-R"]),
        "table3-cval-U" => GridSpec { n_samp: pick(6, 5), ..labeled(GridKind::U) },
        "table3-cval-R" => GridSpec {
            n_rand: pick(45000, 6000),
            eps_b: Some(0.2),
            ..labeled(GridKind::B)
        },
        "table3-cval-C" => combined(&["table3-cval-U", "table3-cval-R"]),
        _ => return None,
    };
    Some(spec)
}

/// The full reproduction plan: every model and constraint sweep on the
/// named profiles.
pub fn reproduce_plan(scale: Scale, seed: u64) -> RunConfig {
    let paper = scale == Scale::Paper;
    let model_sizes: Vec<[usize; 2]> = if paper {
        (1..=8).flat_map(|p| (1..=8).map(move |m| [p, m])).collect()
    } else {
        vec![[1, 1], [2, 2], [3, 3], [4, 4], [6, 6]]
    };
    let validation: Vec<String> = ["U", "R", "S", "T", "C"]
        .iter()
        .map(|k| format!("table3-val-{k}"))
        .collect();
    let mut model_sweeps = Vec::new();
    for train in ["U", "R", "S", "T"] {
        for (component, name) in ["dvx", "dvy", "dr"].iter().enumerate() {
            model_sweeps.push(ModelSweepEntry {
                name: format!("model-{name}-{train}"),
                component,
                train: format!("table3-train-{train}"),
                validation: validation.clone(),
                complexities: model_sizes.clone(),
                selection_grid: "table3-val-C".into(),
                n_starts: None,
                seed: None,
            });
        }
    }
    let up_to = |n: usize| 1..=n;
    let (cones, mmps, ellipsoids, region_mmps, region_ellipsoids): (
        Vec<usize>,
        Vec<usize>,
        Vec<usize>,
        Vec<usize>,
        Vec<usize>,
    ) = if paper {
        (
            up_to(8).collect(),
            up_to(8).collect(),
            up_to(8).collect(),
            up_to(8).collect(),
            up_to(8).collect(),
        )
    } else {
        (up_to(6).collect(), vec![2, 4], vec![1, 2, 4], vec![2, 4], vec![1, 2])
    };
    let sweep = |name: &str, approach: Approach, complexities: Vec<Complexity>, n_starts: Option<usize>| {
        ConstraintSweepEntry {
            name: name.to_string(),
            approach,
            complexities,
            train: "table3-ctrain-C".into(),
            validation: vec!["table3-cval-C".into()],
            selection_grid: "table3-cval-C".into(),
            violation_cap: DEFAULT_VIOLATION_CAP,
            n_starts,
            pso_restarts: None,
            seed: None,
        }
    };
    let square = |v: &[usize]| -> Vec<Complexity> {
        v.iter()
            .map(|&p| Complexity::Mmps { p_plus: p, p_minus: p })
            .collect()
    };
    let ell = |v: &[usize]| -> Vec<Complexity> { v.iter().map(|&n_e| Complexity::Ellipsoid { n_e }).collect() };
    let cone_starts = if paper { None } else { Some(5) };
    let constraint_sweeps = vec![
        sweep(
            "cone-boundary",
            Approach::Boundary,
            cones.iter().map(|&n_c| Complexity::Cone { n_c }).collect(),
            cone_starts,
        ),
        sweep("mmps-boundary", Approach::Boundary, square(&mmps), None),
        sweep("mmps-region", Approach::Region, square(&region_mmps), None),
        sweep("ellipsoid-boundary", Approach::Boundary, ell(&ellipsoids), None),
        sweep("ellipsoid-region", Approach::Region, ell(&region_ellipsoids), None),
    ];
    RunConfig {
        seed,
        scale,
        vehicle: VehicleSource::default(),
        bounds: Bounds::vehicle_default(),
        workers: None,
        grids: Vec::new(),
        model_defaults: ModelDefaults::default(),
        constraint_defaults: ConstraintDefaults::default(),
        model_fits: Vec::new(),
        constraint_fits: Vec::new(),
        model_sweeps,
        constraint_sweeps,
        validation,
    }
}
