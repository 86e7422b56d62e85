//! Batch front-end: grid generation, MMPS model fits, constraint fits,
//! validation, complexity sweeps and full reproduction runs.

mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use config::{reproduce_plan, RunConfig, Scale, PROFILE_NAMES};
use run::{load_model, load_region, write_json, Workspace};

#[derive(Debug, Parser)]
#[command(name = "hybridize", version, about)]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the config, then to all cores.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Grid and start-count presets; overrides the config.
    #[arg(long, global = true, value_enum)]
    scale: Option<Scale>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate grids with a manifest of counts and feasible ratios.
    Grid {
        /// Named preset to build instead of (or besides) the configured grids.
        #[arg(long)]
        profile: Vec<String>,
    },
    /// Run every entry of `model_fits`.
    FitModel,
    /// Run every entry of `constraint_fits`.
    FitConstraint,
    /// Evaluate a model or region file on validation grids.
    Validate {
        /// Model file: vector function, fit job or single function
        #[arg(long, conflicts_with = "region", required_unless_present = "region")]
        model: Option<PathBuf>,
        /// Region file: constraint job or bare region
        #[arg(long)]
        region: Option<PathBuf>,
        /// Component index for single-function model files.
        #[arg(long)]
        component: Option<usize>,
        /// Grid ids; defaults to the config's `validation` list.
        #[arg(long)]
        grid: Vec<String>,
    },
    /// Run every configured sweep, resuming completed jobs.
    Sweep,
    /// Generate all grids and run every sweep of the reproduction plan.
    Reproduce,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Grid { .. } => "grid",
            Command::FitModel => "fit-model",
            Command::FitConstraint => "fit-constraint",
            Command::Validate { .. } => "validate",
            Command::Sweep => "sweep",
            Command::Reproduce => "reproduce",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command.name();
    match execute(cli) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let causes: Vec<String> = e.chain().skip(1).map(|c| c.to_string()).collect();
            let body = json!({ "error": { "command": name, "message": e.to_string(), "causes": causes } });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match (&cli.config, &cli.command) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Command::Reproduce) => reproduce_plan(cli.scale.unwrap_or_default(), cli.seed.unwrap_or(0)),
        (None, Command::Grid { profile }) if !profile.is_empty() => {
            let mut c = reproduce_plan(cli.scale.unwrap_or_default(), cli.seed.unwrap_or(0));
            c.model_sweeps.clear();
            c.constraint_sweeps.clear();
            c.validation.clear();
            c
        }
        (None, cmd) => bail!("{} needs --config", cmd.name()),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(scale) = cli.scale {
        cfg.scale = scale;
    }
    if let Some(w) = cli.workers {
        cfg.workers = Some(w);
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<serde_json::Value> {
    let cfg = load_config(&cli)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cfg.workers {
        if w == 0 {
            bail!("--workers must be at least 1");
        }
        pool = pool.num_threads(w);
    }
    let pool = pool.build().context("building worker pool")?;
    let out = cli.out.clone();
    pool.install(move || dispatch(cli.command, cfg, out))
}

fn dispatch(command: Command, cfg: RunConfig, out: PathBuf) -> Result<serde_json::Value> {
    let t0 = Instant::now();
    let mut ws = Workspace::new(cfg, out)?;
    let value = match command {
        Command::Grid { profile } => {
            for p in &profile {
                if !PROFILE_NAMES.contains(&p.as_str()) {
                    bail!("unknown profile {p:?}; known: {}", PROFILE_NAMES.join(", "));
                }
            }
            let ids: Vec<String> = ws
                .cfg
                .grids
                .iter()
                .map(|g| g.id.clone())
                .chain(profile)
                .collect();
            for id in &ids {
                ws.grid(id)?;
            }
            json!({ "grids": ws.manifest() })
        }
        Command::FitModel => {
            if ws.cfg.model_fits.is_empty() {
                bail!("config has no model_fits");
            }
            json!({ "fits": ws.run_model_fits()? })
        }
        Command::FitConstraint => {
            if ws.cfg.constraint_fits.is_empty() {
                bail!("config has no constraint_fits");
            }
            json!({ "fits": ws.run_constraint_fits()? })
        }
        Command::Validate { model, region, component, grid } => {
            let grids = if grid.is_empty() { ws.cfg.validation.clone() } else { grid };
            if grids.is_empty() {
                bail!("no validation grids: pass --grid or set `validation` in the config");
            }
            let (source, rows) = match (model, region) {
                (Some(path), _) => {
                    let m = load_model(&path, component)?;
                    (path, ws.validate_model(&m, &grids)?)
                }
                (None, Some(path)) => {
                    let r = load_region(&path)?;
                    (path, ws.validate_region(&r, &grids)?)
                }
                (None, None) => bail!("validate needs --model or --region"),
            };
            let stem = source.file_stem().and_then(|s| s.to_str()).unwrap_or("input");
            let dest = ws.out.join("validation").join(format!("{}.json", run::sanitize(stem)));
            let value = json!({ "source": source, "results": rows });
            write_json(&dest, &value)?;
            value
        }
        Command::Sweep => {
            if ws.cfg.model_sweeps.is_empty() && ws.cfg.constraint_sweeps.is_empty() {
                bail!("config has no sweeps");
            }
            json!({ "sweeps": ws.run_sweeps()? })
        }
        Command::Reproduce => reproduce(&mut ws)?,
    };
    write_json(
        &ws.out.join("timing.json"),
        &json!({ "wall_time_s": t0.elapsed().as_secs_f64() }),
    )?;
    Ok(value)
}

fn reproduce(ws: &mut Workspace) -> Result<serde_json::Value> {
    let grid_ids: Vec<String> = ws
        .cfg
        .grids
        .iter()
        .map(|g| g.id.clone())
        .chain(ws.cfg.validation.iter().cloned())
        .collect();
    for id in &grid_ids {
        ws.grid(id)?;
    }
    let summaries = ws.run_sweeps()?;
    let mut trains: Vec<String> = ws.cfg.model_sweeps.iter().map(|s| s.train.clone()).collect();
    trains.dedup();
    let mut models = Vec::new();
    for train in trains {
        let Some(model) = ws.best_model(&summaries, &train)? else {
            continue;
        };
        let name = run::sanitize(&train);
        write_json(&ws.out.join("models").join(format!("{name}.json")), &model)?;
        let grids = ws.cfg.validation.clone();
        let rows = ws.validate_model(&run::LoadedModel::Vector(model), &grids)?;
        write_json(&ws.out.join("validation").join(format!("{name}.json")), &rows)?;
        models.push(json!({ "train": train, "validation": rows }));
    }
    let summary = json!({
        "scale": ws.cfg.scale,
        "seed": ws.cfg.seed,
        "grids": ws.manifest(),
        "sweeps": summaries,
        "models": models,
    });
    write_json(&ws.out.join("summary.json"), &summary)?;
    Ok(summary)
}
