//! Command-line pipeline: scene and data generation, pose sampling,
//! training, evaluation, tracking and benchmarking.

pub mod commands;
pub mod config;
pub mod error;

use std::path::{Path, PathBuf};

use poseinn::geometry::Pose;

pub use config::PipelineConfig;
pub use error::{CliError, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Verb {
    GenScene,
    GenData,
    SamplePoses,
    Train { resume: bool },
    Eval,
    Track { ekf: bool, odom: Option<PathBuf>, odom_only: bool, init: Option<Pose> },
    Bench { frames: Option<usize> },
}

/// Options shared by all verbs.
#[derive(Clone, Debug, PartialEq)]
pub struct Options {
    pub out: PathBuf,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
}

/// Effective configuration: `--config`, else the copy saved in the output
/// directory by an earlier verb, else defaults; `--seed` overrides the root seed.
pub fn resolve_config(opts: &Options) -> Result<PipelineConfig> {
    let saved = opts.out.join(commands::CONFIG_FILE);
    let mut cfg = match &opts.config {
        Some(p) => PipelineConfig::load(p)?,
        None if saved.exists() => PipelineConfig::load(&saved)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn save_config(dir: &Path, cfg: &PipelineConfig) -> Result<()> {
    let path = dir.join(commands::CONFIG_FILE);
    std::fs::write(&path, cfg.to_toml()?).map_err(|e| CliError::io(&path, e))
}

/// Run one verb; returns the summary lines to print.
pub fn execute(opts: &Options, verb: &Verb) -> Result<Vec<String>> {
    let cfg = resolve_config(opts)?;
    let _lock = commands::OutputLock::acquire(&opts.out)?;
    let dir = opts.out.as_path();
    if matches!(verb, Verb::GenScene | Verb::GenData | Verb::SamplePoses | Verb::Train { .. }) {
        save_config(dir, &cfg)?;
    }
    match verb {
        Verb::GenScene => commands::gen_scene(dir, &cfg),
        Verb::GenData => commands::gen_data(dir, &cfg),
        Verb::SamplePoses => commands::sample(dir, &cfg),
        Verb::Train { resume } => commands::train(dir, &cfg, *resume),
        Verb::Eval => commands::eval(dir, &cfg),
        Verb::Track { ekf, odom, odom_only, init } => commands::track(
            dir,
            &cfg,
            &commands::TrackOptions { ekf: *ekf, odom: odom.clone(), odom_only: *odom_only, init: *init },
        ),
        Verb::Bench { frames } => commands::bench(dir, &cfg, *frames),
    }
}
