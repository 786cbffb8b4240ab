use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use poseinn::geometry::Pose;
use poseinn_cli::{execute, CliError, Options, Verb};

#[derive(Parser)]
#[command(name = "poseinn", version, about = "Camera pose posteriors from images with an invertible network")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    verb: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline config (TOML). Defaults to OUT/config.toml when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory shared by all verbs.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Worker threads. More than one voids bitwise reproducibility.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the toy scene.
    GenScene,
    /// Render train and test splits along trajectories.
    GenData,
    /// Sample and render synthetic training poses.
    SamplePoses,
    /// Train the model and write a checkpoint and loss curve.
    Train {
        /// Continue from OUT/model.ckpt.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate on the test split.
    Eval,
    /// Sequential localization over the test split.
    Track {
        /// Fuse with odometry through the EKF.
        #[arg(long)]
        ekf: bool,
        /// Odometry file (tab-separated, see README).
        #[arg(long)]
        odom: Option<PathBuf>,
        /// Skip the images and integrate odometry only.
        #[arg(long)]
        odom_only: bool,
        /// Initial pose `x,y,heading_rad`; defaults to the first test pose.
        #[arg(long, value_parser = parse_pose)]
        init: Option<Pose>,
    },
    /// Localization throughput.
    Bench {
        #[arg(long)]
        frames: Option<usize>,
    },
}

fn parse_pose(s: &str) -> Result<Pose, String> {
    let v: Vec<f64> = s.split(',').map(|t| t.trim().parse::<f64>().map_err(|e| e.to_string())).collect::<Result<_, _>>()?;
    match v.as_slice() {
        [x, y, h] if v.iter().all(|x| x.is_finite()) => Ok(Pose::se2(*x, *y, *h)),
        _ => Err("expected x,y,heading".into()),
    }
}

fn run() -> Result<Vec<String>, CliError> {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            e.exit()
        }
        Err(e) => return Err(CliError::usage(e.to_string().lines().next().unwrap_or("bad arguments").to_string())),
    };
    let c = cli.common;
    if c.threads == 0 {
        return Err(CliError::usage("--threads must be at least 1"));
    }
    if c.threads > 1 {
        log::warn!("--threads {} > 1: outputs are no longer guaranteed bitwise reproducible", c.threads);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(c.threads)
        .build_global()
        .map_err(|e| CliError::usage(e.to_string()))?;
    let verb = match cli.verb {
        Command::GenScene => Verb::GenScene,
        Command::GenData => Verb::GenData,
        Command::SamplePoses => Verb::SamplePoses,
        Command::Train { resume } => Verb::Train { resume },
        Command::Eval => Verb::Eval,
        Command::Track { ekf, odom, odom_only, init } => Verb::Track { ekf, odom, odom_only, init },
        Command::Bench { frames } => Verb::Bench { frames },
    };
    execute(&Options { out: c.out, config: c.config, seed: c.seed }, &verb)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("POSEINN_LOG", "warn")).init();
    match run() {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(if e.code == "E_USAGE" { 2 } else { 1 })
        }
    }
}
