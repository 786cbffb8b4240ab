//! Pipeline verbs. Every verb reads and writes inside one output directory.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::Matrix3;
use poseinn::checkpoint::{load_checkpoint, save_checkpoint};
use poseinn::dataset::{Manifest, Provenance, Sample};
use poseinn::geometry::{wrap_angle, Pose, PoseDim};
use poseinn::image::Image;
use poseinn::localizer::{
    ekf_fuse, localize, sequential_localize, track_row, variance_filter, EkfState, OdometryStep, PosePosterior, TRACK_HEADER,
};
use poseinn::metrics::ErrorStats;
use poseinn::model::PoseInnModel;
use poseinn::sampler::sample_poses;
use poseinn::scene::{generate_trajectory, CameraIntrinsics, Scene};
use poseinn::trainer::{LossReport, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::error::{CliError, Result};

pub const CONFIG_FILE: &str = "config.toml";
pub const SCENE_FILE: &str = "scene.toml";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const ODOMETRY_FILE: &str = "test.odom.tsv";
pub const SAMPLING_REPORT: &str = "sampling_report.toml";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSS_FILE: &str = "loss.tsv";
pub const EVAL_FRAMES: &str = "eval_frames.tsv";
pub const EVAL_REPORT: &str = "eval_report.toml";
pub const TRACK_FILE: &str = "track.tsv";
pub const TRACK_REPORT: &str = "track_report.toml";
const LOCK_FILE: &str = ".poseinn.lock";

pub const ODOMETRY_HEADER: &str = "forward\tlateral\tdtheta\tvar_forward\tvar_lateral\tvar_dtheta";

/// Exclusive claim on an output directory, released on drop.
pub struct OutputLock(PathBuf);

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::new(
                "E_LOCKED",
                format!("{} exists; another run is using this directory (delete the file if that run crashed)", path.display()),
            )),
            Err(e) => Err(CliError::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_toml(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| CliError::new("E_IO", e.to_string()))?;
    write_text(path, &text)
}

fn load_scene(dir: &Path) -> Result<Scene> {
    let path = dir.join(SCENE_FILE);
    if !path.exists() {
        return Err(CliError::new("E_SCENE", format!("{} not found; run gen-scene first", path.display())));
    }
    Ok(Scene::load(&path)?)
}

fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(CliError::new("E_DATASET", format!("{} not found; run gen-data first", path.display())));
    }
    Ok(Manifest::load(&path)?)
}

fn provenance(cfg: &PipelineConfig) -> Result<Provenance> {
    Ok(Provenance { seed: cfg.seed, config_hash: cfg.hash()? })
}

/// Render `poses`; noisy renders use one rng stream per image so the result
/// does not depend on the thread count.
fn render_all(scene: &Scene, intr: &CameraIntrinsics, poses: &[Pose], noise: f64, seed: u64) -> Result<Vec<Image>> {
    poses
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            if noise > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                scene.render_noisy(intr, p, noise, &mut rng)
            } else {
                scene.render(intr, p)
            }
        })
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(CliError::from)
}

fn samples(poses: &[Pose], images: Vec<Image>, synthetic: bool) -> Vec<Sample> {
    poses.iter().zip(images).map(|(p, image)| Sample { pose: *p, image, synthetic }).collect()
}

pub fn gen_scene(dir: &Path, cfg: &PipelineConfig) -> Result<Vec<String>> {
    let scene = Scene::generate(&cfg.scene, cfg.stage_seed("scene", 0))?;
    scene.save(&dir.join(SCENE_FILE))?;
    Ok(vec![format!("scene: {} primitives, seed {} -> {}", scene.primitives.len(), scene.seed, dir.join(SCENE_FILE).display())])
}

fn odometry_rows(poses: &[Pose], cfg: &PipelineConfig) -> Result<String> {
    let sm = cfg.data.odometry_sigma_m;
    let sr = cfg.data.odometry_sigma_deg.to_radians();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stage_seed("odometry", 0));
    let nm = Normal::new(0.0, sm).map_err(|e| CliError::config(e.to_string()))?;
    let nr = Normal::new(0.0, sr).map_err(|e| CliError::config(e.to_string()))?;
    let mut out = String::from(ODOMETRY_HEADER);
    out.push('\n');
    for w in poses.windows(2) {
        let t = OdometryStep::between(&w[0], &w[1], [sm * sm, sm * sm, sr * sr]);
        let (f, l, d) = (t.forward + nm.sample(&mut rng), t.lateral + nm.sample(&mut rng), t.dtheta + nr.sample(&mut rng));
        out.push_str(&format!("{f:e}\t{l:e}\t{d:e}\t{:e}\t{:e}\t{:e}\n", t.noise[0], t.noise[1], t.noise[2]));
    }
    Ok(out)
}

pub fn read_odometry(path: &Path) -> Result<Vec<OdometryStep>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(ODOMETRY_HEADER) {
        return Err(CliError::new("E_TRACK", format!("{}: missing odometry header", path.display())));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = || CliError::new("E_TRACK", format!("{} line {}: expected 6 numbers", path.display(), i + 2));
            let v: Vec<f64> = line.split('\t').map(|t| t.trim().parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
            if v.len() != 6 {
                return Err(bad());
            }
            let step = OdometryStep { forward: v[0], lateral: v[1], dtheta: v[2], noise: [v[3], v[4], v[5]] };
            step.validate()?;
            Ok(step)
        })
        .collect()
}

pub fn gen_data(dir: &Path, cfg: &PipelineConfig) -> Result<Vec<String>> {
    let t0 = Instant::now();
    let scene = load_scene(dir)?;
    let intr = cfg.data.intrinsics;
    let train = generate_trajectory(&scene, &cfg.data.train)?;
    let test = generate_trajectory(&scene, &cfg.data.test)?;
    let noise_seed = cfg.stage_seed("render", 0);
    let train_images = render_all(&scene, &intr, &train, cfg.data.image_noise, noise_seed)?;
    let test_images = render_all(&scene, &intr, &test, cfg.data.image_noise, noise_seed ^ 1)?;
    let prov = provenance(cfg)?;
    let mut manifest = Manifest::new(SCENE_FILE, cfg.model.pose_dim, intr, prov.clone());
    manifest.add_split(dir, "train", &samples(&train, train_images, false), prov.clone())?;
    manifest.add_split(dir, "test", &samples(&test, test_images, false), prov)?;
    manifest.save(&dir.join(MANIFEST_FILE))?;
    write_text(&dir.join(ODOMETRY_FILE), &odometry_rows(&test, cfg)?)?;

    let check = Manifest::load(&dir.join(MANIFEST_FILE))?;
    let counts = (check.load_split(dir, "train")?.len(), check.load_split(dir, "test")?.len());
    Ok(vec![format!(
        "data: {} train + {} test images ({}x{}) in {:.2?}",
        counts.0,
        counts.1,
        intr.width,
        intr.height,
        t0.elapsed()
    )])
}

#[derive(Serialize)]
struct SamplingReport {
    seed: u64,
    target: usize,
    accepted: usize,
    attempts: usize,
    acceptance_rate: f64,
    rejected_rule1: usize,
    rejected_rule2: usize,
    rejected_rule3: usize,
}

pub fn sample(dir: &Path, cfg: &PipelineConfig) -> Result<Vec<String>> {
    let t0 = Instant::now();
    let mut manifest = load_manifest(dir)?;
    if cfg.sampling.target == 0 {
        return Ok(vec!["sample-poses: target 0, dataset unchanged".into()]);
    }
    let scene = load_scene(dir)?;
    let train: Vec<Pose> = manifest.load_split(dir, "train")?.into_iter().map(|s| s.pose).collect();
    let cloud = scene.export_point_cloud(cfg.data.cloud_points, &mut ChaCha8Rng::seed_from_u64(cfg.stage_seed("cloud", 0)))?;
    let scfg = cfg.seeded_sampling();
    let (sampled, report) = sample_poses(&scene.bounds, &cloud, &train, &manifest.intrinsics, &scfg)?;
    let poses: Vec<Pose> = sampled.iter().map(|s| s.pose).collect();
    let images = render_all(&scene, &manifest.intrinsics, &poses, cfg.data.image_noise, cfg.stage_seed("render", 1))?;
    manifest.splits.retain(|s| s.name != "synthetic");
    manifest.add_split(dir, "synthetic", &samples(&poses, images, true), provenance(cfg)?)?;
    manifest.save(&dir.join(MANIFEST_FILE))?;
    let rate = report.acceptance_rate(sampled.len());
    write_toml(
        &dir.join(SAMPLING_REPORT),
        &SamplingReport {
            seed: scfg.seed,
            target: scfg.target,
            accepted: sampled.len(),
            attempts: report.attempts,
            acceptance_rate: rate,
            rejected_rule1: report.rejected[0],
            rejected_rule2: report.rejected[1],
            rejected_rule3: report.rejected[2],
        },
    )?;
    Ok(vec![format!(
        "sample-poses: {} accepted of {} candidates (rate {:.4}; rejected {}/{}/{} by rules 1/2/3) in {:.2?}",
        sampled.len(),
        report.attempts,
        rate,
        report.rejected[0],
        report.rejected[1],
        report.rejected[2],
        t0.elapsed()
    )])
}

fn training_data(dir: &Path, manifest: &Manifest) -> Result<Vec<Sample>> {
    let mut data = manifest.load_split(dir, "train")?;
    if manifest.splits.iter().any(|s| s.name == "synthetic") {
        data.extend(manifest.load_split(dir, "synthetic")?);
    }
    Ok(data)
}

fn check_dims(model: &PoseInnModel, manifest: &Manifest) -> Result<()> {
    if model.pose_dim() != manifest.pose_dim {
        return Err(CliError::config(format!(
            "dataset poses are {}-dimensional but the model expects {}",
            manifest.pose_dim.dim(),
            model.pose_dim().dim()
        )));
    }
    if model.vae.encoder.image_size != manifest.image_width || manifest.image_width != manifest.image_height {
        return Err(CliError::config(format!(
            "dataset images are {}x{} but the model expects {}x{}",
            manifest.image_width, manifest.image_height, model.vae.encoder.image_size, model.vae.encoder.image_size
        )));
    }
    Ok(())
}

/// Loss rows of completed epochs before `epoch`, header included.
fn loss_prefix(path: &Path, epoch: usize) -> Result<String> {
    let mut out = format!("{}\n", LossReport::HEADER);
    if let Ok(text) = std::fs::read_to_string(path) {
        for line in text.lines().skip(1) {
            let e: Option<usize> = line.split('\t').next().and_then(|t| t.parse().ok());
            if e.is_some_and(|e| e < epoch) {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    Ok(out)
}

pub fn train(dir: &Path, cfg: &PipelineConfig, resume: bool) -> Result<Vec<String>> {
    let t0 = Instant::now();
    let manifest = load_manifest(dir)?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    let mut trainer = if resume {
        let mut t = load_checkpoint(&ckpt)?;
        if cfg.train.epochs < t.epoch {
            return Err(CliError::config(format!("train.epochs {} is below the checkpoint's epoch {}", cfg.train.epochs, t.epoch)));
        }
        t.config.epochs = cfg.train.epochs;
        t
    } else {
        let scene = load_scene(dir)?;
        let model = PoseInnModel::new(cfg.seeded_model(), scene.bounds)?;
        Trainer::new(model, cfg.seeded_train())?
    };
    check_dims(&trainer.model, &manifest)?;
    let data = training_data(dir, &manifest)?;
    let loss_path = dir.join(LOSS_FILE);
    write_text(&loss_path, &loss_prefix(&loss_path, trainer.epoch)?)?;
    let start_epoch = trainer.epoch;
    let mut first: Option<LossReport> = None;
    let mut last: Option<LossReport> = None;
    while trainer.epoch < trainer.config.epochs {
        let r = trainer.run_epoch(&data)?;
        let mut f = OpenOptions::new().append(true).open(&loss_path).map_err(|e| CliError::io(&loss_path, e))?;
        writeln!(f, "{}", r.row()).map_err(|e| CliError::io(&loss_path, e))?;
        if trainer.checkpoint_due() {
            save_checkpoint(&trainer, &ckpt)?;
        }
        // Warm-up epochs train only the VAE, so the flow summary skips them.
        if r.epoch >= trainer.config.warmup_epochs {
            first.get_or_insert_with(|| r.clone());
            last = Some(r);
        }
    }
    if start_epoch == trainer.epoch {
        save_checkpoint(&trainer, &ckpt)?;
    }
    load_checkpoint(&ckpt)?;
    let mut lines = vec![format!(
        "train: epochs {}..{} on {} samples in {:.2?} -> {}",
        start_epoch,
        trainer.epoch,
        data.len(),
        t0.elapsed(),
        ckpt.display()
    )];
    if let (Some(a), Some(b)) = (first, last) {
        lines.push(format!(
            "train: reverse position loss {:.5} -> {:.5}, position error {:.3} m -> {:.3} m",
            a.components.rev_pos, b.components.rev_pos, a.pos_err_m, b.pos_err_m
        ));
    }
    Ok(lines)
}

/// Per-frame evaluation result.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameEval {
    pub truth: Pose,
    pub estimate: Pose,
    pub translation_m: f64,
    pub rotation_deg: f64,
    pub uncertainty: f64,
    pub kept: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErrorSummary {
    pub frames: usize,
    pub median_translation_m: f64,
    pub mean_translation_m: f64,
    pub median_rotation_deg: f64,
    pub mean_rotation_deg: f64,
}

impl ErrorSummary {
    fn of(frames: &[&FrameEval]) -> Option<Self> {
        let t: Vec<f64> = frames.iter().map(|f| f.translation_m).collect();
        let r: Vec<f64> = frames.iter().map(|f| f.rotation_deg).collect();
        let (t, r) = (ErrorStats::of(&t)?, ErrorStats::of(&r)?);
        Some(Self {
            frames: t.count,
            median_translation_m: t.median,
            mean_translation_m: t.mean,
            median_rotation_deg: r.median,
            mean_rotation_deg: r.mean,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub seed: u64,
    pub samples: usize,
    /// Lower median of the per-frame uncertainty.
    pub filter_threshold: f64,
    pub raw: ErrorSummary,
    pub filtered: ErrorSummary,
}

/// Errors of posterior means against ground truth, raw and after
/// median-variance filtering.
pub fn evaluate_frames(truth: &[Pose], posteriors: &[PosePosterior], include_rotation: bool) -> Result<(Vec<FrameEval>, ErrorSummary, ErrorSummary, f64)> {
    if truth.is_empty() || truth.len() != posteriors.len() {
        return Err(CliError::new("E_EVAL", "no frames to evaluate"));
    }
    let (kept, threshold) = if posteriors.len() >= 2 {
        let f = variance_filter(posteriors, include_rotation)?;
        (f.kept, f.threshold)
    } else {
        (vec![true], posteriors[0].uncertainty(include_rotation))
    };
    let frames: Vec<FrameEval> = truth
        .iter()
        .zip(posteriors)
        .zip(kept)
        .map(|((t, p), kept)| FrameEval {
            truth: *t,
            estimate: p.mean,
            translation_m: p.mean.translation_error(t),
            rotation_deg: p.mean.rotation_error(t).to_degrees(),
            uncertainty: p.uncertainty(include_rotation),
            kept,
        })
        .collect();
    let all: Vec<&FrameEval> = frames.iter().collect();
    let filtered: Vec<&FrameEval> = frames.iter().filter(|f| f.kept).collect();
    let raw = ErrorSummary::of(&all).expect("non-empty");
    let filt = ErrorSummary::of(&filtered).expect("the lower median is always kept");
    Ok((frames, raw, filt, threshold))
}

fn test_split(dir: &Path, model: &PoseInnModel) -> Result<(Manifest, Vec<Sample>)> {
    let manifest = load_manifest(dir)?;
    check_dims(model, &manifest)?;
    let test = manifest.load_split(dir, "test")?;
    if test.is_empty() {
        return Err(CliError::new("E_EVAL", "the test split is empty"));
    }
    Ok((manifest, test))
}

pub fn eval(dir: &Path, cfg: &PipelineConfig) -> Result<Vec<String>> {
    let model = load_checkpoint(&dir.join(CHECKPOINT_FILE))?.model;
    let (_, test) = test_split(dir, &model)?;
    let seed = cfg.stage_seed("eval", 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let conditional = model.flow.is_conditional();
    let mut posteriors = Vec::with_capacity(test.len());
    for (i, s) in test.iter().enumerate() {
        // Conditional models get the previous frame's true pose as the prior state.
        let prev = conditional.then(|| test[i.saturating_sub(1)].pose);
        posteriors.push(localize(&model, &s.image, cfg.eval.samples, prev.as_ref(), &mut rng)?);
    }
    let truth: Vec<Pose> = test.iter().map(|s| s.pose).collect();
    let (frames, raw, filtered, threshold) = evaluate_frames(&truth, &posteriors, cfg.eval.include_rotation)?;
    write_eval_frames(&dir.join(EVAL_FRAMES), &frames)?;
    let report = EvalReport { seed, samples: cfg.eval.samples, filter_threshold: threshold, raw, filtered };
    write_toml(&dir.join(EVAL_REPORT), &report)?;
    Ok(vec![
        format!(
            "eval: {} frames, median {:.3} m / {:.2} deg, mean {:.3} m / {:.2} deg",
            report.raw.frames,
            report.raw.median_translation_m,
            report.raw.median_rotation_deg,
            report.raw.mean_translation_m,
            report.raw.mean_rotation_deg
        ),
        format!(
            "eval: filtered {} frames, median {:.3} m / {:.2} deg, mean {:.3} m / {:.2} deg",
            report.filtered.frames,
            report.filtered.median_translation_m,
            report.filtered.median_rotation_deg,
            report.filtered.mean_translation_m,
            report.filtered.mean_rotation_deg
        ),
    ])
}

pub const EVAL_HEADER: &str = "frame\ttrue_pose\test_pose\ttranslation_m\trotation_deg\tuncertainty\tkept";

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(",")
}

fn write_eval_frames(path: &Path, frames: &[FrameEval]) -> Result<()> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| CliError::io(path, e);
    writeln!(w, "{EVAL_HEADER}").map_err(io)?;
    for (i, f) in frames.iter().enumerate() {
        writeln!(
            w,
            "{i}\t{}\t{}\t{:e}\t{:e}\t{:e}\t{}",
            join(&f.truth.to_vec()),
            join(&f.estimate.to_vec()),
            f.translation_m,
            f.rotation_deg,
            f.uncertainty,
            u8::from(f.kept)
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrackReport {
    pub seed: u64,
    pub frames: usize,
    pub lost_frames: usize,
    pub median_translation_m: Option<f64>,
    pub median_heading_deg: Option<f64>,
    pub ekf_median_translation_m: Option<f64>,
    pub ekf_median_heading_deg: Option<f64>,
}

pub struct TrackOptions {
    pub ekf: bool,
    pub odom: Option<PathBuf>,
    /// Skip the images: EKF prediction from odometry only.
    pub odom_only: bool,
    pub init: Option<Pose>,
}

fn heading_deg(a: &Pose, b: &Pose) -> f64 {
    wrap_angle(a.heading() - b.heading()).abs().to_degrees()
}

pub fn track(dir: &Path, cfg: &PipelineConfig, opts: &TrackOptions) -> Result<Vec<String>> {
    let model = load_checkpoint(&dir.join(CHECKPOINT_FILE))?.model;
    if !model.flow.is_conditional() || model.pose_dim() != PoseDim::Se2 {
        return Err(CliError::config("track needs an SE(2) conditional checkpoint (model.conditional = true)"));
    }
    let use_ekf = opts.ekf || opts.odom_only;
    let odom = match (&opts.odom, use_ekf) {
        (Some(p), true) => Some(read_odometry(p)?),
        (None, true) => return Err(CliError::usage("--ekf needs --odom FILE")),
        (_, false) => None,
    };
    let (_, test) = test_split(dir, &model)?;
    if let Some(o) = &odom {
        if o.len() + 1 < test.len() {
            return Err(CliError::new("E_TRACK", format!("{} odometry steps for {} frames", o.len(), test.len())));
        }
    }
    let initial = opts.init.unwrap_or(test[0].pose);
    let seed = cfg.stage_seed("track", 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = if opts.odom_only {
        None
    } else {
        Some(sequential_localize(&model, test.iter().map(|s| &s.image), initial, &cfg.track.sequential, &mut rng)?)
    };
    let kept = match &frames {
        Some(f) if f.len() >= 2 => {
            let posts: Vec<PosePosterior> = f.iter().map(|t| t.posterior.clone()).collect();
            variance_filter(&posts, cfg.eval.include_rotation)?.kept
        }
        _ => vec![true; test.len()],
    };
    let mut ekf_states = Vec::new();
    if let Some(odom) = &odom {
        let sm = cfg.track.initial_sigma_m;
        let sr = cfg.track.initial_sigma_deg.to_radians();
        let p0 = Matrix3::from_diagonal(&nalgebra::Vector3::new(sm * sm, sm * sm, sr * sr));
        let mut state = EkfState::new(&initial, p0)?;
        for i in 0..test.len() {
            let meas = frames.as_ref().map(|f| &f[i].posterior);
            state = if i == 0 {
                match meas {
                    Some(m) => state.update(&m.mean, &m.planar_covariance().expect("SE(2)"), &cfg.track.ekf)?,
                    None => state,
                }
            } else {
                ekf_fuse(&state, &odom[i - 1], meas, &cfg.track.ekf)?
            };
            ekf_states.push(state);
        }
    }
    let mut text = format!("{TRACK_HEADER}\n");
    for i in 0..test.len() {
        let post = frames.as_ref().map(|f| &f[i].posterior);
        let lost = frames.as_ref().is_some_and(|f| f[i].lost);
        text.push_str(&track_row(i, post, kept[i], lost, ekf_states.get(i)));
        text.push('\n');
    }
    write_text(&dir.join(TRACK_FILE), &text)?;

    let median = |v: Vec<f64>| poseinn::metrics::median(&v);
    let truth: Vec<Pose> = test.iter().map(|s| s.pose).collect();
    let (mt, mh) = match &frames {
        Some(f) => (
            median(f.iter().zip(&truth).map(|(f, t)| f.posterior.mean.translation_error(t)).collect()),
            median(f.iter().zip(&truth).map(|(f, t)| heading_deg(&f.posterior.mean, t)).collect()),
        ),
        None => (None, None),
    };
    let et = median(ekf_states.iter().zip(&truth).map(|(s, t)| s.pose().translation_error(t)).collect());
    let eh = median(ekf_states.iter().zip(&truth).map(|(s, t)| heading_deg(&s.pose(), t)).collect());
    let report = TrackReport {
        seed,
        frames: test.len(),
        lost_frames: frames.as_ref().map_or(0, |f| f.iter().filter(|t| t.lost).count()),
        median_translation_m: mt,
        median_heading_deg: mh,
        ekf_median_translation_m: et,
        ekf_median_heading_deg: eh,
    };
    write_toml(&dir.join(TRACK_REPORT), &report)?;
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
    Ok(vec![format!(
        "track: {} frames ({} lost), median {} m / {} deg, EKF median {} m / {} deg",
        report.frames,
        report.lost_frames,
        fmt(report.median_translation_m),
        fmt(report.median_heading_deg),
        fmt(report.ekf_median_translation_m),
        fmt(report.ekf_median_heading_deg)
    )])
}

pub fn bench(dir: &Path, cfg: &PipelineConfig, frames: Option<usize>) -> Result<Vec<String>> {
    let model = load_checkpoint(&dir.join(CHECKPOINT_FILE))?.model;
    let (_, test) = test_split(dir, &model)?;
    let n = frames.unwrap_or(test.len()).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stage_seed("bench", 0));
    let conditional = model.flow.is_conditional();
    let t0 = Instant::now();
    for i in 0..n {
        let s = &test[i % test.len()];
        let prev = conditional.then_some(s.pose);
        localize(&model, &s.image, cfg.eval.samples, prev.as_ref(), &mut rng)?;
    }
    let secs = t0.elapsed().as_secs_f64();
    Ok(vec![format!(
        "bench: {n} frames x {} samples in {secs:.3} s ({:.1} Hz, {} threads)",
        cfg.eval.samples,
        n as f64 / secs,
        rayon::current_num_threads()
    )])
}
