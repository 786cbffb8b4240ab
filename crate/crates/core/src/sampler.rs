//! Novel-view pose sampling with point-cloud filter rules.
//!
//! Candidates take a uniform position in the scene box and a training
//! orientation perturbed by a small random rotation. A candidate is kept when
//! (1) it lies within `max_training_distance` of some training position,
//! (2) its in-view point count is inside the training range and
//! (3) its distance to the nearest in-view point is inside the training range.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{random_rotation, Aabb, Pose, PoseDim, RotationMatrix};
use crate::scene::{world_to_body, CameraIntrinsics};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("training set is empty")]
    NoTrainingPoses,
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("no training pose sees any cloud point, in-view distance range undefined")]
    NoVisibleTraining,
    #[error("invalid sampling config: {0}")]
    Config(String),
    #[error(
        "attempt budget exhausted: {accepted}/{target} accepted after {attempts} attempts \
         (rate {rate:.4}; rejected by rule 1: {rule1}, rule 2: {rule2}, rule 3: {rule3})"
    )]
    Budget { target: usize, accepted: usize, attempts: usize, rate: f64, rule1: usize, rule2: usize, rule3: usize },
}

pub type Result<T> = std::result::Result<T, SamplerError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub target: usize,
    /// Rule 1 threshold in meters.
    pub max_training_distance: f64,
    /// Orientation noise bound in degrees.
    pub rotation_noise_deg: f64,
    /// Rule 2/3 intervals become `[min / widening, max · widening]`; 1 keeps
    /// the exact training min/max.
    pub widening: f64,
    /// Attempt budget as a multiple of `target`.
    pub attempt_factor: usize,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            target: 2000,
            max_training_distance: 0.5,
            rotation_noise_deg: 3.6,
            widening: 1.0,
            attempt_factor: 100,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_training_distance > 0.0
            && self.rotation_noise_deg > 0.0
            && self.rotation_noise_deg <= 180.0
            && self.widening >= 1.0
            && self.attempt_factor > 0;
        if ok {
            Ok(())
        } else {
            Err(SamplerError::Config("thresholds must be positive, widening at least 1 and the noise at most 180°".into()))
        }
    }

    pub fn rotation_noise(&self) -> f64 {
        self.rotation_noise_deg.to_radians()
    }
}

/// Cloud points inside the camera frustum (no occlusion test).
#[derive(Clone, Debug, PartialEq)]
pub struct InView {
    pub indices: Vec<usize>,
    /// Euclidean distance to the nearest in-view point.
    pub nearest: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewStats {
    pub n_in_view: usize,
    pub delta_in_view: Option<f64>,
    pub delta_training: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceRanges {
    pub n_in_view: [f64; 2],
    pub delta_in_view: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rule {
    TrainingDistance = 1,
    InViewCount = 2,
    InViewDistance = 3,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Accept,
    Reject(Rule),
}

pub fn in_view_subset(pose: &Pose, intr: &CameraIntrinsics, cloud: &[[f64; 3]]) -> InView {
    let mut indices = Vec::new();
    let mut nearest = f64::INFINITY;
    for (i, &p) in cloud.iter().enumerate() {
        let b = world_to_body(pose, p);
        if intr.in_image(b) {
            indices.push(i);
            nearest = nearest.min((b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt());
        }
    }
    let nearest = (!indices.is_empty()).then_some(nearest);
    InView { indices, nearest }
}

pub fn training_distance(position: [f64; 3], training: &[Pose]) -> f64 {
    training
        .iter()
        .map(|t| {
            let d: [f64; 3] = std::array::from_fn(|i| position[i] - t.position[i]);
            (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

pub fn view_stats(pose: &Pose, training: &[Pose], intr: &CameraIntrinsics, cloud: &[[f64; 3]]) -> ViewStats {
    let view = in_view_subset(pose, intr, cloud);
    ViewStats {
        n_in_view: view.indices.len(),
        delta_in_view: view.nearest,
        delta_training: training_distance(pose.position, training),
    }
}

fn widen(lo: f64, hi: f64, factor: f64) -> [f64; 2] {
    [lo / factor, hi * factor]
}

impl AcceptanceRanges {
    /// Min/max of the in-view statistics over the training poses.
    pub fn from_training(
        training: &[Pose],
        intr: &CameraIntrinsics,
        cloud: &[[f64; 3]],
        widening: f64,
    ) -> Result<Self> {
        if training.is_empty() {
            return Err(SamplerError::NoTrainingPoses);
        }
        if cloud.is_empty() {
            return Err(SamplerError::EmptyCloud);
        }
        let (mut n_lo, mut n_hi) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut d_lo, mut d_hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for pose in training {
            let view = in_view_subset(pose, intr, cloud);
            let n = view.indices.len() as f64;
            n_lo = n_lo.min(n);
            n_hi = n_hi.max(n);
            if let Some(d) = view.nearest {
                d_lo = d_lo.min(d);
                d_hi = d_hi.max(d);
            }
        }
        if !d_lo.is_finite() {
            return Err(SamplerError::NoVisibleTraining);
        }
        Ok(Self { n_in_view: widen(n_lo, n_hi, widening), delta_in_view: widen(d_lo, d_hi, widening) })
    }
}

/// Apply the three rules in order and report the first failure.
pub fn decide(stats: &ViewStats, ranges: &AcceptanceRanges, max_training_distance: f64) -> Decision {
    if !(stats.delta_training <= max_training_distance) {
        return Decision::Reject(Rule::TrainingDistance);
    }
    let n = stats.n_in_view as f64;
    if n < ranges.n_in_view[0] || n > ranges.n_in_view[1] {
        return Decision::Reject(Rule::InViewCount);
    }
    match stats.delta_in_view {
        Some(d) if d >= ranges.delta_in_view[0] && d <= ranges.delta_in_view[1] => Decision::Accept,
        _ => Decision::Reject(Rule::InViewDistance),
    }
}

pub fn filter_pose(
    candidate: &Pose,
    training: &[Pose],
    cloud: &[[f64; 3]],
    intr: &CameraIntrinsics,
    ranges: &AcceptanceRanges,
    cfg: &SamplingConfig,
) -> (Decision, ViewStats) {
    let stats = view_stats(candidate, training, intr, cloud);
    (decide(&stats, ranges, cfg.max_training_distance), stats)
}

/// `R_noise · R_train` for a uniformly picked training orientation. Returns
/// the source index too. Planar poses use a pure yaw noise, uniform in
/// `[-max_angle, max_angle]`.
pub fn sample_orientation(
    training: &[Pose],
    max_angle: f64,
    rng: &mut impl Rng,
) -> Result<(usize, RotationMatrix)> {
    if training.is_empty() {
        return Err(SamplerError::NoTrainingPoses);
    }
    let k = rng.random_range(0..training.len());
    let base = training[k].rotation();
    let noise = match training[k].dim {
        PoseDim::Se2 if max_angle > 0.0 => RotationMatrix::rot_z(rng.random_range(-max_angle..=max_angle)),
        PoseDim::Se2 => RotationMatrix::identity(),
        PoseDim::Se3 => random_rotation(max_angle, rng),
    };
    Ok((k, noise.mul(&base)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampledPose {
    pub pose: Pose,
    pub stats: ViewStats,
    /// Training pose whose orientation was perturbed.
    pub source: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SamplingReport {
    pub attempts: usize,
    pub rejected: [usize; 3],
}

impl SamplingReport {
    pub fn acceptance_rate(&self, accepted: usize) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            accepted as f64 / self.attempts as f64
        }
    }
}

/// Nearest f32 value to `v` that stays inside `[lo, hi]`, or `[lo, hi)` when
/// `open_top`.
fn f32_within(v: f64, lo: f64, hi: f64, open_top: bool) -> f64 {
    let mut q = v as f32;
    while (q as f64) < lo {
        q = q.next_up();
    }
    while (q as f64) > hi || (open_top && (q as f64) >= hi) {
        q = q.next_down();
    }
    q as f64
}

/// Round a pose to f32-representable components so it survives the f32 pose
/// blobs unchanged, keeping positions inside `region` and angles in `[-π, π)`.
pub fn quantize_pose(pose: &Pose, region: &Aabb) -> Pose {
    let mut q = *pose;
    for i in 0..3 {
        q.position[i] = f32_within(pose.position[i], region.min[i], region.max[i], false);
        q.orientation[i] = f32_within(pose.orientation[i], -PI, PI, true);
    }
    q
}

/// Per-candidate stream so results do not depend on evaluation order.
fn candidate_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Sample region: the scene box, with z limited to the training z-range for
/// planar poses.
pub fn sample_region(bounds: &Aabb, training: &[Pose]) -> Aabb {
    let mut region = *bounds;
    if training.first().is_some_and(|t| t.dim == PoseDim::Se2) {
        let (lo, hi) = training
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| (lo.min(t.position[2]), hi.max(t.position[2])));
        region.min[2] = lo;
        region.max[2] = hi;
    }
    region
}

fn candidate(region: &Aabb, training: &[Pose], max_angle: f64, rng: &mut ChaCha8Rng) -> (usize, Pose) {
    let position: [f64; 3] = std::array::from_fn(|i| {
        if region.max[i] > region.min[i] {
            rng.random_range(region.min[i]..=region.max[i])
        } else {
            region.min[i]
        }
    });
    let (source, rot) = sample_orientation(training, max_angle, rng).expect("non-empty training set");
    let pose = Pose::from_rotation(position, &rot, training[source].dim);
    let q = quantize_pose(&pose, region);
    (source, q)
}

/// Rejection-sample `cfg.target` poses within an attempt budget of
/// `cfg.attempt_factor × target`.
pub fn sample_poses(
    bounds: &Aabb,
    cloud: &[[f64; 3]],
    training: &[Pose],
    intr: &CameraIntrinsics,
    cfg: &SamplingConfig,
) -> Result<(Vec<SampledPose>, SamplingReport)> {
    cfg.validate()?;
    if training.is_empty() {
        return Err(SamplerError::NoTrainingPoses);
    }
    let mut report = SamplingReport::default();
    if cfg.target == 0 {
        return Ok((Vec::new(), report));
    }
    let ranges = AcceptanceRanges::from_training(training, intr, cloud, cfg.widening)?;
    let region = sample_region(bounds, training);
    let budget = cfg.target.saturating_mul(cfg.attempt_factor);
    let max_angle = cfg.rotation_noise();
    let mut accepted = Vec::with_capacity(cfg.target);
    let chunk = (cfg.target * 2).clamp(64, 8192);
    while accepted.len() < cfg.target && report.attempts < budget {
        let start = report.attempts;
        let end = (start + chunk).min(budget);
        let results: Vec<(usize, Pose, Decision, ViewStats)> = (start..end)
            .into_par_iter()
            .map(|i| {
                let mut rng = candidate_rng(cfg.seed, i as u64);
                let (source, pose) = candidate(&region, training, max_angle, &mut rng);
                // Rule 1 first: it is cheap and rejects most candidates.
                let delta_training = training_distance(pose.position, training);
                if !(delta_training <= cfg.max_training_distance) {
                    let stats = ViewStats { n_in_view: 0, delta_in_view: None, delta_training };
                    return (source, pose, Decision::Reject(Rule::TrainingDistance), stats);
                }
                let (decision, stats) = filter_pose(&pose, training, cloud, intr, &ranges, cfg);
                (source, pose, decision, stats)
            })
            .collect();
        for (source, pose, decision, stats) in results {
            if accepted.len() == cfg.target {
                break;
            }
            report.attempts += 1;
            match decision {
                Decision::Accept => accepted.push(SampledPose { pose, stats, source }),
                Decision::Reject(rule) => report.rejected[rule as usize - 1] += 1,
            }
        }
    }
    if accepted.len() < cfg.target {
        return Err(SamplerError::Budget {
            target: cfg.target,
            accepted: accepted.len(),
            attempts: report.attempts,
            rate: report.acceptance_rate(accepted.len()),
            rule1: report.rejected[0],
            rule2: report.rejected[1],
            rule3: report.rejected[2],
        });
    }
    Ok((accepted, report))
}
