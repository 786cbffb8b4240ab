//! Inference: pose posteriors from images, variance filtering, sequential
//! conditional localization and odometry fusion with an EKF.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::EncodeMode;
use crate::geometry::{wrap_angle, Pose, PoseDim};
use crate::image::Image;
use crate::model::{ModelError, PoseInnModel};

#[derive(Debug, Error)]
pub enum LocalizeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("posterior needs at least one sample")]
    NoSamples,
    #[error("samples mix pose dimensions")]
    MixedDims,
    #[error("model produced a non-finite pose sample")]
    NonFinite,
    #[error("a conditional model needs a previous-state condition")]
    ConditionRequired,
    #[error("an unconditional model cannot take a condition")]
    ConditionUnused,
    #[error("sequential localization needs an SE(2) conditional model")]
    NotSequential,
    #[error("variance filtering needs at least 2 posteriors, got {0}")]
    TooFewPosteriors(usize),
    #[error("covariance is not symmetric positive semidefinite: {0}")]
    NotPsd(String),
    #[error("invalid odometry step: {0}")]
    Odometry(String),
}

pub type Result<T> = std::result::Result<T, LocalizeError>;

/// Pose posterior from flow samples.
#[derive(Clone, Debug, PartialEq)]
pub struct PosePosterior {
    pub samples: Vec<Pose>,
    /// Arithmetic mean of positions, circular mean of each angle.
    pub mean: Pose,
    /// Per-dimension variance in `to_vec` order; angles use wrapped
    /// deviations from the circular mean. Population normalization (1/N).
    pub variance: Vec<f64>,
    /// Full covariance in `to_vec` order, same conventions as `variance`.
    pub covariance: DMatrix<f64>,
}

fn circular_mean(angles: impl Iterator<Item = f64> + Clone) -> f64 {
    let mut it = angles.clone();
    if let Some(first) = it.next() {
        if it.all(|a| a == first) {
            return first;
        }
    }
    let (s, c) = angles.fold((0.0, 0.0), |(s, c), a| (s + a.sin(), c + a.cos()));
    if s == 0.0 && c == 0.0 {
        0.0
    } else {
        s.atan2(c)
    }
}

impl PosePosterior {
    pub fn from_samples(samples: Vec<Pose>) -> Result<Self> {
        let first = samples.first().ok_or(LocalizeError::NoSamples)?;
        let dim = first.dim;
        if samples.iter().any(|p| p.dim != dim) {
            return Err(LocalizeError::MixedDims);
        }
        let vecs: Vec<Vec<f64>> = samples.iter().map(Pose::to_vec).collect();
        if vecs.iter().flatten().any(|v| !v.is_finite()) {
            return Err(LocalizeError::NonFinite);
        }
        let d = dim.dim();
        let n = samples.len() as f64;
        let mean_vec: Vec<f64> = (0..d)
            .map(|i| {
                let col = vecs.iter().map(|v| v[i]);
                if dim.is_angle(i) {
                    circular_mean(col)
                } else {
                    col.sum::<f64>() / n
                }
            })
            .collect();
        let dev = |v: &[f64], i: usize| {
            let x = v[i] - mean_vec[i];
            if dim.is_angle(i) {
                wrap_angle(x)
            } else {
                x
            }
        };
        let mut covariance = DMatrix::zeros(d, d);
        for v in &vecs {
            for i in 0..d {
                for j in 0..d {
                    covariance[(i, j)] += dev(v, i) * dev(v, j) / n;
                }
            }
        }
        let variance = (0..d).map(|i| covariance[(i, i)]).collect();
        let mean = Pose::from_vec(dim, &mean_vec).map_err(ModelError::from)?;
        Ok(Self { samples, mean, variance, covariance })
    }

    pub fn dim(&self) -> PoseDim {
        self.mean.dim
    }

    /// Scalar uncertainty: trace of the position variance, plus the angle
    /// variances when `include_rotation` is set.
    pub fn uncertainty(&self, include_rotation: bool) -> f64 {
        let dim = self.dim();
        (0..dim.dim()).filter(|&i| include_rotation || !dim.is_angle(i)).map(|i| self.variance[i]).sum()
    }

    /// `(x, y, θ)` covariance for the EKF (SE(2) only).
    pub fn planar_covariance(&self) -> Option<Matrix3<f64>> {
        (self.dim() == PoseDim::Se2).then(|| Matrix3::from_fn(|i, j| self.covariance[(i, j)]))
    }
}

/// Posterior for one image: `ŷ = encode(image, mean)`, then `n` latent draws
/// through the inverse flow. `condition` is the previous-state estimate for
/// conditional models; it is rounded to the model's grid.
pub fn localize(
    model: &PoseInnModel,
    image: &Image,
    n: usize,
    condition: Option<&Pose>,
    rng: &mut ChaCha8Rng,
) -> Result<PosePosterior> {
    if n == 0 {
        return Err(LocalizeError::NoSamples);
    }
    let cond = match (model.flow.is_conditional(), condition) {
        (true, Some(prev)) => Some(model.condition_raw(prev)?),
        (true, None) => return Err(LocalizeError::ConditionRequired),
        (false, Some(_)) => return Err(LocalizeError::ConditionUnused),
        (false, None) => None,
    };
    let yhat = model.encode_images(&[image], EncodeMode::Mean, rng)?;
    let zd = model.config.dims().z();
    let zs: Vec<Vec<f64>> = (0..n).map(|_| (0..zd).map(|_| StandardNormal.sample(rng)).collect()).collect();
    localize_with_latents(model, yhat.data(), &zs, cond.as_deref())
}

/// Posterior from an image latent and explicit latent draws.
pub fn localize_with_latents(model: &PoseInnModel, yhat: &[f64], zs: &[Vec<f64>], cond: Option<&[f64]>) -> Result<PosePosterior> {
    if zs.is_empty() {
        return Err(LocalizeError::NoSamples);
    }
    let out = model.inverse_many(yhat, zs, cond)?;
    let samples = (0..zs.len()).map(|i| model.decode_pose(out.row(i))).collect::<std::result::Result<Vec<_>, _>>()?;
    PosePosterior::from_samples(samples)
}

/// Result of median-variance filtering.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterResult {
    /// Lower median of the scalar uncertainties.
    pub threshold: f64,
    pub uncertainties: Vec<f64>,
    pub kept: Vec<bool>,
}

impl FilterResult {
    pub fn kept_count(&self) -> usize {
        self.kept.iter().filter(|&&k| k).count()
    }
}

/// Keep posteriors whose uncertainty is at most the lower median of the set,
/// so exactly `⌈n/2⌉` survive when the values are distinct.
pub fn variance_filter(posteriors: &[PosePosterior], include_rotation: bool) -> Result<FilterResult> {
    let uncertainties: Vec<f64> = posteriors.iter().map(|p| p.uncertainty(include_rotation)).collect();
    filter_values(uncertainties)
}

pub fn filter_values(uncertainties: Vec<f64>) -> Result<FilterResult> {
    if uncertainties.len() < 2 {
        return Err(LocalizeError::TooFewPosteriors(uncertainties.len()));
    }
    let mut sorted = uncertainties.clone();
    sorted.sort_by(f64::total_cmp);
    let threshold = sorted[(sorted.len() - 1) / 2];
    let kept = uncertainties.iter().map(|&u| u <= threshold).collect();
    Ok(FilterResult { threshold, uncertainties, kept })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SequentialConfig {
    pub samples: usize,
    /// Position-variance trace (m²) above which a frame counts as uncertain.
    pub variance_ceiling: f64,
    /// Consecutive uncertain frames before the track is flagged lost.
    pub lost_after: usize,
}

impl Default for SequentialConfig {
    fn default() -> Self {
        Self { samples: 50, variance_ceiling: 0.5, lost_after: 5 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackFrame {
    pub posterior: PosePosterior,
    /// The rounded condition cell used for this frame.
    pub condition: Pose,
    pub lost: bool,
}

/// Localize a stream, feeding each posterior mean back as the next condition.
pub fn sequential_localize<'a>(
    model: &PoseInnModel,
    images: impl IntoIterator<Item = &'a Image>,
    initial: Pose,
    cfg: &SequentialConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TrackFrame>> {
    if !model.flow.is_conditional() || model.pose_dim() != PoseDim::Se2 {
        return Err(LocalizeError::NotSequential);
    }
    model.check_pose(&initial)?;
    let mut previous = initial;
    let mut uncertain_run = 0;
    let mut track = Vec::new();
    for image in images {
        let posterior = localize(model, image, cfg.samples, Some(&previous), rng)?;
        if posterior.uncertainty(false) > cfg.variance_ceiling {
            uncertain_run += 1;
        } else {
            uncertain_run = 0;
        }
        let condition = model.config.grid.round(&previous, &model.bounds);
        previous = posterior.mean;
        track.push(TrackFrame { posterior, condition, lost: cfg.lost_after > 0 && uncertain_run >= cfg.lost_after });
    }
    Ok(track)
}

/// Body-frame odometry increment with diagonal process-noise variances.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OdometryStep {
    pub forward: f64,
    pub lateral: f64,
    pub dtheta: f64,
    /// Variances of `(forward, lateral, dtheta)`.
    pub noise: [f64; 3],
}

impl OdometryStep {
    pub fn validate(&self) -> Result<()> {
        let vals = [self.forward, self.lateral, self.dtheta];
        if vals.iter().chain(&self.noise).any(|v| !v.is_finite()) {
            return Err(LocalizeError::Odometry("non-finite value".into()));
        }
        if self.noise.iter().any(|&v| v < 0.0) {
            return Err(LocalizeError::Odometry("negative noise variance".into()));
        }
        Ok(())
    }

    /// Relative motion between two SE(2) poses, expressed in the first pose's frame.
    pub fn between(a: &Pose, b: &Pose, noise: [f64; 3]) -> Self {
        let (s, c) = a.heading().sin_cos();
        let dx = b.position[0] - a.position[0];
        let dy = b.position[1] - a.position[1];
        Self { forward: c * dx + s * dy, lateral: -s * dx + c * dy, dtheta: wrap_angle(b.heading() - a.heading()), noise }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EkfConfig {
    /// Fuse the heading measurement as well as the position.
    pub fuse_heading: bool,
}

impl Default for EkfConfig {
    fn default() -> Self {
        Self { fuse_heading: true }
    }
}

/// `(x, y, θ)` estimate with covariance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EkfState {
    pub mean: Vector3<f64>,
    pub covariance: Matrix3<f64>,
}

const PSD_TOL: f64 = 1e-10;

pub fn check_psd(m: &DMatrix<f64>) -> Result<()> {
    let scale = m.amax().max(1.0);
    if m.iter().any(|v| !v.is_finite()) {
        return Err(LocalizeError::NotPsd("non-finite entry".into()));
    }
    if (m - m.transpose()).amax() > 1e-9 * scale {
        return Err(LocalizeError::NotPsd("not symmetric".into()));
    }
    let min = m.clone().symmetric_eigenvalues().min();
    if min < -PSD_TOL * scale {
        return Err(LocalizeError::NotPsd(format!("eigenvalue {min:e}")));
    }
    Ok(())
}

impl EkfState {
    pub fn new(pose: &Pose, covariance: Matrix3<f64>) -> Result<Self> {
        check_psd(&DMatrix::from_column_slice(3, 3, covariance.as_slice()))?;
        Ok(Self { mean: Vector3::new(pose.position[0], pose.position[1], pose.heading()), covariance })
    }

    pub fn pose(&self) -> Pose {
        Pose::se2(self.mean[0], self.mean[1], self.mean[2])
    }

    /// Compose the body-frame odometry step onto the state.
    pub fn predict(&self, odom: &OdometryStep) -> Result<Self> {
        odom.validate()?;
        let th = self.mean[2];
        let (s, c) = th.sin_cos();
        let (f, l) = (odom.forward, odom.lateral);
        let mean = Vector3::new(self.mean[0] + c * f - s * l, self.mean[1] + s * f + c * l, wrap_angle(th + odom.dtheta));
        let jf = Matrix3::new(1.0, 0.0, -s * f - c * l, 0.0, 1.0, c * f - s * l, 0.0, 0.0, 1.0);
        let jg = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        let q = Matrix3::from_diagonal(&Vector3::from(odom.noise));
        let p = jf * self.covariance * jf.transpose() + jg * q * jg.transpose();
        Ok(Self { mean, covariance: 0.5 * (p + p.transpose()) })
    }

    /// Measurement update with `measurement` and its `(x, y, θ)` covariance.
    pub fn update(&self, measurement: &Pose, r: &Matrix3<f64>, cfg: &EkfConfig) -> Result<Self> {
        let m = if cfg.fuse_heading { 3 } else { 2 };
        let r = DMatrix::from_fn(m, m, |i, j| r[(i, j)]);
        check_psd(&r)?;
        let h = DMatrix::from_fn(m, 3, |i, j| if i == j { 1.0 } else { 0.0 });
        let z = [measurement.position[0], measurement.position[1], measurement.heading()];
        let mut innov = DMatrix::from_fn(m, 1, |i, _| z[i] - self.mean[i]);
        if m == 3 {
            innov[2] = wrap_angle(innov[2]);
        }
        let p = DMatrix::from_column_slice(3, 3, self.covariance.as_slice());
        let s = &h * &p * h.transpose() + &r;
        let s_inv = s
            .clone()
            .cholesky()
            .map(|ch| ch.inverse())
            .or_else(|| s.clone().try_inverse())
            .ok_or_else(|| LocalizeError::NotPsd("singular innovation covariance".into()))?;
        let k = &p * h.transpose() * s_inv;
        let dx = &k * innov;
        let mean = Vector3::new(self.mean[0] + dx[0], self.mean[1] + dx[1], wrap_angle(self.mean[2] + dx[2]));
        let ikh = DMatrix::identity(3, 3) - &k * &h;
        let joseph = &ikh * &p * ikh.transpose() + &k * &r * k.transpose();
        let joseph = 0.5 * (&joseph + joseph.transpose());
        check_psd(&joseph)?;
        Ok(Self { mean, covariance: Matrix3::from_fn(|i, j| joseph[(i, j)]) })
    }
}

/// One fused step: predict with `odom`, then update with the posterior mean
/// and covariance when a measurement is available.
pub fn ekf_fuse(state: &EkfState, odom: &OdometryStep, meas: Option<&PosePosterior>, cfg: &EkfConfig) -> Result<EkfState> {
    let predicted = state.predict(odom)?;
    match meas {
        None => Ok(predicted),
        Some(post) => {
            let r = post.planar_covariance().ok_or(LocalizeError::NotSequential)?;
            predicted.update(&post.mean, &r, cfg)
        }
    }
}

/// Header of the tab-separated track file.
pub const TRACK_HEADER: &str = "frame\tx\ty\ttheta\tvar_x\tvar_y\tvar_theta\tkept\tlost\tekf_x\tekf_y\tekf_theta";

/// One track-file row. `kept` is the variance-filter flag; missing
/// posterior or EKF values are written as `nan`.
pub fn track_row(frame: usize, post: Option<&PosePosterior>, kept: bool, lost: bool, ekf: Option<&EkfState>) -> String {
    let (m, v) = match post {
        Some(p) => {
            let v = &p.variance;
            ([p.mean.position[0], p.mean.position[1], p.mean.heading()], [v[0], v[1], v[v.len() - 1]])
        }
        None => ([f64::NAN; 3], [f64::NAN; 3]),
    };
    let e = ekf.map_or([f64::NAN; 3], |s| [s.mean[0], s.mean[1], s.mean[2]]);
    format!(
        "{frame}\t{:e}\t{:e}\t{:e}\t{:e}\t{:e}\t{:e}\t{}\t{}\t{:e}\t{:e}\t{:e}",
        m[0],
        m[1],
        m[2],
        v[0],
        v[1],
        v[2],
        u8::from(kept),
        u8::from(lost),
        e[0],
        e[1],
        e[2]
    )
}
