//! Pipeline configuration file (TOML, strict: unknown keys are rejected).

use std::path::Path;

use poseinn::localizer::{EkfConfig, SequentialConfig};
use poseinn::model::ModelConfig;
use poseinn::sampler::SamplingConfig;
use poseinn::scene::{CameraIntrinsics, SceneConfig, TrajectorySpec};
use poseinn::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub intrinsics: CameraIntrinsics,
    pub train: TrajectorySpec,
    pub test: TrajectorySpec,
    /// Gaussian pixel noise on rendered images.
    pub image_noise: f64,
    /// Points exported from the scene for the sampler's visibility checks.
    pub cloud_points: usize,
    /// Odometry noise per step between consecutive test frames.
    pub odometry_sigma_m: f64,
    pub odometry_sigma_deg: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            intrinsics: CameraIntrinsics::default(),
            train: TrajectorySpec::default(),
            test: TrajectorySpec { count: 50, radius: 0.85, phase: 0.3, ..TrajectorySpec::default() },
            image_noise: 0.0,
            cloud_points: 5000,
            odometry_sigma_m: 0.01,
            odometry_sigma_deg: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Latent draws per frame.
    pub samples: usize,
    /// Add angle variances to the filter's scalar uncertainty.
    pub include_rotation: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { samples: 50, include_rotation: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackConfig {
    pub sequential: SequentialConfig,
    pub ekf: EkfConfig,
    /// Initial EKF standard deviations: position (m) and heading (deg).
    pub initial_sigma_m: f64,
    pub initial_sigma_deg: f64,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self { sequential: SequentialConfig::default(), ekf: EkfConfig::default(), initial_sigma_m: 0.1, initial_sigma_deg: 5.0 }
    }
}

/// Whole pipeline. Per-section `seed` fields act as salts: the seed each
/// stage actually uses is derived from the root `seed` and that salt.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub scene: SceneConfig,
    pub data: DataConfig,
    pub sampling: SamplingConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub track: TrackConfig,
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::config(e.to_string().trim().replace('\n', " ")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::config(e.to_string()))
    }

    /// Hash of the canonical serialization.
    pub fn hash(&self) -> Result<String> {
        Ok(poseinn::dataset::config_hash(&self.to_toml()?))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| CliError::config(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::config(e.to_string()))?;
        self.data.intrinsics.validate().map_err(|e| CliError::config(e.to_string()))?;
        if self.model.vae.image_size != self.data.intrinsics.width || self.data.intrinsics.width != self.data.intrinsics.height {
            return Err(CliError::config("images must be square and match model.vae.image_size"));
        }
        if self.model.pose_dim != self.data.train.dim || self.data.train.dim != self.data.test.dim {
            return Err(CliError::config("model.pose_dim, data.train.dim and data.test.dim must agree"));
        }
        if self.eval.samples == 0 || self.track.sequential.samples == 0 {
            return Err(CliError::config("sample counts must be positive"));
        }
        if self.seed > i64::MAX as u64 {
            return Err(CliError::config("seed must fit in a signed 64-bit integer"));
        }
        let sig = [self.data.image_noise, self.data.odometry_sigma_m, self.data.odometry_sigma_deg];
        if sig.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(CliError::config("noise levels must be finite and non-negative"));
        }
        Ok(())
    }

    /// Stage seed from the root seed, a stage label and the section salt.
    /// Kept to 63 bits so reports holding it stay valid TOML.
    pub fn stage_seed(&self, label: &str, salt: u64) -> u64 {
        let digest = Sha256::digest(format!("{}:{label}:{salt}", self.seed).as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")) >> 1
    }

    /// Copies of the model, train and sampling sections with derived seeds.
    pub fn seeded_model(&self) -> ModelConfig {
        ModelConfig { init_seed: self.stage_seed("init", self.model.init_seed), ..self.model.clone() }
    }

    pub fn seeded_train(&self) -> TrainConfig {
        TrainConfig { seed: self.stage_seed("train", self.train.seed), ..self.train.clone() }
    }

    pub fn seeded_sampling(&self) -> SamplingConfig {
        SamplingConfig { seed: self.stage_seed("sample", self.sampling.seed), ..self.sampling.clone() }
    }
}
