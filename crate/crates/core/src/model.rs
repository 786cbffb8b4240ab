//! Pose-image model: VAE image encoder plus the (optionally conditional)
//! invertible flow between encoded poses and image latents.

use std::f64::consts::PI;

use ndiff::{ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{EncodeMode, EncoderError, Vae, VaeConfig};
use crate::flow::{FlowConfig, FlowDims, FlowError, FlowModel};
use crate::geometry::{
    denormalize_pose, encoded_len, normalize_pose, positional_encode, wrap_angle, Aabb, EncodedPose,
    GeometryError, Pose, PoseDim,
};
use crate::image::Image;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Ndiff(#[from] ndiff::NdiffError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("pose has dimension {got}, model expects {expected}")]
    PoseDim { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Cells used to round the previous state into a condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConditionGrid {
    pub cell_m: f64,
    pub cell_deg: f64,
}

impl Default for ConditionGrid {
    fn default() -> Self {
        Self { cell_m: 0.5, cell_deg: 30.0 }
    }
}

impl ConditionGrid {
    /// Center of the grid cell containing `pose`. Cells are anchored at the
    /// world origin and heading 0; the center is clamped into `bounds`.
    pub fn round(&self, pose: &Pose, bounds: &Aabb) -> Pose {
        let center = |v: f64, cell: f64| ((v / cell).floor() + 0.5) * cell;
        let x = center(pose.position[0], self.cell_m).clamp(bounds.min[0], bounds.max[0]);
        let y = center(pose.position[1], self.cell_m).clamp(bounds.min[1], bounds.max[1]);
        let cell = self.cell_deg.to_radians();
        let heading = center(wrap_angle(pose.heading()), cell);
        Pose::se2(x, y, heading)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub pose_dim: PoseDim,
    /// Positional encoding depth `L`.
    pub encoding_depth: usize,
    /// Condition the flow on the rounded previous state (planar poses only).
    pub conditional: bool,
    pub grid: ConditionGrid,
    pub flow: FlowConfig,
    pub vae: VaeConfig,
    /// Seed for parameter initialization and permutations.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            pose_dim: PoseDim::Se2,
            encoding_depth: 5,
            conditional: false,
            grid: ConditionGrid::default(),
            flow: FlowConfig::default(),
            vae: VaeConfig::default(),
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoding_depth == 0 {
            return Err(ModelError::Config("encoding_depth must be at least 1".into()));
        }
        if self.conditional && self.pose_dim != PoseDim::Se2 {
            return Err(ModelError::Config("conditional models are planar (pose_dim = \"se2\")".into()));
        }
        if !(self.grid.cell_m > 0.0 && self.grid.cell_deg > 0.0) {
            return Err(ModelError::Config("grid cells must be positive".into()));
        }
        if self.flow.blocks == 0 || self.flow.hidden_width == 0 {
            return Err(ModelError::Config("flow needs at least one block and a positive width".into()));
        }
        Ok(())
    }

    pub fn dims(&self) -> FlowDims {
        FlowDims { pose_dim: self.pose_dim.dim(), depth: self.encoding_depth }
    }

    /// Width of the raw condition: the encoded planar cell center.
    pub fn condition_width(&self) -> Option<usize> {
        self.conditional.then(|| encoded_len(3, self.encoding_depth))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseInnModel {
    pub config: ModelConfig,
    pub bounds: Aabb,
    pub store: ParamStore,
    pub vae: Vae,
    pub flow: FlowModel,
}

impl PoseInnModel {
    pub fn new(config: ModelConfig, bounds: Aabb) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let dims = config.dims();
        let vae = Vae::new(&mut store, dims.image_latent(), &config.vae, &mut rng)?;
        let flow = FlowModel::new(&mut store, dims, &config.flow, config.condition_width(), &mut rng);
        Ok(Self { config, bounds, store, vae, flow })
    }

    pub fn pose_dim(&self) -> PoseDim {
        self.config.pose_dim
    }

    pub fn check_pose(&self, pose: &Pose) -> Result<()> {
        if pose.dim != self.config.pose_dim {
            return Err(ModelError::PoseDim { expected: self.config.pose_dim.dim(), got: pose.dim.dim() });
        }
        Ok(())
    }

    /// Normalized, positionally encoded pose `x̂`.
    pub fn encode_pose(&self, pose: &Pose) -> Result<EncodedPose> {
        self.check_pose(pose)?;
        Ok(positional_encode(&normalize_pose(pose, &self.bounds)?, self.config.encoding_depth)?)
    }

    /// Pose from the raw tail of an encoded vector; the encoding part is ignored.
    pub fn decode_pose(&self, encoded: &[f64]) -> Result<Pose> {
        let d = self.config.pose_dim.dim();
        if encoded.len() < d {
            return Err(ModelError::PoseDim { expected: d, got: encoded.len() });
        }
        Ok(denormalize_pose(&encoded[encoded.len() - d..], self.config.pose_dim, &self.bounds)?)
    }

    /// Raw condition input for a previous-state estimate: the encoded center
    /// of its grid cell.
    pub fn condition_raw(&self, previous: &Pose) -> Result<Vec<f64>> {
        let cell = self.config.grid.round(previous, &self.bounds);
        Ok(positional_encode(&normalize_pose(&cell, &self.bounds)?, self.config.encoding_depth)?.0)
    }

    pub fn encode_images(&self, images: &[&Image], mode: EncodeMode, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        Ok(self.vae.encode(&self.store, images, mode, rng)?)
    }

    /// Inverse flow for one image latent and `zs.len()` latent draws.
    /// Returns the raw encoded outputs, `[N, working]`.
    pub fn inverse_many(&self, yhat: &[f64], zs: &[Vec<f64>], cond: Option<&[f64]>) -> Result<Tensor> {
        let n = zs.len();
        let dims = self.config.dims();
        if yhat.len() != dims.image_latent() {
            return Err(ModelError::PoseDim { expected: dims.image_latent(), got: yhat.len() });
        }
        let y = Tensor::new(vec![n, yhat.len()], yhat.repeat(n))?;
        let z = Tensor::new(vec![n, dims.z()], zs.concat())?;
        let c = cond.map(|c| Tensor::new(vec![n, c.len()], c.repeat(n))).transpose()?;
        Ok(self.flow.inverse(&self.store, &y, &z, c.as_ref())?)
    }

    /// Forward flow for a batch of encoded poses.
    pub fn forward_many(&self, encoded: &Tensor, cond: Option<&[f64]>) -> Result<(Tensor, Tensor)> {
        let n = encoded.shape()[0];
        let c = cond.map(|c| Tensor::new(vec![n, c.len()], c.repeat(n))).transpose()?;
        Ok(self.flow.forward(&self.store, encoded, c.as_ref())?)
    }
}

/// Angular difference of two normalized headings `a, b ∈ [-1, 1)`, in radians.
pub fn normalized_angle_gap(a: f64, b: f64) -> f64 {
    wrap_angle(PI * (a - b)).abs()
}
