//! Bidirectional training: each step runs the VAE, the forward flow path
//! (pose to image latent) and the reverse path (image latent and fresh `z` to
//! pose), sums the weighted losses and takes one Adam step on all parameters.

use std::f64::consts::PI;

use ndiff::{Adam, ParamStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Sample;
use crate::encoder::kl_divergence_tape;
use crate::geometry::{wrap_angle, Pose, PoseDim};
use crate::image::Image;
use crate::model::{ModelError, PoseInnModel};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("dataset has {got} samples, fewer than one batch of {batch}")]
    TooFewSamples { got: usize, batch: usize },
    #[error("sample pose dimension {got} does not match the model ({expected})")]
    PoseDim { expected: usize, got: usize },
    #[error("epoch {epoch}: non-finite loss ({detail})")]
    NonFinite { epoch: usize, detail: String },
    #[error("epoch {epoch}: {source}")]
    Step { epoch: usize, source: ndiff::NdiffError },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Forward path: MSE between predicted and encoded image latents.
    pub fwd: f64,
    /// Reverse path: MSE on the normalized position tail.
    pub rev_pos: f64,
    /// Reverse path: MSE on the positional-encoding part.
    pub rev_enc: f64,
    /// Reverse path: geodesic rotation error in radians.
    pub rev_rot: f64,
    pub recon: f64,
    pub kl: f64,
    /// Gaussian negative log-likelihood of the forward `z` per dimension.
    pub nll: f64,
    /// Energy score of several reverse samples against the true pose.
    pub spread: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { fwd: 1.0, rev_pos: 1.0, rev_enc: 0.1, rev_rot: 1.0, recon: 1.0, kl: 1e-3, nll: 0.0, spread: 0.0 }
    }
}

impl LossWeights {
    fn as_array(&self) -> [f64; 8] {
        [self.fwd, self.rev_pos, self.rev_enc, self.rev_rot, self.recon, self.kl, self.nll, self.spread]
    }

    pub fn zero() -> Self {
        Self { fwd: 0.0, rev_pos: 0.0, rev_enc: 0.0, rev_rot: 0.0, recon: 0.0, kl: 0.0, nll: 0.0, spread: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    /// Leading epochs (counted in `epochs`) that train the VAE alone.
    pub warmup_epochs: usize,
    pub weights: LossWeights,
    /// Reverse samples per example for the energy-score term.
    pub spread_samples: usize,
    /// Uniform jitter applied to the true pose before rounding it into a
    /// training condition.
    pub condition_jitter_m: f64,
    pub condition_jitter_deg: f64,
    /// Write a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 200,
            lr_start: 5e-4,
            lr_end: 5e-5,
            warmup_epochs: 3,
            weights: LossWeights::default(),
            spread_samples: 4,
            condition_jitter_m: 0.25,
            condition_jitter_deg: 15.0,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end && self.lr_start.is_finite()) {
            return bad("need lr_start >= lr_end > 0");
        }
        if self.weights.as_array().iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return bad("loss weights must be finite and non-negative");
        }
        if self.weights.spread > 0.0 && self.spread_samples < 2 {
            return bad("the spread term needs spread_samples >= 2");
        }
        if !(self.condition_jitter_m >= 0.0 && self.condition_jitter_deg >= 0.0) {
            return bad("condition jitter must be non-negative");
        }
        Ok(())
    }
}

/// `lr(e) = start · (end / start)^(e / (E − 1))`, so the last epoch uses `end`.
pub fn learning_rate(cfg: &TrainConfig, epoch: usize) -> f64 {
    if cfg.epochs <= 1 {
        return cfg.lr_start;
    }
    let frac = epoch.min(cfg.epochs - 1) as f64 / (cfg.epochs - 1) as f64;
    cfg.lr_start * (cfg.lr_end / cfg.lr_start).powf(frac)
}

/// Unweighted loss components of one step or averaged over an epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub fwd: f64,
    pub rev_pos: f64,
    pub rev_enc: f64,
    pub rev_rot: f64,
    pub recon: f64,
    pub kl: f64,
    pub nll: f64,
    pub spread: f64,
}

impl LossComponents {
    fn as_array(&self) -> [f64; 8] {
        [self.fwd, self.rev_pos, self.rev_enc, self.rev_rot, self.recon, self.kl, self.nll, self.spread]
    }

    fn from_array(a: [f64; 8]) -> Self {
        let [fwd, rev_pos, rev_enc, rev_rot, recon, kl, nll, spread] = a;
        Self { fwd, rev_pos, rev_enc, rev_rot, recon, kl, nll, spread }
    }

    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        self.as_array().iter().zip(w.as_array()).map(|(c, w)| c * w).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub components: LossComponents,
    pub total: f64,
    /// Mean reverse-path position error in meters (one `z` draw).
    pub pos_err_m: f64,
    /// Mean reverse-path rotation error in radians.
    pub rot_err_rad: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub components: LossComponents,
    pub pos_err_m: f64,
    pub rot_err_rad: f64,
}

impl LossReport {
    pub const HEADER: &'static str =
        "epoch\tlr\ttotal\tfwd\trev_pos\trev_enc\trev_rot\trecon\tkl\tnll\tspread\tpos_err_m\trot_err_rad";

    pub fn row(&self) -> String {
        let c = self.components.as_array().map(|v| format!("{v:.9e}")).join("\t");
        format!(
            "{}\t{:.9e}\t{:.9e}\t{c}\t{:.9e}\t{:.9e}",
            self.epoch, self.lr, self.total, self.pos_err_m, self.rot_err_rad
        )
    }
}

/// Random inputs of one training step, drawn before the loss is built.
#[derive(Clone, Debug)]
pub struct StepInputs {
    images: Tensor,
    eps: Tensor,
    encoded: Tensor,
    normalized: Vec<f64>,
    conds: Option<Tensor>,
    z_rev: Tensor,
    z_spread: Option<Tensor>,
    spread_samples: usize,
    weights: LossWeights,
    vae_only: bool,
}

/// Loss and gradients of one evaluation.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub components: LossComponents,
    pub total: f64,
    pub gradients: Vec<Tensor>,
    /// Normalized pose tail of the reverse pass, when the flow ran.
    pub reverse_tail: Option<Tensor>,
}

/// Training state: model, optimizer, rng and epoch counter.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: PoseInnModel,
    pub config: TrainConfig,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    /// Number of completed epochs.
    pub epoch: usize,
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect()).expect("shape matches")
}

fn column(values: Vec<f64>) -> Tensor {
    let n = values.len();
    Tensor::new(vec![n, 1], values).expect("column")
}

/// Rotation-matrix entries of `Rz(a)·Rx(b)·Ry(c)` for column tensors of angles.
fn rotation_entries(tape: &mut Tape, a: Var, b: Var, c: Var) -> ndiff::Result<[Var; 9]> {
    let (sa, ca) = (tape.sin(a)?, tape.cos(a)?);
    let (sb, cb) = (tape.sin(b)?, tape.cos(b)?);
    let (sc, cc) = (tape.sin(c)?, tape.cos(c)?);
    let sa_sb = tape.mul(sa, sb)?;
    let ca_sb = tape.mul(ca, sb)?;
    let ca_cc = tape.mul(ca, cc)?;
    let sa_sb_sc = tape.mul(sa_sb, sc)?;
    let m00 = tape.sub(ca_cc, sa_sb_sc)?;
    let sa_cb = tape.mul(sa, cb)?;
    let m01 = tape.scale(sa_cb, -1.0)?;
    let ca_sc = tape.mul(ca, sc)?;
    let sa_sb_cc = tape.mul(sa_sb, cc)?;
    let m02 = tape.add(ca_sc, sa_sb_cc)?;
    let sa_cc = tape.mul(sa, cc)?;
    let ca_sb_sc = tape.mul(ca_sb, sc)?;
    let m10 = tape.add(sa_cc, ca_sb_sc)?;
    let m11 = tape.mul(ca, cb)?;
    let sa_sc = tape.mul(sa, sc)?;
    let ca_sb_cc = tape.mul(ca_sb, cc)?;
    let m12 = tape.sub(sa_sc, ca_sb_cc)?;
    let cb_sc = tape.mul(cb, sc)?;
    let m20 = tape.scale(cb_sc, -1.0)?;
    let m22 = tape.mul(cb, cc)?;
    Ok([m00, m01, m02, m10, m11, m12, m20, sb, m22])
}

/// Features for the energy score: positions plus `(cos, sin)` of each angle,
/// so the heading seam at ±π is continuous.
fn spread_features(tape: &mut Tape, tail: Var, dim: PoseDim) -> ndiff::Result<Var> {
    let pd = dim.position_dims();
    let nd = dim.dim();
    let pos = tape.slice(tail, 1, 0, pd)?;
    let ang = tape.slice(tail, 1, pd, nd - pd)?;
    let ang = tape.scale(ang, PI)?;
    let (c, s) = (tape.cos(ang)?, tape.sin(ang)?);
    tape.concat(&[pos, c, s], 1)
}

fn row_norm(tape: &mut Tape, a: Var, b: Var) -> ndiff::Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.square(d)?;
    let s = tape.row_sum(sq)?;
    let s = tape.add_scalar(s, 1e-12)?;
    tape.sqrt(s)
}

impl Trainer {
    pub fn new(model: PoseInnModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(&model.store);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self { model, config, adam, rng, epoch: 0 })
    }

    fn check_data(&self, data: &[Sample]) -> Result<()> {
        if data.len() < self.config.batch_size {
            return Err(TrainError::TooFewSamples { got: data.len(), batch: self.config.batch_size });
        }
        let expected = self.model.pose_dim();
        if let Some(s) = data.iter().find(|s| s.pose.dim != expected) {
            return Err(TrainError::PoseDim { expected: expected.dim(), got: s.pose.dim.dim() });
        }
        for s in data {
            self.model.vae.check_image(&s.image).map_err(ModelError::from)?;
        }
        Ok(())
    }

    /// Training condition: the true pose with uniform jitter, rounded to the grid.
    fn training_condition(&mut self, pose: &Pose) -> Result<Vec<f64>> {
        let jm = self.config.condition_jitter_m;
        let ja = self.config.condition_jitter_deg.to_radians();
        let b = self.model.bounds;
        let mut dx = 0.0;
        let mut dy = 0.0;
        let mut da = 0.0;
        if jm > 0.0 {
            dx = self.rng.random_range(-jm..=jm);
            dy = self.rng.random_range(-jm..=jm);
        }
        if ja > 0.0 {
            da = self.rng.random_range(-ja..=ja);
        }
        let jittered = Pose::se2(
            (pose.position[0] + dx).clamp(b.min[0], b.max[0]),
            (pose.position[1] + dy).clamp(b.min[1], b.max[1]),
            pose.heading() + da,
        );
        Ok(self.model.condition_raw(&jittered)?)
    }

    /// Draw the random inputs of one step on `batch`. `vae_only` restricts the
    /// loss to the reconstruction and KL terms.
    pub fn prepare_step(&mut self, batch: &[&Sample], vae_only: bool) -> Result<StepInputs> {
        let epoch = self.epoch;
        let step_err = |source| TrainError::Step { epoch, source };
        let dims = self.model.config.dims();
        let pose_dim = self.model.pose_dim();
        let nd = pose_dim.dim();
        let rows = batch.len();
        let weights = if vae_only {
            LossWeights { recon: self.config.weights.recon, kl: self.config.weights.kl, ..LossWeights::zero() }
        } else {
            self.config.weights.clone()
        };

        // Draw order is fixed: eps, conditions, reverse z, spread z.
        let images: Vec<&Image> = batch.iter().map(|s| &s.image).collect();
        let x_img = Image::batch_chw(&images);
        let eps = normal_tensor(&mut self.rng, &[rows, dims.image_latent()]);
        let mut encoded = Vec::with_capacity(rows * dims.working());
        let mut normalized = Vec::with_capacity(rows * nd);
        for s in batch {
            let e = self.model.encode_pose(&s.pose)?;
            normalized.extend_from_slice(e.tail(pose_dim));
            encoded.extend(e.0);
        }
        let conds = if self.model.flow.is_conditional() && !vae_only {
            let mut c = Vec::new();
            for s in batch {
                c.extend(self.training_condition(&s.pose)?);
            }
            Some(Tensor::new(vec![rows, c.len() / rows], c).map_err(step_err)?)
        } else {
            None
        };
        let z_rev = normal_tensor(&mut self.rng, &[rows, dims.z()]);
        let k = self.config.spread_samples;
        let z_spread = (!vae_only && weights.spread > 0.0).then(|| normal_tensor(&mut self.rng, &[rows * k, dims.z()]));
        Ok(StepInputs {
            images: x_img,
            eps,
            encoded: Tensor::new(vec![rows, dims.working()], encoded).map_err(step_err)?,
            normalized,
            conds,
            z_rev,
            z_spread,
            spread_samples: k,
            weights,
            vae_only,
        })
    }

    /// One optimizer step on `batch`.
    pub fn train_step(&mut self, batch: &[&Sample], lr: f64, vae_only: bool) -> Result<StepReport> {
        let epoch = self.epoch;
        let inputs = self.prepare_step(batch, vae_only)?;
        let eval = self.evaluate(&self.model.store, &inputs)?;
        self.adam
            .step(&mut self.model.store, &eval.gradients, lr)
            .map_err(|source| TrainError::Step { epoch, source })?;
        let (pos_err_m, rot_err_rad) = match &eval.reverse_tail {
            Some(t) => self.metric_errors(t, &inputs.normalized),
            None => (0.0, 0.0),
        };
        Ok(StepReport { components: eval.components, total: eval.total, pos_err_m, rot_err_rad })
    }

    /// Loss value and parameter gradients for `inputs`, evaluated at the
    /// parameter values in `store` (which must share the model's layout).
    pub fn evaluate(&self, store: &ParamStore, inputs: &StepInputs) -> Result<Evaluation> {
        let epoch = self.epoch;
        let step_err = |source| TrainError::Step { epoch, source };
        let model = &self.model;
        let dims = model.config.dims();
        let pose_dim = model.pose_dim();
        let (pd, nd) = (pose_dim.position_dims(), pose_dim.dim());
        let rows = inputs.images.shape()[0];
        let vae_only = inputs.vae_only;
        let w = inputs.weights.clone();
        let k = inputs.spread_samples;
        let normalized = &inputs.normalized;
        let x_img = inputs.images.clone();
        let eps = inputs.eps.clone();
        let encoded = inputs.encoded.clone();
        let conds = inputs.conds.clone();
        let z_rev = inputs.z_rev.clone();
        let z_spread = inputs.z_spread.clone();

        let model = &self.model;
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let run = |tape: &mut Tape| -> std::result::Result<(Var, [Option<Var>; 8], Option<Var>), ModelError> {
            let x = tape.leaf(x_img);
            let (mu, lv) = model.vae.encode_tape(tape, &p, x)?;
            let eps = tape.leaf(eps);
            let yhat = model.vae.sample_tape(tape, mu, lv, eps)?;
            let recon_img = model.vae.decode_tape(tape, &p, yhat)?;
            let recon = tape.mse(recon_img, x)?;
            let kl = kl_divergence_tape(tape, mu, lv)?;
            let mut comps: [Option<Var>; 8] = [None, None, None, None, Some(recon), Some(kl), None, None];
            let mut rev_tail = None;
            if !vae_only {
                let xe = tape.leaf(encoded);
                let cond = conds.map(|c| tape.leaf(c));
                let fwd = model.flow.forward_tape(tape, &p, xe, cond)?;
                let (yp, zp) = model.flow.split_output(tape, fwd.out)?;
                comps[0] = Some(tape.mse(yp, yhat)?);
                if w.nll > 0.0 {
                    let zz = tape.square(zp)?;
                    let zz = tape.row_sum(zz)?;
                    let half = tape.scale(zz, 0.5)?;
                    let per = tape.sub(half, fwd.log_det)?;
                    let m = tape.mean(per)?;
                    comps[6] = Some(tape.scale(m, 1.0 / dims.working() as f64)?);
                }

                let zr = tape.leaf(z_rev);
                let rev = model.flow.inverse_tape(tape, &p, yhat, zr, cond)?;
                let tail = tape.slice(rev.out, 1, dims.image_latent(), nd)?;
                rev_tail = Some(tail);
                let target = tape.leaf(Tensor::new(vec![rows, nd], normalized.to_vec())?);
                let pos = tape.slice(tail, 1, 0, pd)?;
                let pos_t = tape.slice(target, 1, 0, pd)?;
                comps[1] = Some(tape.mse(pos, pos_t)?);
                let enc_part = tape.slice(rev.out, 1, 0, dims.image_latent())?;
                let enc_t = tape.slice(xe, 1, 0, dims.image_latent())?;
                comps[2] = Some(tape.mse(enc_part, enc_t)?);
                let ang = tape.slice(tail, 1, pd, nd - pd)?;
                let ang_t = tape.slice(target, 1, pd, nd - pd)?;
                let geo = match pose_dim {
                    PoseDim::Se2 => {
                        let d = tape.sub(ang, ang_t)?;
                        let d = tape.scale(d, PI)?;
                        let c = tape.cos(d)?;
                        tape.acos(c)?
                    }
                    PoseDim::Se3 => {
                        let ang = tape.scale(ang, PI)?;
                        let cols = tape.split(ang, &[1, 1, 1], 1)?;
                        let m = rotation_entries(tape, cols[0], cols[1], cols[2])?;
                        let mut gt: [Vec<f64>; 9] = Default::default();
                        for r in 0..rows {
                            let t = &normalized[r * nd..(r + 1) * nd];
                            let rot = Pose::se3([0.0; 3], PI * t[3], PI * t[4], PI * t[5]).rotation().0;
                            for (i, g) in gt.iter_mut().enumerate() {
                                g.push(rot[(i / 3, i % 3)]);
                            }
                        }
                        let mut trace: Option<Var> = None;
                        for (mi, g) in m.into_iter().zip(gt) {
                            let gv = tape.leaf(column(g));
                            let prod = tape.mul(mi, gv)?;
                            trace = Some(match trace {
                                Some(acc) => tape.add(acc, prod)?,
                                None => prod,
                            });
                        }
                        let arg = tape.add_scalar(trace.expect("nine entries"), -1.0)?;
                        let arg = tape.scale(arg, 0.5)?;
                        tape.acos(arg)?
                    }
                };
                comps[3] = Some(tape.mean(geo)?);

                if let Some(zs) = z_spread {
                    let y_rep: Vec<Var> = vec![yhat; k];
                    let y_rep = tape.concat(&y_rep, 0)?;
                    let c_rep = match cond {
                        Some(c) => Some(tape.concat(&vec![c; k], 0)?),
                        None => None,
                    };
                    let zs = tape.leaf(zs);
                    let many = model.flow.inverse_tape(tape, &p, y_rep, zs, c_rep)?;
                    let tails = tape.slice(many.out, 1, dims.image_latent(), nd)?;
                    let feats = spread_features(tape, tails, pose_dim)?;
                    let target_f = spread_features(tape, target, pose_dim)?;
                    let parts = tape.split(feats, &vec![rows; k], 0)?;
                    let mut acc: Option<Var> = None;
                    let mut push = |tape: &mut Tape, v: Var, scale: f64| -> ndiff::Result<()> {
                        let s = tape.sum(v)?;
                        let s = tape.scale(s, scale)?;
                        acc = Some(match acc {
                            Some(a) => tape.add(a, s)?,
                            None => s,
                        });
                        Ok(())
                    };
                    let kf = k as f64;
                    for i in 0..k {
                        let d = row_norm(tape, parts[i], target_f)?;
                        push(tape, d, 1.0 / (kf * rows as f64))?;
                        for j in i + 1..k {
                            let d = row_norm(tape, parts[i], parts[j])?;
                            push(tape, d, -1.0 / (kf * (kf - 1.0) * rows as f64))?;
                        }
                    }
                    comps[7] = acc;
                }
            }
            let mut total: Option<Var> = None;
            for (c, wi) in comps.iter().zip(w.as_array()) {
                if let Some(c) = c {
                    let term = tape.scale(*c, wi)?;
                    total = Some(match total {
                        Some(t) => tape.add(t, term)?,
                        None => term,
                    });
                }
            }
            Ok((total.expect("recon is always present"), comps, rev_tail))
        };
        let (total, comps, rev_tail) = run(&mut tape).map_err(|e| match e {
            ModelError::Ndiff(ndiff::NdiffError::NonFinite { op }) => {
                TrainError::NonFinite { epoch, detail: format!("non-finite value in `{op}`") }
            }
            other => TrainError::Model(other),
        })?;
        let values = comps.map(|c| c.map_or(0.0, |v| tape.value(v).item()));
        let components = LossComponents::from_array(values);
        let total_value = tape.value(total).item();
        if !total_value.is_finite() {
            return Err(TrainError::NonFinite { epoch, detail: format!("{components:?}") });
        }
        let grads = tape.backward(total).map_err(step_err)?;
        let gradients = p.gradients(&grads);
        let reverse_tail = rev_tail.map(|t| tape.value(t).clone());
        Ok(Evaluation { components, total: total_value, gradients, reverse_tail })
    }

    /// Mean position error (m) and rotation error (rad) between predicted and
    /// true normalized pose tails.
    fn metric_errors(&self, pred: &Tensor, truth: &[f64]) -> (f64, f64) {
        let dim = self.model.pose_dim();
        let nd = dim.dim();
        let rows = pred.shape()[0];
        let (mut pe, mut re) = (0.0, 0.0);
        for r in 0..rows {
            let a = self.model.decode_pose(pred.row(r)).expect("tail has pose length");
            let b = self.model.decode_pose(&truth[r * nd..(r + 1) * nd]).expect("tail has pose length");
            pe += a.translation_error(&b);
            re += match dim {
                PoseDim::Se2 => wrap_angle(a.heading() - b.heading()).abs(),
                PoseDim::Se3 => a.rotation_error(&b),
            };
        }
        (pe / rows as f64, re / rows as f64)
    }

    /// Epoch order: originals and synthetics shuffled separately, then
    /// interleaved one-to-one until the shorter list runs out.
    pub fn epoch_order(&mut self, data: &[Sample]) -> Vec<usize> {
        let (mut real, mut synth): (Vec<usize>, Vec<usize>) = (0..data.len()).partition(|&i| !data[i].synthetic);
        real.shuffle(&mut self.rng);
        synth.shuffle(&mut self.rng);
        let mut order = Vec::with_capacity(data.len());
        let (mut a, mut b) = (real.into_iter(), synth.into_iter());
        loop {
            match (a.next(), b.next()) {
                (None, None) => break,
                (x, y) => order.extend(x.into_iter().chain(y)),
            }
        }
        order
    }

    /// Run one epoch and advance the epoch counter.
    pub fn run_epoch(&mut self, data: &[Sample]) -> Result<LossReport> {
        self.check_data(data)?;
        let lr = learning_rate(&self.config, self.epoch);
        let vae_only = self.epoch < self.config.warmup_epochs;
        let order = self.epoch_order(data);
        let mut sums = [0.0; 8];
        let (mut total, mut pe, mut re) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
            let r = self.train_step(&batch, lr, vae_only)?;
            let n = batch.len() as f64;
            for (s, c) in sums.iter_mut().zip(r.components.as_array()) {
                *s += n * c;
            }
            total += n * r.total;
            pe += n * r.pos_err_m;
            re += n * r.rot_err_rad;
        }
        let n = data.len() as f64;
        let report = LossReport {
            epoch: self.epoch,
            lr,
            total: total / n,
            components: LossComponents::from_array(sums.map(|s| s / n)),
            pos_err_m: pe / n,
            rot_err_rad: re / n,
        };
        log::info!(
            "epoch {} lr {:.3e} total {:.5} fwd {:.5} rev_pos {:.5} rev_rot {:.4} recon {:.5} pos_err {:.3} m",
            report.epoch,
            lr,
            report.total,
            report.components.fwd,
            report.components.rev_pos,
            report.components.rev_rot,
            report.components.recon,
            report.pos_err_m
        );
        self.epoch += 1;
        Ok(report)
    }

    /// Train until `config.epochs`, calling `on_epoch` after each epoch (for
    /// checkpoints and loss curves).
    pub fn train(
        &mut self,
        data: &[Sample],
        mut on_epoch: impl FnMut(&Trainer, &LossReport) -> Result<()>,
    ) -> Result<Vec<LossReport>> {
        self.check_data(data)?;
        let mut reports = Vec::new();
        while self.epoch < self.config.epochs {
            let r = self.run_epoch(data)?;
            on_epoch(self, &r)?;
            reports.push(r);
        }
        Ok(reports)
    }

    /// Whether a checkpoint is due after the epoch that just completed.
    pub fn checkpoint_due(&self) -> bool {
        self.epoch == self.config.epochs
            || (self.config.checkpoint_every > 0 && self.epoch % self.config.checkpoint_every == 0)
    }
}
