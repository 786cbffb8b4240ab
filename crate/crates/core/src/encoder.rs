//! VAE image encoder/decoder producing the image-side latent of the flow.
//!
//! Encoder: four stride-2 3×3 convolutions (16, 32, 64, then one channel per
//! latent dimension), global average pooling to one value per channel, and
//! linear heads for `μ` and `log σ²`. Decoder: linear layer to a `64×(S/8)²`
//! map and three stride-2 transposed convolutions back to `3×S×S`, squashed by
//! a sigmoid.

use ndiff::nn::{Conv2d, ConvTranspose2d, Init, Linear};
use ndiff::{Bound, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Image;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("image is {got_w}x{got_h}, encoder expects {expected}x{expected}")]
    ImageSize { expected: usize, got_w: usize, got_h: usize },
    #[error("latent has width {got}, expected {expected}")]
    LatentWidth { expected: usize, got: usize },
    #[error("image size {0} must be a positive multiple of 8")]
    BadImageSize(usize),
    #[error("{0}: lengths differ or values are not finite")]
    BadInput(&'static str),
    #[error(transparent)]
    Ndiff(#[from] ndiff::NdiffError),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    /// Square image side in pixels.
    pub image_size: usize,
    /// Channels of the first three convolutions; the fourth has one channel
    /// per latent dimension.
    pub channels: [usize; 3],
    pub leaky_alpha: f64,
    /// Initial bias of the `log σ²` head.
    pub init_log_var: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self { image_size: 32, channels: [16, 32, 64], leaky_alpha: 0.01, init_log_var: -4.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncodeMode {
    /// `μ + σ ⊙ ε`, used in training.
    Sample,
    /// `μ`, used at inference.
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeEncoder {
    pub convs: Vec<Conv2d>,
    pub mu: Linear,
    pub log_var: Linear,
    pub latent: usize,
    pub image_size: usize,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeDecoder {
    pub fc: Linear,
    pub deconvs: Vec<ConvTranspose2d>,
    pub base_channels: usize,
    pub base_size: usize,
    pub latent: usize,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vae {
    pub encoder: VaeEncoder,
    pub decoder: VaeDecoder,
}

impl Vae {
    pub fn new(store: &mut ParamStore, latent: usize, cfg: &VaeConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.image_size == 0 || cfg.image_size % 8 != 0 {
            return Err(EncoderError::BadImageSize(cfg.image_size));
        }
        let [c1, c2, c3] = cfg.channels;
        let widths = [3, c1, c2, c3, latent];
        let convs = (0..4)
            .map(|i| Conv2d::new(store, &format!("vae.enc.conv{i}"), widths[i], widths[i + 1], 3, 2, 1, rng))
            .collect();
        let mu = Linear::new(store, "vae.enc.mu", latent, latent, Init::GlorotUniform, rng);
        let log_var = Linear::new(store, "vae.enc.logvar", latent, latent, Init::Zeros, rng);
        store.get_mut(log_var.b).data_mut().fill(cfg.init_log_var);

        let base_size = cfg.image_size / 8;
        let fc = Linear::new(store, "vae.dec.fc", latent, c3 * base_size * base_size, Init::HeUniform, rng);
        let dwidths = [c3, c2, c1, 3];
        let deconvs = (0..3)
            .map(|i| {
                ConvTranspose2d::new(store, &format!("vae.dec.deconv{i}"), dwidths[i], dwidths[i + 1], 4, 2, 1, rng)
            })
            .collect();
        Ok(Self {
            encoder: VaeEncoder {
                convs,
                mu,
                log_var,
                latent,
                image_size: cfg.image_size,
                alpha: cfg.leaky_alpha,
            },
            decoder: VaeDecoder { fc, deconvs, base_channels: c3, base_size, latent, alpha: cfg.leaky_alpha },
        })
    }

    pub fn check_image(&self, img: &Image) -> Result<()> {
        let s = self.encoder.image_size;
        if img.width != s || img.height != s {
            return Err(EncoderError::ImageSize { expected: s, got_w: img.width, got_h: img.height });
        }
        Ok(())
    }

    /// `x: [B, 3, S, S]` to `(μ, log σ²)`, each `[B, latent]`.
    pub fn encode_tape(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let s = self.encoder.image_size;
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[2] != s || shape[3] != s {
            return Err(EncoderError::ImageSize { expected: s, got_w: *shape.last().unwrap_or(&0), got_h: shape.get(2).copied().unwrap_or(0) });
        }
        let mut h = x;
        for conv in &self.encoder.convs {
            h = conv.apply(tape, p, h)?;
            h = tape.leaky_relu(h, self.encoder.alpha)?;
        }
        let pooled = tape.global_avg_pool(h)?;
        let mu = self.encoder.mu.apply(tape, p, pooled)?;
        let lv = self.encoder.log_var.apply(tape, p, pooled)?;
        Ok((mu, lv))
    }

    /// Reparameterised sample `μ + exp(½ log σ²) ⊙ ε` with `ε` given.
    pub fn sample_tape(&self, tape: &mut Tape, mu: Var, log_var: Var, eps: Var) -> Result<Var> {
        let half = tape.scale(log_var, 0.5)?;
        let sigma = tape.exp(half)?;
        let noise = tape.mul(sigma, eps)?;
        Ok(tape.add(mu, noise)?)
    }

    /// `[B, latent]` to images `[B, 3, S, S]` in `[0, 1]`.
    pub fn decode_tape(&self, tape: &mut Tape, p: &Bound, latent: Var) -> Result<Var> {
        let d = &self.decoder;
        let got = tape.shape(latent).get(1).copied().unwrap_or(0);
        if got != d.latent {
            return Err(EncoderError::LatentWidth { expected: d.latent, got });
        }
        let rows = tape.shape(latent)[0];
        let h = d.fc.apply(tape, p, latent)?;
        let h = tape.leaky_relu(h, d.alpha)?;
        let mut h = tape.reshape(h, &[rows, d.base_channels, d.base_size, d.base_size])?;
        for (i, deconv) in d.deconvs.iter().enumerate() {
            h = deconv.apply(tape, p, h)?;
            if i + 1 < d.deconvs.len() {
                h = tape.leaky_relu(h, d.alpha)?;
            }
        }
        Ok(tape.sigmoid(h)?)
    }

    /// Encode a batch of images. `rng` is only drawn from in
    /// [`EncodeMode::Sample`].
    pub fn encode(&self, store: &ParamStore, images: &[&Image], mode: EncodeMode, rng: &mut impl Rng) -> Result<Tensor> {
        for img in images {
            self.check_image(img)?;
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.leaf(Image::batch_chw(images));
        let (mu, lv) = self.encode_tape(&mut tape, &p, x)?;
        let out = match mode {
            EncodeMode::Mean => mu,
            EncodeMode::Sample => {
                let n = images.len() * self.encoder.latent;
                let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
                let eps = tape.leaf(Tensor::new(vec![images.len(), self.encoder.latent], eps)?);
                self.sample_tape(&mut tape, mu, lv, eps)?
            }
        };
        Ok(tape.value(out).clone())
    }

    pub fn decode(&self, store: &ParamStore, latents: &Tensor) -> Result<Vec<Image>> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let z = tape.leaf(latents.clone());
        let out = self.decode_tape(&mut tape, &p, z)?;
        let t = tape.value(out);
        Ok((0..t.shape()[0]).map(|i| Image::from_chw(t, i)).collect())
    }
}

/// `½ Σ (μ² + σ² − 1 − log σ²)` for one latent.
pub fn kl_divergence(mu: &[f64], log_var: &[f64]) -> Result<f64> {
    if mu.len() != log_var.len() || mu.iter().chain(log_var).any(|v| !v.is_finite()) {
        return Err(EncoderError::BadInput("kl_divergence"));
    }
    Ok(0.5 * mu.iter().zip(log_var).map(|(m, lv)| m * m + lv.exp() - 1.0 - lv).sum::<f64>())
}

/// Batch-mean KL divergence on the tape, `μ, log σ²: [B, latent]`.
pub fn kl_divergence_tape(tape: &mut Tape, mu: Var, log_var: Var) -> Result<Var> {
    let rows = tape.shape(mu)[0] as f64;
    let m2 = tape.square(mu)?;
    let ev = tape.exp(log_var)?;
    let a = tape.add(m2, ev)?;
    let b = tape.sub(a, log_var)?;
    let c = tape.add_scalar(b, -1.0)?;
    let s = tape.sum(c)?;
    Ok(tape.scale(s, 0.5 / rows)?)
}
