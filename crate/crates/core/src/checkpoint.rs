//! Binary checkpoints of a [`Trainer`]: model, optimizer, rng and epoch.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PINN"  u32 version
//! u32 len, UTF-8 TOML config echo (model config, train config, bounds)
//! u32 record count, then per record:
//!     u32 name len, name, u32 rank, rank × u64 dims, numel × f64 payload
//! optimizer: u64 step, f64 beta1, f64 beta2, f64 eps,
//!            per parameter numel × f64 first moment, then second moment
//! u64 completed epochs
//! rng: 32-byte ChaCha seed, u64 stream, u128 word position
//! ```
//!
//! Parameter records come first in store order; flow permutations follow as
//! `buf.flow.perm{i}` records holding indices as f64.

use std::io::Write;
use std::path::Path;

use ndiff::{Adam, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::Permutation;
use crate::geometry::Aabb;
use crate::model::{ModelConfig, ModelError, PoseInnModel};
use crate::trainer::{TrainConfig, TrainError, Trainer};

pub const MAGIC: &[u8; 4] = b"PINN";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic bytes)")]
    Magic,
    #[error("unsupported checkpoint version {0} (this build reads version {VERSION})")]
    Version(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checkpoint config: {0}")]
    Config(String),
    #[error("checkpoint record `{name}`: {detail}")]
    Record { name: String, detail: String },
    #[error("{0} trailing bytes after checkpoint data")]
    Trailing(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigEcho {
    bounds: Aabb,
    model: ModelConfig,
    train: TrainConfig,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
    fn record(&mut self, name: &str, shape: &[usize], data: &[f64]) {
        self.bytes(name.as_bytes());
        self.u32(shape.len() as u32);
        for &d in shape {
            self.u64(d as u64);
        }
        self.f64s(data);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(CheckpointError::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, n: usize, what: &'static str) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or(CheckpointError::Truncated(what))?, what)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
    fn bytes(&mut self, what: &'static str) -> Result<&'a [u8]> {
        let n = self.u32(what)? as usize;
        self.take(n, what)
    }
    fn record(&mut self) -> Result<(String, Tensor)> {
        let name = String::from_utf8(self.bytes("record name")?.to_vec())
            .map_err(|_| CheckpointError::Record { name: "?".into(), detail: "name is not UTF-8".into() })?;
        let rank = self.u32("record rank")? as usize;
        if rank > 8 {
            return Err(CheckpointError::Record { name, detail: format!("rank {rank} is implausible") });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64("record dims")? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(CheckpointError::Truncated("record payload"))?;
        let data = self.f64s(numel, "record payload")?;
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Record { name: name.clone(), detail: e.to_string() })?;
        Ok((name, t))
    }
}

pub fn to_bytes(trainer: &Trainer) -> Result<Vec<u8>> {
    let model = &trainer.model;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    let echo = ConfigEcho { bounds: model.bounds, model: model.config.clone(), train: trainer.config.clone() };
    let text = toml::to_string(&echo).map_err(|e| CheckpointError::Config(e.to_string()))?;
    w.bytes(text.as_bytes());
    let perms = &model.flow.stages;
    w.u32((model.store.len() + perms.len()) as u32);
    for (name, t) in model.store.iter() {
        w.record(name, t.shape(), t.data());
    }
    for (i, (perm, _)) in perms.iter().enumerate() {
        let idx: Vec<f64> = perm.indices().iter().map(|&j| j as f64).collect();
        w.record(&format!("buf.flow.perm{i}"), &[idx.len()], &idx);
    }
    let adam = &trainer.adam;
    w.u64(adam.step_count());
    w.f64s(&[adam.beta1, adam.beta2, adam.eps]);
    for t in adam.first_moments().iter().chain(adam.second_moments()) {
        w.f64s(t.data());
    }
    w.u64(trainer.epoch as u64);
    w.0.extend_from_slice(&trainer.rng.get_seed());
    w.u64(trainer.rng.get_stream());
    w.0.extend_from_slice(&trainer.rng.get_word_pos().to_le_bytes());
    Ok(w.0)
}

pub fn from_bytes(buf: &[u8]) -> Result<Trainer> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic").map_err(|_| CheckpointError::Magic)? != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let text = std::str::from_utf8(r.bytes("config")?).map_err(|e| CheckpointError::Config(e.to_string()))?;
    let echo: ConfigEcho = toml::from_str(text).map_err(|e| CheckpointError::Config(e.to_string()))?;
    let mut model = PoseInnModel::new(echo.model, echo.bounds)?;
    let count = r.u32("record count")? as usize;
    let expected = model.store.len() + model.flow.stages.len();
    if count != expected {
        return Err(CheckpointError::Record { name: "<table>".into(), detail: format!("{count} records, model has {expected}") });
    }
    for i in 0..model.store.len() {
        let (name, t) = r.record()?;
        if model.store.names()[i] != name || model.store.values()[i].shape() != t.shape() {
            return Err(CheckpointError::Record { name, detail: "does not match the model layout".into() });
        }
        model.store.values_mut()[i] = t;
    }
    for i in 0..model.flow.stages.len() {
        let (name, t) = r.record()?;
        let n = model.flow.dims.padded();
        let bad = |detail: &str| CheckpointError::Record { name: name.clone(), detail: detail.into() };
        if name != format!("buf.flow.perm{i}") || t.shape() != [n] {
            return Err(bad("expected a flow permutation"));
        }
        let idx: Vec<usize> = t
            .data()
            .iter()
            .map(|&v| if v >= 0.0 && v.fract() == 0.0 { Ok(v as usize) } else { Err(bad("non-integer index")) })
            .collect::<Result<_>>()?;
        let pad = model.flow.dims.pad();
        if idx[..pad].iter().enumerate().any(|(j, &v)| v != j) {
            return Err(bad("pad channel must stay fixed"));
        }
        model.flow.stages[i].0 = Permutation::from_indices(idx).ok_or_else(|| bad("not a bijection"))?;
    }
    let step = r.u64("optimizer step")?;
    let hyper = r.f64s(3, "optimizer hyperparameters")?;
    let mut moments = Vec::with_capacity(2 * model.store.len());
    for _ in 0..2 {
        for t in model.store.values() {
            let data = r.f64s(t.numel(), "optimizer moments")?;
            moments.push(Tensor::new(t.shape().to_vec(), data).expect("shape from store"));
        }
    }
    let v = moments.split_off(model.store.len());
    let adam = Adam::from_state(&model.store, (hyper[0], hyper[1], hyper[2]), step, moments, v)
        .map_err(|e| CheckpointError::Record { name: "<optimizer>".into(), detail: e.to_string() })?;
    let epoch = r.u64("epoch")? as usize;
    let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().expect("32 bytes");
    let stream = r.u64("rng stream")?;
    let word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().expect("16 bytes"));
    if r.pos != buf.len() {
        return Err(CheckpointError::Trailing(buf.len() - r.pos));
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    echo.train.validate()?;
    Ok(Trainer { model, config: echo.train, adam, rng, epoch })
}

/// Write atomically: a temporary sibling file renamed into place.
pub fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<()> {
    let bytes = to_bytes(trainer)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    from_bytes(&std::fs::read(path)?)
}
