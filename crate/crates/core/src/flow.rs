//! Invertible network between encoded poses and `[image latent ‖ z]`.
//!
//! A stack of (fixed permutation, affine coupling block) stages. Each coupling
//! block keeps the first half of the working vector and scales/shifts the
//! second half by functions of the first half and the optional condition
//! vector, so inversion is exact. Log-scales pass through the soft clamp
//! `(2·clamp/π)·atan(s/2)`, bounded in `(-clamp, clamp)`.
//!
//! Odd working dimensions get one constant-zero pad channel at index 0. The
//! pad is never permuted and always sits in the conditioning half, so it stays
//! exactly zero through every block and can be dropped on both sides.

use ndiff::nn::Mlp;
use ndiff::{Bound, ParamStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::encoded_len;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("{what}: expected width {expected}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
    #[error("model is conditional but no condition was given")]
    MissingCondition,
    #[error("model is unconditional but a condition was given")]
    UnexpectedCondition,
    #[error(transparent)]
    Ndiff(#[from] ndiff::NdiffError),
}

pub type Result<T> = std::result::Result<T, FlowError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub blocks: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub leaky_alpha: f64,
    /// Bound on coupling log-scales.
    pub scale_clamp: f64,
    /// Width of the encoded condition vector fed to every subnet.
    pub condition_width: usize,
    pub condition_hidden: usize,
    /// Start every coupling subnet's output layer at zero (identity flow).
    pub zero_init: bool,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            blocks: 6,
            hidden_width: 128,
            hidden_layers: 2,
            leaky_alpha: 0.01,
            scale_clamp: 2.0,
            condition_width: 32,
            condition_hidden: 64,
            zero_init: true,
        }
    }
}

/// Widths of both sides of the flow for pose dimension `d` and encoding depth `L`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlowDims {
    pub pose_dim: usize,
    pub depth: usize,
}

impl FlowDims {
    /// `2dL + d`.
    pub fn working(&self) -> usize {
        encoded_len(self.pose_dim, self.depth)
    }

    /// `2dL`.
    pub fn image_latent(&self) -> usize {
        2 * self.pose_dim * self.depth
    }

    pub fn z(&self) -> usize {
        self.pose_dim
    }

    pub fn padded(&self) -> usize {
        let w = self.working();
        w + w % 2
    }

    pub fn pad(&self) -> usize {
        self.padded() - self.working()
    }
}

/// Fixed bijection on channels, stored with its inverse.
#[derive(Clone, Debug, PartialEq)]
pub struct Permutation {
    forward: Vec<usize>,
    inverse: Vec<usize>,
}

impl Permutation {
    pub fn from_indices(forward: Vec<usize>) -> Option<Self> {
        let n = forward.len();
        let mut inverse = vec![usize::MAX; n];
        for (j, &p) in forward.iter().enumerate() {
            if p >= n || inverse[p] != usize::MAX {
                return None;
            }
            inverse[p] = j;
        }
        Some(Self { forward, inverse })
    }

    /// Random permutation of `n` channels keeping the first `fixed` in place.
    pub fn random(n: usize, fixed: usize, rng: &mut impl Rng) -> Self {
        let mut idx: Vec<usize> = (0..n).collect();
        idx[fixed..].shuffle(rng);
        Self::from_indices(idx).expect("shuffle is a bijection")
    }

    pub fn indices(&self) -> &[usize] {
        &self.forward
    }

    pub fn inverse_indices(&self) -> &[usize] {
        &self.inverse
    }
}

/// Affine coupling: `y₁ = x₁`, `y₂ = x₂ ⊙ exp(s(x₁, c)) + t(x₁, c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingBlock {
    pub split: usize,
    pub s: Mlp,
    pub t: Mlp,
}

/// Output of a flow pass on the tape.
#[derive(Clone, Copy, Debug)]
pub struct FlowPass {
    /// `[B, padded]` result of the pass.
    pub out: Var,
    /// `[B, 1]` log-determinant of the Jacobian of this pass.
    pub log_det: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    pub dims: FlowDims,
    pub stages: Vec<(Permutation, CouplingBlock)>,
    pub condition: Option<Mlp>,
    /// Width of the raw condition input, when conditional.
    pub condition_input: Option<usize>,
    pub scale_clamp: f64,
}

impl FlowModel {
    /// Register all parameters under `flow.` / `cond.` in `store`.
    pub fn new(
        store: &mut ParamStore,
        dims: FlowDims,
        cfg: &FlowConfig,
        condition_input: Option<usize>,
        rng: &mut impl Rng,
    ) -> Self {
        let n = dims.padded();
        let split = n / 2;
        let cond_w = condition_input.map_or(0, |_| cfg.condition_width);
        let condition = condition_input.map(|raw| {
            Mlp::new(store, "cond", &[raw, cfg.condition_hidden, cfg.condition_width], cfg.leaky_alpha, false, rng)
        });
        let mut widths = vec![split + cond_w];
        widths.extend(std::iter::repeat_n(cfg.hidden_width, cfg.hidden_layers));
        widths.push(n - split);
        let stages = (0..cfg.blocks)
            .map(|i| {
                let perm = Permutation::random(n, dims.pad(), rng);
                let s = Mlp::new(store, &format!("flow.b{i}.s"), &widths, cfg.leaky_alpha, cfg.zero_init, rng);
                let t = Mlp::new(store, &format!("flow.b{i}.t"), &widths, cfg.leaky_alpha, cfg.zero_init, rng);
                (perm, CouplingBlock { split, s, t })
            })
            .collect();
        Self { dims, stages, condition, condition_input, scale_clamp: cfg.scale_clamp }
    }

    pub fn is_conditional(&self) -> bool {
        self.condition.is_some()
    }

    fn check_width(tape: &Tape, v: Var, what: &'static str, expected: usize) -> Result<()> {
        let got = tape.shape(v).get(1).copied().unwrap_or(0);
        if tape.shape(v).len() != 2 || got != expected {
            return Err(FlowError::Dimension { what, expected, got });
        }
        Ok(())
    }

    /// Encode the raw condition once per pass.
    fn condition_vector(&self, tape: &mut Tape, p: &Bound, cond: Option<Var>) -> Result<Option<Var>> {
        match (&self.condition, cond) {
            (Some(mlp), Some(c)) => {
                Self::check_width(tape, c, "condition", self.condition_input.unwrap_or(0))?;
                Ok(Some(mlp.apply(tape, p, c)?))
            }
            (Some(_), None) => Err(FlowError::MissingCondition),
            (None, Some(_)) => Err(FlowError::UnexpectedCondition),
            (None, None) => Ok(None),
        }
    }

    fn scales_and_shifts(
        &self,
        tape: &mut Tape,
        p: &Bound,
        block: &CouplingBlock,
        kept: Var,
        cvec: Option<Var>,
    ) -> Result<(Var, Var)> {
        let inp = match cvec {
            Some(c) => tape.concat(&[kept, c], 1)?,
            None => kept,
        };
        let raw = block.s.apply(tape, p, inp)?;
        let half = tape.scale(raw, 0.5)?;
        let bent = tape.atan(half)?;
        let s = tape.scale(bent, 2.0 * self.scale_clamp / std::f64::consts::PI)?;
        let t = block.t.apply(tape, p, inp)?;
        Ok((s, t))
    }

    fn zeros_column(tape: &mut Tape, rows: usize) -> Var {
        tape.leaf(Tensor::zeros(&[rows, 1]))
    }

    /// Forward pass `x̂ [B, working] -> [B, padded]` (pad channel first when present).
    pub fn forward_tape(&self, tape: &mut Tape, p: &Bound, x: Var, cond: Option<Var>) -> Result<FlowPass> {
        Self::check_width(tape, x, "encoded pose", self.dims.working())?;
        let rows = tape.shape(x)[0];
        let cvec = self.condition_vector(tape, p, cond)?;
        let mut h = if self.dims.pad() > 0 {
            let z = Self::zeros_column(tape, rows);
            tape.concat(&[z, x], 1)?
        } else {
            x
        };
        let mut log_det: Option<Var> = None;
        for (perm, block) in &self.stages {
            h = tape.permute_cols(h, perm.indices())?;
            let n = self.dims.padded();
            let parts = tape.split(h, &[block.split, n - block.split], 1)?;
            let (s, t) = self.scales_and_shifts(tape, p, block, parts[0], cvec)?;
            let es = tape.exp(s)?;
            let scaled = tape.mul(parts[1], es)?;
            let y2 = tape.add(scaled, t)?;
            h = tape.concat(&[parts[0], y2], 1)?;
            let ld = tape.row_sum(s)?;
            log_det = Some(match log_det {
                Some(acc) => tape.add(acc, ld)?,
                None => ld,
            });
        }
        let log_det = match log_det {
            Some(v) => v,
            None => Self::zeros_column(tape, rows),
        };
        Ok(FlowPass { out: h, log_det })
    }

    /// Inverse pass from `[B, padded]` (pad channel first) back to the padded
    /// pose side. `log_det` is that of the inverse map.
    pub fn inverse_padded_tape(&self, tape: &mut Tape, p: &Bound, y: Var, cond: Option<Var>) -> Result<FlowPass> {
        Self::check_width(tape, y, "flow output", self.dims.padded())?;
        let rows = tape.shape(y)[0];
        let cvec = self.condition_vector(tape, p, cond)?;
        let mut h = y;
        let mut log_det: Option<Var> = None;
        for (perm, block) in self.stages.iter().rev() {
            let n = self.dims.padded();
            let parts = tape.split(h, &[block.split, n - block.split], 1)?;
            let (s, t) = self.scales_and_shifts(tape, p, block, parts[0], cvec)?;
            let shifted = tape.sub(parts[1], t)?;
            let neg = tape.scale(s, -1.0)?;
            let ens = tape.exp(neg)?;
            let x2 = tape.mul(shifted, ens)?;
            h = tape.concat(&[parts[0], x2], 1)?;
            h = tape.permute_cols(h, perm.inverse_indices())?;
            let ld = tape.row_sum(neg)?;
            log_det = Some(match log_det {
                Some(acc) => tape.add(acc, ld)?,
                None => ld,
            });
        }
        let log_det = match log_det {
            Some(v) => v,
            None => Self::zeros_column(tape, rows),
        };
        Ok(FlowPass { out: h, log_det })
    }

    /// Split a forward output into `(ŷ [B, 2dL], z [B, d])`, dropping the pad.
    pub fn split_output(&self, tape: &mut Tape, out: Var) -> Result<(Var, Var)> {
        let pad = self.dims.pad();
        let yh = tape.slice(out, 1, pad, self.dims.image_latent())?;
        let z = tape.slice(out, 1, pad + self.dims.image_latent(), self.dims.z())?;
        Ok((yh, z))
    }

    /// Inverse from `(ŷ, z)` to the encoded pose `[B, working]`.
    pub fn inverse_tape(
        &self,
        tape: &mut Tape,
        p: &Bound,
        yhat: Var,
        z: Var,
        cond: Option<Var>,
    ) -> Result<FlowPass> {
        Self::check_width(tape, yhat, "image latent", self.dims.image_latent())?;
        Self::check_width(tape, z, "latent z", self.dims.z())?;
        let rows = tape.shape(yhat)[0];
        let joined = if self.dims.pad() > 0 {
            let zc = Self::zeros_column(tape, rows);
            tape.concat(&[zc, yhat, z], 1)?
        } else {
            tape.concat(&[yhat, z], 1)?
        };
        let pass = self.inverse_padded_tape(tape, p, joined, cond)?;
        let out = if self.dims.pad() > 0 {
            tape.slice(pass.out, 1, self.dims.pad(), self.dims.working())?
        } else {
            pass.out
        };
        Ok(FlowPass { out, log_det: pass.log_det })
    }

    /// Batched forward on plain tensors: `x̂ [B, working]` to `(ŷ, z)`.
    pub fn forward(&self, store: &ParamStore, x: &Tensor, cond: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let cv = cond.map(|c| tape.leaf(c.clone()));
        let pass = self.forward_tape(&mut tape, &p, xv, cv)?;
        let (y, z) = self.split_output(&mut tape, pass.out)?;
        Ok((tape.value(y).clone(), tape.value(z).clone()))
    }

    /// Batched inverse on plain tensors.
    pub fn inverse(&self, store: &ParamStore, yhat: &Tensor, z: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let yv = tape.leaf(yhat.clone());
        let zv = tape.leaf(z.clone());
        let cv = cond.map(|c| tape.leaf(c.clone()));
        let pass = self.inverse_tape(&mut tape, &p, yv, zv, cv)?;
        Ok(tape.value(pass.out).clone())
    }

    /// Per-row log-determinant of the forward Jacobian, shape `[B]`.
    pub fn log_det_jacobian(&self, store: &ParamStore, x: &Tensor, cond: Option<&Tensor>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let cv = cond.map(|c| tape.leaf(c.clone()));
        let pass = self.forward_tape(&mut tape, &p, xv, cv)?;
        Ok(tape.value(pass.log_det).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_input(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn build(dims: FlowDims, zero_init: bool, cond: Option<usize>, seed: u64) -> (ParamStore, FlowModel) {
        let mut store = ParamStore::new();
        let cfg = FlowConfig { zero_init, hidden_width: 32, ..FlowConfig::default() };
        let model = FlowModel::new(&mut store, dims, &cfg, cond, &mut ChaCha8Rng::seed_from_u64(seed));
        (store, model)
    }

    #[test]
    fn dims_for_both_pose_kinds() {
        let se3 = FlowDims { pose_dim: 6, depth: 5 };
        assert_eq!((se3.working(), se3.padded(), se3.image_latent()), (66, 66, 60));
        let se2 = FlowDims { pose_dim: 3, depth: 5 };
        assert_eq!((se2.working(), se2.padded(), se2.pad()), (33, 34, 1));
    }

    #[test]
    fn permutations_keep_pad_fixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let p = Permutation::random(34, 1, &mut rng);
            assert_eq!(p.indices()[0], 0);
            for (j, &i) in p.indices().iter().enumerate() {
                assert_eq!(p.inverse_indices()[i], j);
            }
        }
        assert!(Permutation::from_indices(vec![0, 0, 1]).is_none());
    }

    #[test]
    fn zero_initialized_flow_is_a_permutation() {
        let dims = FlowDims { pose_dim: 3, depth: 2 };
        let (store, model) = build(dims, true, None, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_input(&mut rng, 4, dims.working());
        let (y, z) = model.forward(&store, &x, None).unwrap();

        // compose the permutations by hand on the padded vector
        let mut expected: Vec<Vec<f64>> = (0..4)
            .map(|r| std::iter::once(0.0).chain(x.row(r).iter().copied()).collect())
            .collect();
        for (perm, _) in &model.stages {
            for row in &mut expected {
                *row = perm.indices().iter().map(|&i| row[i]).collect();
            }
        }
        for r in 0..4 {
            assert_eq!(y.row(r), &expected[r][1..1 + dims.image_latent()]);
            assert_eq!(z.row(r), &expected[r][1 + dims.image_latent()..]);
        }
        assert_eq!(model.log_det_jacobian(&store, &x, None).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn zero_initialized_inverse_is_inverse_permutation() {
        let dims = FlowDims { pose_dim: 6, depth: 1 };
        let (store, model) = build(dims, true, None, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y = random_input(&mut rng, 2, dims.image_latent());
        let z = random_input(&mut rng, 2, dims.z());
        let x = model.inverse(&store, &y, &z, None).unwrap();
        for r in 0..2 {
            let mut v: Vec<f64> = y.row(r).iter().chain(z.row(r)).copied().collect();
            for (perm, _) in model.stages.iter().rev() {
                v = perm.inverse_indices().iter().map(|&i| v[i]).collect();
            }
            assert_eq!(x.row(r), &v[..]);
        }
    }

    #[test]
    fn condition_presence_is_checked() {
        let dims = FlowDims { pose_dim: 3, depth: 1 };
        let (store, model) = build(dims, false, Some(4), 6);
        let x = Tensor::zeros(&[1, dims.working()]);
        assert_eq!(model.forward(&store, &x, None).unwrap_err(), FlowError::MissingCondition);
        let (store2, plain) = build(dims, false, None, 6);
        let c = Tensor::zeros(&[1, 4]);
        assert_eq!(plain.forward(&store2, &x, Some(&c)).unwrap_err(), FlowError::UnexpectedCondition);
        let bad = Tensor::zeros(&[1, dims.working() + 1]);
        assert!(matches!(plain.forward(&store2, &bad, None), Err(FlowError::Dimension { .. })));
    }

    #[test]
    fn conditioning_changes_output() {
        let dims = FlowDims { pose_dim: 3, depth: 2 };
        let (store, model) = build(dims, false, Some(5), 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_input(&mut rng, 1, dims.working());
        let c1 = random_input(&mut rng, 1, 5);
        let c2 = random_input(&mut rng, 1, 5);
        let (y1, _) = model.forward(&store, &x, Some(&c1)).unwrap();
        let (y2, _) = model.forward(&store, &x, Some(&c2)).unwrap();
        assert!(y1.max_abs_diff(&y2) > 1e-6);
    }

    #[test]
    fn latent_z_changes_inverse() {
        let dims = FlowDims { pose_dim: 3, depth: 2 };
        let (store, model) = build(dims, false, None, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let y = random_input(&mut rng, 1, dims.image_latent());
        let z1 = random_input(&mut rng, 1, dims.z());
        let z2 = random_input(&mut rng, 1, dims.z());
        let a = model.inverse(&store, &y, &z1, None).unwrap();
        let b = model.inverse(&store, &y, &z2, None).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-6);
    }
}
