use crate::error::{NdiffError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        Self::with_hyper(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(params: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = params.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { beta1, beta2, eps, step: 0, m: zeros.clone(), v: zeros }
    }

    /// Rebuild from saved state; moments must match `params` shape by shape.
    pub fn from_state(
        params: &ParamStore,
        (beta1, beta2, eps): (f64, f64, f64),
        step: u64,
        m: Vec<Tensor>,
        v: Vec<Tensor>,
    ) -> Result<Self> {
        for (i, (name, p)) in params.iter().enumerate() {
            let ok = m.get(i).is_some_and(|t| t.shape() == p.shape())
                && v.get(i).is_some_and(|t| t.shape() == p.shape());
            if !ok {
                return Err(NdiffError::StateMismatch { param: name.to_string() });
            }
        }
        if m.len() != params.len() || v.len() != params.len() {
            return Err(NdiffError::StateMismatch { param: "<count>".into() });
        }
        Ok(Self { beta1, beta2, eps, step, m, v })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    /// One update of every parameter. Nothing is modified when any gradient
    /// is non-finite.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(NdiffError::StateMismatch { param: "<count>".into() });
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if g.shape() != p.shape() {
                return Err(NdiffError::StateMismatch { param: name.to_string() });
            }
            if !g.is_finite() {
                return Err(NdiffError::NonFiniteGradient { param: name.to_string() });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.values_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
