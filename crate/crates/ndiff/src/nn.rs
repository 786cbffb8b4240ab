//! Layer building blocks over a [`ParamStore`].

use rand::Rng;

use crate::error::Result;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`.
    HeUniform,
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    GlorotUniform,
    Zeros,
}

fn init_tensor(shape: &[usize], fan_in: usize, fan_out: usize, init: Init, rng: &mut impl Rng) -> Tensor {
    let bound = match init {
        Init::HeUniform => (6.0 / fan_in as f64).sqrt(),
        Init::GlorotUniform => (6.0 / (fan_in + fan_out) as f64).sqrt(),
        Init::Zeros => return Tensor::zeros(shape),
    };
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

/// Dense layer `x · w + b` with `w: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), init_tensor(&[inputs, outputs], inputs, outputs, init, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[outputs]));
        Self { w, b, inputs, outputs }
    }

    pub fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = tape.matmul(x, p.var(self.w))?;
        tape.add_row(h, p.var(self.b))
    }
}

/// Fully connected stack with leaky-ReLU between layers and a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub alpha: f64,
}

impl Mlp {
    /// `widths` lists every layer size including input and output. When
    /// `zero_output` is set the last layer starts at exactly zero.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        alpha: f64,
        zero_output: bool,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let init = if i + 1 == n {
                    if zero_output {
                        Init::Zeros
                    } else {
                        Init::GlorotUniform
                    }
                } else {
                    Init::HeUniform
                };
                Linear::new(store, &format!("{name}.l{i}"), widths[i], widths[i + 1], init, rng)
            })
            .collect();
        Self { layers, alpha }
    }

    pub fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(tape, p, h)?;
            if i + 1 < self.layers.len() {
                h = tape.leaky_relu(h, self.alpha)?;
            }
        }
        Ok(h)
    }

    pub fn output_layer(&self) -> &Linear {
        self.layers.last().expect("non-empty")
    }
}

/// Square-kernel convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let w = store.add(
            format!("{name}.w"),
            init_tensor(&[out_ch, in_ch, kernel, kernel], fan_in, out_ch * kernel * kernel, Init::HeUniform, rng),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[out_ch]));
        Self { w, b, stride, pad }
    }

    pub fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p.var(self.w), p.var(self.b), self.stride, self.pad)
    }
}

/// Square-kernel transposed convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        // each output pixel sees about in_ch·(k/stride)² inputs
        let fan_in = (in_ch * kernel * kernel / (stride * stride)).max(1);
        let w = store.add(
            format!("{name}.w"),
            init_tensor(&[in_ch, out_ch, kernel, kernel], fan_in, out_ch, Init::HeUniform, rng),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[out_ch]));
        Self { w, b, stride, pad }
    }

    pub fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.conv_transpose2d(x, p.var(self.w), p.var(self.b), self.stride, self.pad)
    }
}
