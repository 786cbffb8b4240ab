//! Finite-difference gradient checks.
//!
//! The numerical side only evaluates forward values, so it never depends on
//! the backward pass it is checking.

use rand::Rng;

use crate::{Tape, Tensor, Unary, Var};

/// Builds one output from leaf inputs.
pub type Build = dyn Fn(&mut Tape, &[Var]) -> Var;

/// A named op (or op chain) with inputs inside its smooth domain.
pub struct OpCase {
    pub name: &'static str,
    pub build: Box<Build>,
    pub inputs: Vec<Tensor>,
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches")
}

/// Values in `±[0.05, 1]`, away from activation kinks.
pub fn kink_free(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Weights in `[0.5, 1.5)` from a fixed counter-based sequence, so the same
/// scalarisation is used for every evaluation.
fn weights(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| 0.5 + ((i as f64 * 0.618_033_988_75).fract())).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

fn scalarise(tape: &mut Tape, out: Var) -> Var {
    let w = tape.leaf(weights(tape.shape(out)));
    let prod = tape.mul(out, w).expect("same shape");
    tape.sum(prod).expect("sum")
}

/// `sum(build(inputs) ⊙ w)` for a fixed weight pattern `w`.
pub fn scalar_value(build: &Build, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let s = scalarise(&mut tape, out);
    tape.value(s).item()
}

/// Reverse-mode gradients of [`scalar_value`] for every input.
pub fn analytic_gradients(build: &Build, inputs: &[Tensor]) -> Vec<Tensor> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let s = scalarise(&mut tape, out);
    let g = tape.backward(s).expect("scalar output");
    vars.iter().map(|&v| g.get_or_zeros(v)).collect()
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Worst element-wise relative error over all inputs, step `h`.
pub fn elementwise_error(build: &Build, inputs: &[Tensor], h: f64) -> f64 {
    let grads = analytic_gradients(build, inputs);
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let numeric = (scalar_value(build, &plus) - scalar_value(build, &minus)) / (2.0 * h);
            worst = worst.max(relative_error(grads[i].data()[j], numeric, 1e-2));
        }
    }
    worst
}

/// Worst relative error of directional derivatives along `directions`
/// random unit directions over all inputs jointly.
pub fn directional_error(build: &Build, inputs: &[Tensor], directions: usize, h: f64, rng: &mut impl Rng) -> f64 {
    let grads = analytic_gradients(build, inputs);
    let mut worst: f64 = 0.0;
    for _ in 0..directions {
        let dirs: Vec<Tensor> = inputs.iter().map(|t| random_tensor(rng, t.shape(), -1.0, 1.0)).collect();
        let norm: f64 = dirs.iter().flat_map(|d| d.data()).map(|v| v * v).sum::<f64>().sqrt();
        let shifted = |sign: f64| -> Vec<Tensor> {
            inputs.iter().zip(&dirs).map(|(t, d)| t.zip_map(d, |a, b| a + sign * h * b / norm)).collect()
        };
        let numeric = (scalar_value(build, &shifted(1.0)) - scalar_value(build, &shifted(-1.0))) / (2.0 * h);
        let exact: f64 = grads
            .iter()
            .zip(&dirs)
            .map(|(g, d)| g.data().iter().zip(d.data()).map(|(a, b)| a * b / norm).sum::<f64>())
            .sum();
        worst = worst.max(relative_error(exact, numeric, 1e-2));
    }
    worst
}

fn case(name: &'static str, build: impl Fn(&mut Tape, &[Var]) -> Var + 'static, inputs: Vec<Tensor>) -> OpCase {
    OpCase { name, build: Box::new(build), inputs }
}

fn unary(name: &'static str, u: Unary, x: Tensor) -> OpCase {
    case(name, move |t, v| t.unary(v[0], u).unwrap(), vec![x])
}

/// One case per differentiable op on the tape.
pub fn op_catalog(rng: &mut impl Rng) -> Vec<OpCase> {
    let mut cases = vec![
        unary("exp", Unary::Exp, kink_free(rng, &[4, 3])),
        unary("tanh", Unary::Tanh, kink_free(rng, &[4, 3])),
        unary("relu", Unary::Relu, kink_free(rng, &[4, 3])),
        unary("leaky_relu", Unary::LeakyRelu(0.01), kink_free(rng, &[4, 3])),
        unary("sin", Unary::Sin, kink_free(rng, &[4, 3])),
        unary("cos", Unary::Cos, kink_free(rng, &[4, 3])),
        unary("atan", Unary::Atan, kink_free(rng, &[4, 3])),
        unary("sigmoid", Unary::Sigmoid, kink_free(rng, &[4, 3])),
        unary("square", Unary::Square, kink_free(rng, &[4, 3])),
        unary("sqrt", Unary::Sqrt, random_tensor(rng, &[6], 0.2, 2.0)),
        unary("acos", Unary::Acos, random_tensor(rng, &[6], -0.9, 0.9)),
    ];
    cases.push(case(
        "matmul",
        |t, v| t.matmul(v[0], v[1]).unwrap(),
        vec![random_tensor(rng, &[3, 4], -1.0, 1.0), random_tensor(rng, &[4, 2], -1.0, 1.0)],
    ));
    cases.push(case(
        "add_row",
        |t, v| t.add_row(v[0], v[1]).unwrap(),
        vec![random_tensor(rng, &[3, 4], -1.0, 1.0), random_tensor(rng, &[4], -1.0, 1.0)],
    ));
    cases.push(case(
        "add/sub/mul",
        |t, v| {
            let a = t.add(v[0], v[1]).unwrap();
            let s = t.sub(a, v[2]).unwrap();
            t.mul(s, v[1]).unwrap()
        },
        (0..3).map(|_| random_tensor(rng, &[2, 3], -1.0, 1.0)).collect(),
    ));
    cases.push(case(
        "scale/add_scalar",
        |t, v| {
            let a = t.scale(v[0], -1.7).unwrap();
            t.add_scalar(a, 0.3).unwrap()
        },
        vec![random_tensor(rng, &[5], -1.0, 1.0)],
    ));
    cases.push(case(
        "concat/split/slice",
        |t, v| {
            let c = t.concat(&[v[0], v[1]], 1).unwrap();
            let parts = t.split(c, &[1, 4], 1).unwrap();
            let sq = t.square(parts[1]).unwrap();
            let r = t.concat(&[sq, parts[0]], 1).unwrap();
            t.slice(r, 0, 1, 2).unwrap()
        },
        vec![random_tensor(rng, &[3, 2], -1.0, 1.0), random_tensor(rng, &[3, 3], -1.0, 1.0)],
    ));
    cases.push(case(
        "permute_cols/reshape/row_sum",
        |t, v| {
            let p = t.permute_cols(v[0], &[2, 0, 3, 1]).unwrap();
            let sq = t.mul(p, v[0]).unwrap();
            let r = t.reshape(sq, &[4, 2]).unwrap();
            t.row_sum(r).unwrap()
        },
        vec![random_tensor(rng, &[2, 4], -1.0, 1.0)],
    ));
    cases.push(case(
        "sum/mean/mse",
        |t, v| {
            let m = t.mse(v[0], v[1]).unwrap();
            let s = t.mean(v[0]).unwrap();
            let q = t.mul(m, s).unwrap();
            let total = t.sum(v[1]).unwrap();
            t.add(q, total).unwrap()
        },
        vec![random_tensor(rng, &[3, 3], -1.0, 1.0), random_tensor(rng, &[3, 3], -1.0, 1.0)],
    ));
    cases.push(case(
        "conv2d/global_avg_pool",
        |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 2, 1).unwrap();
            let y = t.tanh(y).unwrap();
            t.global_avg_pool(y).unwrap()
        },
        vec![
            random_tensor(rng, &[2, 3, 8, 8], -1.0, 1.0),
            random_tensor(rng, &[4, 3, 3, 3], -0.5, 0.5),
            random_tensor(rng, &[4], -0.5, 0.5),
        ],
    ));
    cases.push(case(
        "conv_transpose2d",
        |t, v| {
            let y = t.conv_transpose2d(v[0], v[1], v[2], 2, 1).unwrap();
            t.sigmoid(y).unwrap()
        },
        vec![
            random_tensor(rng, &[2, 3, 4, 4], -1.0, 1.0),
            random_tensor(rng, &[3, 2, 4, 4], -0.5, 0.5),
            random_tensor(rng, &[2], -0.5, 0.5),
        ],
    ));
    cases
}
