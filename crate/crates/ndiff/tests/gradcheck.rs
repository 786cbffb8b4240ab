//! Reverse-mode gradients against central finite differences.
//!
//! The oracle only ever evaluates forward values; it never touches the
//! backward pass it is checking.

use ndiff::check::{self, Build};
use ndiff::{Elementwise, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    check::random_tensor(rng, shape, lo, hi)
}

fn rel_err(a: f64, n: f64) -> f64 {
    check::relative_error(a, n, 1e-2)
}

fn check_elementwise(build: &Build, inputs: &[Tensor]) -> f64 {
    check::elementwise_error(build, inputs, H)
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let b = random_tensor(&mut rng, &[4, 2], -1.0, 1.0);
    // d/da sum(a·b), checked element by element
    let build = |t: &mut Tape, v: &[Var]| {
        let p = t.matmul(v[0], v[1]).unwrap();
        t.sum(p).unwrap()
    };
    let mut tape = Tape::new();
    let va = tape.leaf(a.clone());
    let vb = tape.leaf(b.clone());
    let s = build(&mut tape, &[va, vb]);
    let ga = tape.backward(s).unwrap().get_or_zeros(va);
    for j in 0..a.numel() {
        let f = |delta: f64| {
            let mut aa = a.clone();
            aa.data_mut()[j] += delta;
            let mut t = Tape::new();
            let x = t.leaf(aa);
            let y = t.leaf(b.clone());
            let s = build(&mut t, &[x, y]);
            t.value(s).item()
        };
        let numeric = (f(H) - f(-H)) / (2.0 * H);
        assert!(rel_err(ga.data()[j], numeric) < 1e-6, "element {j}");
    }
    assert!(check_elementwise(&build, &[a, b]) < 1e-6);
}

#[test]
fn tanh_derivative_at_point_three() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![0.3]));
    let y = tape.elementwise(Elementwise::Tanh, x, None).unwrap();
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap().get_or_zeros(x).item();
    let numeric = ((0.3f64 + H).tanh() - (0.3f64 - H).tanh()) / (2.0 * H);
    assert!((g - numeric).abs() < 1e-7);
}

#[test]
fn mse_gradient_is_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = random_tensor(&mut rng, &[5, 3], -2.0, 2.0);
    let t = random_tensor(&mut rng, &[5, 3], -2.0, 2.0);
    let mut tape = Tape::new();
    let vp = tape.leaf(p.clone());
    let vt = tape.leaf(t.clone());
    let l = tape.mse(vp, vt).unwrap();
    let g = tape.backward(l).unwrap();
    let expected = p.zip_map(&t, |a, b| 2.0 * (a - b) / 15.0);
    assert!(g.get_or_zeros(vp).max_abs_diff(&expected) < 1e-15);
    assert!(g.get_or_zeros(vt).max_abs_diff(&expected.map(|v| -v)) < 1e-15);
}

#[test]
fn every_op_matches_finite_differences_elementwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in check::op_catalog(&mut rng) {
        let err = check_elementwise(&*case.build, &case.inputs);
        assert!(err < 1e-5, "{}: {err}", case.name);
    }
}

#[test]
fn every_op_matches_finite_differences_along_directions() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for case in check::op_catalog(&mut rng) {
        let err = check::directional_error(&*case.build, &case.inputs, 20, H, &mut rng);
        assert!(err < 1e-5, "{}: {err}", case.name);
    }
}

#[test]
fn global_avg_pool_is_linear_per_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = random_tensor(&mut rng, &[1, 2, 4, 4], -1.0, 1.0);
    let mut scaled = x.clone();
    for v in &mut scaled.data_mut()[16..32] {
        *v *= 3.5;
    }
    let mut tape = Tape::new();
    let a = tape.leaf(x);
    let b = tape.leaf(scaled);
    let pa = tape.global_avg_pool(a).unwrap();
    let pb = tape.global_avg_pool(b).unwrap();
    let (va, vb) = (tape.value(pa).data().to_vec(), tape.value(pb).data().to_vec());
    assert_eq!(va[0], vb[0]);
    assert!((vb[1] - 3.5 * va[1]).abs() < 1e-12);
}

#[test]
fn ops_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = random_tensor(&mut rng, &[2, 3, 8, 8], -1.0, 1.0);
    let w = random_tensor(&mut rng, &[4, 3, 3, 3], -0.5, 0.5);
    let run = || {
        let mut t = Tape::new();
        let vx = t.leaf(x.clone());
        let vw = t.leaf(w.clone());
        let vb = t.leaf(Tensor::zeros(&[4]));
        let y = t.conv2d(vx, vw, vb, 2, 1).unwrap();
        let p = t.global_avg_pool(y).unwrap();
        let s = t.sum(p).unwrap();
        let g = t.backward(s).unwrap();
        (t.value(y).clone(), g.get_or_zeros(vw))
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn split_of_concat_is_identity(rows in 1usize..4, a in 1usize..5, b in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ta = random_tensor(&mut rng, &[rows, a], -10.0, 10.0);
        let tb = random_tensor(&mut rng, &[rows, b], -10.0, 10.0);
        let mut tape = Tape::new();
        let va = tape.leaf(ta.clone());
        let vb = tape.leaf(tb.clone());
        let c = tape.concat(&[va, vb], 1).unwrap();
        let parts = tape.split(c, &[a, b], 1).unwrap();
        prop_assert_eq!(tape.value(parts[0]), &ta);
        prop_assert_eq!(tape.value(parts[1]), &tb);
    }

    #[test]
    fn composite_network_gradient(seed in any::<u64>()) {
        // small two-layer network with every activation kind in the chain
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![
            random_tensor(&mut rng, &[3, 4], -1.0, 1.0),
            random_tensor(&mut rng, &[4, 5], -0.7, 0.7),
            random_tensor(&mut rng, &[5], -0.2, 0.2),
            random_tensor(&mut rng, &[5, 2], -0.7, 0.7),
        ];
        let build: Box<Build> = Box::new(|t: &mut Tape, v: &[Var]| {
            let h = t.matmul(v[0], v[1]).unwrap();
            let h = t.add_row(h, v[2]).unwrap();
            let h = t.tanh(h).unwrap();
            let o = t.matmul(h, v[3]).unwrap();
            let a = t.scale(o, 0.5).unwrap();
            let a = t.atan(a).unwrap();
            t.exp(a).unwrap()
        });
        prop_assert!(check::directional_error(&*build, &inputs, 20, H, &mut rng) < 1e-5);
    }
}
