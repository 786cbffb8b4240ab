use ndiff::{ParamStore, Tensor};
use poseinn::checkpoint::{from_bytes, load_checkpoint, save_checkpoint, to_bytes, CheckpointError, VERSION};
use poseinn::dataset::Sample;
use poseinn::encoder::VaeConfig;
use poseinn::flow::FlowConfig;
use poseinn::geometry::{Pose, PoseDim};
use poseinn::model::{ModelConfig, PoseInnModel};
use poseinn::scene::{generate_trajectory, CameraIntrinsics, Scene, SceneConfig, TrajectorySpec};
use poseinn::trainer::{learning_rate, LossWeights, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIZE: usize = 16;

fn samples(count: usize, dim: PoseDim) -> Vec<Sample> {
    let scene = Scene::generate(&SceneConfig::default(), 4).unwrap();
    let intr = CameraIntrinsics { width: SIZE, height: SIZE, ..CameraIntrinsics::default() };
    let mut poses = generate_trajectory(&scene, &TrajectorySpec { count, ..Default::default() }).unwrap();
    if dim == PoseDim::Se3 {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        poses = poses
            .iter()
            .map(|p| {
                let [x, y, _] = p.position;
                Pose::se3([x, y, rng.random_range(-0.3..0.3)], p.heading(), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2))
            })
            .collect();
    }
    poses
        .iter()
        .enumerate()
        .map(|(i, p)| Sample { pose: *p, image: scene.render(&intr, p).unwrap(), synthetic: i % 2 == 1 })
        .collect()
}

fn small_model(dim: PoseDim, conditional: bool) -> PoseInnModel {
    let cfg = ModelConfig {
        pose_dim: dim,
        encoding_depth: 2,
        conditional,
        flow: FlowConfig { blocks: 2, hidden_width: 16, zero_init: false, ..FlowConfig::default() },
        vae: VaeConfig { image_size: SIZE, channels: [4, 8, 8], ..VaeConfig::default() },
        init_seed: 3,
        ..ModelConfig::default()
    };
    let bounds = Scene::generate(&SceneConfig::default(), 4).unwrap().bounds;
    PoseInnModel::new(cfg, bounds).unwrap()
}

fn config(epochs: usize, batch_size: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size, warmup_epochs: 0, lr_start: 2e-3, lr_end: 1e-3, ..TrainConfig::default() }
}

#[test]
fn learning_rate_hits_both_endpoints() {
    let cfg = TrainConfig { epochs: 30, lr_start: 5e-4, lr_end: 5e-5, ..TrainConfig::default() };
    assert_eq!(learning_rate(&cfg, 0), 5e-4);
    assert!((learning_rate(&cfg, 29) - 5e-5).abs() < 1e-18);
    let ratio = learning_rate(&cfg, 1) / learning_rate(&cfg, 0);
    for e in 1..29 {
        assert!((learning_rate(&cfg, e + 1) / learning_rate(&cfg, e) - ratio).abs() < 1e-12);
    }
    let single = TrainConfig { epochs: 1, ..cfg };
    assert_eq!(learning_rate(&single, 0), 5e-4);
}

#[test]
fn repeated_steps_on_one_batch_reduce_the_loss() {
    let data = samples(8, PoseDim::Se2);
    let batch: Vec<&Sample> = data.iter().collect();
    let mut tr = Trainer::new(small_model(PoseDim::Se2, false), config(1, 8)).unwrap();
    let losses: Vec<f64> = (0..50).map(|_| tr.train_step(&batch, 2e-3, false).unwrap().total).collect();
    let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = losses[45..].iter().sum::<f64>() / 5.0;
    assert!(tail < 0.8 * head, "loss {head} -> {tail}");
}

#[test]
fn zero_weights_leave_parameters_unchanged() {
    let data = samples(6, PoseDim::Se2);
    let batch: Vec<&Sample> = data.iter().collect();
    let cfg = TrainConfig { weights: LossWeights::zero(), ..config(1, 6) };
    let mut tr = Trainer::new(small_model(PoseDim::Se2, true), cfg).unwrap();
    let before = tr.model.store.clone();
    for _ in 0..3 {
        let r = tr.train_step(&batch, 1e-2, false).unwrap();
        assert_eq!(r.total, 0.0);
    }
    for (a, b) in before.values().iter().zip(tr.model.store.values()) {
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn total_is_the_weighted_sum_of_components() {
    let data = samples(6, PoseDim::Se3);
    let batch: Vec<&Sample> = data.iter().collect();
    let weights = LossWeights { fwd: 0.7, rev_pos: 1.3, rev_enc: 0.2, rev_rot: 0.9, recon: 1.1, kl: 0.01, nll: 0.05, spread: 0.4 };
    let mut tr = Trainer::new(small_model(PoseDim::Se3, false), TrainConfig { weights: weights.clone(), ..config(1, 6) }).unwrap();
    let r = tr.train_step(&batch, 1e-3, false).unwrap();
    let c = &r.components;
    let manual = 0.7 * c.fwd + 1.3 * c.rev_pos + 0.2 * c.rev_enc + 0.9 * c.rev_rot + 1.1 * c.recon + 0.01 * c.kl
        + 0.05 * c.nll
        + 0.4 * c.spread;
    assert!((r.total - manual).abs() < 1e-12);
    assert!((c.weighted_total(&weights) - manual).abs() < 1e-12);
    for v in [c.fwd, c.rev_pos, c.rev_enc, c.rev_rot, c.recon, c.kl, c.spread] {
        assert!(v != 0.0 && v.is_finite());
    }
}

#[test]
fn warmup_steps_only_touch_the_autoencoder() {
    let data = samples(6, PoseDim::Se2);
    let batch: Vec<&Sample> = data.iter().collect();
    let mut tr = Trainer::new(small_model(PoseDim::Se2, false), config(1, 6)).unwrap();
    let before = tr.model.store.clone();
    let r = tr.train_step(&batch, 1e-3, true).unwrap();
    assert_eq!((r.components.fwd, r.components.rev_pos, r.components.rev_rot), (0.0, 0.0, 0.0));
    for ((name, a), b) in before.iter().zip(tr.model.store.values()) {
        let changed = a.data() != b.data();
        assert_eq!(changed, name.starts_with("vae."), "{name}");
    }
}

fn with_offset(store: &ParamStore, dir: &[Tensor], h: f64) -> ParamStore {
    let mut out = store.clone();
    for (v, d) in out.values_mut().iter_mut().zip(dir) {
        for (x, dx) in v.data_mut().iter_mut().zip(d.data()) {
            *x += h * dx;
        }
    }
    out
}

fn composed_loss_gradient_check(dim: PoseDim, conditional: bool, seed: u64) {
    let data = samples(5, dim);
    let batch: Vec<&Sample> = data.iter().collect();
    let weights = LossWeights { fwd: 1.0, rev_pos: 1.0, rev_enc: 0.1, rev_rot: 1.0, recon: 1.0, kl: 0.01, nll: 0.1, spread: 0.5 };
    let cfg = TrainConfig { weights, spread_samples: 3, seed, ..config(1, 5) };
    let mut tr = Trainer::new(small_model(dim, conditional), cfg).unwrap();
    let inputs = tr.prepare_step(&batch, false).unwrap();
    let store = tr.model.store.clone();
    let eval = tr.evaluate(&store, &inputs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let h = 1e-6;
    for k in 0..20 {
        let dir: Vec<Tensor> = store
            .values()
            .iter()
            .map(|t| Tensor::new(t.shape().to_vec(), (0..t.numel()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
            .collect();
        let analytic: f64 = eval.gradients.iter().zip(&dir).map(|(g, d)| g.data().iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>()).sum();
        let plus = tr.evaluate(&with_offset(&store, &dir, h), &inputs).unwrap().total;
        let minus = tr.evaluate(&with_offset(&store, &dir, -h), &inputs).unwrap().total;
        let numeric = (plus - minus) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        assert!(rel < 1e-5, "direction {k}: analytic {analytic} numeric {numeric} rel {rel}");
    }
}

#[test]
fn composed_loss_gradient_matches_finite_differences_se2() {
    composed_loss_gradient_check(PoseDim::Se2, true, 1);
}

#[test]
fn composed_loss_gradient_matches_finite_differences_se3() {
    composed_loss_gradient_check(PoseDim::Se3, false, 2);
}

#[test]
fn two_epochs_on_a_tiny_set_lower_the_loss() {
    let data = samples(10, PoseDim::Se2);
    let mut tr = Trainer::new(small_model(PoseDim::Se2, false), config(12, 2)).unwrap();
    let reports = tr.train(&data, |_, _| Ok(())).unwrap();
    assert_eq!(reports.len(), 12);
    assert_eq!(tr.epoch, 12);
    assert!(reports[11].total < reports[0].total, "{} -> {}", reports[0].total, reports[11].total);
}

#[test]
fn epoch_order_interleaves_real_and_synthetic() {
    let mut data = samples(6, PoseDim::Se2);
    for s in data.iter_mut() {
        s.synthetic = false;
    }
    let extra = samples(10, PoseDim::Se2).into_iter().map(|s| Sample { synthetic: true, ..s });
    data.extend(extra);
    let mut tr = Trainer::new(small_model(PoseDim::Se2, false), config(1, 4)).unwrap();
    let order = tr.epoch_order(&data);
    let mut seen = order.clone();
    seen.sort();
    assert_eq!(seen, (0..16).collect::<Vec<_>>());
    for pair in 0..6 {
        assert!(!data[order[2 * pair]].synthetic && data[order[2 * pair + 1]].synthetic);
    }
    assert!(order[12..].iter().all(|&i| data[i].synthetic));
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let data = samples(8, PoseDim::Se2);
    let run = || {
        let mut tr = Trainer::new(small_model(PoseDim::Se2, true), TrainConfig { seed: 9, ..config(2, 4) }).unwrap();
        tr.train(&data, |_, _| Ok(())).unwrap();
        to_bytes(&tr).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let data = samples(8, PoseDim::Se2);
    let cfg = TrainConfig { seed: 5, warmup_epochs: 1, ..config(4, 4) };
    let mut straight = Trainer::new(small_model(PoseDim::Se2, true), cfg.clone()).unwrap();
    let straight_reports = straight.train(&data, |_, _| Ok(())).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    let mut first = Trainer::new(small_model(PoseDim::Se2, true), cfg).unwrap();
    first.run_epoch(&data).unwrap();
    first.run_epoch(&data).unwrap();
    save_checkpoint(&first, &path).unwrap();
    drop(first);
    let mut resumed = load_checkpoint(&path).unwrap();
    assert_eq!(resumed.epoch, 2);
    let rest = resumed.train(&data, |_, _| Ok(())).unwrap();
    assert_eq!(rest.len(), 2);
    assert_eq!(rest[1].total.to_bits(), straight_reports[3].total.to_bits());
    assert_eq!(to_bytes(&resumed).unwrap(), to_bytes(&straight).unwrap());
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let data = samples(4, PoseDim::Se3);
    let mut tr = Trainer::new(small_model(PoseDim::Se3, false), config(1, 4)).unwrap();
    tr.train(&data, |_, _| Ok(())).unwrap();
    let bytes = to_bytes(&tr).unwrap();
    let back = from_bytes(&bytes).unwrap();
    assert_eq!(to_bytes(&back).unwrap(), bytes);
    assert_eq!(back.model.config, tr.model.config);
    for (a, b) in back.model.flow.stages.iter().zip(&tr.model.flow.stages) {
        assert_eq!(a.0.indices(), b.0.indices());
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let tr = Trainer::new(small_model(PoseDim::Se2, false), config(1, 4)).unwrap();
    let bytes = to_bytes(&tr).unwrap();
    for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(from_bytes(&bytes[..cut]).is_err(), "accepted a file cut at {cut}");
    }
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(from_bytes(&bad_magic), Err(CheckpointError::Magic)));
    let mut bad_version = bytes.clone();
    bad_version[4..8].copy_from_slice(&(VERSION + 1).to_le_bytes());
    assert!(matches!(from_bytes(&bad_version), Err(CheckpointError::Version(v)) if v == VERSION + 1));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(from_bytes(&long), Err(CheckpointError::Trailing(1))));
    assert!(matches!(from_bytes(&bytes[..bytes.len() - 1]), Err(CheckpointError::Truncated(_))));
}
