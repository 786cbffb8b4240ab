use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use poseinn::encoder::VaeConfig;
use poseinn::flow::FlowConfig;
use poseinn::geometry::{wrap_angle, Pose, PoseDim};
use poseinn::localizer::*;
use poseinn::model::{ModelConfig, PoseInnModel};
use poseinn::scene::{CameraIntrinsics, Scene, SceneConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn setup(dim: PoseDim, conditional: bool) -> (Scene, CameraIntrinsics, PoseInnModel) {
    let scene = Scene::generate(&SceneConfig::default(), 2).unwrap();
    let intr = CameraIntrinsics { width: 16, height: 16, ..CameraIntrinsics::default() };
    let cfg = ModelConfig {
        pose_dim: dim,
        encoding_depth: 3,
        conditional,
        flow: FlowConfig { blocks: 3, hidden_width: 16, zero_init: false, ..FlowConfig::default() },
        vae: VaeConfig { image_size: 16, channels: [4, 8, 8], ..VaeConfig::default() },
        ..ModelConfig::default()
    };
    let model = PoseInnModel::new(cfg, scene.bounds).unwrap();
    (scene, intr, model)
}

#[test]
fn single_sample_has_zero_variance() {
    let (scene, intr, model) = setup(PoseDim::Se2, false);
    let img = scene.render(&intr, &Pose::se2(0.3, -0.2, 1.0)).unwrap();
    let post = localize(&model, &img, 1, None, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(post.samples.len(), 1);
    assert!(post.variance.iter().all(|&v| v == 0.0));
    assert_eq!(post.mean, post.samples[0]);
}

#[test]
fn identical_latents_give_identical_samples() {
    let (scene, intr, model) = setup(PoseDim::Se3, false);
    let img = scene.render(&intr, &Pose::se3([0.1, 0.4, 0.2], 0.5, 0.1, -0.1)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let y = model.encode_images(&[&img], poseinn::encoder::EncodeMode::Mean, &mut rng).unwrap();
    let z: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let post = localize_with_latents(&model, y.data(), &vec![z; 20], None).unwrap();
    assert!(post.samples.iter().all(|s| *s == post.samples[0]));
    assert!(post.variance.iter().all(|&v| v.abs() < 1e-24));
}

#[test]
fn localize_is_deterministic_per_seed() {
    let (scene, intr, model) = setup(PoseDim::Se2, true);
    let img = scene.render(&intr, &Pose::se2(-0.5, 0.5, -2.0)).unwrap();
    let prev = Pose::se2(-0.4, 0.6, -1.9);
    let run = |seed| localize(&model, &img, 50, Some(&prev), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    assert_eq!(run(7), run(7));
    assert_ne!(run(7), run(8));
    assert!(matches!(localize(&model, &img, 5, None, &mut ChaCha8Rng::seed_from_u64(0)), Err(LocalizeError::ConditionRequired)));
    assert!(localize(&model, &img, 0, Some(&prev), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn posterior_statistics_match_direct_formulas() {
    let samples = vec![Pose::se2(1.0, 2.0, PI - 0.1), Pose::se2(2.0, 0.0, -PI + 0.1), Pose::se2(0.0, 1.0, PI - 0.2)];
    let post = PosePosterior::from_samples(samples).unwrap();
    assert!((post.mean.position[0] - 1.0).abs() < 1e-15 && (post.mean.position[1] - 1.0).abs() < 1e-15);
    let s: f64 = [PI - 0.1, -PI + 0.1, PI - 0.2].iter().map(|a: &f64| a.sin()).sum();
    let c: f64 = [PI - 0.1, -PI + 0.1, PI - 0.2].iter().map(|a: &f64| a.cos()).sum();
    let h = s.atan2(c);
    assert!(wrap_angle(post.mean.heading() - h).abs() < 1e-12);
    assert!(h.abs() > 3.0, "mean heading stays near the seam");
    let dev: Vec<f64> = [PI - 0.1, -PI + 0.1, PI - 0.2].iter().map(|a| wrap_angle(a - h)).collect();
    let var_h = dev.iter().map(|d| d * d).sum::<f64>() / 3.0;
    assert!((post.variance[2] - var_h).abs() < 1e-12);
    assert!((post.variance[0] - 2.0 / 3.0).abs() < 1e-12);
    let cov_xy = ((0.0) * 1.0 + 1.0 * (-1.0) + (-1.0) * 0.0) / 3.0;
    assert!((post.covariance[(0, 1)] - cov_xy).abs() < 1e-12);
    assert!((post.uncertainty(false) - (2.0 / 3.0 + 2.0 / 3.0)).abs() < 1e-12);
    assert!((post.uncertainty(true) - (4.0 / 3.0 + var_h)).abs() < 1e-12);
}

#[test]
fn samples_map_back_through_the_forward_flow() {
    let (scene, intr, model) = setup(PoseDim::Se2, false);
    let img = scene.render(&intr, &Pose::se2(0.7, 0.2, 0.3)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let y = model.encode_images(&[&img], poseinn::encoder::EncodeMode::Mean, &mut rng).unwrap();
    let zs: Vec<Vec<f64>> = (0..10).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let out = model.inverse_many(y.data(), &zs, None).unwrap();
    let (y2, z2) = model.forward_many(&out, None).unwrap();
    for i in 0..10 {
        for (a, b) in y2.row(i).iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        for (a, b) in z2.row(i).iter().zip(&zs[i]) {
            assert!((a - b).abs() < 1e-6);
        }
        let pose = model.decode_pose(out.row(i)).unwrap();
        let tail = model.encode_pose(&pose).unwrap();
        let raw = &out.row(i)[out.row(i).len() - 3..];
        if raw.iter().all(|v| (-1.0..1.0).contains(v)) {
            for (a, b) in tail.tail(PoseDim::Se2).iter().zip(raw) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn sequential_localization_feeds_back_the_mean() {
    let (scene, intr, model) = setup(PoseDim::Se2, true);
    let poses = [Pose::se2(1.0, 0.0, PI / 2.0), Pose::se2(0.9, 0.3, 1.8), Pose::se2(0.8, 0.6, 2.0)];
    let images: Vec<_> = poses.iter().map(|p| scene.render(&intr, p).unwrap()).collect();
    let cfg = SequentialConfig { samples: 20, variance_ceiling: 0.0, lost_after: 2 };
    let track = sequential_localize(&model, &images, poses[0], &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(track.len(), 3);
    assert_eq!(track[0].condition, model.config.grid.round(&poses[0], &model.bounds));
    for w in track.windows(2) {
        assert_eq!(w[1].condition, model.config.grid.round(&w[0].posterior.mean, &model.bounds));
    }
    assert_eq!(track.iter().map(|f| f.lost).collect::<Vec<_>>(), vec![false, true, true]);
    let (_, _, unconditional) = setup(PoseDim::Se2, false);
    assert!(matches!(
        sequential_localize(&unconditional, &images, poses[0], &cfg, &mut ChaCha8Rng::seed_from_u64(3)),
        Err(LocalizeError::NotSequential)
    ));
}

fn random_spd(rng: &mut ChaCha8Rng, scale: f64) -> Matrix3<f64> {
    let a = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
    scale * (a * a.transpose() + 0.1 * Matrix3::identity())
}

fn random_state(rng: &mut ChaCha8Rng) -> EkfState {
    let pose = Pose::se2(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-PI..PI));
    EkfState::new(&pose, random_spd(rng, 0.05)).unwrap()
}

#[test]
fn huge_measurement_noise_leaves_the_prediction() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..50 {
        let s = random_state(&mut rng);
        let meas = Pose::se2(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-PI..PI));
        let r = random_spd(&mut rng, 1e12);
        let u = s.update(&meas, &r, &EkfConfig::default()).unwrap();
        assert!((u.mean - s.mean).amax() < 1e-6);
        assert!((u.covariance - s.covariance).amax() < 1e-6);
    }
}

#[test]
fn zero_measurement_noise_snaps_to_the_measurement() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let s = random_state(&mut rng);
        let meas = Pose::se2(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-PI..PI));
        let u = s.update(&meas, &Matrix3::zeros(), &EkfConfig::default()).unwrap();
        assert!((u.mean[0] - meas.position[0]).abs() < 1e-9);
        assert!((u.mean[1] - meas.position[1]).abs() < 1e-9);
        assert!(wrap_angle(u.mean[2] - meas.heading()).abs() < 1e-9);
    }
}

#[test]
fn diagonal_update_matches_the_scalar_gain() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let p = Vector3::from_fn(|_, _| rng.random_range(0.01..2.0));
        let r = Vector3::from_fn(|_, _| rng.random_range(0.01..2.0));
        let s = EkfState { mean: Vector3::new(0.0, 0.0, 0.0), covariance: Matrix3::from_diagonal(&p) };
        let meas = Pose::se2(0.5, -0.3, 0.4);
        let u = s.update(&meas, &Matrix3::from_diagonal(&r), &EkfConfig::default()).unwrap();
        let z = [0.5, -0.3, 0.4];
        for i in 0..3 {
            let k = p[i] / (p[i] + r[i]);
            assert!((u.mean[i] - k * z[i]).abs() < 1e-12);
            assert!((u.covariance[(i, i)] - (1.0 - k) * p[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn updates_never_grow_the_trace_and_stay_psd() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for k in 0..200 {
        let s = random_state(&mut rng);
        let meas = Pose::se2(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-PI..PI));
        let cfg = EkfConfig { fuse_heading: k % 2 == 0 };
        let scale = rng.random_range(1e-3..10.0);
        let u = s.update(&meas, &random_spd(&mut rng, scale), &cfg).unwrap();
        assert!(u.covariance.trace() <= s.covariance.trace() + 1e-12);
        assert!(u.covariance.symmetric_eigenvalues().min() >= -1e-10);
    }
}

#[test]
fn measurement_covariance_must_be_psd() {
    let s = EkfState::new(&Pose::se2(0.0, 0.0, 0.0), Matrix3::identity()).unwrap();
    let bad = Matrix3::from_diagonal(&Vector3::new(1.0, -0.5, 1.0));
    assert!(matches!(s.update(&Pose::se2(0.0, 0.0, 0.0), &bad, &EkfConfig::default()), Err(LocalizeError::NotPsd(_))));
    let asym = Matrix3::new(1.0, 0.5, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
    assert!(s.update(&Pose::se2(0.0, 0.0, 0.0), &asym, &EkfConfig::default()).is_err());
    assert!(EkfState::new(&Pose::se2(0.0, 0.0, 0.0), bad).is_err());
}

#[test]
fn heading_innovation_is_wrapped() {
    let s = EkfState::new(&Pose::se2(0.0, 0.0, PI - 0.05), Matrix3::identity()).unwrap();
    let u = s.update(&Pose::se2(0.0, 0.0, -PI + 0.05), &Matrix3::identity(), &EkfConfig::default()).unwrap();
    assert!(wrap_angle(u.mean[2] - PI).abs() < 1e-12, "{}", u.mean[2]);
}

#[test]
fn noiseless_odometry_integrates_the_loop() {
    let truth: Vec<Pose> = (0..60)
        .map(|i| {
            let a = 2.0 * PI * i as f64 / 60.0;
            Pose::se2(a.cos(), a.sin(), a + PI / 2.0)
        })
        .collect();
    let mut s = EkfState::new(&truth[0], Matrix3::zeros()).unwrap();
    for w in truth.windows(2) {
        let odom = OdometryStep::between(&w[0], &w[1], [0.0; 3]);
        s = ekf_fuse(&s, &odom, None, &EkfConfig::default()).unwrap();
        assert!(s.pose().translation_error(&w[1]) < 1e-12);
        assert!(wrap_angle(s.pose().heading() - w[1].heading()).abs() < 1e-12);
    }
    assert_eq!(s.covariance, Matrix3::zeros());
}

#[test]
fn prediction_jacobian_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..20 {
        let s = random_state(&mut rng);
        let odom = OdometryStep { forward: rng.random_range(-0.5..0.5), lateral: rng.random_range(-0.2..0.2), dtheta: 0.1, noise: [0.0; 3] };
        // With zero process noise P' = F P Fᵀ, so a unit covariance on axis j yields fⱼfⱼᵀ.
        let h = 1e-6;
        for j in 0..3 {
            let mut plus = s;
            plus.mean[j] += h;
            let mut minus = s;
            minus.mean[j] -= h;
            let (a, b) = (plus.predict(&odom).unwrap().mean, minus.predict(&odom).unwrap().mean);
            let mut col = (a - b) / (2.0 * h);
            col[2] = wrap_angle(a[2] - b[2]) / (2.0 * h);
            let probe = EkfState { mean: s.mean, covariance: Matrix3::from_fn(|r, c| if r == j && c == j { 1.0 } else { 0.0 }) };
            let p = probe.predict(&odom).unwrap().covariance;
            let outer = col * col.transpose();
            assert!((p - outer).amax() < 1e-8);
        }
    }
}

#[test]
fn track_rows_have_fixed_columns() {
    let post = PosePosterior::from_samples(vec![Pose::se2(0.1, 0.2, 0.3)]).unwrap();
    let cols = TRACK_HEADER.split('\t').count();
    assert_eq!(track_row(0, Some(&post), true, false, None).split('\t').count(), cols);
    let s = EkfState::new(&post.mean, Matrix3::identity()).unwrap();
    let row = track_row(4, None, false, true, Some(&s));
    assert!(row.starts_with("4\t"));
    assert_eq!(row.split('\t').count(), cols);
}
