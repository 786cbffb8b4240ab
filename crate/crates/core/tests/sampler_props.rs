use std::f64::consts::PI;

use poseinn::geometry::{geodesic_distance, Aabb, Pose};
use poseinn::sampler::{
    filter_pose, in_view_subset, sample_orientation, sample_poses, AcceptanceRanges, Decision, Rule, SamplingConfig,
};
use poseinn::scene::{generate_trajectory, CameraIntrinsics, Scene, SceneConfig, TrajectorySpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Camera axes (forward, left, up) in world coordinates, written out from the
/// Z-X-Y Euler angles without the geometry module.
fn axes(pose: &Pose) -> [[f64; 3]; 3] {
    let [a, b, c] = pose.orientation;
    let (sa, ca, sb, cb, sc, cc) = (a.sin(), a.cos(), b.sin(), b.cos(), c.sin(), c.cos());
    // Columns of Rz(a)·Rx(b)·Ry(c).
    let m = [
        [ca * cc - sa * sb * sc, -sa * cb, ca * sc + sa * sb * cc],
        [sa * cc + ca * sb * sc, ca * cb, sa * sc - ca * sb * cc],
        [-cb * sc, sb, cb * cc],
    ];
    [0, 1, 2].map(|j| [m[0][j], m[1][j], m[2][j]])
}

struct Oracle {
    count: usize,
    nearest: Option<f64>,
}

fn brute_force(pose: &Pose, intr: &CameraIntrinsics, cloud: &[[f64; 3]]) -> Oracle {
    let [fwd, left, up] = axes(pose);
    let f = (intr.width as f64 / 2.0) / (intr.hfov / 2.0).tan();
    let mut count = 0;
    let mut nearest: Option<f64> = None;
    for p in cloud {
        let d = [p[0] - pose.position[0], p[1] - pose.position[1], p[2] - pose.position[2]];
        let depth = d[0] * fwd[0] + d[1] * fwd[1] + d[2] * fwd[2];
        if depth <= 0.0 {
            continue;
        }
        let l = d[0] * left[0] + d[1] * left[1] + d[2] * left[2];
        let h = d[0] * up[0] + d[1] * up[1] + d[2] * up[2];
        let u = intr.width as f64 / 2.0 - f * l / depth;
        let v = intr.height as f64 / 2.0 - f * h / depth;
        if u >= 0.0 && u < intr.width as f64 && v >= 0.0 && v < intr.height as f64 {
            count += 1;
            let dist = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            nearest = Some(nearest.map_or(dist, |n: f64| n.min(dist)));
        }
    }
    Oracle { count, nearest }
}

fn toy(seed: u64) -> (Scene, Vec<[f64; 3]>, Vec<Pose>) {
    let scene = Scene::generate(&SceneConfig::default(), seed).unwrap();
    let cloud = scene.export_point_cloud(3000, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let training = generate_trajectory(&scene, &TrajectorySpec { count: 40, ..Default::default() }).unwrap();
    (scene, cloud, training)
}

#[test]
fn camera_facing_away_sees_nothing() {
    let cloud = vec![[1.0, 0.0, 0.0], [2.0, 0.3, -0.2], [3.0, -0.5, 0.5]];
    let view = in_view_subset(&Pose::se2(0.0, 0.0, PI), &CameraIntrinsics::default(), &cloud);
    assert!(view.indices.is_empty());
    assert_eq!(view.nearest, None);
}

#[test]
fn single_point_on_axis() {
    let view = in_view_subset(&Pose::se2(0.0, 0.0, 0.0), &CameraIntrinsics::default(), &[[2.0, 0.0, 0.0]]);
    assert_eq!(view.indices, vec![0]);
    assert_eq!(view.nearest, Some(2.0));
}

#[test]
fn in_view_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let intr = CameraIntrinsics { width: 40, height: 24, hfov: 1.2 };
    for _ in 0..200 {
        let cloud: Vec<[f64; 3]> =
            (0..300).map(|_| std::array::from_fn(|_| rng.random_range(-3.0..3.0))).collect();
        let pose = Pose::se3(
            std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
            rng.random_range(-PI..PI),
            rng.random_range(-1.2..1.2),
            rng.random_range(-PI..PI),
        );
        let view = in_view_subset(&pose, &intr, &cloud);
        let oracle = brute_force(&pose, &intr, &cloud);
        assert_eq!(view.indices.len(), oracle.count);
        match (view.nearest, oracle.nearest) {
            (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12),
            (a, b) => assert_eq!(a, b),
        }
    }
}

#[test]
fn orientation_without_noise_is_a_training_orientation() {
    let training = vec![Pose::se3([0.0; 3], 0.3, 0.2, -0.1), Pose::se3([1.0; 3], -2.0, 0.5, 1.0)];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let (k, r) = sample_orientation(&training, 0.0, &mut rng).unwrap();
        assert_eq!(r, training[k].rotation());
    }
    assert!(sample_orientation(&[], 0.1, &mut rng).is_err());
}

#[test]
fn orientation_noise_is_bounded() {
    let max = 3.6f64.to_radians();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let se3: Vec<Pose> = (0..10)
        .map(|_| Pose::se3([0.0; 3], rng.random_range(-PI..PI), rng.random_range(-1.0..1.0), rng.random_range(-PI..PI)))
        .collect();
    let se2: Vec<Pose> = (0..10).map(|_| Pose::se2(0.0, 0.0, rng.random_range(-PI..PI))).collect();
    for training in [&se3, &se2] {
        for _ in 0..10_000 {
            let (k, r) = sample_orientation(training, max, &mut rng).unwrap();
            assert!(geodesic_distance(&r, &training[k].rotation()).unwrap() <= max + 1e-9);
        }
    }
}

#[test]
fn single_training_pose_orientation_is_deterministic() {
    let training = vec![Pose::se3([0.0; 3], 0.4, 0.1, 0.2)];
    let a = sample_orientation(&training, 0.1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let b = sample_orientation(&training, 0.1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn filter_rule_examples() {
    let (_, cloud, training) = toy(1);
    let intr = CameraIntrinsics::default();
    let cfg = SamplingConfig::default();
    let ranges = AcceptanceRanges::from_training(&training, &intr, &cloud, 1.0).unwrap();
    for t in &training {
        assert_eq!(filter_pose(t, &training, &cloud, &intr, &ranges, &cfg).0, Decision::Accept);
    }
    let far = Pose::se2(11.0, 0.0, 0.0);
    assert_eq!(filter_pose(&far, &training, &cloud, &intr, &ranges, &cfg).0, Decision::Reject(Rule::TrainingDistance));
}

#[test]
fn too_close_to_a_wall_fails_rule_three() {
    // One wall point on the optical axis plus a distant cluster that every
    // pose below sees in full, so only the nearest distance differs.
    let mut cloud = vec![[2.0, 0.0, 0.0]];
    for i in 0..11 {
        for j in 0..11 {
            cloud.push([6.0, -0.5 + 0.1 * i as f64, -0.5 + 0.1 * j as f64]);
        }
    }
    let training = vec![Pose::se2(1.5, 0.0, 0.0), Pose::se2(1.0, 0.0, 0.0)];
    let intr = CameraIntrinsics::default();
    let ranges = AcceptanceRanges::from_training(&training, &intr, &cloud, 1.0).unwrap();
    assert_eq!(ranges.delta_in_view, [0.5, 1.0]);
    let near_wall = Pose::se2(1.99, 0.0, 0.0);
    let (decision, stats) = filter_pose(&near_wall, &training, &cloud, &intr, &ranges, &SamplingConfig::default());
    let oracle = brute_force(&near_wall, &intr, &cloud);
    assert_eq!(stats.n_in_view, oracle.count);
    assert!((oracle.nearest.unwrap() - 0.01).abs() < 1e-12);
    assert_eq!(decision, Decision::Reject(Rule::InViewDistance));
}

#[test]
fn rule_one_is_monotone() {
    let (_, cloud, training) = toy(2);
    let intr = CameraIntrinsics::default();
    let cfg = SamplingConfig::default();
    let ranges = AcceptanceRanges::from_training(&training, &intr, &cloud, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let t = &training[rng.random_range(0..training.len())];
        let dir = rng.random_range(-PI..PI);
        let mut prev_rejected_by_rule1 = false;
        for step in 0..20 {
            let r = 0.1 * step as f64;
            let p = Pose::se2(t.position[0] + r * dir.cos(), t.position[1] + r * dir.sin(), t.heading());
            if !(-2.0..=2.0).contains(&p.position[0]) || !(-2.0..=2.0).contains(&p.position[1]) {
                break;
            }
            let (d, stats) = filter_pose(&p, &training, &cloud, &intr, &ranges, &cfg);
            let rule1 = d == Decision::Reject(Rule::TrainingDistance);
            assert_eq!(rule1, stats.delta_training > 0.5);
            if prev_rejected_by_rule1 && stats.delta_training >= 0.5 {
                assert_ne!(d, Decision::Accept);
            }
            prev_rejected_by_rule1 = rule1;
        }
    }
}

fn recheck(sampled: &[poseinn::sampler::SampledPose], cloud: &[[f64; 3]], training: &[Pose], intr: &CameraIntrinsics) {
    // Independent ranges from the brute-force oracle.
    let stats: Vec<Oracle> = training.iter().map(|t| brute_force(t, intr, cloud)).collect();
    let n_lo = stats.iter().map(|s| s.count).min().unwrap();
    let n_hi = stats.iter().map(|s| s.count).max().unwrap();
    let d_lo = stats.iter().filter_map(|s| s.nearest).fold(f64::INFINITY, f64::min);
    let d_hi = stats.iter().filter_map(|s| s.nearest).fold(f64::NEG_INFINITY, f64::max);
    for s in sampled {
        let p = &s.pose;
        let dt = training
            .iter()
            .map(|t| (0..3).map(|i| (p.position[i] - t.position[i]).powi(2)).sum::<f64>().sqrt())
            .fold(f64::INFINITY, f64::min);
        assert!(dt <= 0.5, "rule 1 violated: {dt}");
        let o = brute_force(p, intr, cloud);
        assert!(o.count >= n_lo && o.count <= n_hi, "rule 2 violated");
        let d = o.nearest.expect("rule 3 requires a visible point");
        assert!(d >= d_lo && d <= d_hi, "rule 3 violated");
    }
}

#[test]
fn sampled_poses_pass_independent_recheck() {
    let (scene, cloud, training) = toy(4);
    let intr = CameraIntrinsics::default();
    let cfg = SamplingConfig { target: 100, seed: 9, ..Default::default() };
    let (sampled, report) = sample_poses(&scene.bounds, &cloud, &training, &intr, &cfg).unwrap();
    assert_eq!(sampled.len(), 100);
    assert!(report.attempts >= 100);
    recheck(&sampled, &cloud, &training, &intr);
    for s in &sampled {
        for v in s.pose.to_vec() {
            assert_eq!(v as f32 as f64, v);
        }
        assert!(scene.bounds.contains(s.pose.position, 0.0));
    }
    let again = sample_poses(&scene.bounds, &cloud, &training, &intr, &cfg).unwrap();
    assert_eq!(sampled, again.0);
}

#[test]
fn single_training_pose_bounds_positions() {
    let (scene, cloud, _) = toy(5);
    let training = vec![Pose::se2(0.5, 0.5, 0.7)];
    let intr = CameraIntrinsics::default();
    let cfg = SamplingConfig { target: 10, widening: 2.0, attempt_factor: 10_000, ..Default::default() };
    let (sampled, _) = sample_poses(&scene.bounds, &cloud, &training, &intr, &cfg).unwrap();
    assert_eq!(sampled.len(), 10);
    for s in sampled {
        assert!(s.pose.translation_error(&training[0]) <= 0.5);
    }
}

#[test]
fn zero_target_and_budget_errors() {
    let (scene, cloud, training) = toy(6);
    let intr = CameraIntrinsics::default();
    let zero = SamplingConfig { target: 0, ..Default::default() };
    assert!(sample_poses(&scene.bounds, &cloud, &training, &intr, &zero).unwrap().0.is_empty());
    let tight = SamplingConfig { target: 50, attempt_factor: 1, max_training_distance: 1e-6, ..Default::default() };
    let err = sample_poses(&scene.bounds, &cloud, &training, &intr, &tight).unwrap_err();
    assert!(err.to_string().contains("rule 1"));
}

#[test]
fn accepted_positions_are_uniform_over_octants() {
    // Wide ranges and a huge distance bound accept everything, so positions
    // should be uniform in the box.
    let bounds = Aabb::new([-1.0; 3], [1.0; 3]);
    // A shell around the box keeps some point in view from anywhere.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cloud: Vec<[f64; 3]> = (0..4000)
        .map(|_| {
            let v: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            v.map(|c| 3.0 * c / n)
        })
        .collect();
    let training: Vec<Pose> =
        (0..8).map(|i| Pose::se3([0.9 - 0.2 * i as f64, 0.0, 0.0], 0.7 * i as f64, 0.0, 0.0)).collect();
    let intr = CameraIntrinsics::default();
    let cfg = SamplingConfig { target: 2000, max_training_distance: 100.0, widening: 1e6, seed: 3, ..Default::default() };
    let (sampled, _) = sample_poses(&bounds, &cloud, &training, &intr, &cfg).unwrap();
    let mut counts = [0usize; 8];
    for s in &sampled {
        let p = s.pose.position;
        counts[(p[0] > 0.0) as usize + 2 * (p[1] > 0.0) as usize + 4 * (p[2] > 0.0) as usize] += 1;
    }
    let expected = sampled.len() as f64 / 8.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // χ² critical value for 7 degrees of freedom at p = 0.01.
    assert!(chi2 < 18.475, "chi2 = {chi2}, counts {counts:?}");
}

