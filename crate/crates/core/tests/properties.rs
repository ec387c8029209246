use nalgebra::{Matrix3, Point2, Vector3};
use proptest::prelude::*;

use epirefine::diffcore::{Tape, Tensor};
use epirefine::epigeo::{rotation_about, se3_exp, symmetric_epipolar_distance, DistanceMode, FundamentalMatrix, Intrinsics, Pose, RelativePose};
use epirefine::evalkit::{epipolar_histogram, estimate_relative_pose, rotation_error, translation_error, RansacConfig};
use epirefine::imageio::Image;
use epirefine::matcher::{match_images, MatchSet, MatcherConfig, Match};
use epirefine::refine::{evaluate_consistency, huber, LossWeights};
use epirefine::sampler::{ddim_step, NoiseSchedule};

fn unit_axis() -> impl Strategy<Value = Vector3<f64>> {
    (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
        .prop_filter("non-zero axis", |(x, y, z)| x * x + y * y + z * z > 1e-2)
        .prop_map(|(x, y, z)| Vector3::new(x, y, z).normalize())
}

fn pose() -> impl Strategy<Value = Pose> {
    (unit_axis(), 0.0..0.5f64, -0.6..0.6f64, -0.6..0.6f64, -0.3..0.3f64)
        .prop_filter("non-zero baseline", |(_, _, x, y, z)| x * x + y * y + z * z > 1e-2)
        .prop_map(|(axis, angle, x, y, z)| Pose::new(rotation_about(&axis, angle), Vector3::new(x, y, z)).unwrap())
}

fn is_rotation(r: &Matrix3<f64>) -> bool {
    (r.transpose() * r - Matrix3::identity()).norm() < 1e-9 && (r.determinant() - 1.0).abs() < 1e-9
}

fn image(width: usize, height: usize, values: Vec<f64>) -> Image {
    Image::new(width, height, 3, values).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn se3_exp_gives_rotations(xi in prop::array::uniform6(-1.5..1.5f64)) {
        prop_assert!(is_rotation(&se3_exp(&xi).rotation));
    }

    #[test]
    fn shared_points_satisfy_the_epipolar_constraint(
        target in pose(),
        points in prop::collection::vec((-0.4..0.4f64, -0.4..0.4f64, 2.0..6.0f64), 1..20),
    ) {
        let k = Intrinsics::standard(128, 128);
        let f = FundamentalMatrix::from_relative(&RelativePose::between(&Pose::identity(), &target), &k, &k).unwrap();
        let svd = f.matrix().svd(false, false);
        let s = svd.singular_values;
        prop_assert!(s.min() < 1e-9 * s.max());
        prop_assert!((f.matrix().norm() - 1.0).abs() < 1e-12);
        for (u, v, z) in points {
            let p = Vector3::new(u * z, v * z, z);
            let q = target.transform(&p);
            if q.z <= 0.1 {
                continue;
            }
            let (x, y) = (k.project(&p).unwrap(), k.project(&q).unwrap());
            if let Ok(d) = symmetric_epipolar_distance(&f, &x, &y) {
                prop_assert!(d < 1e-6, "distance {d}");
            }
        }
    }

    #[test]
    fn rotation_error_is_symmetric(a in unit_axis(), b in unit_axis(), s in 0.0..3.1f64, t in 0.0..3.1f64) {
        let (r1, r2) = (rotation_about(&a, s), rotation_about(&b, t));
        prop_assert!((rotation_error(&r1, &r2) - rotation_error(&r2, &r1)).abs() < 1e-9);
        prop_assert!(rotation_error(&r1, &r1) < 1e-5);
    }

    #[test]
    fn translation_error_is_scale_invariant(a in unit_axis(), b in unit_axis(), scale in 1e-3..1e3f64) {
        let e = translation_error(&a, &b).unwrap();
        prop_assert!((translation_error(&(a * scale), &b).unwrap() - e).abs() < 1e-9);
        prop_assert!((0.0..=180.0).contains(&e));
    }

    #[test]
    fn huber_is_continuous_and_monotone(delta in 0.1..10.0f64, r in 0.0..50.0f64) {
        prop_assert!((huber(delta.next_up(), delta) - huber(delta, delta)).abs() < 1e-12);
        prop_assert!(huber(r + 1e-3, delta) > huber(r, delta));
        prop_assert!(huber(r, delta) <= 0.5 * r * r + 1e-12);
    }

    #[test]
    fn histogram_accounts_for_every_match(
        target in pose(),
        pairs in prop::collection::vec(((0.0..128.0f64, 0.0..128.0f64), (0.0..128.0f64, 0.0..128.0f64)), 1..60),
        bin in 0.1..2.0f64,
    ) {
        let k = Intrinsics::standard(128, 128);
        let f = FundamentalMatrix::from_relative(&RelativePose::between(&Pose::identity(), &target), &k, &k).unwrap();
        let pairs: Vec<_> = pairs.into_iter().map(|((a, b), (c, d))| (Point2::new(a, b), Point2::new(c, d))).collect();
        let h = epipolar_histogram(&pairs, &f, DistanceMode::Symmetric, bin, 20.0).unwrap();
        prop_assert_eq!(h.counts.iter().sum::<usize>() + h.overflow, h.total);
        prop_assert_eq!(h.total + h.skipped, pairs.len());
    }

    #[test]
    fn consistency_loss_ignores_the_scale_of_f(
        target in pose(),
        scale in 1e-3..1e3f64,
        ys in prop::collection::vec((8.0..56.0f64, 8.0..56.0f64), 1..10),
    ) {
        let k = Intrinsics::standard(64, 64);
        let f = FundamentalMatrix::from_relative(&RelativePose::between(&Pose::identity(), &target), &k, &k).unwrap();
        let scaled = FundamentalMatrix::from_matrix(f.matrix() * scale).unwrap();
        let img = image(64, 64, (0..64 * 64 * 3).map(|i| (i % 17) as f64 / 17.0).collect());
        let set = MatchSet::unfiltered(ys.iter().map(|&(u, v)| Match { x: [u, v], y: [u + 1.5, v - 0.5], confidence: 1.0 }).collect());
        let w = LossWeights { lambda_rgb: 2.5, huber_delta: 2.0, epipole_exclusion: 0.0 };
        let (a, b) = (evaluate_consistency(&set, &f, &img, &img, &w), evaluate_consistency(&set, &scaled, &img, &img, &w));
        if let (Ok(a), Ok(b)) = (a, b) {
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn telescoping_holds_for_linear_schedules(
        beta_start in 1e-5..1e-3f64,
        spread in 0.0..0.03f64,
        t_sample in 1usize..60,
        z in prop::collection::vec(-3.0..3.0f64, 1..5),
    ) {
        let s = NoiseSchedule::linear(600, beta_start, beta_start + spread, t_sample).unwrap();
        prop_assert!((1..=600).all(|t| s.alpha_bar(t) < s.alpha_bar(t - 1)));
        let tape = Tape::new();
        let mut cur = tape.constant(Tensor::vector(&z));
        let zero = tape.constant(Tensor::zeros(&[z.len()]));
        for &t in s.sample_steps.iter().rev() {
            cur = ddim_step(cur, zero, t, &s).unwrap();
        }
        let gain = 1.0 / s.alpha_bar(*s.sample_steps.last().unwrap()).sqrt();
        for (o, i) in cur.value().data().iter().zip(&z) {
            prop_assert!((o - i * gain).abs() < 1e-9 * gain.max(1.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn soft_argmax_stays_inside_the_image(values in prop::collection::vec(0.0..1.0f64, 24 * 20 * 3), other in prop::collection::vec(0.0..1.0f64, 24 * 20 * 3)) {
        let (a, b) = (image(24, 20, values), image(24, 20, other));
        let config = MatcherConfig { stride: 2, ..MatcherConfig::default() };
        let set = match_images(&a, &b, &config).unwrap();
        for m in &set.matches {
            prop_assert!((0.0..=23.0).contains(&m.y[0]) && (0.0..=19.0).contains(&m.y[1]), "{:?}", m.y);
            prop_assert!((0.0..=1.0).contains(&m.confidence));
        }
        prop_assert_eq!(match_images(&a, &b, &config).unwrap(), set);
    }

    #[test]
    fn pose_estimation_is_deterministic_per_seed(
        target in pose(),
        seed in 0u64..1000,
        points in prop::collection::vec((-0.4..0.4f64, -0.4..0.4f64, 2.0..6.0f64), 30..60),
    ) {
        let k = Intrinsics::standard(128, 128);
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for (u, v, z) in points {
            let p = Vector3::new(u * z, v * z, z);
            let q = target.transform(&p);
            if q.z > 0.1 {
                x.push(k.project(&p).unwrap());
                y.push(k.project(&q).unwrap() + nalgebra::Vector2::new((u * 97.0).sin() * 0.3, (v * 89.0).cos() * 0.3));
            }
        }
        let cfg = RansacConfig { seed, ..Default::default() };
        let (a, b) = (estimate_relative_pose(&x, &y, &k, &k, &cfg), estimate_relative_pose(&x, &y, &k, &k, &cfg));
        match (a, b) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(&a, &b);
                prop_assert!(is_rotation(&a.rotation));
                prop_assert!((a.translation.norm() - 1.0).abs() < 1e-9);
                prop_assert!(a.inliers >= 8);
            }
            (Err(a), Err(b)) => prop_assert_eq!(a.to_string(), b.to_string()),
            _ => prop_assert!(false, "runs disagree"),
        }
    }
}
