//! Property tests for the invariants of each module.

use based::autodiff::{Tape, Tensor};
use based::data::{GrayImage, Image};
use based::eval::{depth_metrics, psnr, ssim};
use based::fields::{encoded_dim, positional_encode, FieldBundle, FieldConfig, MlpConfig, SceneBox};
use based::geometry::{backproject, generate_ray, pose_to_se3, Intrinsics, SE3Pose};
use based::rendering::{compositing_weights, RaySamples};
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_bundle(seed: u64) -> FieldBundle {
    let cfg = FieldConfig {
        deform: MlpConfig { depth: 2, width: 16, skip_at: None },
        canonical: MlpConfig { depth: 2, width: 16, skip_at: Some(1) },
        ..FieldConfig::desk()
    };
    let sb = SceneBox { min: [-2.0, -2.0, 2.0], max: [2.0, 2.0, 8.0] };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = FieldBundle::new(cfg, sb, &mut rng).unwrap();
    for (i, t) in b.deform_params.tensors.iter_mut().enumerate() {
        for (j, v) in t.data_mut().iter_mut().enumerate() {
            *v += 0.05 * ((i * 31 + j * 7 + seed as usize) as f64).sin();
        }
    }
    b
}

fn intrinsics() -> Intrinsics {
    Intrinsics { fx: 40.0, fy: 40.0, cx: 23.5, cy: 17.5, width: 48, height: 36 }
}

fn row_strategy() -> impl Strategy<Value = [f64; 9]> {
    prop::array::uniform9(-2.0f64..2.0).prop_filter("non-degenerate", |r| pose_to_se3(r, 0).is_ok())
}

fn image(w: usize, h: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(0.0f64..=1.0, 3 * w * h).prop_map(move |data| Image { width: w, height: h, data })
}

fn tape_loss(a: &[f64], b: &[f64], alpha: f64, beta: f64) -> (Vec<f64>, Vec<f64>) {
    let n = a.len();
    let mut tape = Tape::new();
    let x = tape.param(Tensor::new(vec![n, 1], a.to_vec()).unwrap());
    let y = tape.param(Tensor::new(vec![n, 1], b.to_vec()).unwrap());
    let l1 = {
        let p = tape.mul(x, y).unwrap();
        let s = tape.sin(p);
        tape.sum(s)
    };
    let l2 = {
        let e = tape.exp(x);
        let q = tape.square(y);
        let m = tape.add(e, q).unwrap();
        tape.sum(m)
    };
    let a1 = tape.scale(l1, alpha);
    let b2 = tape.scale(l2, beta);
    let root = tape.add(a1, b2).unwrap();
    let g = tape.backward(root).unwrap();
    (g.get_or_zeros(x, n), g.get_or_zeros(y, n))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tape_gradients_are_bit_reproducible(v in prop::collection::vec(-2.0f64..2.0, 2..12)) {
        let (a, b) = v.split_at(v.len() / 2);
        let b = &b[..a.len()];
        prop_assert_eq!(tape_loss(a, b, 0.7, -1.3), tape_loss(a, b, 0.7, -1.3));
    }

    #[test]
    fn backward_is_linear_in_the_root(
        v in prop::collection::vec(-2.0f64..2.0, 2..12),
        alpha in -3.0f64..3.0,
        beta in -3.0f64..3.0,
    ) {
        let (a, b) = v.split_at(v.len() / 2);
        let b = &b[..a.len()];
        let (cx, cy) = tape_loss(a, b, alpha, beta);
        let (x1, y1) = tape_loss(a, b, 1.0, 0.0);
        let (x2, y2) = tape_loss(a, b, 0.0, 1.0);
        for i in 0..a.len() {
            prop_assert!((cx[i] - (alpha * x1[i] + beta * x2[i])).abs() < 1e-12);
            prop_assert!((cy[i] - (alpha * y1[i] + beta * y2[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn completed_pose_is_a_rotation(row in row_strategy()) {
        let r = pose_to_se3(&row, 0).unwrap().rotation;
        prop_assert!((r.transpose() * r - nalgebra::Matrix3::identity()).norm() < 1e-9);
        prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn completion_ignores_positive_scale(row in row_strategy(), s in 0.01f64..100.0) {
        let mut scaled = row;
        scaled[..6].iter_mut().for_each(|v| *v *= s);
        let a = pose_to_se3(&row, 0).unwrap().rotation;
        let b = pose_to_se3(&scaled, 0).unwrap().rotation;
        prop_assert!((a - b).abs().max() < 1e-9);
    }

    #[test]
    fn backprojected_points_lie_on_their_ray(
        row in row_strategy(),
        u in 0.0f64..47.0,
        v in 0.0f64..35.0,
        z in 0.5f64..20.0,
    ) {
        let k = intrinsics();
        let pose = pose_to_se3(&row, 0).unwrap();
        let x = backproject(&k, &pose, (u, v), z, 0).unwrap();
        let ray = generate_ray(&k, &pose, (u, v), 0, 0.0).unwrap();
        let dz = (pose.rotation.transpose() * ray.direction).z;
        prop_assert!((ray.origin + ray.direction * (z / dz) - x).norm() < 1e-9);
    }

    #[test]
    fn zero_time_deformation_is_exactly_zero(
        x in prop::array::uniform3(-10.0f64..10.0),
        seed in 0u64..1000,
    ) {
        prop_assert_eq!(small_bundle(seed).deform(x, 0.0).unwrap(), [0.0; 3]);
    }

    #[test]
    fn encoding_dimension_law(d in 1usize..5, l in 0usize..8, include in any::<bool>()) {
        let p = vec![0.3; d];
        let e = positional_encode(&p, l, include);
        prop_assert_eq!(e.len(), encoded_dim(d, l, include));
        prop_assert_eq!(e.len(), d * (2 * l + usize::from(include)));
    }

    #[test]
    fn density_ignores_viewing_direction(
        x in prop::array::uniform3(-1.5f64..1.5),
        dirs in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 100),
    ) {
        let b = small_bundle(3);
        let x0 = [x[0], x[1], x[2] + 5.0];
        let (_, sigma) = b.canonical_query(x0, [0.0, 0.0, 1.0]).unwrap();
        for d in dirs {
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            prop_assume!(n > 1e-3);
            let (_, s) = b.canonical_query(x0, [d[0] / n, d[1] / n, d[2] / n]).unwrap();
            prop_assert_eq!(s, sigma);
        }
    }

    #[test]
    fn compositing_weights_are_a_sub_distribution(
        sigma in prop::collection::vec(0.0f64..50.0, 2..64),
        near in 0.1f64..2.0,
        span in 0.5f64..10.0,
    ) {
        let s = RaySamples::midpoints(near, near + span, sigma.len());
        let w = compositing_weights(&s.deltas, &sigma);
        prop_assert!(w.iter().all(|&x| x >= 0.0));
        prop_assert!(w.iter().sum::<f64>() <= 1.0 + 1e-12);
    }

    #[test]
    fn image_metrics_are_symmetric(a in image(12, 11), b in image(12, 11)) {
        prop_assert_eq!(psnr(&a, &b, None).unwrap(), psnr(&b, &a, None).unwrap());
        let (ga, gb) = (a.to_gray(), b.to_gray());
        prop_assert_eq!(ssim(&ga, &gb).unwrap(), ssim(&gb, &ga).unwrap());
    }

    #[test]
    fn ssim_is_bounded_and_one_only_for_identical(a in image(13, 12), b in image(13, 12)) {
        let (ga, gb): (GrayImage, GrayImage) = (a.to_gray(), b.to_gray());
        let s = ssim(&ga, &gb).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert_eq!(ssim(&ga, &ga).unwrap(), 1.0);
        if ga.data != gb.data {
            prop_assert!(s < 1.0 - 1e-12);
        }
    }

    #[test]
    fn delta_accuracies_are_monotone(
        pairs in prop::collection::vec((0.1f64..10.0, 0.1f64..10.0), 1..100),
    ) {
        let (p, r): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let m = depth_metrics(&p, &r, &vec![true; p.len()], p.len()).unwrap();
        prop_assert!(m.delta1 <= m.delta2 && m.delta2 <= m.delta3);
        prop_assert!(m.abs_rel >= 0.0 && m.sq_rel >= 0.0 && m.rmse >= 0.0 && m.rmse_log >= 0.0);
    }
}

/// A pose-row gradient reaches a loss on deformed canonical queries of
/// backprojected points.
#[test]
fn pose_gradient_flows_through_deformed_queries() {
    use based::geometry::{poses_on_tape, transform_on_tape, PoseParams};
    let b = small_bundle(9);
    let mut tape = Tape::new();
    let layer = tape.param(PoseParams::identity(2).values);
    let pose = poses_on_tape(&mut tape, layer, &[1, 1]).unwrap();
    let cam = tape.constant(Tensor::new(vec![2, 3], vec![0.1, 0.2, 5.0, -0.3, 0.1, 4.0]).unwrap());
    let x = transform_on_tape(&mut tape, &pose, cam).unwrap();
    let vars = b.register(&mut tape);
    let dirs = tape.constant(Tensor::new(vec![2, 3], vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap());
    let (_, sigma, _) = b.query_deformed_on_tape(&mut tape, &vars, x, &[0.4, 0.4], dirs).unwrap();
    let root = tape.sum(sigma);
    let g = tape.backward(root).unwrap().get_or_zeros(layer, 18);
    assert!(g[9..].iter().any(|v| *v != 0.0));
    assert!(g[..9].iter().all(|v| *v == 0.0));
}

fn smooth_colour(samples: &RaySamples) -> f64 {
    let dens: Vec<f64> = samples.t_vals.iter().map(|&t| 0.8 * (1.0 + (1.3 * t).sin())).collect();
    let w = compositing_weights(&samples.deltas, &dens);
    w.iter().zip(&samples.t_vals).map(|(w, &t)| w * (0.5 + 0.4 * (0.7 * t).cos())).sum()
}

fn linspace(near: f64, far: f64, m: usize) -> RaySamples {
    let t = (0..m).map(|i| near + (far - near) * i as f64 / (m - 1) as f64).collect();
    RaySamples::from_t_vals(t, near, far)
}

/// Rendered colour of a smooth field converges at first order in the
/// sample count with endpoint samples.
#[test]
fn colour_error_halves_when_samples_double() {
    let reference = smooth_colour(&RaySamples::midpoints(1.0, 6.0, 1 << 16));
    let mut last = (smooth_colour(&linspace(1.0, 6.0, 16)) - reference).abs();
    for m in [32, 64, 128, 256] {
        let e = (smooth_colour(&linspace(1.0, 6.0, m)) - reference).abs();
        let ratio = last / e;
        assert!((2.0 / 1.5..=2.0 * 1.5).contains(&ratio), "M={m}: error ratio {ratio}");
        last = e;
    }
}

/// Bin midpoints converge at least as fast.
#[test]
fn midpoint_colour_error_shrinks_at_least_linearly() {
    let reference = smooth_colour(&RaySamples::midpoints(1.0, 6.0, 1 << 16));
    let mut last = (smooth_colour(&RaySamples::midpoints(1.0, 6.0, 16)) - reference).abs();
    for m in [32, 64, 128, 256] {
        let e = (smooth_colour(&RaySamples::midpoints(1.0, 6.0, m)) - reference).abs();
        assert!(last / e >= 2.0 / 1.5, "M={m}: error ratio {}", last / e);
        last = e;
    }
}

#[test]
fn identity_pose_backprojects_along_the_optical_axis() {
    let k = intrinsics();
    let x = backproject(&k, &SE3Pose::identity(), (k.cx, k.cy), 3.0, 0).unwrap();
    assert_eq!(x, Vector3::new(0.0, 0.0, 3.0));
}
