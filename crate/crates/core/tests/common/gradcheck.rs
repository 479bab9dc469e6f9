//! Central finite differences against reverse-mode gradients, for every tape
//! operation and for the two training pipelines.

use based::autodiff::{Tape, Tensor, Var};
use based::data::{SyntheticScene, SyntheticSceneSpec};
use based::fields::{FieldBundle, FieldConfig, MlpConfig};
use based::geometry::PoseParams;
use based::rendering::DepthMode;
use based::training::{
    correspondence_terms, photometric_loss, render_rays_on_tape, training_samples, CorrespondenceBatch,
    CorrespondenceTime, LossCounters, RayBatch, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const REL_TOL: f64 = 1e-4;
const STEP: f64 = 1e-6;

fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= REL_TOL * analytic.abs().max(numeric.abs()) + 1e-8
}

type Build = dyn Fn(&mut Tape, &[Var]) -> Var;

/// Value and input gradients of `Σ W ⊙ build(inputs)` for a fixed random `W`.
fn weighted(build: &Build, inputs: &[Tensor]) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let shape = tape.shape(out).to_vec();
    let n = tape.value(out).numel();
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
    let w = tape.constant(Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap());
    let prod = tape.mul(out, w).unwrap();
    let root = tape.sum(prod);
    let value = tape.value(root).item();
    let grads = tape.backward(root).unwrap();
    let g = vars.iter().zip(inputs).map(|(&v, t)| grads.get_or_zeros(v, t.numel())).collect();
    (value, g)
}

fn check_op(name: &str, build: &Build, inputs: Vec<Tensor>) {
    let (_, analytic) = weighted(build, &inputs);
    for (k, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[j] += STEP;
            let mut minus = inputs.clone();
            minus[k].data_mut()[j] -= STEP;
            let numeric = (weighted(build, &plus).0 - weighted(build, &minus).0) / (2.0 * STEP);
            assert!(
                close(analytic[k][j], numeric),
                "{name}: input {k} entry {j}: analytic {} numeric {numeric}",
                analytic[k][j]
            );
        }
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values at least `gap` away from zero, either sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.random_range(gap..2.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), v).unwrap()
}

const CONFIGS_PER_OP: usize = 4;

/// Checks every tape operation on `CONFIGS_PER_OP` random shapes each;
/// returns the number of configurations.
pub fn check_all_ops() -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    for _ in 0..CONFIGS_PER_OP {
        let n = rng.random_range(1..5);
        let k = rng.random_range(1..5);
        let j = rng.random_range(1..4);
        let s = [n, k];
        let cases: Vec<(&str, Box<Build>, Vec<Tensor>)> = vec![
            ("matmul", Box::new(|t, v| t.matmul(v[0], v[1]).unwrap()), vec![random(&mut rng, &[n, k], -1.0, 1.0), random(&mut rng, &[k, j], -1.0, 1.0)]),
            ("add", Box::new(|t, v| t.add(v[0], v[1]).unwrap()), vec![random(&mut rng, &s, -1.0, 1.0), random(&mut rng, &s, -1.0, 1.0)]),
            ("sub", Box::new(|t, v| t.sub(v[0], v[1]).unwrap()), vec![random(&mut rng, &s, -1.0, 1.0), random(&mut rng, &s, -1.0, 1.0)]),
            ("mul", Box::new(|t, v| t.mul(v[0], v[1]).unwrap()), vec![random(&mut rng, &s, -1.0, 1.0), random(&mut rng, &s, -1.0, 1.0)]),
            ("sin", Box::new(|t, v| t.sin(v[0])), vec![random(&mut rng, &s, -3.0, 3.0)]),
            ("cos", Box::new(|t, v| t.cos(v[0])), vec![random(&mut rng, &s, -3.0, 3.0)]),
            ("exp", Box::new(|t, v| t.exp(v[0])), vec![random(&mut rng, &s, -2.0, 2.0)]),
            ("relu", Box::new(|t, v| t.relu(v[0])), vec![away_from_zero(&mut rng, &s, 0.01)]),
            ("softplus", Box::new(|t, v| t.softplus(v[0])), vec![random(&mut rng, &s, -4.0, 4.0)]),
            ("sigmoid", Box::new(|t, v| t.sigmoid(v[0])), vec![random(&mut rng, &s, -4.0, 4.0)]),
            ("sqrt", Box::new(|t, v| t.sqrt(v[0])), vec![random(&mut rng, &s, 0.2, 3.0)]),
            ("square", Box::new(|t, v| t.square(v[0])), vec![random(&mut rng, &s, -2.0, 2.0)]),
            ("reciprocal", Box::new(|t, v| t.reciprocal(v[0])), vec![away_from_zero(&mut rng, &s, 0.3)]),
            ("affine", Box::new(|t, v| t.affine(v[0], -1.7, 0.4)), vec![random(&mut rng, &s, -1.0, 1.0)]),
            ("scale", Box::new(|t, v| t.scale(v[0], 2.5)), vec![random(&mut rng, &s, -1.0, 1.0)]),
            ("max_scalar", Box::new(|t, v| t.max_scalar(v[0], 0.1)), vec![away_from_zero(&mut rng, &s, 0.2)]),
            ("sum", Box::new(|t, v| t.sum(v[0])), vec![random(&mut rng, &s, -1.0, 1.0)]),
            ("mean", Box::new(|t, v| t.mean(v[0])), vec![random(&mut rng, &s, -1.0, 1.0)]),
            ("sum_cols", Box::new(|t, v| t.sum_cols(v[0]).unwrap()), vec![random(&mut rng, &s, -1.0, 1.0)]),
            ("broadcast_row", Box::new(move |t, v| t.broadcast(v[0], &[n, k]).unwrap()), vec![random(&mut rng, &[1, k], -1.0, 1.0)]),
            ("broadcast_col", Box::new(move |t, v| t.broadcast(v[0], &[n, k]).unwrap()), vec![random(&mut rng, &[n, 1], -1.0, 1.0)]),
            ("add_broadcast", Box::new(|t, v| t.add_broadcast(v[0], v[1]).unwrap()), vec![random(&mut rng, &s, -1.0, 1.0), random(&mut rng, &[1, k], -1.0, 1.0)]),
            ("mul_broadcast", Box::new(|t, v| t.mul_broadcast(v[0], v[1]).unwrap()), vec![random(&mut rng, &s, -1.0, 1.0), random(&mut rng, &[n, 1], -1.0, 1.0)]),
            ("gather_rows", Box::new(move |t, v| t.gather_rows(v[0], &[n - 1, 0, n - 1]).unwrap()), vec![random(&mut rng, &s, -1.0, 1.0)]),
            ("scatter_rows", Box::new(move |t, v| t.scatter_rows(v[0], &[0, n, 0], n + 1).unwrap()), vec![random(&mut rng, &[3, k], -1.0, 1.0)]),
            ("select_cols", Box::new(move |t, v| t.select_cols(v[0], &[k - 1, 0]).unwrap()), vec![random(&mut rng, &s, -1.0, 1.0)]),
            ("col", Box::new(move |t, v| t.col(v[0], k - 1).unwrap()), vec![random(&mut rng, &s, -1.0, 1.0)]),
            ("concat_cols", Box::new(|t, v| t.concat_cols(&[v[0], v[1]]).unwrap()), vec![random(&mut rng, &s, -1.0, 1.0), random(&mut rng, &[n, j], -1.0, 1.0)]),
            ("reshape", Box::new(move |t, v| t.reshape(v[0], vec![k, n]).unwrap()), vec![random(&mut rng, &s, -1.0, 1.0)]),
            ("huber", Box::new(|t, v| t.huber(v[0], v[1], 0.5).unwrap()), vec![random(&mut rng, &s, -1.0, 1.0), random(&mut rng, &s, -1.0, 1.0)]),
            ("cumprod_exclusive", Box::new(|t, v| t.cumprod_exclusive(v[0]).unwrap()), vec![random(&mut rng, &s, 0.1, 1.2)]),
            ("posenc", Box::new(|t, v| t.posenc(v[0], 3, true).unwrap()), vec![random(&mut rng, &s, -1.0, 1.0)]),
        ];
        for (name, build, inputs) in cases {
            check_op(name, build.as_ref(), inputs);
            checked += 1;
        }
    }
    checked
}

struct Pipeline {
    scene: SyntheticScene,
    cfg: TrainConfig,
}

fn pipeline(seed: u64) -> Pipeline {
    let mut spec = SyntheticSceneSpec::from_toml(super::DEFORMABLE).unwrap();
    spec.frame_count = 4;
    spec.width = 16;
    spec.height = 12;
    spec.focal = 14.0;
    spec.correspondences.per_pair = 6;
    let scene = SyntheticScene::build(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let mut cfg = TrainConfig::default();
    cfg.fields = FieldConfig {
        deform: MlpConfig { depth: 2, width: 8, skip_at: None },
        canonical: MlpConfig { depth: 3, width: 8, skip_at: Some(1) },
        ..FieldConfig::desk()
    };
    cfg.fields.encoding.l_xyz = 3;
    cfg.fields.encoding.l_dir = 2;
    cfg.render.samples = 8;
    cfg.render.guided_samples = 4;
    Pipeline { scene, cfg }
}

/// Pose layer near the oracle rows.
fn perturbed_poses(scene: &SyntheticScene, rng: &mut ChaCha8Rng) -> Tensor {
    let gt = scene.dataset.gt_poses().unwrap();
    let mut p = PoseParams::identity(gt.len());
    for (i, g) in gt.iter().enumerate() {
        let mut row = g.to_row();
        for v in &mut row {
            *v += rng.random_range(-0.05..0.05);
        }
        p.set_row(i, &row);
    }
    p.values
}

/// Jitters every parameter: zero biases would put ReLU pre-activations
/// exactly on the kink, and the zero deformation output is trivially flat.
fn random_bundle(cfg: &TrainConfig, scene: &SyntheticScene, rng: &mut ChaCha8Rng) -> FieldBundle {
    let mut b = FieldBundle::new(cfg.fields, scene.dataset.scene_box, rng).unwrap();
    for t in b.deform_params.tensors.iter_mut().chain(&mut b.canon_params.tensors) {
        for v in t.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    b
}

/// Loss value and gradients for the pose layer and both parameter groups.
type Grads = (f64, Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>);

fn fd_pipeline(
    poses: &Tensor,
    bundle: &FieldBundle,
    loss: &dyn Fn(&mut Tape, Var, &FieldBundle, &based::fields::FieldVars) -> Var,
    rng: &mut ChaCha8Rng,
    probes_per_group: usize,
) -> usize {
    let eval = |poses: &Tensor, bundle: &FieldBundle| -> Grads {
        let mut tape = Tape::new();
        let p = tape.param(poses.clone());
        let vars = bundle.register(&mut tape);
        let root = loss(&mut tape, p, bundle, &vars);
        let value = tape.value(root).item();
        let g = tape.backward(root).unwrap();
        (
            value,
            g.get_or_zeros(p, poses.numel()),
            vars.deform.collect(&tape, &g),
            vars.canon.collect(&tape, &g),
        )
    };
    let (_, gp, gd, gc) = eval(poses, bundle);
    let mut checked = 0;
    for j in 0..poses.numel() {
        let (mut a, mut b) = (poses.clone(), poses.clone());
        a.data_mut()[j] += STEP;
        b.data_mut()[j] -= STEP;
        let numeric = (eval(&a, bundle).0 - eval(&b, bundle).0) / (2.0 * STEP);
        assert!(close(gp[j], numeric), "pose entry {j}: analytic {} numeric {numeric}", gp[j]);
        checked += 1;
    }
    for (group, grads) in [(0usize, &gd), (1, &gc)] {
        for _ in 0..probes_per_group {
            let tensors = if group == 0 { &bundle.deform_params.tensors } else { &bundle.canon_params.tensors };
            let t = rng.random_range(0..tensors.len());
            let e = rng.random_range(0..tensors[t].numel());
            let nudge = |d: f64| {
                let mut b = bundle.clone();
                let ts = if group == 0 { &mut b.deform_params.tensors } else { &mut b.canon_params.tensors };
                ts[t].data_mut()[e] += d;
                eval(poses, &b).0
            };
            let numeric = (nudge(STEP) - nudge(-STEP)) / (2.0 * STEP);
            assert!(
                close(grads[t][e], numeric),
                "group {group} tensor {t} entry {e}: analytic {} numeric {numeric}",
                grads[t][e]
            );
            checked += 1;
        }
    }
    checked
}

/// Rendering into the photometric and depth losses, for both depth modes;
/// returns the number of configurations.
pub fn check_render_pipeline() -> usize {
    let mut configs = 0;
    for seed in 0..3 {
        let Pipeline { scene, cfg } = pipeline(seed);
        let ds = &scene.dataset;
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let poses = perturbed_poses(&scene, &mut rng);
        let bundle = random_bundle(&cfg, &scene, &mut rng);
        let mut rays = RayBatch::default();
        for _ in 0..6 {
            let f = rng.random_range(0..ds.len());
            let px = (rng.random_range(0..ds.intrinsics.width), rng.random_range(0..ds.intrinsics.height));
            let s = training_samples(&cfg, ds.near, ds.far, Some(5.0), &mut rng).unwrap();
            rays.push(ds, f, ds.frames[f].time, px, &s);
        }
        for mode in [DepthMode::Expected, DepthMode::ReciprocalDensity] {
            let colors = Tensor::new(vec![rays.len(), 3], rays.colors.clone()).unwrap();
            let depths = Tensor::new(vec![rays.len(), 1], rays.depths.clone()).unwrap();
            let loss = |tape: &mut Tape, p: Var, b: &FieldBundle, v: &based::fields::FieldVars| {
                let out = render_rays_on_tape(tape, p, b, v, &rays, mode).unwrap();
                let mut c = LossCounters::default();
                let lp = photometric_loss(tape, out.color, &colors, &rays.color_valid, &mut c).unwrap();
                let ld = based::training::depth_loss(tape, out.depth, &depths, &rays.depth_valid, &mut c).unwrap();
                let ld = tape.scale(ld, 0.01);
                tape.add(lp, ld).unwrap()
            };
            assert!(fd_pipeline(&poses, &bundle, &loss, &mut rng, 8) > 0);
            configs += 1;
        }
    }
    configs
}

/// Backprojection through the deformation into the correspondence loss;
/// returns the number of configurations.
pub fn check_correspondence_pipeline() -> usize {
    let mut configs = 0;
    for seed in 0..3 {
        let Pipeline { scene, cfg } = pipeline(seed);
        let ds = &scene.dataset;
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let poses = perturbed_poses(&scene, &mut rng);
        let bundle = random_bundle(&cfg, &scene, &mut rng);
        for time in [CorrespondenceTime::FrameB, CorrespondenceTime::FrameA] {
            let mut c = LossCounters::default();
            let batch = CorrespondenceBatch::resolve(ds, &ds.correspondences, time, &mut c);
            assert!(!batch.is_empty());
            let loss = |tape: &mut Tape, p: Var, b: &FieldBundle, v: &based::fields::FieldVars| {
                correspondence_terms(tape, &batch, p, b, v, 0.05).unwrap()
            };
            assert!(fd_pipeline(&poses, &bundle, &loss, &mut rng, 8) > 0);
            configs += 1;
        }
    }
    configs
}
