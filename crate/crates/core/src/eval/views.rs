use nalgebra::Rotation3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{accumulate_grads, adam_step, AdamConfig, ParamGroup, Tape, Tensor};
use crate::data::{Dataset, DepthMap, Image};
use crate::error::{Error, Result};
use crate::fields::FieldBundle;
use crate::geometry::{pose_to_se3, Intrinsics, SE3Pose};
use crate::rendering::RaySamples;
use crate::training::{masked_squared_error, render_rays_on_tape, training_samples, RayBatch, TrainConfig};

/// A rendered frame: colour, camera-frame depth and opacity per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub color: Image,
    pub depth: Vec<f64>,
    pub opacity: Vec<f64>,
}

impl View {
    pub fn depth_map(&self) -> DepthMap {
        DepthMap {
            width: self.color.width,
            height: self.color.height,
            data: self.depth.iter().map(|&d| d as f32).collect(),
        }
    }
}

/// Renders every pixel of a `width × height` camera at `pose` and `time`
/// with `cfg.render.eval_samples` bin midpoints per ray.
pub fn render_view(
    fields: &FieldBundle,
    intrinsics: &Intrinsics,
    near: f64,
    far: f64,
    pose: &SE3Pose,
    time: f64,
    cfg: &TrainConfig,
) -> Result<View> {
    let (w, h) = (intrinsics.width, intrinsics.height);
    let samples = RaySamples::midpoints(near, far, cfg.render.eval_samples);
    let row = Tensor::from_parts(vec![1, 9], pose.to_row().to_vec());
    let chunk = cfg.render.chunk_rays;
    let n = w * h;
    let starts: Vec<usize> = (0..n).step_by(chunk).collect();
    let parts: Vec<Result<(Vec<f64>, Vec<f64>, Vec<f64>)>> = starts
        .par_iter()
        .map(|&start| {
            let end = (start + chunk).min(n);
            let mut rays = RayBatch {
                m: samples.t_vals.len(),
                ..RayBatch::default()
            };
            for p in start..end {
                let c = intrinsics.camera_direction((p % w) as f64, (p / w) as f64);
                let norm = c.norm();
                rays.frames.push(0);
                rays.dirs.extend((c / norm).iter());
                rays.z_per_t.push(1.0 / norm);
                rays.times.push(time);
                rays.t_vals.extend(&samples.t_vals);
                rays.deltas.extend(&samples.deltas);
            }
            let mut tape = Tape::new();
            let layer = tape.constant(row.clone());
            let vars = fields.register_frozen(&mut tape);
            let out = render_rays_on_tape(&mut tape, layer, fields, &vars, &rays, cfg.render.depth_mode)?;
            Ok((
                tape.value(out.color).data().to_vec(),
                tape.value(out.depth).data().to_vec(),
                tape.value(out.opacity).data().to_vec(),
            ))
        })
        .collect();
    let mut view = View {
        color: Image::new(w, h),
        depth: Vec::with_capacity(n),
        opacity: Vec::with_capacity(n),
    };
    view.color.data.clear();
    for part in parts {
        let (c, d, o) = part?;
        view.color.data.extend(c);
        view.depth.extend(d);
        view.opacity.extend(o);
    }
    if view.color.data.iter().chain(&view.depth).any(|v| !v.is_finite()) {
        return Err(Error::NumericalAbort {
            iteration: 0,
            reason: "render produced non-finite values".into(),
        });
    }
    Ok(view)
}

/// Pose at `time` from time-sorted keys: rotations are slerped and
/// translations interpolated linearly; outside the keys the nearest is used.
pub fn interpolate_pose(keys: &[(f64, SE3Pose)], time: f64) -> Result<SE3Pose> {
    let (first, last) = match (keys.first(), keys.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::invalid("no poses to interpolate")),
    };
    if time <= first.0 {
        return Ok(first.1);
    }
    if time >= last.0 {
        return Ok(last.1);
    }
    let i = keys.partition_point(|(t, _)| *t <= time);
    let ((t0, a), (t1, b)) = (keys[i - 1], keys[i]);
    let s = (time - t0) / (t1 - t0);
    let ra = Rotation3::from_matrix_unchecked(a.rotation);
    let rb = Rotation3::from_matrix_unchecked(b.rotation);
    Ok(SE3Pose {
        rotation: ra.slerp(&rb, s).into_inner(),
        translation: a.translation * (1.0 - s) + b.translation * s,
    })
}

/// Photometric pose refinement of one frame against frozen fields. The
/// step size decays exponentially from `refine_lr` to 1% of it.
pub fn refine_pose(
    fields: &FieldBundle,
    ds: &Dataset,
    frame: usize,
    init: &SE3Pose,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SE3Pose> {
    let e = &cfg.eval;
    if e.refine_iters == 0 {
        return Ok(*init);
    }
    let f = &ds.frames[frame];
    let (w, h) = (ds.intrinsics.width, ds.intrinsics.height);
    let pixels: Vec<(usize, usize)> = (0..h)
        .flat_map(|v| (0..w).map(move |u| (u, v)))
        .filter(|&(u, v)| !f.is_tool(u, v))
        .collect();
    if pixels.is_empty() {
        return Ok(*init);
    }
    let mut group = ParamGroup::new("refine", vec![Tensor::from_parts(vec![1, 9], init.to_row().to_vec())]);
    let adam = AdamConfig::default();
    for it in 1..=e.refine_iters {
        let mut batch = RayBatch::default();
        for _ in 0..e.refine_rays {
            let px = pixels[rng.random_range(0..pixels.len())];
            let s = training_samples(cfg, ds.near, ds.far, None, rng)?;
            batch.push(ds, frame, f.time, px, &s);
        }
        batch.frames.iter_mut().for_each(|i| *i = 0);
        let mut grads = group.zero_grads();
        let chunk = cfg.render.chunk_rays;
        for start in (0..batch.len()).step_by(chunk) {
            let rays = batch.slice(start..(start + chunk).min(batch.len()));
            let mut tape = Tape::new();
            let pv = group.register(&mut tape);
            let fv = fields.register_frozen(&mut tape);
            let out = render_rays_on_tape(&mut tape, pv.0[0], fields, &fv, &rays, cfg.render.depth_mode)?;
            let truth = Tensor::from_parts(vec![rays.len(), 3], rays.colors.clone());
            let l = masked_squared_error(&mut tape, out.color, &truth, &rays.color_valid, batch.len() as f64)?;
            let g = tape.backward(l)?;
            accumulate_grads(&mut grads, &pv.collect(&tape, &g));
        }
        if grads.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NumericalAbort {
                iteration: it,
                reason: format!("non-finite gradient refining frame {frame}"),
            });
        }
        let lr = e.refine_lr * 0.01f64.powf((it - 1) as f64 / e.refine_iters as f64);
        adam_step(&mut group, &grads, lr, &adam, it as u64)?;
    }
    pose_to_se3(group.tensors[0].data(), frame)
}
