use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{CorrespondenceRecord, Dataset};
use crate::error::{Error, Result};
use crate::fields::{FieldBundle, FieldVars};
use crate::geometry::{poses_on_tape, transform_on_tape, PoseParams};

use super::config::{CorrespondenceTime, LossWeights};

/// Masked losses with no valid entry return zero and bump this counter.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LossCounters {
    pub empty_batches: usize,
    pub skipped_records: usize,
}

/// `Σ_valid ‖pred_i − truth_i‖² / denom` over rows of `[n, k]` tensors.
pub fn masked_squared_error(
    tape: &mut Tape,
    pred: Var,
    truth: &Tensor,
    valid: &[bool],
    denom: f64,
) -> Result<Var> {
    let (n, k) = tape.value(pred).dims2();
    if truth.dims2() != (n, k) || valid.len() != n {
        return Err(Error::ShapeMismatch {
            op: "masked_squared_error",
            left: tape.shape(pred).to_vec(),
            right: truth.shape().to_vec(),
        });
    }
    let rows: Vec<usize> = (0..n).filter(|&i| valid[i]).collect();
    if rows.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let (p, t) = if rows.len() == n {
        (pred, tape.constant(truth.clone()))
    } else {
        let mut sel = Vec::with_capacity(rows.len() * k);
        for &i in &rows {
            sel.extend_from_slice(&truth.data()[i * k..(i + 1) * k]);
        }
        let p = tape.gather_rows(pred, &rows)?;
        (p, tape.constant(Tensor::from_parts(vec![rows.len(), k], sel)))
    };
    let d = tape.sub(p, t)?;
    let sq = tape.square(d);
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / denom))
}

fn masked_mean(
    tape: &mut Tape,
    pred: Var,
    truth: &Tensor,
    valid: &[bool],
    counters: &mut LossCounters,
) -> Result<Var> {
    let n = valid.iter().filter(|&&v| v).count();
    if n == 0 {
        counters.empty_batches += 1;
    }
    masked_squared_error(tape, pred, truth, valid, n.max(1) as f64)
}

/// Mean over valid rows of the squared colour error `‖Ĉ − C‖²`.
pub fn photometric_loss(
    tape: &mut Tape,
    rendered: Var,
    truth: &Tensor,
    valid: &[bool],
    counters: &mut LossCounters,
) -> Result<Var> {
    masked_mean(tape, rendered, truth, valid, counters)
}

/// Mean over valid rows of `(D̂ − D)²`.
pub fn depth_loss(
    tape: &mut Tape,
    rendered: Var,
    reference: &Tensor,
    valid: &[bool],
    counters: &mut LossCounters,
) -> Result<Var> {
    masked_mean(tape, rendered, reference, valid, counters)
}

/// Correspondence records resolved against reference depth: camera-frame
/// points and the times at which each side is deformed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorrespondenceBatch {
    pub frames_a: Vec<usize>,
    pub frames_b: Vec<usize>,
    pub cam_a: Vec<f64>,
    pub cam_b: Vec<f64>,
    pub times_a: Vec<f64>,
    pub times_b: Vec<f64>,
}

impl CorrespondenceBatch {
    pub fn len(&self) -> usize {
        self.frames_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames_a.is_empty()
    }

    /// Records lacking reference depth at either pixel are skipped and
    /// counted.
    pub fn resolve(
        ds: &Dataset,
        records: &[CorrespondenceRecord],
        time: CorrespondenceTime,
        counters: &mut LossCounters,
    ) -> Self {
        let mut b = Self::default();
        let k = &ds.intrinsics;
        for r in records {
            let (fa, fb) = (&ds.frames[r.frame_a], &ds.frames[r.frame_b]);
            let (Some(za), Some(zb)) = (fa.depth_at(r.pixel_a.0, r.pixel_a.1), fb.depth_at(r.pixel_b.0, r.pixel_b.1))
            else {
                counters.skipped_records += 1;
                continue;
            };
            b.frames_a.push(r.frame_a);
            b.frames_b.push(r.frame_b);
            b.cam_a.extend((k.camera_direction(r.pixel_a.0, r.pixel_a.1) * za).iter());
            b.cam_b.extend((k.camera_direction(r.pixel_b.0, r.pixel_b.1) * zb).iter());
            b.times_a.push(fa.time);
            b.times_b.push(match time {
                CorrespondenceTime::FrameB => fb.time,
                CorrespondenceTime::FrameA => fa.time,
            });
        }
        b
    }
}

/// Unweighted correspondence term: backproject both sides through their
/// poses, deform into canonical space, and average the per-record Huber
/// penalty summed over coordinates.
pub fn correspondence_terms(
    tape: &mut Tape,
    batch: &CorrespondenceBatch,
    pose_layer: Var,
    bundle: &FieldBundle,
    vars: &FieldVars,
    huber_delta: f64,
) -> Result<Var> {
    let n = batch.len();
    if n == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let mut side = |frames: &[usize], cam: &[f64], times: &[f64]| -> Result<Var> {
        let pose = poses_on_tape(tape, pose_layer, frames)?;
        let c = tape.constant(Tensor::from_parts(vec![n, 3], cam.to_vec()));
        let x = transform_on_tape(tape, &pose, c)?;
        let d = bundle.deform_on_tape(tape, vars, x, times)?;
        tape.add(x, d)
    };
    let xa = side(&batch.frames_a, &batch.cam_a, &batch.times_a)?;
    let xb = side(&batch.frames_b, &batch.cam_b, &batch.times_b)?;
    let h = tape.huber(xa, xb, huber_delta)?;
    let s = tape.sum(h);
    Ok(tape.scale(s, 1.0 / n as f64))
}

/// `w_corr` times the mean Huber distance between the canonical positions
/// of both sides of every usable record. Returns the loss variable, the
/// trainable pose variable, and skip counts.
pub fn correspondence_loss(
    tape: &mut Tape,
    records: &[CorrespondenceRecord],
    pose_layer: Var,
    bundle: &FieldBundle,
    vars: &FieldVars,
    ds: &Dataset,
    weights: &LossWeights,
    counters: &mut LossCounters,
) -> Result<Var> {
    let batch = CorrespondenceBatch::resolve(ds, records, weights.corr_time, counters);
    let l = correspondence_terms(tape, &batch, pose_layer, bundle, vars, weights.huber_delta)?;
    Ok(tape.scale(l, weights.w_corr))
}

/// Value of [`correspondence_loss`] for fixed poses and fields.
pub fn correspondence_loss_value(
    records: &[CorrespondenceRecord],
    poses: &PoseParams,
    bundle: &FieldBundle,
    ds: &Dataset,
    weights: &LossWeights,
) -> Result<(f64, LossCounters)> {
    let mut tape = Tape::new();
    let vars = bundle.register_frozen(&mut tape);
    let p = tape.constant(poses.values.clone());
    let mut counters = LossCounters::default();
    let l = correspondence_loss(&mut tape, records, p, bundle, &vars, ds, weights, &mut counters)?;
    Ok((tape.value(l).item(), counters))
}
