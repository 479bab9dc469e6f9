use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Checkpoint;
use crate::data::{export_renders, Dataset};
use crate::error::{Error, Result};
use crate::geometry::{pose_error, PoseError, SE3Pose};
use crate::training::{restore, TrainConfig, TrainState};

use super::metrics::{depth_metrics, median_scale, psnr, ssim_masked, DepthMetrics, ImageMetrics};
use super::views::{interpolate_pose, refine_pose, render_view, View};

pub const REPORT_FILE: &str = "report.txt";
pub const RENDER_DIR: &str = "renders";

/// Where a frame's evaluation pose came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoseSource {
    /// A training frame's own row of the pose layer.
    Learned,
    /// Interpolated between training poses, then refined photometrically.
    Refined,
}

impl PoseSource {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Learned => "learned",
            Self::Refined => "refined",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameMetrics {
    pub pose: PoseSource,
    pub image: ImageMetrics,
    pub depth: Option<DepthMetrics>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameReport {
    pub frame: usize,
    pub time: f64,
    pub outcome: std::result::Result<FrameMetrics, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub iteration: usize,
    pub median_scaling: bool,
    pub frames: Vec<FrameReport>,
    pub mean_image: Option<ImageMetrics>,
    pub mean_depth: Option<DepthMetrics>,
    /// Learned training poses against oracle poses.
    pub pose: Option<std::result::Result<PoseError, String>>,
}

fn kv(out: &mut String, key: &str, value: impl std::fmt::Display) {
    writeln!(out, "{key}={value}").expect("writing to a String");
}

fn depth_block(out: &mut String, d: &DepthMetrics) {
    for (k, v) in DepthMetrics::FIELDS.iter().zip(d.values()) {
        kv(out, k, v);
    }
}

impl EvalReport {
    /// `key=value` lines grouped into `[frame i]`, `[mean]` and `[pose]`
    /// blocks. LPIPS is not computed.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        kv(&mut out, "iteration", self.iteration);
        kv(&mut out, "median_scaling", self.median_scaling);
        kv(&mut out, "lpips", "not_computed");
        for f in &self.frames {
            writeln!(out, "\n[frame {}]", f.frame).unwrap();
            kv(&mut out, "time", f.time);
            match &f.outcome {
                Ok(m) => {
                    kv(&mut out, "pose", m.pose.as_str());
                    kv(&mut out, "psnr", m.image.psnr);
                    kv(&mut out, "ssim", m.image.ssim);
                    if let Some(d) = &m.depth {
                        depth_block(&mut out, d);
                    }
                }
                Err(e) => kv(&mut out, "error", e.replace('\n', " ")),
            }
        }
        out.push_str("\n[mean]\n");
        kv(&mut out, "frames", self.frames.iter().filter(|f| f.outcome.is_ok()).count());
        if let Some(m) = &self.mean_image {
            kv(&mut out, "psnr", m.psnr);
            kv(&mut out, "ssim", m.ssim);
        }
        if let Some(d) = &self.mean_depth {
            depth_block(&mut out, d);
        }
        if let Some(p) = &self.pose {
            out.push_str("\n[pose]\n");
            kv(&mut out, "frames", "train");
            match p {
                Ok(e) => {
                    kv(&mut out, "rotation_deg", e.rotation_deg);
                    kv(&mut out, "translation", e.translation);
                }
                Err(e) => kv(&mut out, "error", e),
            }
        }
        out
    }
}

/// A report plus the rendered views it scored.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: EvalReport,
    pub views: Vec<(usize, View)>,
}

impl Evaluation {
    /// Writes `report.txt` and `renders/frame_NNNN.{ppm,bdep}` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let renders = dir.join(RENDER_DIR);
        fs::create_dir_all(&renders).map_err(|e| Error::io(&renders, e))?;
        for (i, v) in &self.views {
            export_renders(&renders, &frame_stem(*i), &v.color, Some(&v.depth_map()))?;
        }
        let path = dir.join(REPORT_FILE);
        fs::write(&path, self.report.to_text()).map_err(|e| Error::io(&path, e))
    }
}

pub fn frame_stem(frame: usize) -> String {
    format!("frame_{frame:04}")
}

fn training_keys(ds: &Dataset, state: &TrainState) -> Result<Vec<(f64, SE3Pose)>> {
    let poses = state.pose_params();
    let mut keys = Vec::with_capacity(ds.split.train.len());
    for &i in &ds.split.train {
        keys.push((ds.frames[i].time, poses.pose(i)?));
    }
    keys.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(keys)
}

/// The pose [`evaluate`] renders `frame` at.
pub fn evaluation_pose(
    ds: &Dataset,
    state: &TrainState,
    cfg: &TrainConfig,
    seed: u64,
    frame: usize,
) -> Result<(SE3Pose, PoseSource)> {
    if frame >= ds.len() {
        return Err(Error::invalid(format!("frame {frame} outside a dataset of {} frames", ds.len())));
    }
    frame_pose(ds, state, cfg, seed, &training_keys(ds, state)?, frame)
}

/// Evaluation pose of every frame: training frames use their learned row,
/// the rest are interpolated in time and refined.
fn frame_pose(
    ds: &Dataset,
    state: &TrainState,
    cfg: &TrainConfig,
    seed: u64,
    keys: &[(f64, SE3Pose)],
    frame: usize,
) -> Result<(SE3Pose, PoseSource)> {
    if ds.split.train.contains(&frame) {
        return Ok((state.pose_params().pose(frame)?, PoseSource::Learned));
    }
    let init = interpolate_pose(keys, ds.frames[frame].time)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((1u64 << 32) + frame as u64);
    let pose = refine_pose(&state.fields, ds, frame, &init, cfg, &mut rng)?;
    Ok((pose, PoseSource::Refined))
}

fn score_frame(
    ds: &Dataset,
    state: &TrainState,
    cfg: &TrainConfig,
    seed: u64,
    keys: &[(f64, SE3Pose)],
    frame: usize,
) -> Result<(FrameMetrics, View)> {
    let (pose, source) = frame_pose(ds, state, cfg, seed, keys, frame)?;
    let f = &ds.frames[frame];
    let view = render_view(&state.fields, &ds.intrinsics, ds.near, ds.far, &pose, f.time, cfg)?;
    let (w, h) = (ds.intrinsics.width, ds.intrinsics.height);
    let valid: Vec<bool> = (0..w * h).map(|p| !f.is_tool(p % w, p / w)).collect();
    let image = ImageMetrics {
        psnr: psnr(&view.color, &f.image, Some(&valid))?,
        ssim: ssim_masked(&view.color.to_gray(), &f.image.to_gray(), Some(&valid))?,
    };
    let depth = match &f.ref_depth {
        Some(r) => {
            let reference: Vec<f64> = r.data.iter().map(|&v| v as f64).collect();
            let dv: Vec<bool> = valid.iter().zip(&reference).map(|(&ok, &z)| ok && z > 0.0).collect();
            let mut pred = view.depth.clone();
            if cfg.eval.median_scaling {
                let s = median_scale(&pred, &reference, &dv)
                    .ok_or_else(|| Error::invalid("median scaling needs positive predictions"))?;
                pred.iter_mut().for_each(|p| *p *= s);
            }
            Some(depth_metrics(&pred, &reference, &dv, w)?)
        }
        None => None,
    };
    Ok((FrameMetrics { pose: source, image, depth }, view))
}

/// Scores `frames` of `ds` against renders of a trained state. Per-frame
/// failures are recorded in the report.
pub fn evaluate(ds: &Dataset, state: &TrainState, cfg: &TrainConfig, seed: u64, frames: &[usize]) -> Result<Evaluation> {
    if let Some(&bad) = frames.iter().find(|&&f| f >= ds.len()) {
        return Err(Error::invalid(format!("frame {bad} outside a dataset of {} frames", ds.len())));
    }
    let poses = state.pose_params();
    let keys = training_keys(ds, state)?;
    let results: Vec<(FrameReport, Option<View>)> = frames
        .par_iter()
        .map(|&i| {
            let r = score_frame(ds, state, cfg, seed, &keys, i);
            let (outcome, view) = match r {
                Ok((m, v)) => (Ok(m), Some(v)),
                Err(e) => (Err(e.to_string()), None),
            };
            (
                FrameReport {
                    frame: i,
                    time: ds.frames[i].time,
                    outcome,
                },
                view,
            )
        })
        .collect();
    let mut reports = Vec::with_capacity(results.len());
    let mut views = Vec::new();
    for (r, v) in results {
        if let Some(v) = v {
            views.push((r.frame, v));
        }
        reports.push(r);
    }
    let ok: Vec<&FrameMetrics> = reports.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
    let mean_image = (!ok.is_empty()).then(|| ImageMetrics {
        psnr: ok.iter().map(|m| m.image.psnr).sum::<f64>() / ok.len() as f64,
        ssim: ok.iter().map(|m| m.image.ssim).sum::<f64>() / ok.len() as f64,
    });
    let with_depth: Vec<[f64; 7]> = ok.iter().filter_map(|m| m.depth.map(|d| d.values())).collect();
    let mean_depth = (!with_depth.is_empty()).then(|| {
        let mut acc = [0.0; 7];
        for v in &with_depth {
            for (a, x) in acc.iter_mut().zip(v) {
                *a += x;
            }
        }
        DepthMetrics::from_values(acc.map(|a| a / with_depth.len() as f64))
    });
    let pose = ds.gt_poses().map(|gt| {
        let est: Vec<SE3Pose> = ds.split.train.iter().map(|&i| poses.pose(i)).collect::<Result<_>>().map_err(|e| e.to_string())?;
        let reference: Vec<SE3Pose> = ds.split.train.iter().map(|&i| gt[i]).collect();
        pose_error(&est, &reference).map_err(|e| e.to_string())
    });
    Ok(Evaluation {
        report: EvalReport {
            iteration: state.iteration,
            median_scaling: cfg.eval.median_scaling,
            frames: reports,
            mean_image,
            mean_depth,
            pose,
        },
        views,
    })
}

/// Evaluates the held-out frames of `ds` with the run stored in `ckpt`.
pub fn evaluate_checkpoint(ds: &Dataset, ckpt: &Checkpoint) -> Result<Evaluation> {
    let (cfg, seed, state) = restore(ds, ckpt)?;
    evaluate(ds, &state, &cfg, seed, &ds.split.test)
}
