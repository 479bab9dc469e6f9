use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, accumulate_grads, AdamConfig, Checkpoint, ParamGroup, Tape, Tensor, Var};
use crate::data::{CorrespondenceRecord, Dataset};
use crate::error::{Error, Result};
use crate::fields::{FieldBundle, FieldVars, CANONICAL_GROUP, DEFORM_GROUP};
use crate::geometry::{poses_on_tape, rotate_on_tape, PoseParams};
use crate::rendering::{
    render_on_tape, sample_along_ray, sample_pixels, DepthMode, ImportanceMap, RaySamples, RenderVars,
    SamplingMode,
};

use super::config::TrainConfig;
use super::losses::{correspondence_terms, masked_squared_error, CorrespondenceBatch, LossCounters};

pub const POSE_GROUP: &str = "pose";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "log.tsv";

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub stage: u8,
    pub l_pho: f64,
    pub l_corr: f64,
    pub l_depth: f64,
    pub total: f64,
    pub wall_ms: u64,
}

impl LogRow {
    /// Tab-separated: iteration, stage, L_pho, L_corr, L_d, total, wall ms.
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.iteration, self.stage, self.l_pho, self.l_corr, self.l_depth, self.total, self.wall_ms
        )
    }

    pub fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 7 {
            return None;
        }
        Some(Self {
            iteration: f[0].parse().ok()?,
            stage: f[1].parse().ok()?,
            l_pho: f[2].parse().ok()?,
            l_corr: f[3].parse().ok()?,
            l_depth: f[4].parse().ok()?,
            total: f[5].parse().ok()?,
            wall_ms: f[6].parse().ok()?,
        })
    }

    /// PSNR implied by the photometric term, which sums three channels.
    pub fn psnr(&self) -> f64 {
        10.0 * (3.0 / self.l_pho).log10()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RunMeta {
    seed: String,
    frames: usize,
    config: TrainConfig,
}

/// Ray batch in a layout ready for the tape.
#[derive(Clone, Debug, Default)]
pub struct RayBatch {
    pub frames: Vec<usize>,
    /// Unit camera-frame directions, 3 per ray.
    pub dirs: Vec<f64>,
    /// Camera-frame depth per unit ray distance.
    pub z_per_t: Vec<f64>,
    pub times: Vec<f64>,
    /// Samples per ray.
    pub m: usize,
    pub t_vals: Vec<f64>,
    pub deltas: Vec<f64>,
    pub colors: Vec<f64>,
    pub color_valid: Vec<bool>,
    pub depths: Vec<f64>,
    pub depth_valid: Vec<bool>,
}

impl RayBatch {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Rays `range` as a separate batch.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        let m = self.m;
        Self {
            frames: self.frames[range.clone()].to_vec(),
            dirs: self.dirs[3 * range.start..3 * range.end].to_vec(),
            z_per_t: self.z_per_t[range.clone()].to_vec(),
            times: self.times[range.clone()].to_vec(),
            m,
            t_vals: self.t_vals[m * range.start..m * range.end].to_vec(),
            deltas: self.deltas[m * range.start..m * range.end].to_vec(),
            colors: self.colors[3 * range.start..3 * range.end].to_vec(),
            color_valid: self.color_valid[range.clone()].to_vec(),
            depths: self.depths[range.clone()].to_vec(),
            depth_valid: self.depth_valid[range].to_vec(),
        }
    }

    /// Appends one ray with its supervision.
    #[allow(clippy::too_many_arguments)]
    pub fn push(
        &mut self,
        ds: &Dataset,
        frame: usize,
        time: f64,
        (u, v): (usize, usize),
        samples: &RaySamples,
    ) {
        let k = &ds.intrinsics;
        let c = k.camera_direction(u as f64, v as f64);
        let n = c.norm();
        self.frames.push(frame);
        self.dirs.extend((c / n).iter());
        self.z_per_t.push(1.0 / n);
        self.times.push(time);
        self.m = samples.t_vals.len();
        self.t_vals.extend(&samples.t_vals);
        self.deltas.extend(&samples.deltas);
        let f = &ds.frames[frame];
        self.colors.extend(f.image.pixel(u, v));
        let tool = f.is_tool(u, v);
        self.color_valid.push(!tool);
        let d = if tool { None } else { f.ref_depth.as_ref().and_then(|d| d.get(u, v)) };
        self.depths.push(d.unwrap_or(0.0));
        self.depth_valid.push(d.is_some());
    }
}

/// Renders `rays` through the pose rows of `pose_layer`. Depth is converted
/// to camera-frame z.
pub fn render_rays_on_tape(
    tape: &mut Tape,
    pose_layer: Var,
    bundle: &FieldBundle,
    vars: &FieldVars,
    rays: &RayBatch,
    depth_mode: DepthMode,
) -> Result<RenderVars> {
    let (r, m) = (rays.len(), rays.m);
    let pose = poses_on_tape(tape, pose_layer, &rays.frames)?;
    let dc = tape.constant(Tensor::from_parts(vec![r, 3], rays.dirs.clone()));
    let d = rotate_on_tape(tape, &pose, dc)?;
    let idx: Vec<usize> = (0..r).flat_map(|i| std::iter::repeat_n(i, m)).collect();
    let ds = tape.gather_rows(d, &idx)?;
    let os = tape.gather_rows(pose.translation, &idx)?;
    let tcol = tape.constant(Tensor::from_parts(vec![r * m, 1], rays.t_vals.clone()));
    let offs = tape.mul_broadcast(ds, tcol)?;
    let pts = tape.add(os, offs)?;
    let times: Vec<f64> = idx.iter().map(|&i| rays.times[i]).collect();
    let (rgb, sigma, _) = bundle.query_deformed_on_tape(tape, vars, pts, &times, ds)?;
    let tv = Tensor::from_parts(vec![r, m], rays.t_vals.clone());
    let dv = Tensor::from_parts(vec![r, m], rays.deltas.clone());
    let mut out = render_on_tape(tape, rgb, sigma, &tv, &dv, depth_mode)?;
    let zf = tape.constant(Tensor::from_parts(vec![r, 1], rays.z_per_t.clone()));
    out.depth = tape.mul(out.depth, zf)?;
    Ok(out)
}

/// Samples for one training ray: stratified, plus a Gaussian cluster
/// around the reference depth when one is available.
pub fn training_samples(
    cfg: &TrainConfig,
    near: f64,
    far: f64,
    ref_t: Option<f64>,
    rng: &mut impl Rng,
) -> Result<RaySamples> {
    let r = &cfg.render;
    let guided = match ref_t {
        Some(t) if r.guided_samples > 0 && t > near && t < far => Some(t),
        _ => None,
    };
    let Some(t_ref) = guided else {
        return sample_along_ray(near, far, r.samples, SamplingMode::Stratified, rng);
    };
    let a = sample_along_ray(near, far, r.samples - r.guided_samples, SamplingMode::Stratified, rng)?;
    let scale = r.guide_scale * (far - near);
    let b = if r.guided_samples >= 2 {
        sample_along_ray(near, far, r.guided_samples, SamplingMode::DepthGuided { z_ref: t_ref, scale }, rng)?
            .t_vals
    } else {
        vec![t_ref]
    };
    let mut t: Vec<f64> = a.t_vals.into_iter().chain(b).collect();
    t.sort_by(f64::total_cmp);
    for i in 1..t.len() {
        if t[i] <= t[i - 1] {
            t[i] = t[i - 1].next_up();
        }
    }
    Ok(RaySamples::from_t_vals(t, near, far))
}

/// Per-frame pixel distribution: pixels hidden by tools in other training
/// frames get weight `rho`, the frame's own tool pixels weight 0.
fn importance_maps(ds: &Dataset, train: &[usize], rho: f64) -> Result<Vec<ImportanceMap>> {
    let (w, h) = (ds.intrinsics.width, ds.intrinsics.height);
    let mut hidden = vec![false; w * h];
    let mut any = false;
    for &f in train {
        if let Some(m) = &ds.frames[f].tool_mask {
            for (o, &b) in hidden.iter_mut().zip(&m.data) {
                *o |= b;
                any |= b;
            }
        }
    }
    let mut maps = Vec::with_capacity(ds.len());
    for f in &ds.frames {
        if !any && f.tool_mask.is_none() {
            maps.push(ImportanceMap::uniform(w, h));
            continue;
        }
        let own = f.tool_mask.as_ref();
        let raw: Vec<f64> = (0..w * h)
            .map(|i| match own.map(|m| m.data[i]) {
                Some(true) => 0.0,
                _ if hidden[i] => rho,
                _ => 1.0,
            })
            .collect();
        maps.push(match ImportanceMap::from_weights(w, h, &raw) {
            Ok(m) => m,
            Err(_) => ImportanceMap::uniform(w, h),
        });
    }
    Ok(maps)
}

/// Poses, fields and iteration count of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub poses: ParamGroup,
    pub fields: FieldBundle,
    pub iteration: usize,
}

impl TrainState {
    pub fn pose_params(&self) -> PoseParams {
        PoseParams::from_tensor(self.poses.tensors[0].clone()).expect("pose layer is [N, 9]")
    }
}

pub struct Trainer<'a> {
    ds: &'a Dataset,
    cfg: TrainConfig,
    seed: u64,
    pub state: TrainState,
    pub log: Vec<LogRow>,
    pub counters: LossCounters,
    maps: Vec<ImportanceMap>,
    corr: Vec<CorrespondenceRecord>,
    started: Instant,
    elapsed_before: u64,
}

/// Output of a finished run.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub poses: PoseParams,
    pub fields: FieldBundle,
    pub log: Vec<LogRow>,
    pub state: TrainState,
}

fn init_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    rng
}

fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    rng
}

impl<'a> Trainer<'a> {
    pub fn new(ds: &'a Dataset, cfg: TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        ds.validate()?;
        if ds.len() < 3 {
            return Err(Error::invalid(format!("training needs at least 3 frames, got {}", ds.len())));
        }
        let fields = FieldBundle::new(cfg.fields, ds.scene_box, &mut init_rng(seed))?;
        let poses = ParamGroup::new(POSE_GROUP, vec![PoseParams::identity(ds.len()).values]);
        Self::with_state(
            ds,
            cfg,
            seed,
            TrainState {
                poses,
                fields,
                iteration: 0,
            },
        )
    }

    fn with_state(ds: &'a Dataset, cfg: TrainConfig, seed: u64, state: TrainState) -> Result<Self> {
        if ds.split.train.is_empty() {
            return Err(Error::invalid("dataset has no training frames"));
        }
        let maps = importance_maps(ds, &ds.split.train, cfg.render.tool_rho)?;
        let mut is_train = vec![false; ds.len()];
        ds.split.train.iter().for_each(|&i| is_train[i] = true);
        let corr = ds
            .correspondences
            .iter()
            .filter(|r| r.confidence >= cfg.loss.confidence_threshold && is_train[r.frame_a] && is_train[r.frame_b])
            .copied()
            .collect();
        Ok(Self {
            ds,
            cfg,
            seed,
            state,
            log: Vec::new(),
            counters: LossCounters::default(),
            maps,
            corr,
            started: Instant::now(),
            elapsed_before: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let meta = RunMeta {
            seed: self.seed.to_string(),
            frames: self.ds.len(),
            config: self.cfg.clone(),
        };
        Checkpoint {
            groups: vec![
                self.state.poses.clone(),
                self.state.fields.deform_params.clone(),
                self.state.fields.canon_params.clone(),
            ],
            step: self.state.iteration as u64,
            metadata: toml::to_string(&meta).expect("metadata serialises"),
        }
    }

    /// Rebuilds a trainer from a checkpoint; `log` holds the rows written
    /// before it (later rows are dropped).
    pub fn from_checkpoint(ds: &'a Dataset, ckpt: &Checkpoint, log: Vec<LogRow>) -> Result<Self> {
        Self::from_checkpoint_with(ds, ckpt, log, &[])
    }

    /// Like [`Trainer::from_checkpoint`], with dotted overrides applied to
    /// the stored configuration (e.g. a longer `schedule.total_iters`).
    pub fn from_checkpoint_with(ds: &'a Dataset, ckpt: &Checkpoint, log: Vec<LogRow>, overrides: &[String]) -> Result<Self> {
        let (mut cfg, seed, state) = restore(ds, ckpt)?;
        if !overrides.is_empty() {
            cfg = TrainConfig::from_toml(&cfg.to_toml(), overrides)?;
        }
        let mut t = Self::with_state(ds, cfg, seed, state)?;
        let it = t.state.iteration;
        t.log = log.into_iter().filter(|r| r.iteration <= it).collect();
        t.elapsed_before = t.log.last().map_or(0, |r| r.wall_ms);
        Ok(t)
    }

    fn build_batch(&self, stage: u8, rng: &mut ChaCha8Rng) -> Result<RayBatch> {
        let train = &self.ds.split.train;
        let frames: Vec<(usize, usize)> = if stage == 1 {
            train.iter().map(|&f| (f, self.cfg.schedule.rays_per_image)).collect()
        } else {
            vec![(train[rng.random_range(0..train.len())], self.cfg.schedule.stage2_rays)]
        };
        let mut batch = RayBatch::default();
        let (near, far) = (self.ds.near, self.ds.far);
        for (f, n) in frames {
            let frame = &self.ds.frames[f];
            for (u, v) in sample_pixels(&self.maps[f], n, rng) {
                let n_dir = self.ds.intrinsics.camera_direction(u as f64, v as f64).norm();
                let ref_t = if frame.is_tool(u, v) {
                    None
                } else {
                    frame.ref_depth.as_ref().and_then(|d| d.get(u, v)).map(|z| z * n_dir)
                };
                let s = training_samples(&self.cfg, near, far, ref_t, rng)?;
                batch.push(self.ds, f, frame.time, (u, v), &s);
            }
        }
        Ok(batch)
    }

    /// Runs iteration `state.iteration + 1`.
    pub fn step(&mut self) -> Result<LogRow> {
        let it = self.state.iteration + 1;
        let sched = &self.cfg.schedule;
        let stage: u8 = if it <= sched.pose_joint_iters { 1 } else { 2 };
        if stage == 2 {
            self.state.poses.frozen = true;
        }
        let mut rng = iteration_rng(self.seed, it);
        let w = self.cfg.loss.clone();
        let use_pho = w.w_pho > 0.0;
        let use_depth = stage == 2 && w.w_depth > 0.0 && self.ds.has_depth();
        let use_corr = w.w_corr > 0.0 && !self.corr.is_empty();

        let mut g_pose = self.state.poses.zero_grads();
        let mut g_def = self.state.fields.deform_params.zero_grads();
        let mut g_can = self.state.fields.canon_params.zero_grads();
        let (mut l_pho, mut l_depth, mut l_corr) = (0.0, 0.0, 0.0);

        if use_pho || use_depth {
            let batch = self.build_batch(stage, &mut rng)?;
            let n_col = batch.color_valid.iter().filter(|&&v| v).count();
            let n_dep = batch.depth_valid.iter().filter(|&&v| v).count();
            if use_pho && n_col == 0 {
                self.counters.empty_batches += 1;
            }
            if use_depth && n_dep == 0 {
                self.counters.empty_batches += 1;
            }
            let chunk = self.cfg.render.chunk_rays;
            for start in (0..batch.len()).step_by(chunk) {
                let rays = batch.slice(start..(start + chunk).min(batch.len()));
                let mut tape = Tape::new();
                let pv = self.state.poses.register(&mut tape);
                let fv = self.state.fields.register(&mut tape);
                let out = render_rays_on_tape(&mut tape, pv.0[0], &self.state.fields, &fv, &rays, self.cfg.render.depth_mode)?;
                let mut root: Option<Var> = None;
                if use_pho {
                    let truth = Tensor::from_parts(vec![rays.len(), 3], rays.colors.clone());
                    let l = masked_squared_error(&mut tape, out.color, &truth, &rays.color_valid, n_col.max(1) as f64)?;
                    l_pho += tape.value(l).item();
                    root = Some(tape.scale(l, w.w_pho));
                }
                if use_depth {
                    let truth = Tensor::from_parts(vec![rays.len(), 1], rays.depths.clone());
                    let l = masked_squared_error(&mut tape, out.depth, &truth, &rays.depth_valid, n_dep.max(1) as f64)?;
                    l_depth += tape.value(l).item();
                    let s = tape.scale(l, w.w_depth);
                    root = Some(match root {
                        Some(r) => tape.add(r, s)?,
                        None => s,
                    });
                }
                let root = root.expect("at least one rendering loss is active");
                let grads = tape.backward(root)?;
                accumulate_grads(&mut g_pose, &pv.collect(&tape, &grads));
                accumulate_grads(&mut g_def, &fv.deform.collect(&tape, &grads));
                accumulate_grads(&mut g_can, &fv.canon.collect(&tape, &grads));
            }
        }

        if use_corr {
            let records: Vec<CorrespondenceRecord> = (0..sched.corr_batch)
                .map(|_| self.corr[rng.random_range(0..self.corr.len())])
                .collect();
            let batch = CorrespondenceBatch::resolve(self.ds, &records, w.corr_time, &mut self.counters);
            let mut tape = Tape::new();
            let pv = self.state.poses.register(&mut tape);
            let fv = self.state.fields.register(&mut tape);
            let l = correspondence_terms(&mut tape, &batch, pv.0[0], &self.state.fields, &fv, w.huber_delta)?;
            l_corr = tape.value(l).item();
            let root = tape.scale(l, w.w_corr);
            let grads = tape.backward(root)?;
            accumulate_grads(&mut g_pose, &pv.collect(&tape, &grads));
            accumulate_grads(&mut g_def, &fv.deform.collect(&tape, &grads));
            accumulate_grads(&mut g_can, &fv.canon.collect(&tape, &grads));
        }

        let total = w.w_pho * l_pho + w.w_corr * l_corr + if stage == 2 { w.w_depth * l_depth } else { 0.0 };
        if !total.is_finite() {
            return Err(Error::NumericalAbort {
                iteration: it,
                reason: format!("loss is {total}"),
            });
        }
        for (name, g) in [(POSE_GROUP, &g_pose), (DEFORM_GROUP, &g_def), (CANONICAL_GROUP, &g_can)] {
            if g.iter().flatten().any(|x| !x.is_finite()) {
                return Err(Error::NumericalAbort {
                    iteration: it,
                    reason: format!("non-finite gradient in `{name}`"),
                });
            }
        }
        let adam = AdamConfig::default();
        adam_step(&mut self.state.poses, &g_pose, sched.pose_lr, &adam, it as u64)?;
        adam_step(&mut self.state.fields.deform_params, &g_def, sched.lr, &adam, it as u64)?;
        adam_step(&mut self.state.fields.canon_params, &g_can, sched.lr, &adam, it as u64)?;
        if stage == 1 && it == sched.pose_joint_iters {
            self.state.poses.frozen = true;
        }
        self.state.iteration = it;
        let wall_ms = if self.cfg.log.wall_time {
            self.elapsed_before + self.started.elapsed().as_millis() as u64
        } else {
            0
        };
        let row = LogRow {
            iteration: it,
            stage,
            l_pho,
            l_corr,
            l_depth,
            total,
            wall_ms,
        };
        self.log.push(row);
        Ok(row)
    }

    /// Trains to `total_iters`. With an output directory, the log is
    /// appended as it grows and a checkpoint is written every
    /// `checkpoint_every` iterations and at the end. A numerical abort
    /// leaves the last written checkpoint in place.
    pub fn run(&mut self, out: Option<&Path>) -> Result<()> {
        self.run_until(self.cfg.schedule.total_iters, out)
    }

    pub fn run_until(&mut self, until: usize, out: Option<&Path>) -> Result<()> {
        let until = until.min(self.cfg.schedule.total_iters);
        let mut log_file = match out {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join(LOG_FILE);
                let mut text = String::new();
                for r in &self.log {
                    text += &r.to_line();
                    text.push('\n');
                }
                fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
                Some((
                    fs::OpenOptions::new().append(true).open(&path).map_err(|e| Error::io(&path, e))?,
                    path,
                ))
            }
            None => None,
        };
        let every = self.cfg.schedule.checkpoint_every;
        while self.state.iteration < until {
            let row = self.step()?;
            if let Some((f, path)) = log_file.as_mut() {
                writeln!(f, "{}", row.to_line()).map_err(|e| Error::io(path.clone(), e))?;
            }
            if let Some(dir) = out {
                if every > 0 && row.iteration % every == 0 {
                    self.save_checkpoint(dir)?;
                }
            }
        }
        if let Some(dir) = out {
            self.save_checkpoint(dir)?;
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(CHECKPOINT_FILE);
        let tmp = dir.join(format!("{CHECKPOINT_FILE}.tmp"));
        self.checkpoint().save(&tmp)?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn finish(self) -> TrainOutput {
        TrainOutput {
            poses: self.state.pose_params(),
            fields: self.state.fields.clone(),
            log: self.log,
            state: self.state,
        }
    }
}

/// Configuration, seed and state stored in a checkpoint.
pub fn restore(ds: &Dataset, ckpt: &Checkpoint) -> Result<(TrainConfig, u64, TrainState)> {
    let bad = |m: String| Error::invalid(format!("checkpoint: {m}"));
    let meta: RunMeta = toml::from_str(&ckpt.metadata).map_err(|e| bad(e.to_string()))?;
    let seed: u64 = meta.seed.parse().map_err(|_| bad("malformed seed".into()))?;
    if meta.frames != ds.len() {
        return Err(bad(format!("trained on {} frames, dataset has {}", meta.frames, ds.len())));
    }
    let group = |name: &str| ckpt.group(name).cloned().ok_or_else(|| bad(format!("missing group `{name}`")));
    let poses = group(POSE_GROUP)?;
    if poses.tensors.len() != 1 || poses.tensors[0].shape() != [ds.len(), 9] {
        return Err(bad("pose layer has the wrong shape".into()));
    }
    let template = FieldBundle::new(meta.config.fields, ds.scene_box, &mut init_rng(seed))?;
    let deform = group(DEFORM_GROUP)?;
    let canon = group(CANONICAL_GROUP)?;
    for (a, b) in [(&deform, &template.deform_params), (&canon, &template.canon_params)] {
        if a.tensors.len() != b.tensors.len() || a.tensors.iter().zip(&b.tensors).any(|(x, y)| x.shape() != y.shape()) {
            return Err(bad(format!("group `{}` does not match the configured networks", a.name)));
        }
    }
    let fields = FieldBundle {
        deform_params: deform,
        canon_params: canon,
        ..template
    };
    Ok((
        meta.config,
        seed,
        TrainState {
            poses,
            fields,
            iteration: ckpt.step as usize,
        },
    ))
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| LogRow::parse(l).ok_or_else(|| Error::format(path, format!("line {}: malformed log row", i + 1))))
        .collect()
}

/// Trains from scratch without touching the filesystem.
pub fn run_training(ds: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<TrainOutput> {
    let mut t = Trainer::new(ds, cfg.clone(), seed)?;
    t.run(None)?;
    Ok(t.finish())
}
