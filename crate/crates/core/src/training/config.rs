use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::FieldConfig;
use crate::rendering::DepthMode;

/// Which timestamp deforms the second point of a correspondence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrespondenceTime {
    /// The second point is observed in frame b, so it is deformed at `t_b`.
    #[default]
    FrameB,
    /// Deforms both points at `t_a`.
    FrameA,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_pho: f64,
    pub w_corr: f64,
    pub w_depth: f64,
    pub huber_delta: f64,
    pub confidence_threshold: f64,
    pub corr_time: CorrespondenceTime,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_pho: 1.0,
            w_corr: 0.1,
            w_depth: 0.5,
            huber_delta: 0.05,
            confidence_threshold: 0.5,
            corr_time: CorrespondenceTime::FrameB,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_pho >= 0.0 && self.w_corr >= 0.0 && self.w_depth >= 0.0) {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        if !(self.huber_delta > 0.0) {
            return Err(Error::invalid("huber_delta must be positive"));
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(Error::invalid("confidence_threshold must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    /// Iterations `1..=pose_joint_iters` update poses; the pose layer is
    /// frozen afterwards.
    pub pose_joint_iters: usize,
    pub total_iters: usize,
    /// Rays per training frame per stage-1 iteration.
    pub rays_per_image: usize,
    /// Rays from the single stage-2 frame per iteration.
    pub stage2_rays: usize,
    pub lr: f64,
    pub pose_lr: f64,
    /// Correspondence records drawn per iteration.
    pub corr_batch: usize,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            pose_joint_iters: 200,
            total_iters: 3200,
            rays_per_image: 64,
            stage2_rays: 64,
            lr: 5e-4,
            pose_lr: 5e-4,
            corr_batch: 512,
            checkpoint_every: 500,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.pose_joint_iters >= self.total_iters {
            return Err(Error::invalid(format!(
                "pose_joint_iters ({}) must be below total_iters ({})",
                self.pose_joint_iters, self.total_iters
            )));
        }
        if self.rays_per_image == 0 || self.stage2_rays == 0 {
            return Err(Error::invalid("ray budgets must be positive"));
        }
        if !(self.lr > 0.0 && self.pose_lr >= 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    /// Samples per training ray.
    pub samples: usize,
    /// Of those, how many follow the reference-depth Gaussian.
    pub guided_samples: usize,
    /// Gaussian scale as a fraction of `far − near`.
    pub guide_scale: f64,
    /// Importance of pixels hidden by tools in other frames.
    pub tool_rho: f64,
    pub depth_mode: DepthMode,
    /// Rays per tape.
    pub chunk_rays: usize,
    /// Samples per ray at evaluation (bin midpoints).
    pub eval_samples: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            samples: 32,
            guided_samples: 16,
            guide_scale: 0.01,
            tool_rho: 4.0,
            depth_mode: DepthMode::Expected,
            chunk_rays: 128,
            eval_samples: 64,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 2 || self.guided_samples > self.samples || self.eval_samples < 2 {
            return Err(Error::invalid("need at least 2 samples per ray and guided ≤ samples"));
        }
        if self.guided_samples > 0 && self.samples - self.guided_samples < 2 {
            return Err(Error::invalid("keep at least 2 stratified samples per ray"));
        }
        if !(self.guide_scale > 0.0) || !(self.tool_rho > 1.0) || self.chunk_rays == 0 {
            return Err(Error::invalid("guide_scale > 0, tool_rho > 1 and chunk_rays ≥ 1 required"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Pose refinement steps for each held-out frame against the frozen
    /// scene; 0 keeps the interpolated initial pose.
    pub refine_iters: usize,
    pub refine_rays: usize,
    pub refine_lr: f64,
    /// Scale predictions so their median matches the reference before
    /// scoring depth.
    pub median_scaling: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            refine_iters: 100,
            refine_rays: 256,
            refine_lr: 2e-3,
            median_scaling: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogConfig {
    /// Record elapsed milliseconds; `false` writes 0 so logs are
    /// reproducible byte for byte.
    pub wall_time: bool,
}

impl Default for LogConfig {
    fn default() -> Self {
        Self { wall_time: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub fields: FieldConfig,
    pub render: RenderConfig,
    pub schedule: Schedule,
    pub loss: LossWeights,
    pub eval: EvalConfig,
    pub log: LogConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            fields: FieldConfig::desk(),
            render: RenderConfig::default(),
            schedule: Schedule::default(),
            loss: LossWeights::default(),
            eval: EvalConfig::default(),
            log: LogConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.fields.deform.validate()?;
        self.fields.canonical.validate()?;
        self.render.validate()?;
        self.schedule.validate()?;
        self.loss.validate()
    }

    /// Parses TOML text, applies dotted `key=value` overrides, validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value = toml::from_str(text).map_err(|e| Error::invalid(e.to_string()))?;
        let defaults = toml::Value::try_from(Self::default()).expect("default configuration serialises");
        for o in overrides {
            apply_override(&mut value, o, Some(&defaults))?;
        }
        let cfg: Self = value.try_into().map_err(|e: toml::de::Error| Error::invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }
}

/// Sets `a.b.c = v` inside a TOML table. `v` is parsed as a TOML value and
/// falls back to a bare string. Tables missing from `root` are copied from
/// `defaults` when it has them, so one nested key can be overridden alone.
pub fn apply_override(root: &mut toml::Value, spec: &str, defaults: Option<&toml::Value>) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::invalid(format!("override `{spec}` is not key=value")))?;
    let (key, raw) = (key.trim(), raw.trim());
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::invalid(format!("bad override key `{key}`")));
    }
    let mut node = root;
    let mut fallback = defaults;
    for p in &parts[..parts.len() - 1] {
        fallback = fallback.and_then(|d| d.get(*p));
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::invalid(format!("override `{key}` descends into a non-table")))?;
        node = table
            .entry(p.to_string())
            .or_insert_with(|| fallback.filter(|d| d.is_table()).cloned().unwrap_or_else(|| toml::Value::Table(toml::Table::new())));
    }
    node.as_table_mut()
        .ok_or_else(|| Error::invalid(format!("override `{key}` descends into a non-table")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
