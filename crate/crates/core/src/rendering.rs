//! Pixel selection, sampling along rays and alpha-compositing quadrature.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Floor applied to opacity when normalising expected depth.
pub const OPACITY_EPS: f64 = 1e-10;

/// Row-major binary raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn get(&self, u: usize, v: usize) -> bool {
        self.data[v * self.width + u]
    }
}

/// Per-pixel sampling distribution for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceMap {
    pub width: usize,
    pub height: usize,
    /// Normalised probabilities, row-major.
    pub weights: Vec<f64>,
    pub cdf: Vec<f64>,
}

/// Tool pixels get weight `rho`, all others weight 1.
pub fn build_importance_map(mask: &Mask, rho: f64) -> Result<ImportanceMap> {
    if mask.width == 0 || mask.height == 0 || mask.data.len() != mask.width * mask.height {
        return Err(Error::invalid(format!(
            "importance map needs a non-empty mask, got {}×{}",
            mask.width, mask.height
        )));
    }
    if !(rho > 1.0) {
        return Err(Error::invalid(format!("tool weight factor must exceed 1, got {rho}")));
    }
    let raw: Vec<f64> = mask.data.iter().map(|&m| if m { rho } else { 1.0 }).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let mut cdf = Vec::with_capacity(raw.len());
    let mut acc = 0.0;
    for w in &raw {
        acc += w;
        cdf.push(acc / total);
    }
    *cdf.last_mut().unwrap() = 1.0;
    Ok(ImportanceMap {
        width: mask.width,
        height: mask.height,
        weights,
        cdf,
    })
}

impl ImportanceMap {
    pub fn uniform(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            weights: vec![1.0 / n as f64; n],
            cdf: (1..=n).map(|i| if i == n { 1.0 } else { i as f64 / n as f64 }).collect(),
        }
    }

    /// Distribution from arbitrary non-negative weights.
    pub fn from_weights(width: usize, height: usize, raw: &[f64]) -> Result<Self> {
        let total: f64 = raw.iter().sum();
        if raw.len() != width * height || raw.iter().any(|w| *w < 0.0) || !(total > 0.0) {
            return Err(Error::invalid("importance weights must be non-negative with positive sum"));
        }
        let mut cdf = Vec::with_capacity(raw.len());
        let mut acc = 0.0;
        for w in raw {
            acc += w;
            cdf.push(acc / total);
        }
        *cdf.last_mut().unwrap() = 1.0;
        Ok(Self {
            width,
            height,
            weights: raw.iter().map(|w| w / total).collect(),
            cdf,
        })
    }

    /// Index of the pixel whose cdf interval contains `u ∈ [0, 1)`.
    pub fn invert(&self, u: f64) -> usize {
        self.cdf
            .partition_point(|&c| c <= u)
            .min(self.cdf.len() - 1)
    }
}

/// Draws `count` pixels `(column, row)` by inverse-transform sampling.
pub fn sample_pixels(map: &ImportanceMap, count: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    (0..count)
        .map(|_| {
            let i = map.invert(rng.random::<f64>());
            (i % map.width, i / map.width)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SamplingMode {
    Stratified,
    /// Truncated Gaussian around `z_ref` (ray distance) with std `scale`.
    DepthGuided { z_ref: f64, scale: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples {
    pub t_vals: Vec<f64>,
    pub deltas: Vec<f64>,
}

impl RaySamples {
    /// Builds spacings from strictly increasing distances; the last
    /// spacing is one nominal bin `(far − near) / M`.
    pub fn from_t_vals(t_vals: Vec<f64>, near: f64, far: f64) -> Self {
        let m = t_vals.len();
        let mut deltas: Vec<f64> = t_vals.windows(2).map(|w| w[1] - w[0]).collect();
        deltas.push((far - near) / m as f64);
        Self { t_vals, deltas }
    }

    /// Deterministic bin midpoints.
    pub fn midpoints(near: f64, far: f64, m: usize) -> Self {
        let step = (far - near) / m as f64;
        let t = (0..m).map(|i| near + (i as f64 + 0.5) * step).collect();
        Self::from_t_vals(t, near, far)
    }
}

pub fn sample_along_ray(
    near: f64,
    far: f64,
    m: usize,
    mode: SamplingMode,
    rng: &mut impl Rng,
) -> Result<RaySamples> {
    if !(near > 0.0 && far > near) || m < 2 {
        return Err(Error::invalid(format!(
            "invalid ray bounds near={near} far={far} samples={m}"
        )));
    }
    let step = (far - near) / m as f64;
    let mut t: Vec<f64> = match mode {
        SamplingMode::Stratified => (0..m)
            .map(|i| near + (i as f64 + rng.random::<f64>()) * step)
            .collect(),
        SamplingMode::DepthGuided { z_ref, scale } => {
            if !(z_ref > near && z_ref < far) || !(scale > 0.0) {
                return Err(Error::invalid(format!(
                    "depth guidance needs near < z_ref < far and scale > 0 (z_ref={z_ref}, scale={scale})"
                )));
            }
            let normal = Normal::new(z_ref, scale).map_err(|e| Error::invalid(e.to_string()))?;
            let (lo, hi) = (normal.cdf(near), normal.cdf(far));
            let mut t: Vec<f64> = (0..m)
                .map(|_| {
                    let u = lo + (hi - lo) * rng.random::<f64>();
                    normal.inverse_cdf(u).clamp(near, far)
                })
                .collect();
            t.sort_by(f64::total_cmp);
            t
        }
    };
    // Ties are possible only after clamping or in extreme tails.
    for i in 1..m {
        if t[i] <= t[i - 1] {
            t[i] = t[i - 1].next_up();
        }
    }
    if t[m - 1] > far {
        return Err(Error::invalid("could not place strictly increasing samples"));
    }
    Ok(RaySamples::from_t_vals(t, near, far))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOutput {
    pub color: [f64; 3],
    /// Expected termination distance along the ray.
    pub depth: f64,
    pub opacity: f64,
}

/// Compositing weights `T_i α_i`.
pub fn compositing_weights(deltas: &[f64], densities: &[f64]) -> Vec<f64> {
    let mut trans = 1.0;
    deltas
        .iter()
        .zip(densities)
        .map(|(d, s)| {
            let keep = (-s * d).exp();
            let w = trans * (1.0 - keep);
            trans *= keep;
            w
        })
        .collect()
}

pub fn volume_render(
    samples: &RaySamples,
    colors: &[[f64; 3]],
    densities: &[f64],
) -> Result<RenderOutput> {
    let m = samples.t_vals.len();
    if colors.len() != m || densities.len() != m {
        return Err(Error::ShapeMismatch {
            op: "volume_render",
            left: vec![m],
            right: vec![colors.len(), densities.len()],
        });
    }
    if densities.iter().any(|s| !(*s >= 0.0)) {
        return Err(Error::invalid("densities must be non-negative"));
    }
    let w = compositing_weights(&samples.deltas, densities);
    let mut color = [0.0; 3];
    let mut depth = 0.0;
    let mut opacity = 0.0;
    for i in 0..m {
        for c in 0..3 {
            color[c] += w[i] * colors[i][c];
        }
        depth += w[i] * samples.t_vals[i];
        opacity += w[i];
    }
    Ok(RenderOutput {
        color,
        depth: depth / opacity.max(OPACITY_EPS),
        opacity,
    })
}

/// How the per-ray depth is derived from the compositing result.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthMode {
    /// `Σ w_i t_i / max(opacity, ε)`.
    #[default]
    Expected,
    /// `1 / max(Σ w_i σ_i, ε)`, the reciprocal of the composited density.
    ReciprocalDensity,
}

/// Differentiable compositing of a ray batch.
#[derive(Clone, Copy, Debug)]
pub struct RenderVars {
    /// `[R, 3]`
    pub color: Var,
    /// `[R, 1]`
    pub depth: Var,
    /// `[R, 1]`
    pub opacity: Var,
    /// `[R, M]`
    pub weights: Var,
}

/// Composites `rgb [R·M, 3]` and `sigma [R·M, 1]` (ray-major) given
/// per-ray distances and spacings, both `[R, M]`.
pub fn render_on_tape(
    tape: &mut Tape,
    rgb: Var,
    sigma: Var,
    t_vals: &Tensor,
    deltas: &Tensor,
    depth_mode: DepthMode,
) -> Result<RenderVars> {
    let (r, m) = t_vals.dims2();
    if deltas.dims2() != (r, m) || tape.value(sigma).numel() != r * m {
        return Err(Error::ShapeMismatch {
            op: "render",
            left: t_vals.shape().to_vec(),
            right: tape.shape(sigma).to_vec(),
        });
    }
    let sigma = tape.reshape(sigma, vec![r, m])?;
    let dv = tape.constant(deltas.clone());
    let sd = tape.mul(sigma, dv)?;
    let keep = {
        let neg = tape.scale(sd, -1.0);
        tape.exp(neg)
    };
    let alpha = tape.affine(keep, -1.0, 1.0);
    let trans = tape.cumprod_exclusive(keep)?;
    let weights = tape.mul(trans, alpha)?;
    let opacity = tape.sum_cols(weights)?;
    let mut channels = Vec::with_capacity(3);
    for c in 0..3 {
        let ch = tape.col(rgb, c)?;
        let ch = tape.reshape(ch, vec![r, m])?;
        let wc = tape.mul(weights, ch)?;
        channels.push(tape.sum_cols(wc)?);
    }
    let color = tape.concat_cols(&channels)?;
    let depth = match depth_mode {
        DepthMode::Expected => {
            let tv = tape.constant(t_vals.clone());
            let wt = tape.mul(weights, tv)?;
            let num = tape.sum_cols(wt)?;
            let den = tape.max_scalar(opacity, OPACITY_EPS);
            let inv = tape.reciprocal(den);
            tape.mul(num, inv)?
        }
        DepthMode::ReciprocalDensity => {
            let ws = tape.mul(weights, sigma)?;
            let s = tape.sum_cols(ws)?;
            let den = tape.max_scalar(s, OPACITY_EPS);
            tape.reciprocal(den)
        }
    };
    Ok(RenderVars {
        color,
        depth,
        opacity,
        weights,
    })
}
