//! Positional encoding, the deformation network and the canonical radiance
//! network.
//!
//! The deformation network maps a point observed at time `t` to its offset
//! from the canonical (t = 0) configuration. The canonical network maps a
//! canonical point and a viewing direction to colour and density; density is
//! produced before the direction enters, so it cannot depend on it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{encode_scalar, GroupVars, ParamGroup, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFORM_GROUP: &str = "deform";
pub const CANONICAL_GROUP: &str = "canonical";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodingConfig {
    /// Frequencies for points and time.
    pub l_xyz: usize,
    /// Frequencies for viewing directions.
    pub l_dir: usize,
    pub include_input: bool,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            l_xyz: 10,
            l_dir: 4,
            include_input: true,
        }
    }
}

pub fn encoded_dim(d: usize, frequencies: usize, include_input: bool) -> usize {
    d * (2 * frequencies + usize::from(include_input))
}

/// Encoding of a single vector; see [`Tape::posenc`] for the layout.
pub fn positional_encode(p: &[f64], frequencies: usize, include_input: bool) -> Vec<f64> {
    let mut out = Vec::with_capacity(encoded_dim(p.len(), frequencies, include_input));
    for &x in p {
        encode_scalar(x, frequencies, include_input, &mut out);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    /// Number of hidden ReLU layers.
    pub depth: usize,
    pub width: usize,
    /// Hidden layer that receives the network input concatenated again.
    #[serde(default)]
    pub skip_at: Option<usize>,
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 || self.width == 0 {
            return Err(Error::invalid(format!("MLP needs depth ≥ 2 and width ≥ 1: {self:?}")));
        }
        if let Some(s) = self.skip_at {
            if s == 0 || s >= self.depth {
                return Err(Error::invalid(format!("skip_at must be in 1..depth: {self:?}")));
            }
        }
        Ok(())
    }

    fn layer_inputs(&self, input_dim: usize) -> Vec<usize> {
        (0..self.depth)
            .map(|i| match i {
                0 => input_dim,
                i if Some(i) == self.skip_at => self.width + input_dim,
                _ => self.width,
            })
            .collect()
    }
}

/// Maps world coordinates into `[-1, 1]³` before encoding.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl SceneBox {
    pub fn validate(&self) -> Result<()> {
        if (0..3).all(|i| self.max[i] > self.min[i]) {
            Ok(())
        } else {
            Err(Error::invalid(format!("empty scene box {self:?}")))
        }
    }

    pub fn center(&self) -> [f64; 3] {
        std::array::from_fn(|i| 0.5 * (self.min[i] + self.max[i]))
    }

    pub fn half_extent(&self) -> [f64; 3] {
        std::array::from_fn(|i| 0.5 * (self.max[i] - self.min[i]))
    }
}

impl Default for SceneBox {
    fn default() -> Self {
        Self {
            min: [-1.0; 3],
            max: [1.0; 3],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    pub encoding: EncodingConfig,
    pub deform: MlpConfig,
    pub canonical: MlpConfig,
}

impl FieldConfig {
    /// Small networks used by tests and the bundled synthetic scenes.
    pub fn desk() -> Self {
        Self {
            encoding: EncodingConfig::default(),
            deform: MlpConfig {
                depth: 4,
                width: 64,
                skip_at: None,
            },
            canonical: MlpConfig {
                depth: 4,
                width: 64,
                skip_at: Some(2),
            },
        }
    }

    /// Full-size networks: 8 × 256 with a skip connection at layer 4.
    pub fn full() -> Self {
        Self {
            encoding: EncodingConfig::default(),
            deform: MlpConfig {
                depth: 8,
                width: 256,
                skip_at: Some(4),
            },
            canonical: MlpConfig {
                depth: 8,
                width: 256,
                skip_at: Some(4),
            },
        }
    }
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Parameters of both networks plus the configuration needed to evaluate them.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldBundle {
    pub config: FieldConfig,
    pub scene_box: SceneBox,
    pub deform_params: ParamGroup,
    pub canon_params: ParamGroup,
}

/// Tape handles of both networks for one forward pass.
#[derive(Clone, Debug)]
pub struct FieldVars {
    pub deform: GroupVars,
    pub canon: GroupVars,
}

fn init_linear(rng: &mut impl Rng, fan_in: usize, fan_out: usize, zero: bool) -> [Tensor; 2] {
    let bound = (6.0 / fan_in as f64).sqrt();
    let w = (0..fan_in * fan_out)
        .map(|_| if zero { 0.0 } else { rng.random_range(-bound..bound) })
        .collect();
    [
        Tensor::from_parts(vec![fan_in, fan_out], w),
        Tensor::zeros(vec![1, fan_out]),
    ]
}

impl FieldBundle {
    pub fn new(config: FieldConfig, scene_box: SceneBox, rng: &mut impl Rng) -> Result<Self> {
        config.deform.validate()?;
        config.canonical.validate()?;
        scene_box.validate()?;
        let enc = config.encoding;
        let mut deform = Vec::new();
        let d_in = encoded_dim(3, enc.l_xyz, enc.include_input)
            + encoded_dim(1, enc.l_xyz, enc.include_input);
        for fan_in in config.deform.layer_inputs(d_in) {
            deform.extend(init_linear(rng, fan_in, config.deform.width, false));
        }
        // Zero output layer: training starts from the undeformed state.
        deform.extend(init_linear(rng, config.deform.width, 3, true));

        let c = config.canonical;
        let c_in = encoded_dim(3, enc.l_xyz, enc.include_input);
        let dir_dim = encoded_dim(3, enc.l_dir, enc.include_input);
        let mut canon = Vec::new();
        for fan_in in c.layer_inputs(c_in) {
            canon.extend(init_linear(rng, fan_in, c.width, false));
        }
        let half = (c.width / 2).max(1);
        canon.extend(init_linear(rng, c.width, 1, false));
        canon.extend(init_linear(rng, c.width, c.width, false));
        canon.extend(init_linear(rng, c.width + dir_dim, half, false));
        canon.extend(init_linear(rng, half, 3, false));
        Ok(Self {
            config,
            scene_box,
            deform_params: ParamGroup::new(DEFORM_GROUP, deform),
            canon_params: ParamGroup::new(CANONICAL_GROUP, canon),
        })
    }

    pub fn register(&self, tape: &mut Tape) -> FieldVars {
        FieldVars {
            deform: self.deform_params.register(tape),
            canon: self.canon_params.register(tape),
        }
    }

    fn normalized(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let c = self.scene_box.center();
        let h = self.scene_box.half_extent();
        let shift = tape.constant(Tensor::from_parts(vec![1, 3], c.iter().map(|v| -v).collect()));
        let inv = tape.constant(Tensor::from_parts(vec![1, 3], h.iter().map(|v| 1.0 / v).collect()));
        let centered = tape.add_broadcast(x, shift)?;
        tape.mul_broadcast(centered, inv)
    }

    /// Offsets `[n, 3]` for points `x` observed at `times[i]`. Rows with time
    /// exactly zero are exact zeros and never reach the network.
    pub fn deform_on_tape(
        &self,
        tape: &mut Tape,
        vars: &FieldVars,
        x: Var,
        times: &[f64],
    ) -> Result<Var> {
        let n = tape.value(x).dims2().0;
        if times.len() != n {
            return Err(Error::ShapeMismatch {
                op: "deform",
                left: tape.shape(x).to_vec(),
                right: vec![times.len()],
            });
        }
        let live: Vec<usize> = (0..n).filter(|&i| times[i] != 0.0).collect();
        if live.is_empty() {
            return Ok(tape.constant(Tensor::zeros(vec![n, 3])));
        }
        let xs = if live.len() == n {
            x
        } else {
            tape.gather_rows(x, &live)?
        };
        let enc = self.config.encoding;
        let xn = self.normalized(tape, xs)?;
        let xe = tape.posenc(xn, enc.l_xyz, enc.include_input)?;
        let tdim = encoded_dim(1, enc.l_xyz, enc.include_input);
        let mut tenc = Vec::with_capacity(live.len() * tdim);
        for &i in &live {
            encode_scalar(times[i], enc.l_xyz, enc.include_input, &mut tenc);
        }
        let te = tape.constant(Tensor::from_parts(vec![live.len(), tdim], tenc));
        let input = tape.concat_cols(&[xe, te])?;
        let p = &vars.deform.0;
        let h = mlp_trunk(tape, &self.config.deform, input, p)?;
        let k = 2 * self.config.deform.depth;
        let out = linear(tape, h, p[k], p[k + 1])?;
        if live.len() == n {
            Ok(out)
        } else {
            tape.scatter_rows(out, &live, n)
        }
    }

    /// Colour `[n, 3]` in (0, 1) and density `[n, 1]` ≥ 0.
    pub fn canonical_on_tape(
        &self,
        tape: &mut Tape,
        vars: &FieldVars,
        x0: Var,
        dirs: Var,
    ) -> Result<(Var, Var)> {
        let enc = self.config.encoding;
        let cfg = &self.config.canonical;
        let p = &vars.canon.0;
        let xn = self.normalized(tape, x0)?;
        let xe = tape.posenc(xn, enc.l_xyz, enc.include_input)?;
        let h = mlp_trunk(tape, cfg, xe, p)?;
        let k = 2 * cfg.depth;
        let raw_sigma = linear(tape, h, p[k], p[k + 1])?;
        let sigma = tape.softplus(raw_sigma);
        let feat = linear(tape, h, p[k + 2], p[k + 3])?;
        let de = tape.posenc(dirs, enc.l_dir, enc.include_input)?;
        let joined = tape.concat_cols(&[feat, de])?;
        let hc = linear(tape, joined, p[k + 4], p[k + 5])?;
        let hc = tape.relu(hc);
        let raw_rgb = linear(tape, hc, p[k + 6], p[k + 7])?;
        let rgb = tape.sigmoid(raw_rgb);
        Ok((rgb, sigma))
    }

    /// Deforms `x_t` into canonical space and queries the canonical field.
    /// Returns `(rgb, sigma, x0)`.
    pub fn query_deformed_on_tape(
        &self,
        tape: &mut Tape,
        vars: &FieldVars,
        x_t: Var,
        times: &[f64],
        dirs: Var,
    ) -> Result<(Var, Var, Var)> {
        let delta = self.deform_on_tape(tape, vars, x_t, times)?;
        let x0 = tape.add(x_t, delta)?;
        let (rgb, sigma) = self.canonical_on_tape(tape, vars, x0, dirs)?;
        Ok((rgb, sigma, x0))
    }

    pub fn deform(&self, x: [f64; 3], t: f64) -> Result<[f64; 3]> {
        check_point(&x, t)?;
        if t == 0.0 {
            return Ok([0.0; 3]);
        }
        let mut tape = Tape::new();
        let vars = self.register_frozen(&mut tape);
        let xv = tape.constant(Tensor::from_parts(vec![1, 3], x.to_vec()));
        let d = self.deform_on_tape(&mut tape, &vars, xv, &[t])?;
        Ok(to3(tape.value(d).data()))
    }

    pub fn canonical_query(&self, x0: [f64; 3], d: [f64; 3]) -> Result<([f64; 3], f64)> {
        check_point(&x0, 0.0)?;
        let mut tape = Tape::new();
        let vars = self.register_frozen(&mut tape);
        let xv = tape.constant(Tensor::from_parts(vec![1, 3], x0.to_vec()));
        let dv = tape.constant(Tensor::from_parts(vec![1, 3], d.to_vec()));
        let (rgb, sigma) = self.canonical_on_tape(&mut tape, &vars, xv, dv)?;
        Ok((to3(tape.value(rgb).data()), tape.value(sigma).item()))
    }

    /// `(rgb, sigma, x0)` for a point observed at time `t`.
    pub fn query_deformed(
        &self,
        x_t: [f64; 3],
        t: f64,
        d: [f64; 3],
    ) -> Result<([f64; 3], f64, [f64; 3])> {
        let delta = self.deform(x_t, t)?;
        let x0 = std::array::from_fn(|i| x_t[i] + delta[i]);
        let (rgb, sigma) = self.canonical_query(x0, d)?;
        Ok((rgb, sigma, x0))
    }

    /// Registers both groups as constants (inference only).
    pub fn register_frozen(&self, tape: &mut Tape) -> FieldVars {
        let c = |g: &ParamGroup, tape: &mut Tape| {
            GroupVars(g.tensors.iter().map(|t| tape.constant(t.clone())).collect())
        };
        FieldVars {
            deform: c(&self.deform_params, tape),
            canon: c(&self.canon_params, tape),
        }
    }
}

fn check_point(x: &[f64; 3], t: f64) -> Result<()> {
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid(format!("non-finite point {x:?}")));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

fn to3(v: &[f64]) -> [f64; 3] {
    [v[0], v[1], v[2]]
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_broadcast(y, b)
}

fn mlp_trunk(tape: &mut Tape, cfg: &MlpConfig, input: Var, params: &[Var]) -> Result<Var> {
    let mut h = input;
    for i in 0..cfg.depth {
        if Some(i) == cfg.skip_at {
            h = tape.concat_cols(&[h, input])?;
        }
        let y = linear(tape, h, params[2 * i], params[2 * i + 1])?;
        h = tape.relu(y);
    }
    Ok(h)
}
