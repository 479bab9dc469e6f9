use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named set of trainable tensors sharing a freeze flag, with Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub tensors: Vec<Tensor>,
    pub frozen: bool,
    pub(crate) first_moment: Vec<Vec<f64>>,
    pub(crate) second_moment: Vec<Vec<f64>>,
}

impl ParamGroup {
    pub fn new(name: impl Into<String>, tensors: Vec<Tensor>) -> Self {
        let first_moment = tensors.iter().map(|t| vec![0.0; t.numel()]).collect();
        let second_moment = tensors.iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            name: name.into(),
            tensors,
            frozen: false,
            first_moment,
            second_moment,
        }
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.first_moment, &self.second_moment)
    }

    /// Records every tensor on the tape as a trainable leaf.
    pub fn register(&self, tape: &mut Tape) -> GroupVars {
        GroupVars(
            self.tensors
                .iter()
                .map(|t| {
                    if self.frozen {
                        tape.constant(t.clone())
                    } else {
                        tape.param(t.clone())
                    }
                })
                .collect(),
        )
    }

    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| vec![0.0; t.numel()]).collect()
    }
}

/// Tape handles for a registered [`ParamGroup`], in tensor order.
#[derive(Clone, Debug)]
pub struct GroupVars(pub Vec<Var>);

impl GroupVars {
    /// Gradient buffers for each tensor; zeros where unreachable.
    pub fn collect(&self, tape: &Tape, grads: &Gradients) -> Vec<Vec<f64>> {
        self.0
            .iter()
            .map(|&v| grads.get_or_zeros(v, tape.value(v).numel()))
            .collect()
    }
}

/// Adds `src` into `dst` elementwise; both are per-tensor buffers of one group.
pub fn accumulate_grads(dst: &mut [Vec<f64>], src: &[Vec<f64>]) {
    for (d, s) in dst.iter_mut().zip(src) {
        d.iter_mut().zip(s).for_each(|(a, b)| *a += b);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of a single group. `step` counts from 1.
pub fn adam_step(
    group: &mut ParamGroup,
    grads: &[Vec<f64>],
    lr: f64,
    cfg: &AdamConfig,
    step: u64,
) -> Result<()> {
    if step == 0 {
        return Err(Error::invalid("adam step counter starts at 1"));
    }
    if grads.len() != group.tensors.len() {
        return Err(Error::invalid(format!(
            "group `{}` has {} tensors but {} gradients",
            group.name,
            group.tensors.len(),
            grads.len()
        )));
    }
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(group.name.clone()));
    }
    if group.frozen {
        return Ok(());
    }
    let bc1 = 1.0 - cfg.beta1.powf(step as f64);
    let bc2 = 1.0 - cfg.beta2.powf(step as f64);
    for (ti, tensor) in group.tensors.iter_mut().enumerate() {
        let m = &mut group.first_moment[ti];
        let v = &mut group.second_moment[ti];
        let g = &grads[ti];
        for (i, p) in tensor.data_mut().iter_mut().enumerate() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Updates every group, or none of them if any gradient is non-finite.
pub fn adam_step_all(
    groups: &mut [ParamGroup],
    grads: &[Vec<Vec<f64>>],
    lrs: &[f64],
    cfg: &AdamConfig,
    step: u64,
) -> Result<()> {
    for (group, g) in groups.iter().zip(grads) {
        if g.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient(group.name.clone()));
        }
    }
    for ((group, g), &lr) in groups.iter_mut().zip(grads).zip(lrs) {
        adam_step(group, g, lr, cfg, step)?;
    }
    Ok(())
}
