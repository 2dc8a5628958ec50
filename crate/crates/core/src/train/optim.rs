//! AdamW and SGD with momentum over named parameters, learning-rate
//! schedule, layer-wise decay groups, freezing and EMA.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::vit::{Params, ENCODER, HEAD};

/// `base_lr · batch_size / 256`.
pub fn effective_lr(base_lr: f64, batch_size: usize) -> f64 {
    base_lr * batch_size as f64 / 256.0
}

/// Linear warmup from 0 to `peak` over `warmup_steps`, then half-cosine
/// decay to 0 at `total_steps`.
pub fn lr_at(step: usize, warmup_steps: usize, total_steps: usize, peak: f64) -> Result<f64> {
    if warmup_steps > total_steps {
        return Err(Error::invalid(format!(
            "warmup of {warmup_steps} steps exceeds the {total_steps}-step schedule"
        )));
    }
    let step = step.min(total_steps);
    if step < warmup_steps {
        return Ok(peak * step as f64 / warmup_steps as f64);
    }
    let span = total_steps - warmup_steps;
    if span == 0 {
        return Ok(peak);
    }
    let progress = (step - warmup_steps) as f64 / span as f64;
    Ok(peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// One bias-corrected AdamW update with decoupled weight decay; `t` is the
/// 1-based step count.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<T: Real>(
    theta: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u32,
    lr: f64,
    weight_decay: f64,
    betas: (f64, f64),
    eps: f64,
) {
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    let shrink = T::of(1.0 - lr * weight_decay);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = T::of(b1) * m[i] + T::of(1.0 - b1) * g;
        v[i] = T::of(b2) * v[i] + T::of(1.0 - b2) * g * g;
        let m_hat = m[i].f64() / c1;
        let v_hat = v[i].f64() / c2;
        theta[i] = theta[i] * shrink - T::of(lr * m_hat / (v_hat.sqrt() + eps));
    }
}

/// SGD with heavy-ball momentum: `buf ← μ·buf + g + wd·θ; θ ← θ − lr·buf`.
pub fn sgd_update<T: Real>(theta: &mut [T], grad: &[T], buf: &mut [T], lr: f64, momentum: f64, weight_decay: f64) {
    for i in 0..theta.len() {
        let g = grad[i] + T::of(weight_decay) * theta[i];
        buf[i] = T::of(momentum) * buf[i] + g;
        theta[i] -= T::of(lr) * buf[i];
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    AdamW { betas: (f64, f64), eps: f64 },
    SgdMomentum { momentum: f64 },
}

/// Trainable parameters sharing a learning-rate multiplier and decay flag.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub names: Vec<String>,
    pub lr_scale: f64,
    pub weight_decay: bool,
}

/// Biases, norm parameters and tokens (everything of rank ≤ 1) are exempt
/// from weight decay.
pub fn decays<T: Real>(value: &Tensor<T>) -> bool {
    value.rank() >= 2
}

/// Layer index for layer-wise decay: 0 for embeddings and tokens, `i + 1`
/// for encoder block `i`, `depth + 1` for everything after the blocks.
pub fn layer_id(name: &str, depth: usize) -> usize {
    let Some(rest) = name.strip_prefix(&format!("{ENCODER}.")) else {
        return depth + 1;
    };
    if let Some(block) = rest.strip_prefix("blocks.") {
        let i: usize = block.split('.').next().and_then(|s| s.parse().ok()).unwrap_or(depth);
        return i + 1;
    }
    if rest.starts_with("norm.") {
        depth + 1
    } else {
        0
    }
}

/// Multiplier `λ^(depth + 1 − layer_id)`.
pub fn layer_scale(name: &str, depth: usize, decay: f64) -> f64 {
    decay.powi((depth + 1 - layer_id(name, depth).min(depth + 1)) as i32)
}

/// Groups the trainable parameters by layer-decay multiplier and decay flag.
pub fn layerwise_groups<T: Real>(
    params: &Params<T>,
    trainable: impl Fn(&str) -> bool,
    depth: usize,
    decay: f64,
) -> Vec<ParamGroup> {
    let mut groups: Vec<ParamGroup> = Vec::new();
    for (name, value) in params.iter().filter(|(n, _)| trainable(n)) {
        let scale = layer_scale(name, depth, decay);
        let wd = decays(value);
        match groups.iter_mut().find(|g| g.lr_scale == scale && g.weight_decay == wd) {
            Some(g) => g.names.push(name.to_string()),
            None => groups.push(ParamGroup {
                names: vec![name.to_string()],
                lr_scale: scale,
                weight_decay: wd,
            }),
        }
    }
    groups
}

/// Which parameters a classifier protocol updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Freeze {
    /// Everything trains.
    None,
    /// Last `k` encoder blocks, the final norm and the head; `k = 0` trains
    /// the head alone.
    LastBlocks(usize),
    /// Only the MLP sub-block of the last encoder block (with its norm), the
    /// final norm and the head.
    LastMlp,
}

impl Freeze {
    pub fn trainable(&self, name: &str, depth: usize) -> bool {
        if name.starts_with(&format!("{HEAD}.")) {
            return true;
        }
        match *self {
            Freeze::None => true,
            Freeze::LastBlocks(0) => false,
            Freeze::LastBlocks(k) => {
                let id = layer_id(name, depth);
                id > depth - k.min(depth) && name.starts_with(ENCODER)
            }
            Freeze::LastMlp => {
                let last = format!("{ENCODER}.blocks.{}.", depth.saturating_sub(1));
                let in_mlp = name
                    .strip_prefix(&last)
                    .is_some_and(|rest| rest.starts_with("mlp.") || rest.starts_with("norm2."));
                in_mlp || name.starts_with(&format!("{ENCODER}.norm."))
            }
        }
    }
}

/// Freezing for partial fine-tuning of the last `k` blocks.
pub fn freeze_prefix(depth: usize, k: usize) -> Result<Freeze> {
    if k > depth {
        return Err(Error::invalid(format!("cannot tune {k} blocks of a {depth}-block encoder")));
    }
    Ok(if k == depth { Freeze::None } else { Freeze::LastBlocks(k) })
}

/// `ema ← decay·ema + (1 − decay)·params`, matched by name.
pub fn ema_update<T: Real>(ema: &mut Params<T>, params: &Params<T>, decay: f64) -> Result<()> {
    for (name, e) in ema.iter_mut() {
        let p = params.require(name)?;
        if p.shape() != e.shape() {
            return Err(Error::shape("ema_update", e.shape(), p.shape()));
        }
        for (a, &b) in e.data_mut().iter_mut().zip(p.data()) {
            *a = T::of(decay * a.f64() + (1.0 - decay) * b.f64());
        }
    }
    Ok(())
}

/// Optimizer state and hyper-parameters for one training run.
#[derive(Debug, Clone)]
pub struct Optimizer<T: Real> {
    pub kind: OptimizerKind,
    pub weight_decay: f64,
    pub groups: Vec<ParamGroup>,
    step: u32,
    slots: HashMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind, weight_decay: f64, groups: Vec<ParamGroup>) -> Self {
        Self {
            kind,
            weight_decay,
            groups,
            step: 0,
            slots: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    /// Applies one update at learning rate `lr` (before group scaling).
    /// Parameters without a gradient entry are left untouched.
    pub fn step(&mut self, params: &mut Params<T>, grads: &HashMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        self.step += 1;
        for group in &self.groups {
            let glr = lr * group.lr_scale;
            let wd = if group.weight_decay { self.weight_decay } else { 0.0 };
            for name in &group.names {
                let Some(g) = grads.get(name) else { continue };
                let theta = params
                    .get_mut(name)
                    .ok_or_else(|| Error::invalid(format!("optimizer group names unknown parameter `{name}`")))?;
                if g.shape() != theta.shape() {
                    return Err(Error::shape("optimizer step", theta.shape(), g.shape()));
                }
                let (a, b) = self
                    .slots
                    .entry(name.clone())
                    .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
                match self.kind {
                    OptimizerKind::AdamW { betas, eps } => adamw_update(
                        theta.data_mut(),
                        g.data(),
                        a.data_mut(),
                        b.data_mut(),
                        self.step,
                        glr,
                        wd,
                        betas,
                        eps,
                    ),
                    OptimizerKind::SgdMomentum { momentum } => {
                        sgd_update(theta.data_mut(), g.data(), a.data_mut(), glr, momentum, wd)
                    }
                }
            }
        }
        Ok(())
    }
}
