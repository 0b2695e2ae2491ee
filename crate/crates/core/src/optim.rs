//! Adam with decoupled weight decay, learning-rate schedule and gradient clipping.

use serde::{Deserialize, Serialize};

use crate::nn::{is_decayed, ParamSet, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    /// Micro-batches summed per optimizer update.
    pub accumulation: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-6,
            weight_decay: 0.01,
            peak_lr: 6e-4,
            warmup_steps: 24_000,
            total_steps: 224_000,
            accumulation: 16,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::InvalidConfig(format!(
                "warmup_steps ({}) exceeds total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.accumulation == 0 {
            return Err(Error::InvalidConfig("accumulation must be at least 1".into()));
        }
        if self.epsilon <= 0.0 || self.peak_lr < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("epsilon must be positive; peak_lr and weight_decay non-negative".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule { warmup_steps: self.warmup_steps, peak_lr: self.peak_lr, total_steps: self.total_steps }
    }

    /// Sequences consumed per optimizer update.
    pub fn effective_batch(&self, micro_batch: usize) -> usize {
        micro_batch * self.accumulation
    }
}

/// Linear warmup from 0 to `peak_lr`, then linear decay to 0 at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn lr_at_step(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Contract(format!("step {step} beyond total_steps {}", self.total_steps)));
        }
        if step < self.warmup_steps {
            return Ok(self.peak_lr * (step as f64 / self.warmup_steps as f64));
        }
        let decay_len = self.total_steps - self.warmup_steps;
        if decay_len == 0 {
            return Ok(self.peak_lr);
        }
        let remaining = (self.total_steps - step) as f64 / decay_len as f64;
        Ok(self.peak_lr * remaining)
    }
}

/// First and second moments, one tensor per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    /// Number of optimizer updates applied.
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new<P: ParamSet + ?Sized>(params: &P) -> Self {
        Self { step: 0, m: params.zero_grads(), v: params.zero_grads() }
    }

    pub fn round_to_storage(&mut self) {
        for t in self.m.iter_mut().chain(self.v.iter_mut()) {
            for x in t.data.iter_mut() {
                *x = *x as f32 as f64;
            }
        }
    }
}

/// One bias-corrected Adam update. Weight decay `θ ← θ − lr·wd·θ` is applied
/// before the moment step and only to tensors selected by [`is_decayed`].
/// A non-finite gradient aborts the update and names the tensor.
pub fn adam_step<P: ParamSet + ?Sized>(
    params: &mut P,
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<()> {
    let mut slots = params.tensors_mut();
    if slots.len() != grads.len() || state.m.len() != grads.len() || state.v.len() != grads.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {}/{} moments",
            slots.len(),
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    for ((name, p), g) in slots.iter().zip(grads) {
        if p.shape != g.shape {
            return Err(Error::Shape(format!("{name}: parameter {:?} vs gradient {:?}", p.shape, g.shape)));
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient { tensor: name.clone() });
        }
    }
    if lr < 0.0 {
        return Err(Error::Contract(format!("negative learning rate {lr}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (name, p)) in slots.iter_mut().enumerate() {
        let decay = if is_decayed(name) { lr * cfg.weight_decay } else { 0.0 };
        let (m, v, g) = (&mut state.m[i].data, &mut state.v[i].data, &grads[i].data);
        for j in 0..p.data.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            p.data[j] -= decay * p.data[j];
            p.data[j] -= lr * mhat / (vhat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().flat_map(|t| t.data.iter()).map(|x| x * x).sum::<f64>().sqrt()
}

/// Scale gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for t in grads.iter_mut() {
            t.data.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
