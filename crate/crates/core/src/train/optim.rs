//! AdamW, global-norm clipping and the one-cycle learning-rate schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub max_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to projection matrices only.
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            max_lr: 3.2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
            clip_norm: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub warmup_fraction: f64,
    /// Start rate is `max_lr / start_div`.
    pub start_div: f64,
    /// Final rate is `max_lr / final_div`.
    pub final_div: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            warmup_fraction: 0.3,
            start_div: 25.0,
            final_div: 75.0,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Config(format!("warmup_fraction {} outside (0, 1)", self.warmup_fraction)));
        }
        if !(self.start_div > 0.0 && self.final_div > 0.0) {
            return Err(Error::Config("schedule divisors must be positive".into()));
        }
        Ok(())
    }
}

/// Linear ramp from `max_lr/start_div` to `max_lr` over the warm-up steps, then
/// cosine annealing down to `max_lr/final_div` at the last step.
pub fn one_cycle_lr(step: usize, total_steps: usize, max_lr: f64, cfg: &ScheduleConfig) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::invalid(format!("step {step} outside schedule of {total_steps} steps")));
    }
    let start = max_lr / cfg.start_div;
    let end = max_lr / cfg.final_div;
    let warm = cfg.warmup_fraction * total_steps as f64;
    let s = step as f64;
    if s < warm {
        return Ok(start + (max_lr - start) * s / warm);
    }
    let span = (total_steps - 1) as f64 - warm;
    if span <= 0.0 {
        return Ok(max_lr);
    }
    let p = (s - warm) / span;
    Ok(end + (max_lr - end) * 0.5 * (1.0 + (PI * p).cos()))
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v = *v * s;
            }
        }
    }
    norm
}

/// Decoupled-weight-decay Adam with per-parameter moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub cfg: OptimizerConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

fn decays(name: &str) -> bool {
    name.ends_with(".w")
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: OptimizerConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        AdamW {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update at learning rate `lr`.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::invalid(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one, eps) = (T::one(), T::lit(c.eps));
        let step_size = T::lit(lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        for (i, g) in grads.iter().enumerate() {
            let decay = if decays(params.name(i)) { T::lit(1.0 - lr * c.weight_decay) } else { one };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = params.value_mut(i);
            if g.shape() != p.shape() {
                return Err(Error::shape(format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
            }
            let iter = p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data());
            for (((w, m), v), &g) in iter {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *w = *w * decay - step_size * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
