//! AdamW with decoupled weight decay and a warmup + cosine schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const ADAM_EPS: f64 = 1e-8;

/// Optimizer hyperparameters. Defaults are the full-scale schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: ADAM_EPS,
            warmup_steps: 500,
            total_steps: 10_000,
        }
    }
}

/// Linear warmup from 0 to `base_lr`, then a half-period cosine decay to 0
/// at `total`. Steps past `total` get 0.
pub fn lr_schedule(step: usize, base_lr: f64, warmup: usize, total: usize) -> f64 {
    if step > total {
        return 0.0;
    }
    if step < warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return base_lr;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    (base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())).max(0.0)
}

#[derive(Debug, Clone)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Per-parameter moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    step: usize,
    moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Learning rate the next update will use.
    pub fn current_lr(&self) -> f64 {
        let c = &self.config;
        lr_schedule(self.step + 1, c.learning_rate, c.warmup_steps, c.total_steps)
    }

    /// One AdamW update. Parameters without a gradient entry are left alone
    /// and their moments are not advanced. Returns the learning rate used.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Vec<f64>>,
    ) -> Result<f64> {
        for (name, g) in grads {
            let p = params.get(name)?;
            if p.numel() != g.len() {
                return Err(Error::Dimension {
                    op: "adamw_step",
                    lhs: p.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        let lr = self.current_lr();
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let m = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| Moments {
                    first: vec![0.0; g.len()],
                    second: vec![0.0; g.len()],
                });
            for (((w, &gi), m1), m2) in p
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.first.iter_mut())
                .zip(m.second.iter_mut())
            {
                *m1 = c.beta1 * *m1 + (1.0 - c.beta1) * gi;
                *m2 = c.beta2 * *m2 + (1.0 - c.beta2) * gi * gi;
                let mhat = *m1 / bc1;
                let vhat = *m2 / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *w);
            }
        }
        Ok(lr)
    }
}
