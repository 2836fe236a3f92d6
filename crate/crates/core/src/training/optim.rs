//! AdamW with bias-corrected moments and decoupled weight decay, plus the
//! warm-up / cosine learning-rate schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::alignment::ModelParams;
use crate::error::{Error, Result};
use crate::training::gradients::{layout, GradientSet, TensorSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LrSchedule {
    Constant,
    /// Linear warm-up to the base rate, then cosine decay towards zero.
    WarmupCosine {
        warmup_steps: u64,
        total_steps: u64,
    },
}

impl LrSchedule {
    /// Multiplier on the base rate for the update with 0-based index `step`.
    pub fn factor(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::WarmupCosine {
                warmup_steps,
                total_steps,
            } => {
                if step < warmup_steps {
                    (step + 1) as f64 / warmup_steps as f64
                } else {
                    let span = total_steps.saturating_sub(warmup_steps).max(1);
                    let progress = ((step - warmup_steps) as f64 / span as f64).min(1.0);
                    0.5 * (1.0 + (PI * progress).cos())
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub m: GradientSet,
    pub v: GradientSet,
    /// Number of updates applied so far.
    pub step: u64,
    pub config: AdamWConfig,
    pub schedule: LrSchedule,
}

impl OptimState {
    pub fn new(p: &ModelParams, config: AdamWConfig, schedule: LrSchedule) -> Self {
        Self {
            m: GradientSet::zeros_like(p),
            v: GradientSet::zeros_like(p),
            step: 0,
            config,
            schedule,
        }
    }

    /// Learning rate the next update will use.
    pub fn current_lr(&self) -> f64 {
        self.config.lr * self.schedule.factor(self.step)
    }
}

pub fn adamw_step(p: &mut ModelParams, g: &GradientSet, s: &mut OptimState) -> Result<()> {
    let shape = layout(p);
    if shape != layout(g) || shape != layout(&s.m) || shape != layout(&s.v) {
        return Err(Error::ParamShapeMismatch(
            "parameters, gradients and moments differ".into(),
        ));
    }
    let lr = s.current_lr();
    let AdamWConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
        ..
    } = s.config;
    let t = (s.step + 1) as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);

    let params = p.tensors_mut();
    let grads = g.tensors();
    let ms = s.m.tensors_mut();
    let vs = s.v.tensors_mut();
    for ((((_, w), (_, gr)), (_, m)), (_, v)) in params.into_iter().zip(grads).zip(ms).zip(vs) {
        for i in 0..w.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * gr[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * gr[i] * gr[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            w[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * w[i]);
        }
    }
    s.step += 1;
    Ok(())
}
