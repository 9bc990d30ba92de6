//! Adam with decoupled weight decay and the cosine one-cycle schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Param;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
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

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(params: &[Param<f32>], config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f32>> = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            config,
        }
    }

    /// One bias-corrected update. Decay `param ← param − lr·wd·param` is
    /// applied before the Adam delta. A non-finite gradient aborts the step
    /// before anything changes.
    pub fn step(&mut self, params: &mut [Param<f32>], grads: &[Vec<f32>], lr: f64, weight_decay: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::config("optimizer state does not match the parameter list"));
        }
        for (p, g) in params.iter().zip(grads) {
            if g.len() != p.value.len() {
                return Err(Error::config(format!("gradient for {} has the wrong length", p.name)));
            }
            if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite gradient in {} at element {bad}", p.name)));
            }
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let decay = (lr * weight_decay) as f32;
        let (b1, b2) = (beta1 as f32, beta2 as f32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] as f64 / c1;
                let v_hat = v[i] as f64 / c2;
                let x = &mut p.value[i];
                *x -= decay * *x;
                *x -= (lr * m_hat / (v_hat.sqrt() + eps)) as f32;
            }
        }
        Ok(())
    }
}

/// Cosine rise from `max_lr/div` to `max_lr` over the first
/// `⌊warmup_frac·total⌋` steps, then cosine fall to `max_lr/final_div` at the
/// last step.
pub fn one_cycle_lr(
    step: usize,
    total_steps: usize,
    max_lr: f64,
    warmup_frac: f64,
    div: f64,
    final_div: f64,
) -> Result<f64> {
    if step >= total_steps {
        return Err(crate::TensorError::Contract(format!("step {step} outside schedule of {total_steps} steps")).into());
    }
    let peak = (warmup_frac * total_steps as f64).floor() as usize;
    if step == peak {
        return Ok(max_lr);
    }
    let anneal = |from: f64, to: f64, frac: f64| to + (from - to) * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0;
    if step < peak {
        Ok(anneal(max_lr / div, max_lr, step as f64 / peak as f64))
    } else {
        let span = (total_steps - 1 - peak) as f64;
        Ok(anneal(max_lr, max_lr / final_div, (step - peak) as f64 / span))
    }
}
