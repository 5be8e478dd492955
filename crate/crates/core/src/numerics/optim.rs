//! AdamW with decoupled weight decay and the warmup + cosine schedule.

use alloc::string::ToString;

use super::params::ParamStore;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { weight_decay: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamW {
    pub fn with_weight_decay(weight_decay: f64) -> Self {
        Self { weight_decay, ..Self::default() }
    }

    /// One update from the gradients currently held in `store`.
    ///
    /// All gradients are checked before anything is modified, so a failed
    /// step leaves the store untouched.
    pub fn step(&self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if let Some(bad) = store.entries().iter().find(|e| !e.grad.all_finite()) {
            return Err(Error::NonFiniteGradient(bad.name.to_string()));
        }
        let t = store.step_count() as i32 + 1;
        let bc1 = 1.0 - libm::pow(self.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, t as f64);
        for e in store.entries_mut() {
            let value = e.value.data_mut();
            let (grad, m, v) = (e.grad.data(), e.m.data_mut(), e.v.data_mut());
            for i in 0..value.len() {
                value[i] -= lr * self.weight_decay * value[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value[i] -= lr * m_hat / (libm::sqrt(v_hat) + self.eps);
            }
        }
        store.bump_step();
        Ok(())
    }
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to 0 at `total_steps`.
pub fn lr_at(step: u64, total_steps: u64, warmup_steps: u64, base_lr: f64) -> f64 {
    let step = step.min(total_steps);
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps);
    if span == 0 {
        return base_lr;
    }
    let progress = (step - warmup_steps) as f64 / span as f64;
    0.5 * base_lr * (1.0 + libm::cos(core::f64::consts::PI * progress))
}
