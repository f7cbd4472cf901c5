use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{Layout, ModelCheckpoint};
use crate::error::{contract, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum OptState {
    Sgd,
    AdamW { m: Vec<f64>, v: Vec<f64>, t: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

impl ModelCheckpoint {
    fn check_dims(&self, gradient: &[f64], lr: f64) -> Result<()> {
        if gradient.len() != self.params.len() {
            return contract(format!(
                "gradient has {} entries but the model has {} parameters",
                gradient.len(),
                self.params.len()
            ));
        }
        if !(lr >= 0.0 && lr.is_finite()) {
            return contract(format!("learning rate must be finite and non-negative, got {lr}"));
        }
        Ok(())
    }

    /// Gradient *ascent* on log-likelihood: `params += lr * gradient`.
    pub fn sgd_step(&mut self, gradient: &[f64], lr: f64) -> Result<()> {
        self.check_dims(gradient, lr)?;
        for (p, g) in self.params.iter_mut().zip(gradient) {
            *p += lr * g;
        }
        self.step += 1;
        Ok(())
    }

    /// AdamW on a loss: `loss_gradient` is the gradient of the quantity being
    /// minimized (e.g. the negative log-likelihood). Weight decay is
    /// decoupled and applies to matrices and embeddings only.
    pub fn adamw_step(&mut self, loss_gradient: &[f64], lr: f64, hp: &AdamWParams) -> Result<()> {
        self.check_dims(loss_gradient, lr)?;
        let n = self.params.len();
        if !matches!(self.opt_state, OptState::AdamW { .. }) {
            self.opt_state = OptState::AdamW {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            };
        }
        let OptState::AdamW { m, v, t } = &mut self.opt_state else {
            unreachable!()
        };
        *t += 1;
        let bc1 = 1.0 - hp.beta1.powi(*t as i32);
        let bc2 = 1.0 - hp.beta2.powi(*t as i32);
        let mut decayed = vec![false; n];
        for r in Layout::new(&self.config).decayed_ranges() {
            decayed[r].fill(true);
        }
        for i in 0..n {
            let g = loss_gradient[i];
            m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g;
            v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            let decay = if decayed[i] { hp.weight_decay * self.params[i] } else { 0.0 };
            self.params[i] -= lr * (mhat / (vhat.sqrt() + hp.eps) + decay);
        }
        self.step += 1;
        Ok(())
    }
}

/// Linear warmup followed by cosine decay to `lr_min`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub lr_max: f64,
    pub lr_min: f64,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps >= self.total_steps {
            return contract(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return contract(format!(
                "need 0 < lr_min <= lr_max, got {} and {}",
                self.lr_min, self.lr_max
            ));
        }
        Ok(())
    }

    /// Learning rate at `step`, for `0 <= step <= total_steps`. Warmup uses
    /// `(step + 1) / (warmup + 1)` so the rate is positive at step 0 and
    /// reaches `lr_max` exactly at `warmup_steps`.
    pub fn lr_at(&self, step: u64) -> Result<f64> {
        self.validate()?;
        if step > self.total_steps {
            return contract(format!(
                "step {step} is past the schedule's {} total steps",
                self.total_steps
            ));
        }
        if step < self.warmup_steps {
            return Ok(self.lr_max * (step + 1) as f64 / (self.warmup_steps + 1) as f64);
        }
        let progress =
            (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        Ok(self.lr_min + (self.lr_max - self.lr_min) * 0.5 * (1.0 + (PI * progress).cos()))
    }
}
