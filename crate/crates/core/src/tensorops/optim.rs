use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone)]
struct Moments<T> {
    first: Tensor<T>,
    second: Tensor<T>,
    steps: u64,
}

/// A parameter handed to the optimizer together with its gradient.
pub struct ParamUpdate<'a, T> {
    pub name: &'a str,
    pub param: &'a mut Tensor<T>,
    pub grad: &'a Tensor<T>,
}

/// AdamW moment accumulators keyed by parameter name.
///
/// Parameters that never appear in an update never get accumulators, and
/// each parameter counts its own steps for bias correction so heads that
/// are trained intermittently are corrected by how often they were updated.
#[derive(Clone)]
pub struct OptimizerState<T> {
    pub config: AdamWConfig,
    slots: BTreeMap<String, Moments<T>>,
    step: u64,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            slots: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn has_state(&self, name: &str) -> bool {
        self.slots.contains_key(name)
    }

    pub fn tracked(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    /// One decoupled-weight-decay Adam update over `updates`.
    pub fn step(&mut self, updates: &mut [ParamUpdate<'_, T>], lr: f64) -> Result<()> {
        if !(lr >= 0.0) {
            return Err(Error::Contract(format!("learning rate {lr} must be >= 0")));
        }
        for u in updates.iter() {
            if u.param.shape() != u.grad.shape() {
                return Err(Error::Dimension(format!(
                    "gradient {:?} does not match parameter {} {:?}",
                    u.grad.shape(),
                    u.name,
                    u.param.shape()
                )));
            }
            if !u.grad.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for {}", u.name)));
            }
        }
        self.step += 1;
        let cfg = self.config;
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - cfg.beta1), T::of(1.0 - cfg.beta2));
        let eps = T::of(cfg.eps);
        let decay = T::of(1.0 - lr * cfg.weight_decay);
        let lr_t = T::of(lr);

        for u in updates.iter_mut() {
            let slot = self.slots.entry(u.name.to_string()).or_insert_with(|| Moments {
                first: Tensor::zeros(u.param.shape()),
                second: Tensor::zeros(u.param.shape()),
                steps: 0,
            });
            slot.steps += 1;
            let bc1 = T::of(1.0 - cfg.beta1.powi(slot.steps as i32));
            let bc2 = T::of(1.0 - cfg.beta2.powi(slot.steps as i32));
            let p = u.param.data_mut();
            let m = slot.first.data_mut();
            let v = slot.second.data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(u.grad.data()) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p = *p * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup followed by cosine decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub warmup_steps: u64,
    pub start_lr: f64,
    pub peak_lr: f64,
    pub final_lr: f64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(
        warmup_steps: u64,
        start_lr: f64,
        peak_lr: f64,
        final_lr: f64,
        total_steps: u64,
    ) -> Result<Self> {
        let s = Self {
            warmup_steps,
            start_lr,
            peak_lr,
            final_lr,
            total_steps,
        };
        s.validate()?;
        Ok(s)
    }

    /// Warmup spanning `warmup_fraction` of `total_steps`, rounded down.
    pub fn with_warmup_fraction(
        warmup_fraction: f64,
        start_lr: f64,
        peak_lr: f64,
        final_lr: f64,
        total_steps: u64,
    ) -> Result<Self> {
        let warmup = (warmup_fraction * total_steps as f64).floor() as u64;
        Self::new(warmup, start_lr, peak_lr, final_lr, total_steps)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.start_lr <= self.peak_lr && self.final_lr <= self.peak_lr) {
            return Err(Error::Config(format!(
                "learning rates must satisfy start, final <= peak: {self:?}"
            )));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warmup {} exceeds total steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Contract(format!(
                "step {step} outside schedule of {} steps",
                self.total_steps
            )));
        }
        if step < self.warmup_steps {
            let frac = step as f64 / self.warmup_steps as f64;
            return Ok(self.start_lr + (self.peak_lr - self.start_lr) * frac);
        }
        if step == self.warmup_steps {
            return Ok(self.peak_lr);
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        Ok(self.final_lr + 0.5 * (self.peak_lr - self.final_lr) * (1.0 + (PI * progress).cos()))
    }
}
