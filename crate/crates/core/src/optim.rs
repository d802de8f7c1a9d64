//! Bias-corrected Adam and the constant-then-linear learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.5, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Moment buffers for one network, index-aligned with its parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    pub config: AdamConfig,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    /// Completed steps.
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    /// Zeroed moments shaped like `store`'s parameters.
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || store.params().iter().map(|p| vec![T::zero(); p.value.numel()]).collect();
        AdamState { config, m: zeros(), v: zeros(), t: 0 }
    }

    /// Checks that the moment buffers mirror `store`.
    pub fn check_matches(&self, store: &ParamStore<T>) -> Result<()> {
        let params = store.params();
        if self.m.len() != params.len() || self.v.len() != params.len() {
            return Err(Error::Load(format!(
                "optimizer holds {} moment buffers, network has {} parameters",
                self.m.len(),
                params.len()
            )));
        }
        for ((p, m), v) in params.iter().zip(&self.m).zip(&self.v) {
            if m.len() != p.value.numel() || v.len() != p.value.numel() {
                return Err(Error::Load(format!("moment buffer size mismatch for {}", p.name)));
            }
        }
        Ok(())
    }

    /// One Adam update of every parameter from its accumulated gradient,
    /// then clears the gradients. A parameter without a gradient is treated
    /// as having gradient zero. Nothing is modified if any gradient is
    /// non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::contract(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        self.check_matches(store).map_err(|e| Error::contract(e.to_string()))?;
        for p in store.params() {
            if let Some(i) = p.grad.as_deref().and_then(|g| g.iter().position(|x| !x.is_finite())) {
                return Err(Error::numeric(p.name.clone(), format!("non-finite gradient at element {i}")));
            }
        }
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        self.t += 1;
        let bc1 = 1.0 - beta1.powf(self.t as f64);
        let bc2 = 1.0 - beta2.powf(self.t as f64);
        for ((p, m), v) in store.params_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.take();
            let value = std::sync::Arc::make_mut(&mut p.value);
            for (i, w) in value.data_mut().iter_mut().enumerate() {
                let g = grad.as_ref().map_or(0.0, |g| g[i].as_f64());
                let mi = beta1 * m[i].as_f64() + (1.0 - beta1) * g;
                let vi = beta2 * v[i].as_f64() + (1.0 - beta2) * g * g;
                m[i] = T::from_f64(mi);
                v[i] = T::from_f64(vi);
                let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + epsilon);
                *w = T::from_f64(w.as_f64() - update);
            }
        }
        Ok(())
    }
}

/// Constant learning rate, then a linear ramp to zero at `total_epochs`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub constant_epochs: u64,
    pub total_epochs: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { base_lr: 2e-4, constant_epochs: 100, total_epochs: 160 }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::contract(format!("base_lr must be finite and > 0, got {}", self.base_lr)));
        }
        if self.total_epochs == 0 || self.constant_epochs > self.total_epochs {
            return Err(Error::contract(format!(
                "need 0 <= constant_epochs ({}) <= total_epochs ({}) and total_epochs > 0",
                self.constant_epochs, self.total_epochs
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: u64) -> Result<f64> {
        self.validate()?;
        if epoch > self.total_epochs {
            return Err(Error::contract(format!("epoch {epoch} outside 0..={}", self.total_epochs)));
        }
        if epoch < self.constant_epochs {
            return Ok(self.base_lr);
        }
        let decay = (self.total_epochs - self.constant_epochs) as f64;
        if decay == 0.0 {
            return Ok(0.0);
        }
        Ok(self.base_lr * ((self.total_epochs - epoch) as f64 / decay))
    }
}

#[cfg(test)]
mod tests;
