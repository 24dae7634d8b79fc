//! Adam with a step-decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::dense::Tensor;
use super::params::ParamStore;
use super::scalar::Scalar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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

/// Learning rate multiplied by `gamma` at each milestone epoch (1-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl Default for StepSchedule {
    fn default() -> Self {
        Self {
            base_lr: 2e-4,
            milestones: vec![9, 11],
            gamma: 0.1,
        }
    }
}

impl StepSchedule {
    pub fn lr(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base_lr * self.gamma.powi(passed as i32)
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T: Scalar> {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<Option<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update using the gradients stored on `params`. Parameters
    /// without a gradient are left untouched; a store with no gradients at
    /// all is an error.
    pub fn step(&mut self, params: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if params.iter().all(|(_, p)| p.grad.is_none()) {
            return Err(Error::State("optimizer step without any gradient".into()));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        if self.moments.len() < params.len() {
            self.moments.resize_with(params.len(), || None);
        }
        let (b1, b2) = (T::of(beta1), T::of(beta2));
        let (lr_t, eps_t) = (T::of(lr), T::of(eps));
        let (c1, c2) = (T::of(c1), T::of(c2));
        for (p, slot) in params.iter_mut().zip(self.moments.iter_mut()) {
            let Some(g) = p.grad.as_ref() else { continue };
            let (m, v) = slot.get_or_insert_with(|| {
                (Tensor::zeros(g.shape()), Tensor::zeros(g.shape()))
            });
            let values = p.value.data_mut();
            for (((x, &gi), mi), vi) in values
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *x -= lr_t * mh / (vh.sqrt() + eps_t);
            }
        }
        Ok(())
    }
}
