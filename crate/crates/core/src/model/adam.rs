//! Adam with bias correction and decoupled weight decay.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{Gradients, Model, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

fn default_lr() -> f64 {
    1e-5
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_weight_decay() -> f64 {
    0.01
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: default_weight_decay(),
        }
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, model: &Model<T>) -> Self {
        let zeros: Vec<Vec<T>> = model
            .params()
            .iter()
            .map(|p| vec![T::zero(); p.len()])
            .collect();
        AdamState {
            config,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. Non-finite or mis-shaped gradients are refused and leave
    /// both model and state untouched.
    pub fn step(&mut self, model: &mut Model<T>, grads: &Gradients<T>) -> Result<()> {
        if grads.blocks.len() != self.m.len()
            || grads.blocks.iter().zip(&self.m).any(|(g, m)| g.len() != m.len())
        {
            return Err(Error::Optimizer(format!(
                "gradient layout does not match optimizer state ({} blocks vs {})",
                grads.blocks.len(),
                self.m.len()
            )));
        }
        if !grads.is_finite() {
            return Err(Error::Optimizer("non-finite gradient".into()));
        }
        self.t += 1;
        let c = self.config;
        let bias1 = 1.0 - libm::pow(c.beta1, self.t as f64);
        let bias2 = 1.0 - libm::pow(c.beta2, self.t as f64);
        let (b1, b2) = (T::cast(c.beta1), T::cast(c.beta2));
        let (one_b1, one_b2) = (T::cast(1.0 - c.beta1), T::cast(1.0 - c.beta2));
        let step = T::cast(c.lr / bias1);
        let inv_sqrt_bias2 = T::cast(1.0 / libm::sqrt(bias2));
        let eps = T::cast(c.eps);
        let decay = T::cast(c.lr * c.weight_decay);

        for (((param, g), m), v) in model
            .params_mut()
            .into_iter()
            .zip(&grads.blocks)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..param.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                let denom = v[i].sqrt() * inv_sqrt_bias2 + eps;
                param[i] = param[i] - step * m[i] / denom - decay * param[i];
            }
        }
        Ok(())
    }
}

pub fn adam_step<T: Scalar>(
    state: &mut AdamState<T>,
    model: &mut Model<T>,
    grads: &Gradients<T>,
) -> Result<()> {
    state.step(model, grads)
}
