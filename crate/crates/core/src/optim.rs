//! Parameter-update rules: Adam and RMSProp, each with optional
//! `lr / (1 + decay * t)` learning-rate decay.
//!
//! A step reads the gradient stored on each trainable weight and bias
//! tensor, updates the tensor in place and clears the gradient. Layers whose
//! `trainable` flag is off are never written. Moment buffers are kept per
//! layer name, so a parameter's update depends only on its own gradients.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{LayerParams, WeightStore};

pub trait Optimizer: Send {
    /// Apply one update to every trainable parameter in `store`.
    fn step(&mut self, store: &mut WeightStore) -> Result<()>;

    /// Completed steps.
    fn iterations(&self) -> u64;

    /// Learning rate the next step will use.
    fn current_lr(&self) -> f64;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_epsilon")]
        epsilon: f64,
        #[serde(default)]
        decay: f64,
    },
    Rmsprop {
        lr: f64,
        #[serde(default = "default_rho")]
        rho: f64,
        #[serde(default = "default_epsilon")]
        epsilon: f64,
        #[serde(default)]
        decay: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_rho() -> f64 {
    0.9
}
fn default_epsilon() -> f64 {
    1e-7
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::adam(1e-4)
    }
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
            decay: 0.0,
        }
    }

    pub fn rmsprop(lr: f64) -> Self {
        OptimizerConfig::Rmsprop {
            lr,
            rho: default_rho(),
            epsilon: default_epsilon(),
            decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("optimizer.{name} must be positive, got {v}")))
            }
        };
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::config(format!("optimizer.{name} must lie in (0, 1), got {v}")))
            }
        };
        let decay_ok = |v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("optimizer.decay must be >= 0, got {v}")))
            }
        };
        match *self {
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                epsilon,
                decay,
            } => {
                positive("lr", lr)?;
                unit("beta1", beta1)?;
                unit("beta2", beta2)?;
                positive("epsilon", epsilon)?;
                decay_ok(decay)
            }
            OptimizerConfig::Rmsprop { lr, rho, epsilon, decay } => {
                positive("lr", lr)?;
                unit("rho", rho)?;
                positive("epsilon", epsilon)?;
                decay_ok(decay)
            }
        }
    }

    pub fn build(&self) -> Result<Box<dyn Optimizer>> {
        self.validate()?;
        Ok(match *self {
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                epsilon,
                decay,
            } => Box::new(Adam::new(AdamParams {
                lr,
                beta1,
                beta2,
                epsilon,
                decay,
            })),
            OptimizerConfig::Rmsprop { lr, rho, epsilon, decay } => Box::new(RmsProp::new(RmsPropParams {
                lr,
                rho,
                epsilon,
                decay,
            })),
        })
    }
}

fn decayed_lr(lr: f64, decay: f64, t: u64) -> f64 {
    if decay > 0.0 {
        lr / (1.0 + decay * t as f64)
    } else {
        lr
    }
}

/// Fail before mutating anything if a trainable tensor lacks a gradient.
fn check_grads(store: &WeightStore) -> Result<()> {
    for (name, p) in store.iter().filter(|(_, p)| p.trainable) {
        if p.weights.grad().is_none() {
            return Err(Error::MissingGradient(format!("{name}/weights")));
        }
        if p.bias.grad().is_none() {
            return Err(Error::MissingGradient(format!("{name}/bias")));
        }
    }
    Ok(())
}

/// Per-tensor auxiliary buffers: index 0 for weights, 1 for bias.
type Slots = BTreeMap<String, [Vec<f32>; 2]>;

fn slots_for<'a>(slots: &'a mut Slots, name: &str, p: &LayerParams) -> &'a mut [Vec<f32>; 2] {
    slots
        .entry(name.to_string())
        .or_insert_with(|| [vec![0.0; p.weights.len()], vec![0.0; p.bias.len()]])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub decay: f64,
}

/// One element of an Adam step at 1-based step `t` with learning rate `lr`.
/// Returns the new moments and the amount to subtract from the parameter.
pub fn adam_update(m: f64, v: f64, g: f64, t: u64, lr: f64, hp: &AdamParams) -> (f64, f64, f64) {
    let m = hp.beta1 * m + (1.0 - hp.beta1) * g;
    let v = hp.beta2 * v + (1.0 - hp.beta2) * g * g;
    let m_hat = m / (1.0 - hp.beta1.powi(t as i32));
    let v_hat = v / (1.0 - hp.beta2.powi(t as i32));
    (m, v, lr * m_hat / (v_hat.sqrt() + hp.epsilon))
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub params: AdamParams,
    t: u64,
    m: Slots,
    v: Slots,
}

impl Adam {
    pub fn new(params: AdamParams) -> Self {
        Adam {
            params,
            t: 0,
            m: Slots::new(),
            v: Slots::new(),
        }
    }

    /// First and second moments of a layer's weights (`[0]`) and bias (`[1]`).
    pub fn moments(&self, layer: &str) -> Option<(&[Vec<f32>; 2], &[Vec<f32>; 2])> {
        Some((self.m.get(layer)?, self.v.get(layer)?))
    }
}

impl Optimizer for Adam {
    fn step(&mut self, store: &mut WeightStore) -> Result<()> {
        check_grads(store)?;
        let lr = self.current_lr();
        self.t += 1;
        let t = self.t;
        let hp = self.params;
        for (name, p) in store.iter_mut().filter(|(_, p)| p.trainable) {
            let m = slots_for(&mut self.m, name, p);
            let v = slots_for(&mut self.v, name, p);
            for (k, tensor) in [&mut p.weights, &mut p.bias].into_iter().enumerate() {
                let g = tensor.take_grad().expect("checked above");
                for (i, x) in tensor.data_mut().iter_mut().enumerate() {
                    let (mi, vi, delta) = adam_update(m[k][i] as f64, v[k][i] as f64, g[i] as f64, t, lr, &hp);
                    m[k][i] = mi as f32;
                    v[k][i] = vi as f32;
                    *x = (*x as f64 - delta) as f32;
                }
            }
        }
        store.clear_grads();
        Ok(())
    }

    fn iterations(&self) -> u64 {
        self.t
    }

    fn current_lr(&self) -> f64 {
        decayed_lr(self.params.lr, self.params.decay, self.t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RmsPropParams {
    pub lr: f64,
    pub rho: f64,
    pub epsilon: f64,
    pub decay: f64,
}

#[derive(Clone, Debug)]
pub struct RmsProp {
    pub params: RmsPropParams,
    t: u64,
    acc: Slots,
}

impl RmsProp {
    pub fn new(params: RmsPropParams) -> Self {
        RmsProp {
            params,
            t: 0,
            acc: Slots::new(),
        }
    }

    /// Squared-gradient accumulators of a layer's weights and bias.
    pub fn accumulator(&self, layer: &str) -> Option<&[Vec<f32>; 2]> {
        self.acc.get(layer)
    }
}

impl Optimizer for RmsProp {
    fn step(&mut self, store: &mut WeightStore) -> Result<()> {
        check_grads(store)?;
        let lr = self.current_lr();
        self.t += 1;
        let RmsPropParams { rho, epsilon, .. } = self.params;
        for (name, p) in store.iter_mut().filter(|(_, p)| p.trainable) {
            let acc = slots_for(&mut self.acc, name, p);
            for (k, tensor) in [&mut p.weights, &mut p.bias].into_iter().enumerate() {
                let g = tensor.take_grad().expect("checked above");
                for (i, x) in tensor.data_mut().iter_mut().enumerate() {
                    let gi = g[i] as f64;
                    let a = rho * acc[k][i] as f64 + (1.0 - rho) * gi * gi;
                    acc[k][i] = a as f32;
                    *x = (*x as f64 - lr * gi / (a.sqrt() + epsilon)) as f32;
                }
            }
        }
        store.clear_grads();
        Ok(())
    }

    fn iterations(&self) -> u64 {
        self.t
    }

    fn current_lr(&self) -> f64 {
        decayed_lr(self.params.lr, self.params.decay, self.t)
    }
}
