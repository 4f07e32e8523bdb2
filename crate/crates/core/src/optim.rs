//! Adam optimizer with per-parameter moment accumulators.

use std::collections::BTreeMap;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{GradStore, ParamStore};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// First/second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentPair {
    pub m: ArrayD<f64>,
    pub v: ArrayD<f64>,
}

/// Adam state over the trainable subset of a parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global step counter used for bias correction.
    pub step: u64,
    pub moments: BTreeMap<String, MomentPair>,
}

/// Serializable hyperparameters (moments travel in the checkpoint's binary
/// sections, not here).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
}

impl AdamState {
    /// Initializes zero moments for every parameter matching one of the
    /// `trainable_prefixes`.
    pub fn new(params: &ParamStore, trainable_prefixes: &[&str], learning_rate: f64) -> Self {
        let mut moments = BTreeMap::new();
        for (name, value) in params.iter() {
            if trainable_prefixes.iter().any(|p| name.starts_with(p)) {
                moments.insert(
                    name.clone(),
                    MomentPair {
                        m: ArrayD::zeros(value.shape().to_vec()),
                        v: ArrayD::zeros(value.shape().to_vec()),
                    },
                );
            }
        }
        Self {
            learning_rate,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
            step: 0,
            moments,
        }
    }

    pub fn hyper(&self) -> AdamHyper {
        AdamHyper {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            step: self.step,
        }
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &String> {
        self.moments.keys()
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.moments.contains_key(name)
    }

    /// Drops optimizer state for parameters outside the trainable set (used
    /// when the encoder is frozen between stages).
    pub fn retain_prefixes(&mut self, prefixes: &[&str]) {
        self.moments.retain(|name, _| prefixes.iter().any(|p| name.starts_with(p)));
    }

    /// One Adam update. Every gradient must belong to the trainable set; a
    /// gradient for a non-trainable parameter is a freeze violation.
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradStore) -> Result<()> {
        for name in grads.names() {
            if !self.moments.contains_key(name) {
                return Err(Error::State(format!(
                    "freeze violation: gradient for non-trainable parameter '{name}'"
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, pair) in self.moments.iter_mut() {
            let Some(grad) = grads.get(name) else {
                continue;
            };
            let value = params.get_mut(name)?;
            ndarray::Zip::from(value)
                .and(&mut pair.m)
                .and(&mut pair.v)
                .and(grad)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
                });
        }
        Ok(())
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut GradStore, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}
