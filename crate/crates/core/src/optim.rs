//! Stochastic gradient descent with momentum and coupled weight decay, and
//! the stepped learning-rate schedule that drops the rate by a fixed factor
//! every few epochs.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SefcnError};
use crate::layers::{StateItem, StateRole};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn default_lr0() -> f64 {
    0.01
}
fn default_lr_decay_every() -> usize {
    10
}
fn default_lr_decay_factor() -> f64 {
    0.1
}
fn default_momentum() -> f64 {
    0.95
}
fn default_weight_decay() -> f64 {
    1e-4
}
fn default_batch_size() -> usize {
    4
}
fn default_max_epochs() -> usize {
    20
}
fn default_loss_lambda() -> f64 {
    1.0
}
fn default_patience() -> usize {
    10
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr0")]
    pub lr0: f64,
    #[serde(default = "default_lr_decay_every")]
    pub lr_decay_every: usize,
    #[serde(default = "default_lr_decay_factor")]
    pub lr_decay_factor: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_loss_lambda")]
    pub loss_lambda: f64,
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Test hook: replace the loss gradient with NaN at this epoch to
    /// exercise the divergence path. Never set in real runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inject_nan_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr0 <= 0.0 || self.lr_decay_factor <= 0.0 {
            return Err(SefcnError::config("train: learning rates must be positive"));
        }
        if self.lr_decay_every == 0 {
            return Err(SefcnError::config(
                "train: lr_decay_every must be at least 1 epoch",
            ));
        }
        if self.momentum < 0.0 || self.momentum >= 1.0 {
            return Err(SefcnError::config("train: momentum must be in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(SefcnError::config("train: weight_decay must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(SefcnError::config("train: batch_size must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(SefcnError::config("train: max_epochs must be at least 1"));
        }
        if self.loss_lambda < 0.0 {
            return Err(SefcnError::config("train: loss_lambda must be non-negative"));
        }
        Ok(())
    }

    /// Learning rate for a (0-based) epoch: `lr0 * factor^(epoch / every)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        // step-wise multiplication rather than powi: the logged schedule
        // 0.01 -> 0.001 -> 0.0001 then round-trips through decimal exactly
        let mut lr = self.lr0;
        for _ in 0..epoch / self.lr_decay_every {
            lr *= self.lr_decay_factor;
        }
        lr
    }
}

/// Momentum SGD over a state visitation. Velocities are allocated on the
/// first step and indexed by visit order, so the same network (or one with
/// an identical layout) must be visited every step.
pub struct Sgd<T: Scalar> {
    momentum: T,
    weight_decay: T,
    velocities: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum: T::from_f64(momentum),
            weight_decay: T::from_f64(weight_decay),
            velocities: Vec::new(),
        }
    }

    pub fn velocities(&self) -> &[Tensor<T>] {
        &self.velocities
    }

    /// Install velocities saved from an earlier run (resume support).
    pub fn set_velocities(&mut self, velocities: Vec<Tensor<T>>) {
        self.velocities = velocities;
    }

    /// One update: `v <- momentum*v + grad + weight_decay*param`, then
    /// `param <- param - lr*v`, over every parameter the visitation yields.
    /// A non-finite gradient aborts with a divergence error naming the
    /// parameter.
    pub fn step(
        &mut self,
        lr: f64,
        visit: &mut dyn FnMut(&mut dyn FnMut(StateItem<'_, T>)),
    ) -> Result<()> {
        let first = self.velocities.is_empty();
        let lr = T::from_f64(lr);
        let momentum = self.momentum;
        let weight_decay = self.weight_decay;
        let velocities = &mut self.velocities;
        let mut idx = 0usize;
        let mut err: Option<SefcnError> = None;
        visit(&mut |item: StateItem<'_, T>| {
            if err.is_some() || item.role != StateRole::Param {
                return;
            }
            let Some(grad) = item.grad else { return };
            if !grad.all_finite() {
                err = Some(SefcnError::Divergence(format!(
                    "non-finite gradient in {}",
                    item.name
                )));
                return;
            }
            if first {
                velocities.push(item.value.zeros_like());
            }
            let Some(v) = velocities.get_mut(idx) else {
                err = Some(SefcnError::config(
                    "sgd: visitation yields more parameters than stored velocities",
                ));
                return;
            };
            if v.shape() != item.value.shape() {
                err = Some(SefcnError::config(format!(
                    "sgd: velocity shape {:?} does not match parameter {} {:?}",
                    v.shape(),
                    item.name,
                    item.value.shape()
                )));
                return;
            }
            for ((vv, g), p) in v
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(item.value.data_mut())
            {
                *vv = momentum * *vv + *g + weight_decay * *p;
                *p = *p - lr * *vv;
            }
            idx += 1;
        });
        if let Some(e) = err {
            return Err(e);
        }
        if idx != self.velocities.len() {
            return Err(SefcnError::config(
                "sgd: visitation yields fewer parameters than stored velocities",
            ));
        }
        Ok(())
    }
}
