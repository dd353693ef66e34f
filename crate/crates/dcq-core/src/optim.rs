//! SGD with momentum and an optional cosine learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{DcqError, Result};
use crate::network::{GradMap, Network};
use crate::tensor::{Element, Tensor};

/// Optimizer hyperparameters. `total_steps` drives the cosine decay; with
/// `cosine_decay` off the learning rate is constant.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OptConfig {
    pub lr: f64,
    pub momentum: f64,
    pub cosine_decay: bool,
}

impl OptConfig {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if lr <= 0.0 {
            return Err(DcqError::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(DcqError::Config("momentum must be in [0, 1)".into()));
        }
        Ok(Self { lr, momentum, cosine_decay: true })
    }
}

/// Per-layer velocity state, keyed like the gradient map.
pub struct SgdMomentum<T> {
    config: OptConfig,
    total_steps: usize,
    step: usize,
    velocity: BTreeMap<usize, (Tensor<T>, Tensor<T>)>,
}

impl<T: Element> SgdMomentum<T> {
    pub fn new(config: OptConfig, total_steps: usize) -> Self {
        Self { config, total_steps: total_steps.max(1), step: 0, velocity: BTreeMap::new() }
    }

    /// Learning rate for the upcoming step (cosine decay to zero).
    pub fn current_lr(&self) -> f64 {
        if !self.config.cosine_decay {
            return self.config.lr;
        }
        let progress = self.step as f64 / self.total_steps as f64;
        0.5 * self.config.lr * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
    }

    /// v <- momentum * v + g;  p <- p - lr * v
    pub fn apply(&mut self, net: &mut Network<T>, grads: &GradMap<T>) -> Result<()> {
        let lr = T::from_f64(self.current_lr());
        let momentum = T::from_f64(self.config.momentum);
        for (&i, (dw, db)) in grads {
            let layer = net.layer_mut(i);
            let (w, b) = layer
                .params_mut()
                .ok_or_else(|| DcqError::State(format!("gradient for parameterless layer {i}")))?;
            if w.shape() != dw.shape() || b.shape() != db.shape() {
                return Err(DcqError::Shape(format!(
                    "gradient shape mismatch at layer {i}: {:?} vs {:?}",
                    dw.shape(),
                    w.shape()
                )));
            }
            let (vw, vb) = self
                .velocity
                .entry(i)
                .or_insert_with(|| (Tensor::zeros(dw.shape()), Tensor::zeros(db.shape())));
            for ((p, v), g) in w.data_mut().iter_mut().zip(vw.data_mut()).zip(dw.data()) {
                *v = momentum * *v + *g;
                *p = *p - lr * *v;
            }
            for ((p, v), g) in b.data_mut().iter_mut().zip(vb.data_mut()).zip(db.data()) {
                *v = momentum * *v + *g;
                *p = *p - lr * *v;
            }
        }
        self.step += 1;
        Ok(())
    }
}
