//! SGD with momentum and L2 weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::KwsModel;
use crate::tensor::{Gradients, ParamId, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must be in [0, 1) and weight_decay ≥ 0".into()));
        }
        Ok(())
    }
}

/// Per-parameter velocity buffers. Update rule:
/// `g += wd·p; buf = m·buf + g; p -= lr·buf`.
#[derive(Debug, Clone)]
pub struct Sgd<T: Real = f32> {
    config: SgdConfig,
    buffers: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(config: SgdConfig) -> Result<Self> {
        config.validate()?;
        Ok(Sgd { config, buffers: BTreeMap::new() })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.config
    }

    pub fn reset(&mut self) {
        self.buffers.clear();
    }

    pub fn step(&mut self, model: &mut KwsModel<T>, grads: &Gradients<T>) -> Result<()> {
        self.step_with_lr(model, grads, self.config.lr)
    }

    pub fn step_with_lr(&mut self, model: &mut KwsModel<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        let (lr, m, wd) = (T::of(lr), T::of(self.config.momentum), T::of(self.config.weight_decay));
        for (&id, g) in grads {
            let p = model.param_mut(id);
            if p.value.shape() != g.shape() {
                return Err(Error::Shape(format!("gradient for {} has shape {:?}, parameter {:?}", p.name, g.shape(), p.value.shape())));
            }
            let buf = self.buffers.entry(id).or_insert_with(|| Tensor::zeros(g.shape()));
            for ((w, &gi), b) in p.value.data_mut().iter_mut().zip(g.data()).zip(buf.data_mut()) {
                let d = if wd == T::zero() { gi } else { gi + wd * *w };
                *b = m * *b + d;
                *w -= lr * *b;
            }
        }
        Ok(())
    }
}
