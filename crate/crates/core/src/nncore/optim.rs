use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParameterSet};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Cosine annealing from the base rate to zero, updated once per epoch.
    Cosine,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Threshold on the global L2 norm of all gradients.
    pub grad_clip: f64,
    pub epochs: usize,
    pub schedule: Schedule,
    #[serde(default)]
    pub warmup_epochs: usize,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::invalid(format!(
                "grad_clip must be positive, got {}",
                self.grad_clip
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum {} outside [0,1)", self.momentum)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::invalid("weight_decay must be non-negative"));
        }
        Ok(())
    }

    /// Learning rate for a 0-based epoch. At `epoch == epochs` the cosine
    /// schedule reaches zero.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            return self.lr * (epoch + 1) as f64 / (self.warmup_epochs + 1) as f64;
        }
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let span = self.epochs.saturating_sub(self.warmup_epochs).max(1) as f64;
                let t = ((epoch - self.warmup_epochs) as f64 / span).min(1.0);
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clip_scale: f64,
}

/// Momentum SGD with L2 weight decay folded into the gradient. Clipping on
/// the global norm happens first.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub config: SgdConfig,
    pub momentum: Vec<Option<Tensor<T>>>,
    pub epoch: usize,
    pub lr: f64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(config: SgdConfig, num_params: usize) -> Result<Self> {
        config.validate()?;
        let lr = config.lr_at(0);
        Ok(Self {
            config,
            momentum: vec![None; num_params],
            epoch: 0,
            lr,
        })
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
        self.lr = self.config.lr_at(epoch);
    }

    pub fn step(&mut self, params: &mut ParameterSet<T>, mut grads: Gradients<T>) -> StepStats {
        let norm = grads.global_norm().as_f64();
        let clip_scale = if norm > self.config.grad_clip {
            self.config.grad_clip / norm
        } else {
            1.0
        };
        if clip_scale < 1.0 {
            grads.scale(T::lit(clip_scale));
        }
        let lr = T::lit(self.lr);
        let mu = T::lit(self.config.momentum);
        let wd = T::lit(self.config.weight_decay);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let p = params.get_mut(id);
            if !p.trainable {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let buf = self.momentum[id.index()]
                .get_or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            for ((w, &gv), b) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(buf.data_mut())
            {
                let d = gv + wd * *w;
                *b = mu * *b + d;
                *w = *w - lr * *b;
            }
        }
        StepStats {
            grad_norm: norm,
            clip_scale,
        }
    }
}
