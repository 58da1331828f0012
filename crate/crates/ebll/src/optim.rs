//! Parameter update rules: SGD with momentum and weight decay for the task
//! model, adaptive per-element steps for autoencoder training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// SGD stepper with per-parameter momentum buffers. Buffers are created
/// lazily so heads added mid-run pick up fresh state.
#[derive(Debug)]
pub struct Sgd {
    cfg: SgdConfig,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Self {
        Self {
            cfg,
            velocity: Vec::new(),
        }
    }

    pub fn config(&self) -> &SgdConfig {
        &self.cfg
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.cfg.learning_rate = lr;
    }

    /// v <- momentum*v + grad + weight_decay*value; value <- value - lr*v.
    /// Frozen parameters are skipped entirely.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        let cfg = self.cfg;
        for (id, p) in store.iter_mut() {
            if p.frozen {
                continue;
            }
            p.grad.check_finite("gradient", &p.name)?;
            let v = self.velocity[id.0].get_or_insert_with(|| Tensor::zeros_like(&p.value));
            for ((vv, gv), xv) in v
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(p.value.data())
            {
                *vv = cfg.momentum * *vv + gv + cfg.weight_decay * xv;
            }
            p.value.add_scaled(-cfg.learning_rate, v);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdaDeltaConfig {
    pub rho: f64,
    pub epsilon: f64,
}

impl Default for AdaDeltaConfig {
    fn default() -> Self {
        Self {
            rho: 0.95,
            epsilon: 1e-6,
        }
    }
}

impl AdaDeltaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.rho && self.rho < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "adadelta rho must be in (0, 1), got {}",
                self.rho
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "adadelta epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Adaptive stepper keeping running averages of squared gradients and squared
/// updates per parameter element.
#[derive(Debug)]
pub struct AdaDelta {
    cfg: AdaDeltaConfig,
    acc_grad_sq: Vec<Option<Tensor>>,
    acc_update_sq: Vec<Option<Tensor>>,
}

impl AdaDelta {
    pub fn new(cfg: AdaDeltaConfig) -> Self {
        Self {
            cfg,
            acc_grad_sq: Vec::new(),
            acc_update_sq: Vec::new(),
        }
    }

    /// Per element:
    ///   acc_g <- rho*acc_g + (1-rho)*g^2
    ///   delta  = -sqrt(acc_u + eps)/sqrt(acc_g + eps) * g
    ///   acc_u <- rho*acc_u + (1-rho)*delta^2
    ///   value <- value + delta
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.acc_grad_sq.len() < store.len() {
            self.acc_grad_sq.resize(store.len(), None);
            self.acc_update_sq.resize(store.len(), None);
        }
        let (rho, eps) = (self.cfg.rho, self.cfg.epsilon);
        for (id, p) in store.iter_mut() {
            if p.frozen {
                continue;
            }
            p.grad.check_finite("gradient", &p.name)?;
            let ag = self.acc_grad_sq[id.0].get_or_insert_with(|| Tensor::zeros_like(&p.value));
            let au = self.acc_update_sq[id.0].get_or_insert_with(|| Tensor::zeros_like(&p.value));
            for (((agv, auv), gv), xv) in ag
                .data_mut()
                .iter_mut()
                .zip(au.data_mut())
                .zip(p.grad.data())
                .zip(p.value.data_mut())
            {
                *agv = rho * *agv + (1.0 - rho) * gv * gv;
                let delta = -((*auv + eps).sqrt() / (*agv + eps).sqrt()) * gv;
                *auv = rho * *auv + (1.0 - rho) * delta * delta;
                *xv += delta;
            }
        }
        Ok(())
    }
}
