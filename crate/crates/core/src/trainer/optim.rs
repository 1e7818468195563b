//! AdamW and a reduce-on-plateau learning-rate scheduler.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, weight_decay: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
    pub skipped_steps: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|p| Matrix::zeros(p.value.rows(), p.value.cols())).collect();
        Self { config, step: 0, m: zeros(), v: zeros(), skipped_steps: 0 }
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Decoupled weight decay followed by the bias-corrected Adam update.
    /// Returns `false` (and leaves everything untouched) when any gradient
    /// is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<bool> {
        if store.len() != self.m.len() {
            return Err(Error::Contract("optimizer state does not match parameters".into()));
        }
        let finite = store.iter().all(|p| p.grad_ref().map_or(true, Matrix::is_finite));
        if !finite {
            self.skipped_steps += 1;
            warn!("non-finite gradient; optimizer step skipped");
            return Ok(false);
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::one() - T::lit(c.beta1.powi(self.step as i32));
        let bc2 = T::one() - T::lit(c.beta2.powi(self.step as i32));
        let lr = T::lit(c.lr);
        let decay = T::one() - lr * T::lit(c.weight_decay);
        let eps = T::lit(c.eps);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = p.grad_ref().cloned() else {
                p.value.scale_in_place(decay);
                continue;
            };
            let (pv, mv, vv, gv) = (p.value.as_mut_slice(), m.as_mut_slice(), v.as_mut_slice(), g.as_slice());
            for i in 0..pv.len() {
                pv[i] *= decay;
                mv[i] = b1 * mv[i] + (T::one() - b1) * gv[i];
                vv[i] = b2 * vv[i] + (T::one() - b2) * gv[i] * gv[i];
                let mh = mv[i] / bc1;
                let vh = vv[i] / bc2;
                pv[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(true)
    }
}

/// Multiplies the learning rate by `factor` after `patience` epochs without
/// improvement of the monitored value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize) -> Self {
        Self { factor, patience, min_lr: 1e-8, best: f64::INFINITY, bad_epochs: 0 }
    }

    /// Returns the learning rate to use next.
    pub fn observe(&mut self, value: f64, lr: f64) -> f64 {
        if value < self.best {
            self.best = value;
            self.bad_epochs = 0;
            return lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs > self.patience {
            self.bad_epochs = 0;
            return (lr * self.factor).max(self.min_lr);
        }
        lr
    }
}
