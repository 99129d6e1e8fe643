//! Adam with bias correction. One instance owns the moment state for one
//! parameter group; L2 weight decay is added to the raw gradient before
//! the moment updates.

use super::Param;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }
}

pub struct Adam<T> {
    pub cfg: AdamConfig,
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Result<Self> {
        // lr 0 is a legal no-op optimizer (moments move, values do not);
        // run configs demand positive rates separately.
        if !(cfg.lr >= 0.0) || !cfg.lr.is_finite() {
            return Err(Error::Config(format!(
                "adam learning rate must be finite and non-negative, got {}",
                cfg.lr
            )));
        }
        if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) {
            return Err(Error::Config(format!(
                "adam betas must lie in [0, 1), got ({}, {})",
                cfg.beta1, cfg.beta2
            )));
        }
        Ok(Adam {
            cfg,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// Applies one update to the given parameters, consuming their
    /// accumulated gradients (the gradients themselves are left in place;
    /// callers zero them at the start of the next step).
    pub fn step(&mut self, params: &mut [&mut Param<T>]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
            self.v = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        }
        if self.m.len() != params.len() {
            return Err(Error::Config(format!(
                "adam state holds {} tensors but step got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let one = T::one();
        let lr = T::from_f64(self.cfg.lr);
        let eps = T::from_f64(self.cfg.eps);
        let wd = T::from_f64(self.cfg.weight_decay);
        let bc1 = T::from_f64(1.0 - self.cfg.beta1.powi(self.t as i32));
        let bc2 = T::from_f64(1.0 - self.cfg.beta2.powi(self.t as i32));
        for (i, p) in params.iter_mut().enumerate() {
            p.grad.expect_shape(p.value.shape(), "adam gradient")?;
            self.m[i].expect_shape(p.value.shape(), "adam moment")?;
            let md = self.m[i].data_mut();
            let vd = self.v[i].data_mut();
            let theta = p.value.data_mut();
            let gd = p.grad.data();
            for j in 0..theta.len() {
                let g = gd[j] + wd * theta[j];
                md[j] = b1 * md[j] + (one - b1) * g;
                vd[j] = b2 * vd[j] + (one - b2) * g * g;
                let m_hat = md[j] / bc1;
                let v_hat = vd[j] / bc2;
                theta[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
