//! Adam optimizer over a flat parameter set, with bias-corrected moment
//! estimates and a hard failure on non-finite gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("adam lr {} must be positive", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("adam {name} {b} not in [0,1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("adam eps {} must be positive", self.eps)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    /// First-moment estimates, one vector per parameter tensor.
    pub m: Vec<Vec<f64>>,
    /// Second-moment estimates.
    pub v: Vec<Vec<f64>>,
    /// Completed update steps.
    pub t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, set: &ParamSet) -> Result<Self> {
        cfg.validate()?;
        let m = set.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        let v = set.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Ok(Adam { cfg, m, v, t: 0 })
    }

    /// One update over all trainable parameters using the accumulated
    /// gradients. `lr` is passed per call so schedules stay outside the
    /// optimizer state. Errors on any non-finite gradient, naming the
    /// offending parameter.
    pub fn step(&mut self, set: &mut ParamSet, lr: f64) -> Result<()> {
        set.check_grads_finite()?;
        self.t += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for (idx, (_, p)) in set.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let lr = lr * p.lr_scale;
            for ((w, g), (mi, vi)) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = self.cfg.beta1 * *mi + (1.0 - self.cfg.beta1) * g;
                *vi = self.cfg.beta2 * *vi + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}
