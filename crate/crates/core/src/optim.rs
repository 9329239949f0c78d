//! Adam with bias correction and a step-halving learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::ParameterSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state for one parameter set. Only names present in the
/// gradient set are updated.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: ParameterSet,
    pub v: ParameterSet,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParameterSet) -> Self {
        Adam {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn update(&mut self, params: &mut ParameterSet, grads: &ParameterSet, lr: f64) -> Result<()> {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, g) in grads.iter() {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter {name}")))?;
            let m = self.m.get_mut(name).expect("moments mirror parameters");
            m.zip_mut_with(g, |m, &g| *m = beta1 * *m + (1.0 - beta1) * g);
            let v = self.v.get_mut(name).expect("moments mirror parameters");
            v.zip_mut_with(g, |v, &g| *v = beta2 * *v + (1.0 - beta2) * g * g);
            let (m, v) = (self.m.get(name)?, self.v.get(name)?);
            ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
            });
        }
        Ok(())
    }
}

/// `base · 0.5^(step / halve_every)`; `halve_every = 0` disables decay.
pub fn halving_schedule(base: f64, step: u64, halve_every: u64) -> f64 {
    if halve_every == 0 {
        base
    } else {
        base * 0.5f64.powi((step / halve_every) as i32)
    }
}
