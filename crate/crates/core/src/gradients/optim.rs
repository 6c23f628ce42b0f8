use ndarray::{ArrayD, ArrayViewMutD, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_grads(params: &[ArrayViewMutD<'_, f64>], grads: &[ArrayD<f64>]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape("parameter groups", &[params.len()], &[grads.len()]));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("gradient", p.shape(), g.shape()));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gradient passed to optimizer".into()));
        }
    }
    Ok(())
}

/// `θ ← θ - lr g`.
pub fn sgd_step(mut params: Vec<ArrayViewMutD<'_, f64>>, grads: &[ArrayD<f64>], lr: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::invalid("learning rate must be positive"));
    }
    check_grads(&params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        p.scaled_add(-lr, g);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments; one state slot per parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, shapes: &[Vec<usize>]) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        Ok(Self {
            config,
            m: shapes.iter().map(|s| ArrayD::zeros(s.as_slice())).collect(),
            v: shapes.iter().map(|s| ArrayD::zeros(s.as_slice())).collect(),
            t: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, mut params: Vec<ArrayViewMutD<'_, f64>>, grads: &[ArrayD<f64>]) -> Result<()> {
        check_grads(&params, grads)?;
        if params.len() != self.m.len() {
            return Err(Error::shape("optimizer state", &[self.m.len()], &[params.len()]));
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
        Ok(())
    }
}
