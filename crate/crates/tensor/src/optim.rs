use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
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

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsPropConfig {
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            alpha: 0.99,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        Self {
            config,
            first: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], names: &[String]) -> Result<()> {
        check(params, grads, names, self.first.len())?;
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct RmsProp {
    pub config: RmsPropConfig,
    square: Vec<Vec<f64>>,
}

impl RmsProp {
    pub fn new(config: RmsPropConfig, params: &[Tensor]) -> Self {
        Self {
            config,
            square: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], names: &[String]) -> Result<()> {
        check(params, grads, names, self.square.len())?;
        let RmsPropConfig { lr, alpha, eps } = self.config;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let s = &mut self.square[i];
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                s[j] = alpha * s[j] + (1.0 - alpha) * gj * gj;
                *w -= lr * gj / (s[j].sqrt() + eps);
            }
        }
        Ok(())
    }
}

fn check(params: &[Tensor], grads: &[Tensor], names: &[String], slots: usize) -> Result<()> {
    if params.len() != grads.len() || params.len() != slots {
        return Err(TensorError::shape(
            "optimizer",
            format!(
                "{} parameters, {} gradients, {} state slots",
                params.len(),
                grads.len(),
                slots
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let name = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
        if p.shape() != g.shape() {
            return Err(TensorError::shape(
                "optimizer",
                format!("gradient for {name} has shape {:?}, parameter {:?}", g.shape(), p.shape()),
            ));
        }
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFiniteGradient(name));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Adam(AdamConfig),
    RmsProp(RmsPropConfig),
}

impl OptimizerConfig {
    pub fn build(&self, params: &[Tensor]) -> Optimizer {
        match self {
            OptimizerConfig::Adam(c) => Optimizer::Adam(Adam::new(*c, params)),
            OptimizerConfig::RmsProp(c) => Optimizer::RmsProp(RmsProp::new(*c, params)),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Optimizer {
    Adam(Adam),
    RmsProp(RmsProp),
}

impl Optimizer {
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], names: &[String]) -> Result<()> {
        match self {
            Optimizer::Adam(o) => o.step(params, grads, names),
            Optimizer::RmsProp(o) => o.step(params, grads, names),
        }
    }
}
