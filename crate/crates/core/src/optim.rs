//! First-order optimizers over named parameter tensors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tensor::{Result, Tensor, TensorError};

/// Parameters (or gradients) keyed by a stable name.
pub type NamedTensors = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    config: OptimizerConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        if !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) {
            return Err(TensorError::Contract(format!(
                "learning rate must be positive, got {}",
                config.learning_rate
            )));
        }
        Ok(Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that has a gradient.
    ///
    /// All shapes are validated before any parameter is touched.
    pub fn step(&mut self, params: &mut NamedTensors, grads: &NamedTensors) -> Result<()> {
        for (name, g) in grads {
            let p = params.get(name).ok_or_else(|| {
                TensorError::Contract(format!("gradient for unknown parameter `{name}`"))
            })?;
            if p.shape() != g.shape() {
                return Err(TensorError::Dimension {
                    op: "optimizer_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let lr = self.config.learning_rate;
        match self.config.kind {
            OptimizerKind::Sgd => {
                for (name, g) in grads {
                    let p = params.get_mut(name).expect("checked above");
                    for (w, gi) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * gi;
                    }
                }
            }
            OptimizerKind::Adam => {
                let OptimizerConfig {
                    beta1, beta2, epsilon, ..
                } = self.config;
                let t = self.step as i32;
                let correction1 = 1.0 - beta1.powi(t);
                let correction2 = 1.0 - beta2.powi(t);
                for (name, g) in grads {
                    let p = params.get_mut(name).expect("checked above");
                    let m = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                        first: vec![0.0; g.len()],
                        second: vec![0.0; g.len()],
                    });
                    for (((w, &gi), m1), m2) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.first.iter_mut())
                        .zip(m.second.iter_mut())
                    {
                        *m1 = beta1 * *m1 + (1.0 - beta1) * gi;
                        *m2 = beta2 * *m2 + (1.0 - beta2) * gi * gi;
                        let m_hat = *m1 / correction1;
                        let v_hat = *m2 / correction2;
                        *w -= lr * m_hat / (v_hat.sqrt() + epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}
