//! Training configuration and parameter-update rules.

use serde::{Deserialize, Serialize};

use super::model::Model;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::invalid(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Optimizer state. Adam moments are allocated on the first step.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Optimizer {
            kind,
            lr: learning_rate,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn from_config(config: &TrainConfig) -> Self {
        Optimizer::new(config.optimizer, config.learning_rate)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the model's accumulated gradients, then
    /// clears them. Fails if no backward pass has run since the last step.
    pub fn step(&mut self, model: &mut Model) -> Result<()> {
        if !model.grads_ready() {
            return Err(Error::State(
                "optimizer step without gradients; run a backward pass first".into(),
            ));
        }
        self.step += 1;
        let lr = self.lr;
        match self.kind {
            OptimizerKind::Sgd => {
                for p in model.params_mut() {
                    let g = p.grad.data().to_vec();
                    for (w, g) in p.value.data_mut().iter_mut().zip(g) {
                        *w -= lr * g;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                let mut params = model.params_mut();
                if self.m.is_empty() {
                    self.m = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
                    self.v = self.m.clone();
                }
                for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
                    let g = p.grad.data().to_vec();
                    for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(g).zip(m).zip(v) {
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        model.zero_grad();
        Ok(())
    }
}
