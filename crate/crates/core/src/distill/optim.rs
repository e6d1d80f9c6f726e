use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{NeuralDraftModel, ParameterGradient};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { kind: OptimizerKind::Adam, lr: 1e-2, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("moment decay rates must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("eps must be positive"));
        }
        Ok(())
    }
}

/// Moment estimates carried between optimizer steps.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    config: OptimizerConfig,
    step: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig) -> Self {
        Self { config, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One descent step on a raw parameter slice.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != grad.len() {
            return Err(Error::ShapeMismatch(format!("{} parameters, {} gradients", params.len(), grad.len())));
        }
        if self.first.is_empty() {
            self.first = vec![0.0; params.len()];
            self.second = vec![0.0; params.len()];
        } else if self.first.len() != params.len() {
            return Err(Error::ShapeMismatch("optimizer state belongs to a different model".into()));
        }
        self.step += 1;
        let c = self.config;
        match c.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= c.lr * g;
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let bc1 = 1.0 - c.beta1.powi(t);
                let bc2 = 1.0 - c.beta2.powi(t);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.first[i] = c.beta1 * self.first[i] + (1.0 - c.beta1) * g;
                    self.second[i] = c.beta2 * self.second[i] + (1.0 - c.beta2) * g * g;
                    let m_hat = self.first[i] / bc1;
                    let v_hat = self.second[i] / bc2;
                    params[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
                }
            }
        }
        Ok(())
    }
}

/// Applies one optimizer step to `draft`.
pub fn apply_update(draft: &mut NeuralDraftModel, gradient: &ParameterGradient, state: &mut OptimizerState) -> Result<()> {
    if gradient.shape() != draft.shape() {
        return Err(Error::ShapeMismatch("gradient shape differs from the draft".into()));
    }
    state.step(draft.params_mut(), gradient.values())
}
