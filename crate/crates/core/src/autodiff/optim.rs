//! Gradient clipping and first-order update rules.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::params::{GradRecord, ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Parse(format!("unknown optimizer `{other}`"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr,
            ..Default::default()
        }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr,
            ..Default::default()
        }
    }
}

/// Stateful optimizer. Adam moments are keyed by parameter and created lazily.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    moments: HashMap<ParamId, (Vec<f64>, Vec<f64>)>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer {
            config,
            moments: HashMap::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update at the configured learning rate.
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradRecord) -> Result<()> {
        let lr = self.config.lr;
        self.step_with_lr(params, grads, lr)
    }

    /// Applies one update; parameters in frozen groups are skipped.
    pub fn step_with_lr(&mut self, params: &mut ParamStore, grads: &GradRecord, lr: f64) -> Result<()> {
        for (id, g) in grads.iter() {
            if id.index() >= params.len() {
                return Err(Error::InvalidArgument(format!("gradient for unknown parameter #{}", id.index())));
            }
            if params.tensor(id).shape() != g.shape() {
                return Err(Error::shape(
                    "optimizer_step",
                    format!(
                        "`{}` is {:?}, gradient is {:?}",
                        params.name(id),
                        params.tensor(id).shape(),
                        g.shape()
                    ),
                ));
            }
        }
        self.steps += 1;
        let OptimizerConfig { beta1, beta2, eps, .. } = self.config;
        let t = self.steps as i32;
        let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
        for (id, g) in grads.iter() {
            if !params.is_trainable(id) {
                continue;
            }
            let p = params.tensor_mut(id).data_mut();
            match self.config.kind {
                OptimizerKind::Sgd => {
                    for (pi, gi) in p.iter_mut().zip(g.data()) {
                        *pi -= lr * gi;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = self
                        .moments
                        .entry(id)
                        .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
                    for (((pi, gi), mi), vi) in p.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        let mhat = *mi / c1;
                        let vhat = *vi / c2;
                        *pi -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradient_norm(grads: &mut GradRecord, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

/// Clamps every gradient entry to `[-limit, limit]`.
pub fn clip_gradient_value(grads: &mut GradRecord, limit: f64) {
    for (_, g) in grads.iter_mut() {
        g.data_mut().iter_mut().for_each(|v| *v = v.clamp(-limit, limit));
    }
}
