//! SGD and Adam with per-tensor step-size multipliers.

use super::TrainError;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default)]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig::Sgd { lr, momentum: 0.0 }
    }

    /// Adam with `ε = 0`, under which it is invariant to per-tensor
    /// gradient rescaling.
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 0.0 }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |what: &str, v: f64| Err(TrainError::InvalidConfig(format!("optimizer {what} out of range: {v}")));
        match *self {
            OptimizerConfig::Sgd { lr, momentum } => {
                if !(lr >= 0.0 && lr.is_finite()) {
                    return bad("lr", lr);
                }
                if !(0.0..1.0).contains(&momentum) {
                    return bad("momentum", momentum);
                }
            }
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                if !(lr >= 0.0 && lr.is_finite()) {
                    return bad("lr", lr);
                }
                if !(0.0..1.0).contains(&beta1) {
                    return bad("beta1", beta1);
                }
                if !(0.0..1.0).contains(&beta2) {
                    return bad("beta2", beta2);
                }
                if !(eps >= 0.0 && eps.is_finite()) {
                    return bad("eps", eps);
                }
            }
        }
        Ok(())
    }
}

/// Optimizer buffers for a fixed list of parameter tensors.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub config: OptimizerConfig,
    /// Completed steps; Adam's bias correction uses `step + 1`.
    pub step: u64,
    /// SGD momentum or Adam first moment.
    first: Vec<Tensor>,
    /// Adam second moment.
    second: Vec<Tensor>,
    /// Per-tensor step-size multipliers.
    pub multipliers: Vec<f64>,
}

impl OptimState {
    pub fn new(config: OptimizerConfig, params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        let second = match config {
            OptimizerConfig::Adam { .. } => zeros.clone(),
            OptimizerConfig::Sgd { .. } => vec![],
        };
        Self { config, step: 0, first: zeros, second, multipliers: vec![1.0; params.len()] }
    }

    pub fn with_multipliers(mut self, m: Vec<f64>) -> Result<Self, TrainError> {
        if m.len() != self.first.len() {
            return Err(TrainError::InvalidConfig(format!(
                "{} multipliers for {} parameters",
                m.len(),
                self.first.len()
            )));
        }
        self.multipliers = m;
        Ok(self)
    }

    fn check(&self, params: &[Tensor], grads: &[Tensor]) -> Result<(), TrainError> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(TrainError::InvalidConfig(format!(
                "optimizer holds {} buffers, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, ((p, g), b)) in params.iter().zip(grads).zip(&self.first).enumerate() {
            if p.shape() != b.shape() || g.shape() != b.shape() {
                return Err(TrainError::ShapeMismatch { param: i });
            }
        }
        if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
            return Err(TrainError::NonFiniteGradient { param: i });
        }
        Ok(())
    }

    /// One update in place. On error nothing is modified.
    pub fn apply(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<(), TrainError> {
        self.check(params, grads)?;
        match self.config {
            OptimizerConfig::Sgd { lr, momentum } => {
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let eta = lr * self.multipliers[i];
                    let v = self.first[i].data_mut();
                    for ((pj, &gj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(v) {
                        *vj = momentum * *vj + gj;
                        *pj -= eta * *vj;
                    }
                }
            }
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                let t = (self.step + 1) as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let eta = lr * self.multipliers[i];
                    let m = self.first[i].data_mut();
                    let v = self.second[i].data_mut();
                    for (((pj, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                        *mj = beta1 * *mj + (1.0 - beta1) * gj;
                        *vj = beta2 * *vj + (1.0 - beta2) * gj * gj;
                        let denom = (*vj / c2).sqrt() + eps;
                        // A zero second moment implies a zero first moment.
                        if denom > 0.0 {
                            *pj -= eta * (*mj / c1) / denom;
                        }
                    }
                }
            }
        }
        self.step += 1;
        Ok(())
    }
}

/// One SGD step. `state` must hold an SGD configuration.
pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], state: &mut OptimState) -> Result<(), TrainError> {
    if !matches!(state.config, OptimizerConfig::Sgd { .. }) {
        return Err(TrainError::InvalidConfig("sgd_step needs an SGD state".into()));
    }
    state.apply(params, grads)
}

/// One Adam step. `state` must hold an Adam configuration.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut OptimState) -> Result<(), TrainError> {
    if !matches!(state.config, OptimizerConfig::Adam { .. }) {
        return Err(TrainError::InvalidConfig("adam_step needs an Adam state".into()));
    }
    state.apply(params, grads)
}
