//! Desk-scale training: optimizers, toy models, datasets, simulated
//! low-precision matmuls, loss scaling, and the reparameterisation checks.

mod data;
mod model;
mod optim;
mod reparam;
mod run;

pub use data::{DataConfig, Dataset};
pub use model::{
    build_unit_ffn, flop_overhead, lr_compensation, Init, ModelConfig, NormPlacement, ParamInfo, ParamKind, Pass,
    Record, Role, ToyModel,
};
pub use optim::{adam_step, sgd_step, OptimState, OptimizerConfig};
pub use reparam::{adam_equivalence_check, adam_trajectory_deviation, random_two_layer, sgd_reparam_check};
pub use run::{
    train_loop, HistRecord, PrecisionConfig, StatRecord, StepRecord, TrainConfig, TrainReport, DIVERGENCE_STEPS,
};

use crate::floatsim::FloatError;
use crate::graph::GraphError;
use crate::opslib::OpsError;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("parameter {param}: shape does not match its optimizer buffer")]
    ShapeMismatch { param: usize },
    #[error("parameter {param}: non-finite gradient")]
    NonFiniteGradient { param: usize },
    #[error("adam equivalence needs eps = 0, got {0}")]
    NonZeroEpsilon(f64),
    #[error("diverged at step {step}: loss non-finite for {DIVERGENCE_STEPS} consecutive steps")]
    Diverged { step: usize, report: Box<TrainReport> },
    #[error(transparent)]
    Format(#[from] FloatError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Ops(#[from] OpsError),
}
