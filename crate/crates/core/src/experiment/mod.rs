//! Experiment runner: configuration, checkpoints and the command
//! implementations behind the `tenvoo` binary.
//!
//! Training draws all randomness for optimizer step `k` from a generator
//! seeded by `(training.seed, k)`, so a run resumed from a checkpoint takes
//! exactly the steps an uninterrupted run would.

mod checkpoint;
mod commands;
mod config;

pub use checkpoint::{
    read_index, BlobRef, Checkpoint, CheckpointIndex, OptimizerMeta, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use commands::*;
pub use config::{
    DataConfig, DiffusionConfig, ExperimentConfig, OptimizerKind, SamplingConfig, TrainingConfig,
};

use crate::autodiff::{Adam, Gradients, Optimizer, Parameterized, Sgd};
use crate::error::Result;

/// The optimizers a run can use, with their state.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainerOptimizer {
    Adam(Adam),
    Sgd(Sgd),
}

impl TrainerOptimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        match kind {
            OptimizerKind::Adam => Self::Adam(Adam::new(lr)),
            OptimizerKind::Sgd => Self::Sgd(Sgd::new(lr)),
        }
    }
}

impl Optimizer for TrainerOptimizer {
    fn step(&mut self, model: &mut dyn Parameterized, grads: &Gradients) -> Result<()> {
        match self {
            Self::Adam(o) => o.step(model, grads),
            Self::Sgd(o) => o.step(model, grads),
        }
    }

    fn learning_rate(&self) -> f64 {
        match self {
            Self::Adam(o) => o.learning_rate(),
            Self::Sgd(o) => o.learning_rate(),
        }
    }
}

#[cfg(test)]
mod tests;

/// Published JSON schemas, by file stem.
pub fn schemas() -> Vec<(&'static str, serde_json::Value)> {
    let v = |s: schemars::schema::RootSchema| serde_json::to_value(s).expect("schema serializes");
    vec![
        ("config", v(schemars::schema_for!(ExperimentConfig))),
        ("eval_report", v(schemars::schema_for!(EvalSummary))),
        ("manifest", v(schemars::schema_for!(Manifest))),
    ]
}
