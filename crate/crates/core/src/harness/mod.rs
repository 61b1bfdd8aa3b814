//! Training, evaluation, checkpoints and experiment configuration.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod suites;
pub mod train;

pub use checkpoint::{Checkpoint, RngState};
pub use config::{ExperimentConfig, Metric};
pub use eval::{dump_attention, evaluate, EvalReport, EvalSpec};
pub use train::{resume, train, Model, RealBatch, StepRecord, TrainOutcome, Trainer};
