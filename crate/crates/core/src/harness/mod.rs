//! Training, evaluation, checkpoints and metrics.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod model;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{RouterInput, TrainConfig};
pub use eval::{
    count_active_experts, export_attention, linear_probe, run_inference, zero_shot_eval, InferenceSummary, PromptTable,
    ProbeReport, ZeroShotReport,
};
pub use model::{LossConfig, Model, ModelConfig};
pub use train::{init_model, train, train_on, StepRecord, TrainOutcome};
