//! Optimizers, schedules, checkpointing, and training orchestration.

mod checkpoint;
mod config;
mod optim;
mod run;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, TrainProgress, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use config::{LossKind, OptimKind, PipelineConfig, SchedKind, TrainConfig};
pub use optim::{adamw_step, sgd_momentum_step, step_lr, Optimizer};
pub use run::{
    finetune, model_from_checkpoint, probe, transfer_with_optimizers, LogLine, TrainingRun,
    TransferOutcome,
};
