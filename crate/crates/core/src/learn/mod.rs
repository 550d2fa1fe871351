//! Losses, the optimizer, training loops, gradient checks and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod loss;
pub mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ModelKind, ModelSpec};
pub use gradcheck::{grad_check, GradCheck};
pub use loss::{l1_loss, psnr_loss};
pub use train::{
    train_car, train_hinet, CollectCheckpoints, JsonLinesLog, LogRecord, StageInput, TrainConfig, TrainObserver,
    TrainRun,
};
