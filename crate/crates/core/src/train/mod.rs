//! Adversarial semi-supervised pretraining, fine-tuning and checkpoints.
//!
//! One pretraining iteration draws a labeled batch, an unlabeled batch and
//! a noise batch. The recognizer (feature extractor plus both heads) is
//! updated first, against its supervised terms and a real/fake signal
//! derived from the class logits. The generator is then updated to match
//! the mean recognizer features of the unlabeled images, with the
//! recognizer frozen. Each side owns its own Adam state.

mod checkpoint;
mod config;
mod data;
mod log;
mod trainer;

use thiserror::Error;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CheckpointError, CHECKPOINT_VERSION};
pub use config::{AdamSpec, BackboneSpec, Profile, TrainConfig, TrainMode};
pub use data::{LabeledPool, UnlabeledPool};
pub use log::{write_loss_csv, LossRecord};
pub use trainer::{
    finetune, finetune_observed, initial_checkpoint, pretrain_multitask, pretrain_multitask_observed, pretrain_supervised, pretrain_supervised_observed, Optimizer, TrainEvent,
    TrainRun, UpdateEvent,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("mode error: {0}")]
    Mode(String),
    /// A loss or gradient went non-finite. The checkpoint holds the
    /// weights from before the failing update.
    #[error("training diverged at step {step}: {reason}")]
    Divergence {
        step: u64,
        reason: String,
        checkpoint: Box<Checkpoint>,
        history: Vec<LossRecord>,
    },
    #[error(transparent)]
    Nn(#[from] fenestra_nn::NnError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;
