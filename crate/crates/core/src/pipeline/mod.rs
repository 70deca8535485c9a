//! The two-phase experiment pipeline: reconstruction pretraining,
//! segmentation fine-tuning, parameter transfer, and checkpointing.

pub mod checkpoint;
pub mod config;
pub mod train;

pub use checkpoint::{load_optimizer, snapshot, transfer, Checkpoint, CheckpointError};
pub use config::{ConfigError, Phase, RunConfig};
pub use train::{
    derive_seed, finetune_seg, pretrain_mr, validation_loss_mr, validation_loss_seg, write_history_csv,
    EpochRecord, Init, ResumeState, TrainError, TrainOutcome,
};
