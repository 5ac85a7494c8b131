//! Data ingestion, optimisation, training loops and checkpointing.

pub mod checkpoint;
pub mod dataset;
pub mod optim;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Entry};
pub use dataset::{gen_longrange, load_dataset, save_dataset, split_80_20, split_indices, Dataset};
pub use optim::{adamw_step, cosine_lr, AdamWParams, Moments, OptimizerState};
pub use train::{
    evaluate, top1_correct, train, EpochRecord, History, StepRecord, TrainConfig, Trainer,
};
