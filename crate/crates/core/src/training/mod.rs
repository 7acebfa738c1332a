//! Losses, optimizer, schedules, folds and the training loop.

pub mod config;
pub mod folds;
pub mod loss;
pub mod optim;
pub mod trainer;

pub use config::{BatchSize, Preset, TrainConfig};
pub use folds::{make_folds, FoldSplit};
pub use loss::{
    apply_l2, deep_supervision_loss, deep_supervision_weights, dice_ce_loss, l2_penalty, LabelBatch,
};
pub use optim::{cosine_lr, Adam, AdamParams, LrSchedule};
pub use trainer::{
    arch_for_training, batch_loss, draw_batch, train, train_step, validate, Batch, EpochRecord, TrainHistory,
    TrainSetup, TrainingCase,
};
