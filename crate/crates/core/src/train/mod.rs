//! Optimization: Adam and the fold-wise training loop.

pub mod adam;
pub mod trainer;

pub use adam::{adam_step, AdamState};
pub use trainer::{
    check_normalization, epoch_checkpoint_name, fold_dir, FoldOutcome, FoldSplit, FoldState, LogRow, TrainConfig,
    Trainer, BEST_CHECKPOINT, LAST_CHECKPOINT, LOG_FILE, LOG_HEADER,
};
