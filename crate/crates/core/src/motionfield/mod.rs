//! Hash-grid velocity field: encoding, regressor, training and checkpoints.

mod checkpoint;
mod config;
mod encoding;
mod field;
mod train;

use thiserror::Error;

pub use checkpoint::{
    read_checkpoint, write_checkpoint, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{fit_normalization, FieldConfig, HashEncodingConfig, NormalizationBox, MIN_HALF_EXTENT};
pub use encoding::{hash_index, spatial_hash, LevelCorners};
pub use field::{LayerSlot, MotionField, ParamLayout, EMBEDDING_INIT_RANGE};
pub use train::{TrainOptions, TrainReport, LOSS_NORMALIZATION};

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("invalid field configuration: {0}")]
    InvalidConfig(String),
    #[error("no flow samples to fit")]
    EmptySamples,
    #[error("sample {index} is not finite")]
    NonFiniteSample { index: usize },
    #[error("loss became non-finite at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("{positions} positions but {targets} targets")]
    LengthMismatch { positions: usize, targets: usize },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}
