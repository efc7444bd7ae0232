//! Projection heads trained with a symmetric contrastive loss.
//!
//! The encoders stay frozen; only the two bias-free heads that map base
//! vectors into the shared space are learned.

mod heads;
mod loss;
mod schedule;
mod train;

use thiserror::Error;

pub(crate) use heads::gaussian;
pub use heads::{cosine_sim, normalize, ProjectionHeads, HEADS_FORMAT};
pub use loss::{contrastive_loss, loss_gradients, Contrastive, Gradients, LossValue, TrainingBatch};
pub use schedule::lr_at_step;
pub use train::{
    dataset_loss, train, train_pairs, BaseEmbeddings, EpochRecord, OptimizerKind, PairSet, Schedule, StepRecord,
    TrainConfig, TrainOutcome, TrainingHistory,
};

#[derive(Debug, Error)]
pub enum AssociateError {
    #[error("shape: {0}")]
    Shape(String),
    #[error("batch needs at least two pairs, got {0}")]
    BatchTooSmall(usize),
    #[error("degenerate projection: {0}")]
    Degenerate(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("config: {0}")]
    Config(String),
    #[error("schedule: {0}")]
    Schedule(String),
    #[error("missing base embeddings for: {}", .0.join(", "))]
    MissingEmbeddings(Vec<String>),
    #[error("catalog: {0}")]
    Catalog(String),
    #[error("training diverged at step {step}: {reason}")]
    Diverged {
        step: usize,
        reason: String,
        last_good: Box<ProjectionHeads>,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
