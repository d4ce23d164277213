//! A small CPU trainer for the block-structured 1D CNNs of the search space.
//!
//! Activations are `f64`, laid out `[batch, length, channels]`. Reductions run in
//! a fixed order so a run is reproducible from its seed.

mod checkpoint;
pub mod layers;
mod metrics;
mod model;
mod tensor;
mod train;
mod weights;

use thiserror::Error;

use crate::arch::ShapeError;

pub use checkpoint::{read_weights, write_weights, CheckpointError, WEIGHTS_MAGIC, WEIGHTS_VERSION};
pub use metrics::{evaluate, predict, Metrics};
pub use model::{
    forward, loss_and_grad, softmax, softmax_cross_entropy, ForwardOutput, LossAndGrad, Mode, Network, Op,
};
pub use tensor::BatchTensor;
pub use train::{
    derive_seed, multi_start_train, multi_start_with, select_best, to_batch, train, EpochStats, TrainConfig,
    TrainOutcome,
};
pub use weights::{BlockWeights, ModelWeights, BN_EPSILON};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite activation after layer {layer} ({op})")]
    NonFiniteActivation { layer: usize, op: String },
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("dataset is empty: {0}")]
    EmptyDataset(&'static str),
    #[error("loss became non-finite at epoch {epoch}")]
    DivergedLoss { epoch: usize },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
}
