//! Small deterministic neural-network engine: the nine layer kinds needed by
//! the base learners and the meta head, binary/categorical cross-entropy,
//! Adam, and a checksummed checkpoint format.

mod adam;
pub mod checkpoint;
mod graph;
mod loss;
pub mod ops;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use graph::{ForwardCache, GraphBuilder, Gradients, LayerSpec, Mode, ModelGraph, Node, Param, RunningStats, Source};
pub use loss::{loss, LossKind, PROB_CLAMP};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("concatenated operands differ in spatial size: {0}")]
    ConcatSpatialMismatch(String),
    #[error("batch normalization needs at least 2 samples in train mode, got {0}")]
    BatchTooSmall(usize),
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("gradient mismatch: {0}")]
    GradientMismatch(String),
}
