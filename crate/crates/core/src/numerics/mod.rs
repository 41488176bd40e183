//! Dense `f64` tensors, reverse-mode differentiation, transformer layers,
//! and the AdamW / warm-up-cosine / gradient-clipping machinery.

mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod layers;
mod optim;
mod parallel;
mod params;
mod tensor;

use thiserror::Error;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    CHECKPOINT_VERSION,
};
pub use graph::{softmax, Graph, RowRef, Var};
pub use optim::{adamw_step, clip_grad_norm, global_grad_norm, lr_at_step, AdamWConfig, LrSchedule, OptimizerState};
pub use parallel::parallel_map;
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("model width {dim} is not divisible by {heads} heads")]
    Heads { dim: usize, heads: usize },
    #[error("sequence length {len} is not divisible by stride {stride}")]
    Stride { len: usize, stride: usize },
    #[error("target index {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("non-finite gradient for parameter {0}")]
    NanGradient(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o: {0}")]
    Io(String),
}
