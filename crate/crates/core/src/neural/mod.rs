//! A small token-wise network with hand-written backpropagation.
//!
//! Each position is processed independently from the current and previous
//! token, so the hidden state at every layer is a per-token representation.

pub mod adam;
pub mod adapter;
pub mod loss;
pub mod model;

pub use adam::AdamState;
pub use adapter::{attach_adapter, AdapterState};
pub use loss::{loss_and_grads, loss_value, LossSpec};
pub use model::{argmax, ForwardTrace, Layout, Model, ModelSpec};

use crate::param_store::StoreError;

#[derive(Debug, thiserror::Error)]
pub enum NeuralError {
    #[error("invalid model configuration: {0}")]
    InvalidSpec(String),
    #[error("token {token} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("empty batch")]
    EmptyBatch,
    #[error("loss is not finite ({0})")]
    NonFiniteLoss(f64),
    #[error("unknown adapter target {0:?}")]
    UnknownTarget(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}
