//! Dense arrays, the two-head MLP, its gradients, Adam and EMA.

pub mod checkpoint;
pub mod mlp;
pub mod optim;
pub mod tensor;

use thiserror::Error;

pub use mlp::{Linear, Parameters, VelocityScoreModel, DEFAULT_HIDDEN, TIME_FEATURES};
pub use optim::{EmaState, OptimizerState};
pub use tensor::{matmul, Tensor2, Trans};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("value out of range: {0}")]
    Domain(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(String),
}
