//! A small dense reverse-mode differentiation engine.
//!
//! Enough machinery for conditioned MLPs: row-major 2-D tensors, a tape of
//! recorded operations, gradients with respect to both parameters and inputs,
//! and the Adam/EMA updates used by the trainer.

mod mlp;
mod optim;
mod params;
mod tape;
mod tensor;

pub use mlp::{sinusoidal_embedding, Activation, Conditioning, Mlp, MlpSpec};
pub use optim::{ema_update, Adam, AdamConfig};
pub use params::ParamSet;
pub use tape::{NodeId, Tape};
pub use tensor::{Real, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NdError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("tape was recorded against parameter version {recorded} but parameters are at version {current}")]
    StaleTape { recorded: u64, current: u64 },
    #[error("tape was recorded against a different parameter set")]
    ForeignParams,
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("class index {index} out of range for {classes} classes")]
    BadClass { index: usize, classes: usize },
}

pub type Result<T> = std::result::Result<T, NdError>;
