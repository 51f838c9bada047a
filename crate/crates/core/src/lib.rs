//! Multi-path transformer (MPT) speech denoising at desk scale.
//!
//! The crate covers the whole pipeline: a small reverse-mode autodiff engine
//! ([`tensor`]), STFT/Mel/WAV utilities ([`dsp`]), the network building
//! blocks ([`layers`]) and their assembly ([`model`]), closed-form MACs and
//! parameter accounting with a budget planner ([`complexity`]), metrics and
//! the log-linear scaling fit ([`eval`]), and synthetic-data training plus
//! the scaling experiment driver ([`pipeline`]).

pub mod complexity;
pub mod dsp;
pub mod eval;
pub mod layers;
pub mod model;
pub mod pipeline;
pub mod tensor;

use thiserror::Error;

pub use tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("infeasible budget: {0}")]
    Infeasible(String),
    #[error("malformed data: {0}")]
    Format(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the filesystem or stream layer.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
