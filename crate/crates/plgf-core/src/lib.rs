//! Fine-grained urban flow inference at desk scale.
//!
//! This crate implements the PLGF network (progressive local-global fusion
//! with context conditioning and a density-based, mass-conserving output
//! head), the DualFocal loss for skewed flow regression, the three standard
//! flow metrics, a synthetic long-tail dataset generator, and a training
//! harness with checkpointing, ablation switches, and loss-swap experiments.
//!
//! Everything runs on a small reverse-mode autodiff tape over `ndarray`,
//! generic over `f32`/`f64` so analytic gradients can be cross-checked
//! against central finite differences in 64-bit.

pub mod autodiff;
pub mod context;
pub mod data;
pub mod grid;
pub mod loss;
pub mod model;
pub mod nn;
pub mod plots;
pub mod train;

pub use grid::{FlowMap, GridRelation, MapeMode, MetricReport};

use thiserror::Error;

/// Error type for every fallible public operation in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {actual}{context}")]
    ShapeMismatch {
        expected: String,
        actual: String,
        context: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("undefined derivative: {0}")]
    UndefinedDerivative(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            expected: expected.into(),
            actual: actual.into(),
            context: String::new(),
        }
    }

    /// Stable machine-readable tag, used by the CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::InvalidInput(_) => "invalid_input",
            Error::Config(_) => "config",
            Error::Dataset(_) => "dataset",
            Error::Checkpoint(_) => "checkpoint",
            Error::NonFinite { .. } => "non_finite",
            Error::UndefinedDerivative(_) => "undefined_derivative",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
