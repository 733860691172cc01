//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Model or task configuration violates an invariant.
    #[error("configuration error: {0}")]
    Config(String),

    /// A tensor or dataset had an unexpected shape or size.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A non-finite value appeared during a forward or backward pass.
    #[error("non-finite value in {context} (layer {layer:?})")]
    NonFinite {
        context: &'static str,
        layer: Option<usize>,
    },

    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}, step {step}: loss is not finite")]
    Diverged { epoch: usize, step: usize },

    /// The calibration sample is too small to be trustworthy.
    #[error("calibration set has {got} observations, need at least {min}")]
    CalibrationTooSmall { got: usize, min: usize },

    /// An aggregation was asked to operate on an empty input.
    #[error("empty input: {0}")]
    Empty(&'static str),

    /// The baseline masking curve is too flat to normalize against.
    #[error("undefined normalizer: baseline curve area {0:.3e} is below tolerance")]
    UndefinedNormalizer(f64),

    /// Two curves were combined despite having different ratio grids.
    #[error("ratio grid mismatch between curves")]
    GridMismatch,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A serialized artifact could not be decoded.
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
