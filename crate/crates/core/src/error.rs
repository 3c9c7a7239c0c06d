use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    NotFound(PathBuf),

    #[error("cannot decode image: {0}")]
    Decode(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{what} = {value} is outside [{min}, {max}]")]
    OutOfRange {
        what: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("defocus kernel size must be odd, got {0}")]
    EvenKernel(u32),

    #[error("perspective corners form a degenerate or non-convex quadrilateral")]
    DegenerateQuad,

    #[error("class folder `{0}` contains no images")]
    EmptyClass(String),

    #[error("test class `{0}` has no training folder")]
    UnknownTestClass(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("mask record does not match the batch: {0}")]
    StaleMask(String),

    #[error("non-finite gradient in `{layer}`")]
    NonFiniteGradient { layer: String },

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: u64, loss: f64 },

    #[error("split `{0}` has no items")]
    EmptySplit(&'static str),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn out_of_range(what: &'static str, value: f64, min: f64, max: f64) -> Self {
        Error::OutOfRange {
            what,
            value,
            min,
            max,
        }
    }

    /// Whether the error stems from user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::OutOfRange { .. }
                | Error::EvenKernel(_)
                | Error::DegenerateQuad
                | Error::EmptyClass(_)
                | Error::UnknownTestClass(_)
                | Error::Config(_)
                | Error::EmptySplit(_)
                | Error::NotFound(_)
        )
    }
}

/// Bounds are compared at `f32` precision, the precision of every checked value.
pub(crate) fn check_range(what: &'static str, value: f64, min: f64, max: f64) -> Result<()> {
    let v = value as f32;
    if v.is_finite() && v >= min as f32 && v <= max as f32 {
        Ok(())
    } else {
        Err(Error::out_of_range(what, value, min, max))
    }
}
