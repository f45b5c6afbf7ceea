use thiserror::Error;

use crate::volgrid::Dims;

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid dimensions must be positive, got {0:?}")]
    DegenerateDims(Dims),

    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimMismatch { expected: Dims, found: Dims },

    #[error("{what}: expected {expected} elements, found {found}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite loss {loss} at instance-optimization iteration {iteration}")]
    NumericalFailure { iteration: usize, loss: f64 },

    #[error("landmark pair {index} lies outside the grid")]
    LandmarkOutOfBounds { index: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),
}

pub type Result<T> = std::result::Result<T, Error>;
