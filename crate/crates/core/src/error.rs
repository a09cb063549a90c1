use thiserror::Error;

use crate::tape::TapeError;
use crate::tensor::ShapeError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite {what}")]
    NonFinite { what: String },
    #[error("non-finite ELBO (logpx={logpx}, logpz={logpz}, logqz={logqz})")]
    NonFiniteElbo { logpx: f64, logpz: f64, logqz: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
