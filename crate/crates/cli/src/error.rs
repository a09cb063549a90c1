use latentflow::data_io::DataError;
use latentflow::objectives::TrainError;
use thiserror::Error;

/// Failure of a command, carrying its process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration, bad input, or a failed check. Exit code 1.
    #[error("{0}")]
    Validation(String),
    /// Training or evaluation produced non-finite values. Exit code 2.
    #[error("{0}")]
    Diverged(String),
    /// Unreadable, unwritable or corrupt files. Exit code 3.
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Diverged(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl From<latentflow::Error> for CliError {
    fn from(e: latentflow::Error) -> Self {
        match e {
            latentflow::Error::NonFinite { .. } | latentflow::Error::NonFiniteElbo { .. } => CliError::Diverged(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Model(inner) => inner.into(),
            DataError::OutOfRange { .. } => CliError::Validation(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => CliError::Diverged(e.to_string()),
            TrainError::Model(inner) => inner.into(),
        }
    }
}

/// Attaches a path to an I/O error.
pub fn io_err(path: &std::path::Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}
