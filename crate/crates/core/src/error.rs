use std::path::PathBuf;

/// Errors produced anywhere in the laboratory.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Input outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// Shapes or indices that do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// Invalid argument or hyperparameter.
    #[error("argument error: {0}")]
    Argument(String),
    /// Dataset content incompatible with the requested operation.
    #[error("data error: {0}")]
    Data(String),
    /// Iterative solver failed to converge or produced non-finite values.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Combination of loss family and rating law without a closed form.
    #[error("unsupported combination: {0}")]
    Unsupported(String),
    /// Malformed input document.
    #[error("schema error: {0}")]
    Schema(String),
    /// Gradient descent hit a non-finite loss or gradient.
    #[error("training aborted at step {step}: {reason}")]
    Training { step: usize, reason: String },
    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Schema(_)
            | Error::Argument(_)
            | Error::Data(_)
            | Error::Dimension(_)
            | Error::Domain(_)
            | Error::Unsupported(_) => 2,
            Error::Numeric(_) | Error::Training { .. } => 3,
            Error::Io { .. } => 4,
        }
    }
}
