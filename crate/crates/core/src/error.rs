use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An operation was requested in a mode the object does not support,
    /// e.g. exact interim quantities on a mechanism without a table.
    #[error("unsupported mode: {0}")]
    UnsupportedMode(String),

    #[error("{context}: no convergence after {iterations} iterations (residual {residual:.3e})")]
    ConvergenceFailure {
        context: String,
        iterations: usize,
        residual: f64,
    },

    #[error("configuration error: {0}")]
    Configuration(String),

    /// A property the algorithms guarantee by construction failed to hold.
    /// Seeing this is a bug signal, not a user error.
    #[error("internal invariant violated: {0}")]
    InternalInvariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
