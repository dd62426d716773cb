use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, SconeError>;

#[derive(Debug, Error)]
pub enum SconeError {
    /// Operand shapes do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A configuration or argument value is out of its admissible range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A value lies outside the domain of a transform or loss.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("training failed at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },

    /// A statistic or fit has no defined value for this input.
    #[error("undefined: {0}")]
    Undefined(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("no clustering with {target} communities found across the resolution sweep")]
    NoValidClustering { target: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint format: {0}")]
    Format(String),
}

impl SconeError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SconeError::Io {
            path: path.into(),
            source,
        }
    }
}
