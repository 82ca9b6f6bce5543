use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("{path}:{line}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("construction error: {0}")]
    Construction(String),

    #[error(
        "ADMM failed to reach a positive-definite iterate after {iterations} iterations \
         (primal residual {primal:.3e}, dual residual {dual:.3e})"
    )]
    Convergence {
        iterations: usize,
        primal: f64,
        dual: f64,
    },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("sampler produced a non-finite state at step {step}")]
    Sampler { step: usize },

    #[error("training diverged at epoch {epoch}")]
    Training { epoch: usize },

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("outer iteration {iteration}: {source}")]
    OuterIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a failed computation.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Argument(_)
            | Error::Format { .. }
            | Error::Validation(_)
            | Error::Config(_)
            | Error::Io { .. }
            | Error::Json { .. } => true,
            Error::OuterIteration { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}
