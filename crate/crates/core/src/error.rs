use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure modes surfaced by the library.
///
/// The CLI maps the variants onto process exit codes, so the grouping matters:
/// usage problems, infeasible configurations and numerical failures are kept
/// apart.
#[derive(Debug, Error)]
pub enum Error {
    #[error("usage error: {0}")]
    Usage(String),

    /// The alignment grid is too short for the target.
    #[error("infeasible alignment: {positions} positions cannot emit a target needing {required}")]
    InfeasibleAlignment { positions: usize, required: usize },

    /// A dataset sample cannot be aligned with the configured number of queries.
    #[error("infeasible config: sample {index} of split `{split}` needs {required} queries but only {available} are configured")]
    InfeasibleSample {
        split: String,
        index: usize,
        required: usize,
        available: usize,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// True for the two infeasibility variants.
    pub fn is_infeasible(&self) -> bool {
        matches!(
            self,
            Error::InfeasibleAlignment { .. } | Error::InfeasibleSample { .. }
        )
    }
}
