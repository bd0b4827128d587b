use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Error, Debug)]
pub enum Error {
    /// Input data violates an operation's precondition (empty signal, silent reference, ...).
    #[error("rejected input: {0}")]
    InvalidInput(String),
    /// Inconsistent or invalid configuration, including shape mismatches against parameters.
    #[error("config error: {0}")]
    Config(String),
    /// An index or count outside the valid range of a schedule.
    #[error("domain error: {0}")]
    Domain(String),
    /// Non-finite values where finite ones are required; names the offending quantity.
    #[error("numeric error in {component}: {detail}")]
    Numeric { component: String, detail: String },
    #[error("I/O error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("WAV error at {}: {source}", path.display())]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("parse error in {}: {detail}", path.display())]
    Parse { path: PathBuf, detail: String },
    /// Training produced a non-finite loss. The last finite checkpoint, if any, is kept.
    #[error("training diverged at step {step}; last good checkpoint: {last_good:?}")]
    Diverged {
        step: u64,
        last_good: Option<PathBuf>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn numeric(component: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            component: component.into(),
            detail: detail.into(),
        }
    }

    /// Whether the error stems from user-supplied configuration rather than runtime state.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Domain(_))
    }
}
