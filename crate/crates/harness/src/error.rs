use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] sparsetune_core::Error),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{path}:{line}: {msg}")]
    Data { path: PathBuf, line: usize, msg: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("missing {artifact}; run `{step}` first")]
    Dependency { step: &'static str, artifact: PathBuf },

    #[error("{artifact} was produced under a different configuration: {detail}")]
    Stale { artifact: PathBuf, detail: String },

    #[error("malformed {what}: {msg}")]
    Format { what: String, msg: String },
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

pub(crate) fn io<T>(path: impl Into<PathBuf>, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|source| HarnessError::Io { path: path.into(), source })
}

pub(crate) fn format_err(what: impl Into<String>, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Format { what: what.into(), msg: e.to_string() }
}
