use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("model mode error: {0}")]
    Mode(String),
    #[error("provenance mismatch: {0}")]
    Provenance(String),
    #[error("missing dependency `{key}`: {detail}")]
    MissingDependency { key: String, detail: String },
    #[error("training diverged at iteration {iteration} (state dumped to {dump})", dump = .dump.display())]
    Divergence { iteration: usize, dump: PathBuf },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("malformed file {path}: {reason}", path = .path.display())]
    Format { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}", path = .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }

    /// Errors caused by the caller's configuration or missing upstream
    /// artifacts, as opposed to failures while doing the work.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Parameter(_) | Error::Config(_) | Error::MissingDependency { .. } | Error::Mode(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
