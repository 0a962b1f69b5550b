use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed file content; `location` is `line N` or `offset N`.
    #[error("{path}: {location}: {detail}")]
    Format { path: PathBuf, location: String, detail: String },

    #[error("{0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] vpn_core::Error),
}

impl Error {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io { path: path.to_path_buf(), source }
    }

    pub(crate) fn at_line(path: &Path, line: usize, detail: impl Into<String>) -> Self {
        Error::Format { path: path.to_path_buf(), location: format!("line {line}"), detail: detail.into() }
    }

    pub(crate) fn at_offset(path: &Path, offset: usize, detail: impl Into<String>) -> Self {
        Error::Format { path: path.to_path_buf(), location: format!("offset {offset}"), detail: detail.into() }
    }

    /// Short machine-readable category used on the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Config(_) => "config",
            Error::Core(vpn_core::Error::Config(_)) => "config",
            Error::Core(vpn_core::Error::Data(_)) => "data",
            Error::Core(_) => "compute",
        }
    }
}
