use std::path::PathBuf;

use thiserror::Error;

/// Errors of the file-format and command layer.
#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] promptseg_core::Error),
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Load { path: PathBuf, message: String },
    #[error("{0}")]
    Format(String),
    #[error("{0}")]
    Check(String),
}

impl CliError {
    /// Machine-readable category printed as `error[<category>]`.
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.category(),
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::Load { .. } => "load",
            CliError::Format(_) => "format",
            CliError::Check(_) => "check",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn load(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        CliError::Load {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
