use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] fbcc_core::Error),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Usage(String),

    /// A run finished but broke one of its own guarantees.
    #[error("assertion failed: {0}")]
    Assertion(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 1 for broken invariants and failed assertions, 2 for usage, config
    /// and I/O problems.
    pub fn exit_code(&self) -> u8 {
        use fbcc_core::Error as E;
        match self {
            CliError::Assertion(_) => 1,
            CliError::Usage(_) | CliError::Io { .. } | CliError::Json(_) => 2,
            CliError::Core(e) => match e {
                E::Config(_) | E::Format(_) | E::Io(_) | E::Json(_) | E::Generation(_) => 2,
                _ => 1,
            },
        }
    }
}
