use std::path::{Path, PathBuf};

use thiserror::Error;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    /// A check (e.g. the gradient suite) ran and failed.
    pub const CHECK_FAILED: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const DIVERGENCE: i32 = 3;
    pub const IO: i32 = 4;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] tempscale_core::Error),
    #[error("check failed: {0}")]
    Check(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        use tempscale_core::Error as E;
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Io { .. } => exit::IO,
            CliError::Check(_) => exit::CHECK_FAILED,
            CliError::Core(e) => match e {
                E::Divergence { .. } => exit::DIVERGENCE,
                E::Io { .. } | E::Format { .. } => exit::IO,
                E::DegenerateLogits(_) | E::DegenerateGeometry(_) | E::DegenerateRange(_) => exit::CHECK_FAILED,
                _ => exit::CONFIG,
            },
        }
    }
}
