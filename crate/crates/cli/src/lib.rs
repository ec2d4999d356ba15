//! Command implementations behind the `qlab` binary.

pub mod commands;
pub mod config;

use std::path::PathBuf;

pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;
pub const EXIT_MISMATCH: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] qlab_core::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("verification failed: {0}")]
    Mismatch(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        use qlab_core::Error as E;
        match self {
            CliError::Core(
                E::Diverged { .. } | E::NumericOverflow { .. } | E::NonFiniteGradient(_),
            ) => EXIT_NUMERIC,
            CliError::Mismatch(_) => EXIT_MISMATCH,
            _ => EXIT_USAGE,
        }
    }
}
