use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("dataset: {0}")]
    Data(String),

    #[error("phase {phase} failed: {source}")]
    Phase {
        phase: &'static str,
        source: bknet_core::Error,
    },

    #[error(transparent)]
    Core(#[from] bknet_core::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 0 success, 1 phase failure, 2 I/O or configuration error.
    pub fn exit_code(&self) -> i32 {
        use bknet_core::Error as E;
        match self {
            CliError::Phase { .. } => 1,
            CliError::Core(
                E::Io(_)
                | E::Format(_)
                | E::VersionMismatch { .. }
                | E::Checksum { .. }
                | E::Json(_)
                | E::Invalid(_),
            ) => 2,
            CliError::Core(_) => 1,
            _ => 2,
        }
    }
}

pub(crate) fn in_phase<T>(phase: &'static str, r: bknet_core::Result<T>) -> Result<T> {
    r.map_err(|source| CliError::Phase { phase, source })
}
