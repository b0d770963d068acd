use std::path::{Path, PathBuf};

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: was produced under config digest {found}, expected {expected}")]
    DigestMismatch {
        path: PathBuf,
        found: String,
        expected: String,
    },

    #[error("reconstruction did not converge within {iterations} iterations (outputs written anyway)")]
    NotConverged { iterations: usize },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {message}", path.display())]
    Input { path: PathBuf, message: String },

    #[error(transparent)]
    Core(#[from] pnr_core::Error),
}

impl CliError {
    /// 0 success, 1 other failure, 2 config error, 3 convergence failure,
    /// 4 I/O error.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::DigestMismatch { .. } => 2,
            CliError::NotConverged { .. } => 3,
            CliError::Io { .. } | CliError::Input { .. } => 4,
            CliError::Core(pnr_core::Error::Io(_)) => 4,
            CliError::Core(_) => 1,
        }
    }

    pub(crate) fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
        move |source| CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn input(path: &Path, message: impl std::fmt::Display) -> CliError {
        CliError::Input {
            path: path.to_path_buf(),
            message: message.to_string(),
        }
    }
}
