use std::path::PathBuf;

use adgcrnn_core::Error as CoreError;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: u64, message: String },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("{0}")]
    Core(#[from] CoreError),
    #[error("training diverged at epoch {epoch}; kept the last finite parameters")]
    Diverged { epoch: usize },
}

impl CliError {
    /// 1 for failures during computation, 2 for bad input.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Write { .. } | CliError::Diverged { .. } => 1,
            CliError::Core(CoreError::Shape { .. } | CoreError::Contract(_)) => 1,
            _ => 2,
        }
    }

    pub(crate) fn read(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Read { path, source }
    }

    pub(crate) fn write(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Write { path, source }
    }
}
