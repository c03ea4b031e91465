use std::path::PathBuf;

use ldlmoe_core::Error as CoreError;

/// Errors from the command line and file layers.
#[derive(Debug, thiserror::Error)]
pub enum AppError {
    /// Bad flags, bad configuration values, or a request the inputs cannot
    /// satisfy.
    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error(transparent)]
    Core(#[from] CoreError),
}

impl AppError {
    pub fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        AppError::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// Process exit code: 1 for usage and configuration errors, 2 for
    /// everything about the data.
    pub fn exit_code(&self) -> u8 {
        match self {
            AppError::Usage(_) => 1,
            AppError::Core(CoreError::Config(_) | CoreError::ModeMismatch(_)) => 1,
            AppError::Io { .. } | AppError::Parse { .. } | AppError::Core(_) => 2,
        }
    }
}

pub type AppResult<T> = Result<T, AppError>;
