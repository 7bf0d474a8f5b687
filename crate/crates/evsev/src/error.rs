use evsev_core::NnError;

/// Command-level failure, carrying the process exit code contract:
/// 2 for config/IO problems, 3 for numerical failures.
#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numeric(String),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) => 2,
            AppError::Numeric(_) => 3,
        }
    }

    pub fn usage(msg: impl Into<String>) -> AppError {
        AppError::Usage(msg.into())
    }
}

impl From<NnError> for AppError {
    fn from(e: NnError) -> AppError {
        match e {
            NnError::NonFinite(m) => AppError::Numeric(m),
            NnError::Shape(m) | NnError::Domain(m) => AppError::Usage(m),
        }
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> AppError {
        AppError::Usage(e.to_string())
    }
}
