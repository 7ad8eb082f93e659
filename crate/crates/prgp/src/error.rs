use std::path::PathBuf;

/// Failure categories of the command-line pipeline, each mapped to an exit code.
#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("{0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: u64, message: String },

    #[error("numerical failure: {0}")]
    Numerical(prgp_core::Error),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
}

impl AppError {
    pub fn exit_code(&self) -> u8 {
        match self {
            AppError::Config(_) | AppError::Io { .. } | AppError::Parse { .. } => 1,
            AppError::Numerical(_) => 2,
            AppError::UndefinedMetric(_) => 3,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> AppError {
        let path = path.into();
        move |source| AppError::Io { path, source }
    }
}

impl From<prgp_core::Error> for AppError {
    fn from(e: prgp_core::Error) -> Self {
        use prgp_core::Error as E;
        match e {
            E::UndefinedMetric(m) => AppError::UndefinedMetric(m.to_string()),
            E::InvalidConfig(_) | E::CflViolation { .. } | E::ZeroVariance(_) | E::Empty(_) | E::DimensionMismatch { .. } => {
                AppError::Config(e.to_string())
            }
            E::IllConditioned { .. } | E::NonFiniteGradient { .. } | E::NonFiniteObjective { .. } => {
                AppError::Numerical(e)
            }
        }
    }
}

pub type Result<T, E = AppError> = std::result::Result<T, E>;
