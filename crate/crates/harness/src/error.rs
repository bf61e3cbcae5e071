use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] clipbias_core::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    /// Process exit code: 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Core(e) if is_config_like(e) => 2,
            _ => 1,
        }
    }
}

fn is_config_like(e: &clipbias_core::Error) -> bool {
    use clipbias_core::Error::*;
    matches!(
        e,
        InvalidParameter(_) | ExactModeTooLarge { .. } | SpecMismatch(_)
    )
}

pub type Result<T> = std::result::Result<T, HarnessError>;
