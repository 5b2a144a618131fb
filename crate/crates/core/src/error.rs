use thiserror::Error;

/// Crate-wide error type. Each variant maps onto one error category that the
/// command-line front end prints before exiting with a nonzero status.
#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("provider error: {0}")]
    Provider(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("pipeline error: {0}")]
    Pipeline(String),
    #[error("training diverged at epoch {epoch}: {reason}")]
    Training { epoch: usize, reason: String },
    #[error("generation error: {0}")]
    Generation(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn category(&self) -> &'static str {
        match self {
            Error::Contract(_) => "contract",
            Error::Provider(_) => "provider",
            Error::NotFound(_) => "not-found",
            Error::Format(_) => "format",
            Error::Pipeline(_) => "pipeline",
            Error::Training { .. } => "training",
            Error::Generation(_) => "generation",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Json(_) => "format",
        }
    }

    pub fn is_contract(&self) -> bool {
        matches!(self, Error::Contract(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Returns a contract violation unless `cond` holds.
pub(crate) fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Contract(msg()))
    }
}
