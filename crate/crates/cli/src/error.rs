use serde_json::{json, Value};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] homodiv_core::Error),
    #[error(transparent)]
    Service(#[from] homodiv_service::ServiceError),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Service(e) => e.kind(),
            CliError::Usage(_) => "usage",
            CliError::Internal(_) => "internal",
        }
    }

    /// Config problems exit with 2 so scripts can tell them from run failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(homodiv_core::Error::Config(_)) | CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    /// The record printed to stderr on failure.
    pub fn record(&self) -> Value {
        let details: Vec<String> = match self {
            CliError::Core(homodiv_core::Error::Config(list)) => list.clone(),
            _ => Vec::new(),
        };
        json!({"error": {"kind": self.kind(), "message": self.to_string(), "details": details}})
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Internal(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}
