use std::path::PathBuf;

use thiserror::Error;

use crate::expansion::ExpansionCandidate;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("slot {slot} has a zero-norm embedding and cannot be projected")]
    DegenerateProjection { slot: usize },

    #[error("numeric failure at step {step}: {detail}")]
    Numeric { step: usize, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {image} could not be decoded: {detail}")]
    ImageDecode { image: String, detail: String },

    #[error("request timed out: {0}")]
    Timeout(String),

    #[error("rate limited: {0}")]
    RateLimited(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("content policy rejection: {0}")]
    Policy(String),

    #[error("response did not match schema: {0}")]
    Schema(String),

    #[error("no fixture recorded for instruction key {key}")]
    MissingFixture { key: String },

    #[error("expansion output malformed after {attempts} attempts: {detail}")]
    ExpansionFormat { attempts: usize, detail: String },

    #[error("only {} of {wanted} unique candidates produced", .produced.len())]
    PartialPool {
        wanted: usize,
        produced: Vec<ExpansionCandidate>,
        rejected_duplicates: usize,
        rejected_same_as_original: usize,
        rejected_no_category: usize,
    },

    #[error("configuration invalid:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Transport-level failures a caller may retry with the same request.
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            Error::Timeout(_) | Error::RateLimited(_) | Error::Transport(_)
        )
    }

    /// Short machine-readable tag, used in error records written by the CLI
    /// and the HTTP service.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::InvalidState(_) => "invalid_state",
            Error::DegenerateProjection { .. } => "degenerate_projection",
            Error::Numeric { .. } => "numeric",
            Error::Io { .. } => "io",
            Error::ImageDecode { .. } => "image_decode",
            Error::Timeout(_) => "timeout",
            Error::RateLimited(_) => "rate_limited",
            Error::Transport(_) => "transport",
            Error::Policy(_) => "policy",
            Error::Schema(_) => "schema",
            Error::MissingFixture { .. } => "missing_fixture",
            Error::ExpansionFormat { .. } => "expansion_format",
            Error::PartialPool { .. } => "partial_pool",
            Error::Config(_) => "config",
            Error::Serde(_) => "serde",
        }
    }
}
