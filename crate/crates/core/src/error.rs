use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid network: {0}")]
    Network(String),

    #[error("invalid freeze mask: {0}")]
    Mask(String),

    #[error("invalid quantization range: a = {a}, b = {b}")]
    Range { a: f64, b: f64 },

    #[error("invalid bit arrangement: {0}")]
    Arrangement(String),

    #[error("invalid thresholds: {0}")]
    Thresholds(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("{path}: row {row}: {msg}")]
    Parse { path: String, row: usize, msg: String },

    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },

    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    /// True for errors caused by user configuration rather than a failing stage.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Toml(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
