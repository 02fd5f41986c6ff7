use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("invalid world: {0}")]
    InvalidWorld(String),

    #[error("unknown {kind} id {id}")]
    Lookup { kind: &'static str, id: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("batch too small: need at least {min} rows, got {got}")]
    BatchTooSmall { min: usize, got: usize },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("non-finite value in {path}")]
    NumericOverflow { path: String },

    #[error("model has {params} parameters, finite-difference limit is {limit}")]
    TooLarge { params: usize, limit: usize },

    #[error("assistant is untrained: {0}")]
    UntrainedAssistant(String),

    #[error("index is empty")]
    EmptyIndex,

    #[error("stale index: built from checkpoint {index}, student checkpoint is {student}")]
    StaleIndex { index: String, student: String },

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Short machine-readable tag for the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config { .. } => "config",
            Error::InvalidWorld(_) => "invalid_world",
            Error::Lookup { .. } => "lookup",
            Error::EmptyInput(_) => "empty_input",
            Error::Shape(_) => "shape",
            Error::BatchTooSmall { .. } => "batch_too_small",
            Error::DegenerateData(_) => "degenerate_data",
            Error::NumericOverflow { .. } => "numeric_overflow",
            Error::TooLarge { .. } => "too_large",
            Error::UntrainedAssistant(_) => "untrained_assistant",
            Error::EmptyIndex => "empty_index",
            Error::StaleIndex { .. } => "stale_index",
            Error::MissingArtifact(_) => "missing_artifact",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
