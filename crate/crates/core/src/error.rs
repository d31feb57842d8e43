use std::io;

use thiserror::Error;

/// Errors produced anywhere in the separation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed audio file: {0}")]
    Format(String),

    #[error("unsupported input: {0}")]
    Unsupported(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("degenerate graph: {0}")]
    DegenerateGraph(String),

    #[error("degenerate partition: {0}")]
    DegeneratePartition(String),

    #[error("invalid optimizer state: {0}")]
    State(String),

    #[error("insufficient data: {0}")]
    Data(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable name of the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Format(_) => "format",
            Error::Unsupported(_) => "unsupported",
            Error::EmptyInput(_) => "empty_input",
            Error::Shape(_) => "shape",
            Error::Argument(_) => "argument",
            Error::DegenerateGraph(_) => "degenerate_graph",
            Error::DegeneratePartition(_) => "degenerate_partition",
            Error::State(_) => "state",
            Error::Data(_) => "data",
            Error::Divergence { .. } => "divergence",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
