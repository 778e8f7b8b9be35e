use thiserror::Error;

use crate::training::TrainReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("invalid objective spec: {0}")]
    Spec(String),

    #[error("value outside the function domain: {0}")]
    Domain(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("degenerate classifier: {0}")]
    DegenerateClassifier(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("statistical test undefined: {0}")]
    UndefinedTest(String),

    #[error("format error at row {row}, column {column}: {message}")]
    Format { row: usize, column: usize, message: String },

    #[error("training diverged at epoch {epoch}")]
    Diverged {
        epoch: usize,
        /// Telemetry up to the last epoch whose objective was finite.
        report: Box<TrainReport>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Spec(_) => 2,
            Error::Diverged { .. } => 3,
            _ => 1,
        }
    }
}
