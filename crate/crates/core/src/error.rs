use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, FhmmError>;

#[derive(Debug, Error)]
pub enum FhmmError {
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty sentence")]
    EmptySentence,

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("degenerate observation parameters at position {position}")]
    DegenerateObservation { position: usize },

    #[error("variational update diverged at position {position}")]
    VariationalDiverged { position: usize },

    #[error("observation objective diverged")]
    ObjectiveDiverged,

    #[error("instance too large for oracle: {paths} state sequences exceed limit {limit}")]
    OracleLimit { paths: f64, limit: u64 },

    #[error("empty sufficient statistics")]
    EmptyStats,

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("degenerate training data: {0}")]
    DegenerateData(String),

    #[error("unsupported model file version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt model file: {0}")]
    CorruptModel(String),

    #[error("vocabulary mismatch: model has V={model}, vocabulary has V={vocab}")]
    VocabMismatch { model: usize, vocab: usize },

    #[error("parse error in {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl FhmmError {
    /// True for failures that stem from numerical breakdown rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            FhmmError::DegenerateObservation { .. }
                | FhmmError::VariationalDiverged { .. }
                | FhmmError::ObjectiveDiverged
        )
    }
}
