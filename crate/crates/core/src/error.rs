use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate record_id {0}")]
    DuplicateRecord(String),

    #[error("cannot form three parts from {0} records")]
    TooFewRecords(usize),

    #[error("record {record_id} lacks field {field}")]
    MissingField { record_id: String, field: String },

    #[error("unbound placeholder: {0}")]
    UnboundPlaceholder(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("zero-norm vector: {0}")]
    ZeroNorm(&'static str),

    #[error("zero variance: {0}")]
    ZeroVariance(String),

    #[error("design matrix is rank deficient")]
    RankDeficient,

    #[error("value out of range: {0}")]
    Range(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("llm transport error: {0}")]
    Transport(String),

    #[error("model not loaded: {0}")]
    NotLoaded(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
