use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed codebook: {0}")]
    MalformedCodebook(String),
    #[error("codebook must declare 38 features and 13 labels, found {features} features and {labels} labels")]
    SchemaArity { features: usize, labels: usize },
    #[error("duplicate id `{0}` in codebook")]
    DuplicateId(String),
    #[error("CSV header is missing column `{0}`")]
    HeaderMismatch(String),
    #[error("row {row}: {message}")]
    InvalidRecord { row: usize, message: String },
    #[error("training split is empty")]
    EmptySplit,
    #[error("need at least {min} records, got {got}")]
    TooFewRecords { min: usize, got: usize },
    #[error("feature `{0}` is not a categorical code")]
    NotCategorical(String),
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("unknown disease label `{0}`")]
    UnknownLabel(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("shape mismatch: expected {expected} values, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("label `{0}` has a single class in the training split")]
    SingleClass(String),
    #[error("non-finite loss at epoch {epoch} (train loss {train_loss}, lr {lr:e})")]
    NonFiniteLoss { epoch: usize, train_loss: f64, lr: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint schema hash {found:016x} does not match codebook hash {expected:016x}")]
    SchemaHashMismatch { found: u64, expected: u64 },
    #[error("need at least {k} points for k-means, got {n}")]
    TooFewPoints { n: usize, k: usize },
    #[error("exact enumeration supports at most {max} features, got {got}")]
    TooManyFeatures { max: usize, got: usize },
    #[error("cannot take top {k} of {available} ranked features")]
    KTooLarge { k: usize, available: usize },
    #[error("invalid plant spec: {0}")]
    InvalidPlant(String),
    #[error("no checkpoints (*.cdrp) found in {0}")]
    MissingCheckpoint(PathBuf),
    #[error("cannot bind {addr}: {source}")]
    PortBusy {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors that indicate a bug or numeric breakdown rather than bad input.
    pub fn is_internal(&self) -> bool {
        matches!(
            self,
            Error::DimensionMismatch { .. }
                | Error::LengthMismatch { .. }
                | Error::ShapeMismatch { .. }
                | Error::NonFiniteLoss { .. }
                | Error::TooManyFeatures { .. }
        )
    }
}
