use thiserror::Error;

/// Errors produced by the PET library.
#[derive(Debug, Error)]
pub enum PetError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("pattern needs {needed} literal and mask tokens but max_seq_length is {max}")]
    UnfittablePattern { needed: usize, max: usize },

    #[error("sequence length {len} exceeds model max_positions {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("token sequence contains no mask token")]
    NoMask,

    #[error("expected {expected} target tokens for {masks} mask slots")]
    TargetLength { expected: usize, masks: usize },

    #[error("label {0} has a multi-token verbalization; use multi-token scoring")]
    MultiTokenVerbalization(usize),

    #[error("label arity mismatch: {0} vs {1}")]
    ArityMismatch(usize, usize),

    #[error("model has no classification head")]
    NoClassifierHead,

    #[error("non-finite loss {loss} at step {step} ({detail})")]
    NonFiniteLoss {
        loss: f64,
        step: usize,
        detail: String,
    },

    #[error("training set is empty")]
    EmptyTrainSet,

    #[error("requested {requested} examples but only {available} are available")]
    InsufficientExamples { requested: usize, available: usize },

    #[error("missing predictions for ids: {}", .0.join(","))]
    MissingPredictions(Vec<String>),

    #[error("duplicate example id {0}")]
    DuplicateId(String),

    #[error("unknown label {0:?}")]
    UnknownLabel(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PetError>;

pub(crate) fn config_err(msg: impl Into<String>) -> PetError {
    PetError::Config(msg.into())
}
