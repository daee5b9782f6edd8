use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = AcnError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AcnError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("empty loss mask: at least one position must be supervised")]
    EmptyMask,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("sequence of {len} tokens exceeds max_positions {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("token id {id} is outside the vocabulary of {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },

    #[error("vocabulary error: {0}")]
    Vocab(String),

    #[error("parse error: missing marker {marker:?}")]
    MissingMarker { marker: &'static str },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("belief could not be parsed from generated text {raw:?}: {reason}")]
    BeliefParse { raw: String, reason: String },

    #[error("invalid segment spans: {0}")]
    Spans(String),

    #[error("unknown domain {0:?}")]
    UnknownDomain(String),

    #[error("database error: {0}")]
    Database(String),

    #[error("{path}:{line}: {message}")]
    Schema {
        path: String,
        line: usize,
        message: String,
    },

    #[error("corpus validation failed: {0}")]
    Validation(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("gradient reached frozen parameter {0:?}")]
    FrozenGradient(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl AcnError {
    /// Stable machine-readable name of the error kind.
    pub fn code(&self) -> &'static str {
        match self {
            AcnError::Dimension(_) => "dimension",
            AcnError::EmptyMask => "empty_mask",
            AcnError::NonScalarLoss(_) => "non_scalar_loss",
            AcnError::Config(_) => "config",
            AcnError::SequenceTooLong { .. } => "sequence_too_long",
            AcnError::TokenOutOfRange { .. } => "token_out_of_range",
            AcnError::Vocab(_) => "vocab",
            AcnError::MissingMarker { .. } | AcnError::Parse(_) => "parse",
            AcnError::BeliefParse { .. } => "belief_parse",
            AcnError::Spans(_) => "spans",
            AcnError::UnknownDomain(_) => "unknown_domain",
            AcnError::Database(_) => "database",
            AcnError::Schema { .. } => "schema",
            AcnError::Validation(_) => "validation",
            AcnError::Training(_) => "training",
            AcnError::FrozenGradient(_) => "frozen_gradient",
            AcnError::Eval(_) => "eval",
            AcnError::Checkpoint(_) => "checkpoint",
            AcnError::Io { .. } => "io",
            AcnError::Json(_) => "json",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AcnError::Io {
            path: path.into(),
            source,
        }
    }
}
