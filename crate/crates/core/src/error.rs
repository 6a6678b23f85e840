use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record {pair_id}: field `{field}`: {reason}")]
    Record {
        pair_id: String,
        field: String,
        reason: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("empty sequence")]
    EmptySequence,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("zero vector has no defined cosine similarity")]
    ZeroVector,

    #[error("degenerate relation `{relation}`: positive rate {rate} is not inside (0, 1)")]
    DegenerateRelation { relation: String, rate: f64 },

    #[error("no coherence head: model was trained coherence-agnostic")]
    NoCoherenceHead,

    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn record(pair_id: impl Into<String>, field: &str, reason: impl Into<String>) -> Self {
        Error::Record {
            pair_id: pair_id.into(),
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}
