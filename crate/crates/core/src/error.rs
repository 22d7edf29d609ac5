use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A value fell outside the domain an operation accepts.
    #[error("input out of domain: {0}")]
    InputDomain(String),

    /// A manifest record failed validation.
    #[error("record `{record}`: invalid field `{field}`: {reason}")]
    Validation {
        record: String,
        field: String,
        reason: String,
    },

    /// A record could not be ingested (missing or unusable modality).
    #[error("ingestion failed: {0}")]
    Ingestion(String),

    /// Shapes or model configuration do not line up.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("not found: {0}")]
    NotFound(String),

    /// Cosine similarity against a zero vector.
    #[error("undefined similarity: {0}")]
    UndefinedSimilarity(String),

    #[error("NaN encountered: {0}")]
    NaN(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: tau={tau}, terms={terms}")]
    Divergence { step: u64, tau: f64, terms: String },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

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
}
