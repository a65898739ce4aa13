use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),

    #[error("history of length {len} is not valid for sequence length {max_len}")]
    HistoryTooLong { len: usize, max_len: usize },

    #[error("token id {token} out of range for vocabulary of size {size}")]
    TokenOutOfRange { token: usize, size: usize },

    #[error("no table row for position {position} and context {context:?}")]
    MissingRow { position: usize, context: Vec<usize> },

    #[error("enumeration needs {needed} states, above the cap of {cap}; use Monte-Carlo estimation")]
    EnumerationCap { needed: f64, cap: usize },

    #[error("model file format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt model payload: {0}")]
    CorruptPayload(String),

    #[error("shape mismatch for {name}: {detail}")]
    ShapeMismatch { name: String, detail: String },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("degenerate ratio: numerator {numerator} and denominator {denominator} are both below {epsilon}")]
    DegenerateRatio {
        numerator: f64,
        denominator: f64,
        epsilon: f64,
    },

    #[error(
        "conditional generation deviation needs a queryable data distribution; corpus histories are not supported"
    )]
    CorpusNotQueryable,

    #[error("model assigns zero probability to an observed token")]
    ZeroProbability,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
