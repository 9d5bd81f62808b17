//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Softmax over a vector with no finite entry.
    #[error("empty support: every logit is masked")]
    EmptySupport,

    #[error("vocab size mismatch: {left} vs {right}")]
    SizeMismatch { left: usize, right: usize },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid logits: {0}")]
    InvalidLogits(String),

    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid sequence: {0}")]
    InvalidSequence(String),

    #[error("no query present")]
    NoQuery,

    /// Line-oriented file formats report the offending line.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Task files report the offending record.
    #[error("task record {index}: {message}")]
    TaskRecord { index: usize, message: String },

    #[error("unknown token {token:?} in prefix")]
    UnknownToken { token: String },

    #[error("backend error: {0}")]
    Backend(String),

    #[error("backend error after {attempts} attempts: {message}")]
    BackendExhausted { attempts: u32, message: String },

    #[error("protocol mismatch: server speaks {server:?}, client speaks {client:?}")]
    ProtocolMismatch { server: String, client: String },

    #[error("decode failed at step {step}: {source}")]
    DecodeStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("embedding provider error: {0}")]
    Embedding(String),

    #[error("sink error: {0}")]
    Sink(String),

    #[error("missing prediction for task {0}")]
    MissingPrediction(String),

    #[error("unknown baseline cell {0:?}")]
    UnknownBaseline(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
