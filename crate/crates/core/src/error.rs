use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    #[error("{primitive}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        primitive: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{primitive}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        primitive: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("graph: {0}")]
    Graph(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("corpus: {0}")]
    Corpus(String),

    #[error("corpus file {path}: no valid dialogues ({detail})")]
    EmptyCorpus { path: String, detail: String },

    #[error("vocab: {0}")]
    Vocab(String),

    #[error("provider: {0}")]
    Provider(String),

    #[error("remote embed at {endpoint} (batch {batch_index}): {detail}")]
    RemoteEmbed {
        endpoint: String,
        batch_index: usize,
        detail: String,
    },

    #[error("embedding dim mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("loss: {0}")]
    Loss(String),

    #[error("metric: {0}")]
    Metric(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("training aborted at step {step}: {reason} (diagnostic dump: {dump})")]
    TrainAbort {
        step: usize,
        reason: String,
        dump: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
