use thiserror::Error;

/// Errors surfaced by the segmentation pipeline.
#[derive(Error, Debug)]
pub enum C3nError {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("empty input to {0}")]
    EmptyInput(String),

    #[error("label {0:?} has a zero-norm embedding; cosine similarity is undefined")]
    ZeroNormEmbedding(String),

    #[error("embedding provider cannot resolve label {0:?}")]
    UnresolvableLabel(String),

    #[error("audio clip has zero power; SNR scaling is undefined")]
    ZeroPowerClip,

    #[error("no valid timestamps in batch; loss is undefined")]
    NoValidTimestamps,

    #[error("class index {index} out of range for {n_classes} classes")]
    ClassOutOfRange { index: usize, n_classes: usize },

    #[error("attention over {positions} positions exceeds the configured cap {cap}")]
    PositionCapExceeded { positions: usize, cap: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("corrupt or incompatible checkpoint: {0}")]
    Checkpoint(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image I/O: {0}")]
    Image(#[from] image::ImageError),

    #[error("wav I/O: {0}")]
    Wav(#[from] hound::Error),

    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, C3nError>;

impl C3nError {
    pub fn shape(context: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        C3nError::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }
}
