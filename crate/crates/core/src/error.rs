use std::path::PathBuf;

use crate::taskvocab::TaskId;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("duplicate task id {0}")]
    DuplicateTask(TaskId),
    #[error("task {0} is not part of the vocabulary")]
    UnknownTask(String),
    #[error("too many simultaneous tasks: {requested} requested, vocabulary holds {capacity}")]
    TooManyTasks { requested: usize, capacity: usize },
    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("kernel size must be odd and >= 1, got {0}")]
    InvalidKernel(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty region: {0}")]
    EmptyRegion(String),
    #[error("timestep {t} out of range [{lo}, {hi}]")]
    TimestepOutOfRange { t: usize, lo: usize, hi: usize },
    #[error("composition error: {0}")]
    Compose(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("unsupported format version {found:?}, expected {expected:?}")]
    VersionMismatch { found: String, expected: String },
    #[error("corrupt image {}: {reason}", path.display())]
    CorruptImage { path: PathBuf, reason: String },
    #[error("truncated checkpoint: {0}")]
    TruncatedCheckpoint(String),
    #[error("malformed {what}: {reason}")]
    Malformed { what: String, reason: String },
    #[error("image codec error: {0}")]
    Codec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
