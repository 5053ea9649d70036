use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MvError {
    #[error("invalid schema: {0}")]
    InvalidSchema(String),

    #[error("invalid sample {sample}: {reason}")]
    InvalidSample { sample: String, reason: String },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("sample {sample} missing view {view}")]
    MissingView { sample: String, view: usize },

    #[error("sample {sample}: unknown class name {label:?}")]
    UnknownClass { sample: String, label: String },

    #[error("cannot decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("cannot stratify: class {class} has {count} sample(s), need at least 2")]
    CannotStratify { class: String, count: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("extractor {0} is not frozen; freeze it before fitting explanation heads")]
    NotFrozen(String),

    #[error("no trained head for explanation scope {0}; train the heads first")]
    UntrainedHead(usize),

    #[error("degenerate design: {0}")]
    Degenerate(String),

    #[error("too many segments: {method} supports at most {max}, got {got}; lower the segment count or use a sampling method")]
    TooManySegments {
        method: &'static str,
        max: usize,
        got: usize,
    },

    #[error("archive format error: {0}")]
    Archive(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = MvError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> MvError {
    let path = path.into();
    move |source| MvError::Io { path, source }
}
