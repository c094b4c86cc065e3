use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate 6D rotation: {0}")]
    DegenerateRotation(&'static str),
    #[error("matrix is not a rotation (orthonormality error {0:e})")]
    NotARotation(f64),
    #[error("point at depth {0} is behind the camera")]
    BehindCamera(f64),
    #[error("trajectory needs at least 2 poses, got {0}")]
    TooShort(usize),
    #[error("trajectory length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("could not place objects after {0} attempts")]
    PlacementFailure(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("png error: {0}")]
    Png(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
