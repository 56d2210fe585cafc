use thiserror::Error;

use crate::training::CheckpointBundle;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A numeric parameter is outside its admissible range.
    #[error("invalid parameter: {0}")]
    Parameter(String),
    /// Input data has the wrong shape, range or content.
    #[error("invalid input: {0}")]
    Input(String),
    /// An architecture or run configuration is inconsistent.
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("checkpoint fingerprint mismatch: expected {expected}, found {found}")]
    Fingerprint { expected: String, found: String },
    /// Training hit a NaN or infinite loss; the last finite state is kept.
    #[error("non-finite loss at step {step} (epoch {epoch}): {detail}")]
    NonFiniteLoss {
        step: u64,
        epoch: usize,
        detail: String,
        last_good: Box<CheckpointBundle>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}
