use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("degenerate quantization range: min == max == {0}")]
    DegenerateRange(f32),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("optimization diverged in block {block} at iteration {iteration}: {detail}")]
    Divergence {
        block: usize,
        iteration: usize,
        detail: String,
    },

    #[error("FP model did not reach the accuracy floor ({achieved:.2}% < {floor:.2}%); curve: {curve:?}")]
    TrainingFloor {
        achieved: f32,
        floor: f32,
        curve: Vec<f32>,
    },

    #[error("bad magic in {0}")]
    BadMagic(PathBuf),

    #[error("unsupported file version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("checksum mismatch or truncated file: {0}")]
    Checksum(PathBuf),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
