use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid preference label {0}; expected 0, 0.5 or 1")]
    Label(f64),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    /// Training stopped; `last_good` holds the parameters before the bad step.
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss {
        step: usize,
        last_good: Box<crate::model::RewardModel>,
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("degenerate normalization: max return {max} equals min return {min}")]
    DegenerateNormalization { max: f64, min: f64 },

    #[error("checkpoint checksum mismatch")]
    Checksum,

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("format error: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
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
