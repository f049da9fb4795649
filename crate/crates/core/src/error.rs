use std::path::PathBuf;

use crate::prompt::SegmentTag;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("{file}: record {index}: {reason}")]
    Instance {
        file: PathBuf,
        index: usize,
        reason: String,
    },

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("prompt of length {len} exceeds window {window} (overflow in {segment} segment)")]
    PromptOverflow {
        len: usize,
        window: usize,
        segment: SegmentTag,
    },

    #[error("generation hit the context window after {} new tokens", partial.len())]
    TruncatedGeneration { partial: Vec<u32> },

    #[error("sample has no loss-bearing positions")]
    DegenerateSample,

    #[error("{phase} diverged at step {step}: non-finite loss")]
    Divergence { phase: &'static str, step: usize },

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("insufficient sample: need at least {need}, got {got}")]
    InsufficientSample { need: usize, got: usize },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
