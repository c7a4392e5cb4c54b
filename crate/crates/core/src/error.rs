use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid triplet: {0}")]
    InvalidTriplet(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("sample {sample} has an all-zero loss mask")]
    EmptyMask { sample: usize },

    #[error("non-finite gradient in tensor `{tensor}`")]
    NonFiniteGradient { tensor: String },

    #[error("non-finite loss {loss} for dataset item {item} at step {step}")]
    NonFiniteLoss { item: usize, step: u64, loss: f64 },

    #[error("no question template for relation(s): {}", .0.join(", "))]
    MissingTemplate(Vec<String>),

    #[error("sample size {k} exceeds population {n}")]
    SampleTooLarge { k: usize, n: usize },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Stream(#[from] std::io::Error),

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
