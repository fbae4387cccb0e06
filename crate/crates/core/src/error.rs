use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("tokenizer error: {0}")]
    Tokenizer(String),

    #[error("class {class} has no scored words; the labeled set is degenerate for this class")]
    EmptyClass { class: usize },

    #[error("batch was encoded with CSR version {batch:?} but the active CSR version is {active}")]
    StaleBatch { batch: Option<u64>, active: u64 },

    #[error("sequence of length {len} exceeds the encoder's {max} positions")]
    SequenceTooLong { len: usize, max: usize },

    #[error("training diverged at step {step}: loss is {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
