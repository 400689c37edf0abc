use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("loss has no unmasked positions")]
    EmptyLoss,

    #[error("sequence of length {len} exceeds max_seq {max}")]
    Overlength { len: usize, max: usize },

    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("deactivation index (layer {layer}, neuron {neuron}) out of range")]
    DeactivationOutOfRange { layer: usize, neuron: usize },

    #[error("trace lacks {0}; rerun forward with a higher trace level")]
    TraceLevel(&'static str),

    #[error("span `{0}` is empty")]
    EmptySpan(String),

    #[error("need at least 4 layers for stage segmentation, got {0}")]
    TooFewLayers(usize),

    #[error("weight file format error: {0}")]
    Format(String),

    #[error("key string `{0}` not found in context")]
    KeyNotFound(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("world generation: {0}")]
    World(String),

    #[error("I/O error on {path}: {source}")]
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
