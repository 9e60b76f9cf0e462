//! Encoder-decoder transformer with gated vision fusion between the last
//! encoder layer and the decoder.

mod checkpoint;
mod config;
mod forward;
mod params;

pub use checkpoint::{encode_checkpoint, load_checkpoint, read_checkpoint, save_checkpoint, Checkpoint};
pub use config::ModelConfig;
pub use forward::{Binding, Example, Generation, Mode, Model, TrainingExample};
pub use params::ModelParameters;

use std::path::PathBuf;

use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("model config: {0}")]
    Config(String),
    #[error("target of {len} tokens exceeds decoder limit {max}")]
    TargetTooLong { len: usize, max: usize },
    #[error("empty target sequence")]
    EmptyTarget,
    #[error("vision features are {got:?}, model expects {expected:?}")]
    FeatureShape {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("token id {id} outside vocabulary of {vocab}")]
    Token { id: usize, vocab: usize },
    #[error("parameter {name}: {message}")]
    Parameter { name: String, message: String },
    #[error("checkpoint at byte {offset}: {message}")]
    Checkpoint { offset: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}
