//! Samples, input/target rendering, tokenization, vision feature files,
//! and the synthetic vision-critical QA generator.

mod format;
mod sample;
pub mod synthetic;
mod vision;
mod vocab;

pub use format::{option_letter, render_input, render_target, InputFormat};
pub use sample::{load_dataset, parse_dataset, to_jsonl, write_dataset, Sample, Split};
pub use synthetic::{generate_synthetic, SyntheticConfig};
pub use vision::{encode_vision_features, load_vision_features, read_vision_features, write_vision_features, FeatureMap, VisionFeatures};
pub use vocab::{normalize, split_tokens, tokenize, detokenize, Vocabulary, BOS, EOS, PAD, UNK};

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("sample {id}: {message}")]
    Validation { id: String, message: String },
    #[error("vision features at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("generator config: {0}")]
    Config(String),
    #[error("format {0} needs a rationale")]
    MissingRationale(InputFormat),
    #[error("format {0} does not take a rationale")]
    UnexpectedRationale(InputFormat),
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.into(),
            source,
        }
    }
}
