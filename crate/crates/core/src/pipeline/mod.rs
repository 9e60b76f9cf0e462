//! Two-stage rationale-then-answer training and inference, the one-stage
//! variants, and answer extraction.

mod infer;
mod run;
mod stage;
mod train;

pub use infer::{infer_one_stage, infer_two_stage, score_predictions, Prediction, StageModel};
pub use run::{read_json, run_variant, write_json, RunManifest, RunMetrics, Splits, Variant, VariantRun};
pub use stage::{Stage, StageSpec};
pub use train::{
    corpus_vocabulary, evaluate_stage, prepare_examples, rng_stream, sample_features, train_stage, EpochLog,
    Prepared, StageMetrics, TrainConfig, TrainedStage, Purpose,
};

use std::path::PathBuf;
use std::sync::OnceLock;

use regex::Regex;

use crate::data::DataError;
use crate::eval::EvalError;
use crate::model::ModelError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("stage spec: {0}")]
    Spec(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch} (samples {ids:?})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        ids: Vec<String>,
    },
    #[error("sample {sample}: image {image} not in the feature file")]
    MissingImage { sample: String, image: String },
    #[error("sample {0}: the answer stage trains on gold rationales but this one is empty")]
    MissingRationale(String),
    #[error("incompatible checkpoints: {0}")]
    Incompatible(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

fn answer_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)answer\s+is\s*\(\s*([A-E])\s*\)").unwrap())
}

/// Index of the last "answer is (X)" whose letter is among the first
/// `n_options`.
pub fn extract_answer(generated: &str, n_options: usize) -> Option<usize> {
    answer_pattern()
        .captures_iter(generated)
        .filter_map(|c| {
            let letter = c[1].chars().next()?.to_ascii_uppercase();
            let index = (letter as u8 - b'A') as usize;
            (index < n_options).then_some(index)
        })
        .last()
}

/// `generated` with every answer sentence removed, or `None` when nothing
/// else is left.
pub fn strip_answer(generated: &str) -> Option<String> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"(?i)the\s+answer\s+is\s*\(\s*[A-E]\s*\)\s*\.?").unwrap());
    let rest = re.replace_all(generated, " ");
    let rest = rest.split_whitespace().collect::<Vec<_>>().join(" ");
    (!rest.is_empty()).then_some(rest)
}
