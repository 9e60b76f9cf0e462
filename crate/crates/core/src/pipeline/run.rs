use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{
    corpus_vocabulary, infer_one_stage, infer_two_stage, score_predictions, train_stage, PipelineError, Prediction,
    StageModel, StageSpec, TrainConfig, TrainedStage,
};
use crate::data::{FeatureMap, InputFormat, Sample};
use crate::model::ModelConfig;

/// A row of the ablation grid, without the vision flag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    TwoStage,
    OneStage(InputFormat),
}

impl Variant {
    pub const GRID: [Variant; 4] = [
        Variant::OneStage(InputFormat::QcmA),
        Variant::OneStage(InputFormat::QcmRa),
        Variant::OneStage(InputFormat::QcmAr),
        Variant::TwoStage,
    ];

    pub fn label(&self, use_vision: bool) -> String {
        format!("{self}/{}", if use_vision { "vision" } else { "no-vision" })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::TwoStage => f.write_str("two-stage"),
            Variant::OneStage(format) => write!(f, "one:{format}"),
        }
    }
}

impl FromStr for Variant {
    type Err = PipelineError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("two-stage") {
            return Ok(Variant::TwoStage);
        }
        let spec: StageSpec = s.parse()?;
        match spec.stage {
            super::Stage::OneStage => Ok(Variant::OneStage(spec.format)),
            _ => Err(PipelineError::Spec(format!("{s:?} is a single stage, not a variant"))),
        }
    }
}

impl Serialize for Variant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Splits<'a> {
    pub train: &'a [Sample],
    pub val: &'a [Sample],
    pub test: &'a [Sample],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMetrics {
    pub variant: String,
    pub seed: u64,
    /// Absent for a rationale-only stage.
    pub accuracy: Option<f64>,
    #[serde(rename = "rougeL")]
    pub rouge_l: Option<f64>,
    pub abstain_rate: Option<f64>,
    /// Summed over stages for the two-stage variant.
    pub epochs_run: usize,
}

pub struct VariantRun {
    pub metrics: RunMetrics,
    pub stages: Vec<TrainedStage>,
    pub predictions: Vec<Prediction>,
}

/// Trains every stage of `variant` on `splits.train` and scores it on
/// `splits.test`. Without vision all feature matrices are zero.
#[allow(clippy::too_many_arguments)]
pub fn run_variant(
    variant: Variant,
    use_vision: bool,
    splits: Splits,
    features: &FeatureMap,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    seed: u64,
) -> Result<VariantRun, PipelineError> {
    let vocab = corpus_vocabulary(splits.train);
    let train = |spec: StageSpec| {
        train_stage(&spec, splits.train, splits.val, features, &vocab, model_config, train_config, seed)
    };
    let as_model = |t: &TrainedStage| StageModel {
        spec: t.spec,
        model: t.model.clone(),
    };
    let max_new = train_config.max_new_tokens;
    let (stages, predictions) = match variant {
        Variant::TwoStage => {
            let s1 = train(StageSpec::rationale(use_vision))?;
            let s2 = train(StageSpec::answer(use_vision))?;
            let preds = infer_two_stage(splits.test, features, &as_model(&s1), &as_model(&s2), max_new)?;
            (vec![s1, s2], preds)
        }
        Variant::OneStage(format) => {
            let s = train(StageSpec::one_stage(format, use_vision)?)?;
            let preds = infer_one_stage(splits.test, features, &as_model(&s), max_new)?;
            (vec![s], preds)
        }
    };
    let (accuracy, rouge_l, abstain_rate) = score_predictions(&predictions, splits.test)?;
    let metrics = RunMetrics {
        variant: variant.label(use_vision),
        seed,
        accuracy: Some(accuracy),
        rouge_l,
        abstain_rate: Some(abstain_rate),
        epochs_run: stages.iter().map(|s| s.epochs_run).sum(),
    };
    Ok(VariantRun {
        metrics,
        stages,
        predictions,
    })
}

/// Everything needed to repeat a command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    /// Fully resolved configuration the command ran with.
    pub config: serde_json::Value,
    #[serde(default)]
    pub data: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub checkpoints: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub metrics: Vec<PathBuf>,
}

impl RunManifest {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PipelineError> {
        write_json(path, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        read_json(path)
    }
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<(), PipelineError> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value).map_err(|source| PipelineError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T, PipelineError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| PipelineError::Json {
        path: path.to_path_buf(),
        source,
    })
}
