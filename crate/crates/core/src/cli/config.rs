use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticConfig;
use crate::model::ModelConfig;
use crate::pipeline::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train: 2000,
            val: 250,
            test: 250,
        }
    }
}

/// Dataset locations. Unset files default to the standard names inside `dir`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    pub dir: PathBuf,
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub features: Option<PathBuf>,
}

impl Default for DataPaths {
    fn default() -> Self {
        DataPaths {
            dir: PathBuf::from("data"),
            train: None,
            val: None,
            test: None,
            features: None,
        }
    }
}

impl DataPaths {
    fn pick(&self, explicit: &Option<PathBuf>, name: &str) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.dir.join(name))
    }

    pub fn train(&self) -> PathBuf {
        self.pick(&self.train, "train.jsonl")
    }

    pub fn val(&self) -> PathBuf {
        self.pick(&self.val, "val.jsonl")
    }

    pub fn test(&self) -> PathBuf {
        self.pick(&self.test, "test.jsonl")
    }

    pub fn features(&self) -> PathBuf {
        self.pick(&self.features, "features.mmvf")
    }
}

/// Everything a command reads from its JSON config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed. Data, initialisation, shuffling and dropout each draw
    /// from their own stream derived from it.
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Synthetic corpus settings. Its `seed` must stay 0; the corpus seed
    /// is derived from the master seed.
    pub generator: SyntheticConfig,
    pub splits: SplitSizes,
    pub data: DataPaths,
    pub out_dir: PathBuf,
    /// Default stage for `train` (`rationale`, `answer`, `one:FORMAT`).
    pub stage: Option<String>,
    pub use_vision: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            generator: SyntheticConfig::default(),
            splits: SplitSizes::default(),
            data: DataPaths::default(),
            out_dir: PathBuf::from("runs"),
            stage: None,
            use_vision: true,
        }
    }
}

impl RunConfig {
    /// Defaults overlaid with the file at `path`, if any.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| super::usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| super::usage(format!("config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.generator.seed != 0 {
            return Err(super::usage(
                "generator.seed is derived from the master seed; set `seed` instead",
            ));
        }
        self.train.validate().map_err(|e| super::usage(e.to_string()))?;
        let mut model = self.model.clone();
        if model.vocab_size == 0 {
            model.vocab_size = 5;
        }
        model.validate().map_err(|e| super::usage(e.to_string()))?;
        Ok(())
    }
}
