use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ModelError;

/// Architecture hyperparameters. `vocab_size = 0` means "take it from the
/// corpus vocabulary".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Heads of the transformer self/cross attention. The fusion attention
    /// is always single-head.
    pub heads: usize,
    pub ffn_dim: usize,
    /// Longest encoder input and decoder sequence.
    pub max_len: usize,
    /// Patch count `m` of every feature matrix.
    pub patches: usize,
    /// Raw patch feature width `d_v`.
    pub vision_dim: usize,
    pub dropout: f64,
    pub gate_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 0,
            d_model: 128,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            ffn_dim: 512,
            max_len: 128,
            patches: 16,
            vision_dim: 32,
            dropout: 0.0,
            gate_bias: false,
        }
    }
}

const KEYS: [&str; 11] = [
    "d_model",
    "decoder_layers",
    "dropout",
    "encoder_layers",
    "ffn_dim",
    "gate_bias",
    "heads",
    "max_len",
    "patches",
    "vision_dim",
    "vocab_size",
];

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        let sizes = [
            ("d_model", self.d_model),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("max_len", self.max_len),
            ("patches", self.patches),
            ("vision_dim", self.vision_dim),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be positive"));
        }
        if self.vocab_size < 5 {
            return bad(format!("vocab_size {} is below the 4 reserved tokens plus one", self.vocab_size));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn is_config_key(key: &str) -> bool {
        KEYS.contains(&key)
    }

    /// Key-value form used by the checkpoint header.
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let pairs = [
            ("d_model", self.d_model.to_string()),
            ("decoder_layers", self.decoder_layers.to_string()),
            ("dropout", self.dropout.to_string()),
            ("encoder_layers", self.encoder_layers.to_string()),
            ("ffn_dim", self.ffn_dim.to_string()),
            ("gate_bias", self.gate_bias.to_string()),
            ("heads", self.heads.to_string()),
            ("max_len", self.max_len.to_string()),
            ("patches", self.patches.to_string()),
            ("vision_dim", self.vision_dim.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self, ModelError> {
        fn get<V: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<V, ModelError> {
            let raw = kv
                .get(key)
                .ok_or_else(|| ModelError::Config(format!("missing key {key}")))?;
            raw.parse()
                .map_err(|_| ModelError::Config(format!("bad value {raw:?} for {key}")))
        }
        let config = ModelConfig {
            vocab_size: get(kv, "vocab_size")?,
            d_model: get(kv, "d_model")?,
            encoder_layers: get(kv, "encoder_layers")?,
            decoder_layers: get(kv, "decoder_layers")?,
            heads: get(kv, "heads")?,
            ffn_dim: get(kv, "ffn_dim")?,
            max_len: get(kv, "max_len")?,
            patches: get(kv, "patches")?,
            vision_dim: get(kv, "vision_dim")?,
            dropout: get(kv, "dropout")?,
            gate_bias: get(kv, "gate_bias")?,
        };
        config.validate()?;
        Ok(config)
    }

    /// Human-readable list of fields that differ, empty when compatible.
    pub fn diff(&self, other: &ModelConfig) -> Vec<String> {
        let (a, b) = (self.to_kv(), other.to_kv());
        a.iter()
            .filter(|(k, v)| b.get(*k) != Some(v))
            .map(|(k, v)| format!("{k}: {v} vs {}", b[k]))
            .collect()
    }
}
