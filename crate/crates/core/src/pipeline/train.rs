use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{extract_answer, strip_answer, PipelineError, Stage, StageSpec};
use crate::data::{
    option_letter, render_input, render_target, tokenize, FeatureMap, InputFormat, Sample, VisionFeatures, Vocabulary,
    EOS,
};
use crate::eval::rouge_l;
use crate::model::{Binding, Example, Model, ModelConfig, Mode, ModelParameters, TrainingExample};
use crate::tensor::{AdamW, AdamWConfig, Graph};

/// Generation batch size for evaluation.
pub(crate) const EVAL_BATCH: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Global gradient-norm bound; 0 disables clipping.
    pub clip_norm: f64,
    pub max_new_tokens: usize,
    /// Validate on at most this many samples.
    pub val_limit: Option<usize>,
    /// Stop once the validation metric reaches this value.
    pub stop_at: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: AdamWConfig::default(),
            epochs: 20,
            batch_size: 16,
            patience: 5,
            clip_norm: 1.0,
            max_new_tokens: 64,
            val_limit: None,
            stop_at: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Spec(m.into()));
        let o = &self.optimizer;
        if self.epochs == 0 || self.batch_size == 0 || self.max_new_tokens == 0 {
            return bad("epochs, batch_size and max_new_tokens must be positive");
        }
        if !(o.lr > 0.0 && o.lr.is_finite()) || o.eps <= 0.0 || o.weight_decay < 0.0 {
            return bad("optimizer needs lr > 0, eps > 0, weight_decay >= 0");
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return bad("optimizer betas must lie in [0, 1)");
        }
        if self.clip_norm < 0.0 || !self.clip_norm.is_finite() {
            return bad("clip_norm must be finite and non-negative");
        }
        Ok(())
    }
}

/// Independent random streams derived from one master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Purpose {
    Data,
    Init(Stage),
    Shuffle(Stage),
    Dropout(Stage),
}

pub fn rng_stream(seed: u64, purpose: Purpose) -> ChaCha8Rng {
    let stage = |s: Stage| match s {
        Stage::Rationale => 0,
        Stage::Answer => 1,
        Stage::OneStage => 2,
    };
    let stream = match purpose {
        Purpose::Data => 1,
        Purpose::Init(s) => 16 + stage(s),
        Purpose::Shuffle(s) => 32 + stage(s),
        Purpose::Dropout(s) => 48 + stage(s),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Vocabulary covering every rendering of `samples` plus the fixed answer
/// templates for five options.
pub fn corpus_vocabulary(samples: &[Sample]) -> Vocabulary {
    let mut texts = vec!["Question: Context: N/A Options: Rationale: The answer is (A) (B) (C) (D) (E).".to_string()];
    for s in samples {
        texts.push(render_input(s, InputFormat::QcmA, None).expect("QCM_A takes no rationale"));
        texts.push(s.rationale.clone());
    }
    Vocabulary::build(texts.iter().map(String::as_str))
}

pub fn sample_features(
    sample: &Sample,
    features: &FeatureMap,
    use_vision: bool,
    config: &ModelConfig,
) -> Result<VisionFeatures, PipelineError> {
    let zeros = || VisionFeatures::zeros(config.patches, config.vision_dim);
    if !use_vision {
        return Ok(zeros());
    }
    match &sample.image_id {
        None => Ok(zeros()),
        Some(image) => features.get(image).cloned().ok_or_else(|| PipelineError::MissingImage {
            sample: sample.id.clone(),
            image: image.clone(),
        }),
    }
}

/// One sample rendered for a stage.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub id: String,
    pub input_ids: Vec<usize>,
    pub target_ids: Vec<usize>,
    pub features: VisionFeatures,
}

impl Prepared {
    fn training(&self) -> TrainingExample<'_> {
        TrainingExample {
            input_ids: &self.input_ids,
            features: &self.features,
            target_ids: &self.target_ids,
        }
    }
}

/// Renders training pairs. The answer stage reads GOLD rationales.
pub fn prepare_examples(
    spec: &StageSpec,
    samples: &[Sample],
    features: &FeatureMap,
    model: &Model<f32>,
) -> Result<Vec<Prepared>, PipelineError> {
    spec.validate()?;
    samples
        .iter()
        .map(|s| {
            let rationale = match spec.stage {
                Stage::Answer => {
                    if s.rationale.trim().is_empty() {
                        return Err(PipelineError::MissingRationale(s.id.clone()));
                    }
                    Some(s.rationale.as_str())
                }
                _ => None,
            };
            let input = render_input(s, spec.format, rationale)?;
            let mut target_ids = tokenize(&render_target(s, spec.format), &model.vocab);
            target_ids.push(EOS);
            if target_ids.len() > model.config.max_len {
                return Err(crate::model::ModelError::TargetTooLong {
                    len: target_ids.len(),
                    max: model.config.max_len,
                }
                .into());
            }
            Ok(Prepared {
                id: s.id.clone(),
                input_ids: tokenize(&input, &model.vocab),
                target_ids,
                features: sample_features(s, features, spec.use_vision, &model.config)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub accuracy: Option<f64>,
    #[serde(rename = "rougeL")]
    pub rouge_l: Option<f64>,
    pub abstain_rate: Option<f64>,
    pub count: usize,
}

impl StageMetrics {
    /// Early-stopping criterion: RougeL for the rationale stage, accuracy
    /// otherwise.
    pub fn key(&self, spec: &StageSpec) -> f64 {
        match spec.stage {
            Stage::Rationale => self.rouge_l.unwrap_or(0.0),
            _ => self.accuracy.unwrap_or(0.0),
        }
    }
}

/// Generates for `samples` under the stage's training rendering (gold
/// rationales for the answer stage) and scores against gold.
pub fn evaluate_stage(
    spec: &StageSpec,
    model: &Model<f32>,
    samples: &[Sample],
    features: &FeatureMap,
    max_new_tokens: usize,
) -> Result<StageMetrics, PipelineError> {
    let prepared = prepare_examples(spec, samples, features, model)?;
    let mut outputs = Vec::with_capacity(samples.len());
    for chunk in prepared.chunks(EVAL_BATCH) {
        let examples: Vec<Example> = chunk
            .iter()
            .map(|p| Example {
                input_ids: &p.input_ids,
                features: &p.features,
            })
            .collect();
        outputs.extend(model.generate_batch(&examples, max_new_tokens)?);
    }
    let n = samples.len().max(1) as f64;
    let mut hits = 0usize;
    let mut abstain = 0usize;
    let mut rouge = 0.0;
    for (s, out) in samples.iter().zip(&outputs) {
        if spec.answers() {
            match extract_answer(&out.text, s.options.len()) {
                Some(i) if i == s.answer_index => hits += 1,
                Some(_) => {}
                None => abstain += 1,
            }
        }
        if spec.format.emits_rationale() {
            let r = if spec.stage == Stage::Rationale {
                out.text.clone()
            } else {
                strip_answer(&out.text).unwrap_or_default()
            };
            rouge += rouge_l(&r, &s.rationale);
        }
    }
    Ok(StageMetrics {
        accuracy: spec.answers().then(|| hits as f64 / n),
        rouge_l: spec.format.emits_rationale().then(|| rouge / n),
        abstain_rate: spec.answers().then(|| abstain as f64 / n),
        count: samples.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: Option<StageMetrics>,
}

#[derive(Clone, Debug)]
pub struct TrainedStage {
    pub spec: StageSpec,
    pub model: Model<f32>,
    pub log: Vec<EpochLog>,
    pub epochs_run: usize,
    /// Epoch whose parameters were kept (1-based).
    pub best_epoch: usize,
}

/// Trains one stage from a fresh initialisation. Validation (on `val`,
/// when non-empty) drives early stopping and best-epoch selection.
#[allow(clippy::too_many_arguments)]
pub fn train_stage(
    spec: &StageSpec,
    train: &[Sample],
    val: &[Sample],
    features: &FeatureMap,
    vocab: &Vocabulary,
    model_config: &ModelConfig,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainedStage, PipelineError> {
    spec.validate()?;
    config.validate()?;
    if train.is_empty() {
        return Err(PipelineError::Spec("no training samples".into()));
    }
    let mut model = Model::<f32>::new(model_config.clone(), vocab.clone(), &mut rng_stream(seed, Purpose::Init(spec.stage)))?;
    let examples = prepare_examples(spec, train, features, &model)?;
    let val = &val[..config.val_limit.map_or(val.len(), |k| k.min(val.len()))];
    let mut shuffle = rng_stream(seed, Purpose::Shuffle(spec.stage));
    let mut dropout = rng_stream(seed, Purpose::Dropout(spec.stage));
    let mut optimizer = AdamW::new(config.optimizer.clone());
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, ModelParameters<f32>)> = None;
    let mut since_best = 0;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        let mut token_count = 0usize;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<TrainingExample> = idx.iter().map(|&i| examples[i].training()).collect();
            let mut g = Graph::new();
            let mut binding = Binding::new(&model.params, true);
            let (loss, _, targets) = model.teacher_forced(&mut g, &mut binding, &batch, &mut Mode::Train(&mut dropout))?;
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(PipelineError::NonFiniteLoss {
                    epoch,
                    batch: b,
                    ids: idx.iter().map(|&i| examples[i].id.clone()).collect(),
                });
            }
            g.backward(loss)?;
            binding.accumulate_grads(&g, &mut model.params)?;
            if config.clip_norm > 0.0 {
                model.params.clip_grad_norm(config.clip_norm);
            }
            optimizer.step(model.params.tensors_mut())?;
            model.params.zero_grad();
            if !model.params.is_finite() {
                return Err(PipelineError::NonFiniteLoss {
                    epoch,
                    batch: b,
                    ids: idx.iter().map(|&i| examples[i].id.clone()).collect(),
                });
            }
            loss_sum += value * targets.len() as f64;
            token_count += targets.len();
        }
        let train_loss = loss_sum / token_count.max(1) as f64;
        let metrics = if val.is_empty() {
            None
        } else {
            Some(evaluate_stage(spec, &model, val, features, config.max_new_tokens)?)
        };
        log::info!(
            "{spec} epoch {epoch}: loss {train_loss:.4}{}",
            metrics.as_ref().map_or(String::new(), |m| format!(", val {:.4}", m.key(spec)))
        );
        let key = metrics.as_ref().map(|m| m.key(spec));
        log.push(EpochLog {
            epoch,
            train_loss,
            val: metrics,
        });
        let Some(key) = key else { continue };
        if best.as_ref().is_none_or(|(b, _, _)| key > *b) {
            best = Some((key, epoch, model.params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        if config.stop_at.is_some_and(|t| key >= t) || since_best >= config.patience {
            break;
        }
    }
    let epochs_run = log.len();
    let best_epoch = match best {
        Some((_, epoch, params)) => {
            model.params = params;
            epoch
        }
        None => epochs_run,
    };
    Ok(TrainedStage {
        spec: *spec,
        model,
        log,
        epochs_run,
        best_epoch,
    })
}

/// `A`..`E` as a string.
pub(crate) fn letter(index: usize) -> String {
    option_letter(index).to_string()
}
