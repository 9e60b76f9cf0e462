use serde::{Deserialize, Serialize};

use super::train::{letter, EVAL_BATCH};
use super::{extract_answer, sample_features, strip_answer, PipelineError, Stage, StageSpec};
use crate::data::{render_input, tokenize, FeatureMap, Sample, VisionFeatures};
use crate::eval::{accuracy, rouge_l};
use crate::model::{Checkpoint, Example, Generation, Model};

/// A trained model together with the stage it was trained for.
#[derive(Clone, Debug)]
pub struct StageModel {
    pub spec: StageSpec,
    pub model: Model<f32>,
}

impl StageModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.model.clone())
            .with_meta("stage", self.spec.stage.name())
            .with_meta("format", self.spec.format)
            .with_meta("use_vision", self.spec.use_vision)
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self, PipelineError> {
        let get = |k: &str| {
            ckpt.meta
                .get(k)
                .ok_or_else(|| PipelineError::Spec(format!("checkpoint lacks {k} metadata")))
        };
        let stage = match get("stage")?.as_str() {
            "rationale" => Stage::Rationale,
            "answer" => Stage::Answer,
            "one_stage" => Stage::OneStage,
            other => return Err(PipelineError::Spec(format!("unknown stage {other:?}"))),
        };
        let format = get("format")?.parse().map_err(PipelineError::Spec)?;
        let use_vision = get("use_vision")?
            .parse()
            .map_err(|_| PipelineError::Spec("use_vision must be true or false".into()))?;
        let spec = StageSpec {
            stage,
            format,
            use_vision,
        };
        spec.validate()?;
        Ok(StageModel { spec, model: ckpt.model })
    }

    fn features(&self, s: &Sample, features: &FeatureMap) -> Result<VisionFeatures, PipelineError> {
        sample_features(s, features, self.spec.use_vision, &self.model.config)
    }

    /// Greedy outputs for pre-rendered inputs, batched.
    fn generate(&self, inputs: &[(Vec<usize>, VisionFeatures)], max_new_tokens: usize) -> Result<Vec<Generation>, PipelineError> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(EVAL_BATCH) {
            let examples: Vec<Example> = chunk
                .iter()
                .map(|(ids, f)| Example {
                    input_ids: ids,
                    features: f,
                })
                .collect();
            out.extend(self.model.generate_batch(&examples, max_new_tokens)?);
        }
        Ok(out)
    }
}

/// Per-sample inference output. A missing letter means the model abstained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub id: String,
    pub rationale: Option<String>,
    pub answer_letter: Option<String>,
}

impl Prediction {
    pub fn answer_index(&self) -> Option<usize> {
        let c = self.answer_letter.as_deref()?.chars().next()?;
        c.is_ascii_uppercase().then(|| (c as u8 - b'A') as usize)
    }
}

/// Rationale with stage 1, then answer with stage 2 on the QCMR rendering of
/// the generated rationale.
pub fn infer_two_stage(
    samples: &[Sample],
    features: &FeatureMap,
    stage1: &StageModel,
    stage2: &StageModel,
    max_new_tokens: usize,
) -> Result<Vec<Prediction>, PipelineError> {
    if stage1.spec.stage != Stage::Rationale || stage2.spec.stage != Stage::Answer {
        return Err(PipelineError::Incompatible(format!(
            "expected rationale then answer checkpoints, got {} then {}",
            stage1.spec, stage2.spec
        )));
    }
    let diff = stage1.model.config.diff(&stage2.model.config);
    if !diff.is_empty() {
        return Err(PipelineError::Incompatible(diff.join(", ")));
    }
    if stage1.model.vocab != stage2.model.vocab {
        return Err(PipelineError::Incompatible("vocabularies differ".into()));
    }
    let first: Vec<(Vec<usize>, VisionFeatures)> = samples
        .iter()
        .map(|s| {
            let text = render_input(s, stage1.spec.format, None)?;
            Ok((tokenize(&text, &stage1.model.vocab), stage1.features(s, features)?))
        })
        .collect::<Result<_, PipelineError>>()?;
    let rationales = stage1.generate(&first, max_new_tokens)?;
    let second: Vec<(Vec<usize>, VisionFeatures)> = samples
        .iter()
        .zip(&rationales)
        .map(|(s, r)| {
            let text = render_input(s, stage2.spec.format, Some(&r.text))?;
            Ok((tokenize(&text, &stage2.model.vocab), stage2.features(s, features)?))
        })
        .collect::<Result<_, PipelineError>>()?;
    let answers = stage2.generate(&second, max_new_tokens)?;
    Ok(samples
        .iter()
        .zip(rationales.into_iter().zip(answers))
        .map(|(s, (r, a))| Prediction {
            id: s.id.clone(),
            rationale: Some(r.text),
            answer_letter: extract_answer(&a.text, s.options.len()).map(letter),
        })
        .collect())
}

pub fn infer_one_stage(
    samples: &[Sample],
    features: &FeatureMap,
    model: &StageModel,
    max_new_tokens: usize,
) -> Result<Vec<Prediction>, PipelineError> {
    if model.spec.stage != Stage::OneStage {
        return Err(PipelineError::Incompatible(format!(
            "expected a one-stage checkpoint, got {}",
            model.spec
        )));
    }
    let inputs: Vec<(Vec<usize>, VisionFeatures)> = samples
        .iter()
        .map(|s| {
            let text = render_input(s, model.spec.format, None)?;
            Ok((tokenize(&text, &model.model.vocab), model.features(s, features)?))
        })
        .collect::<Result<_, PipelineError>>()?;
    let outputs = model.generate(&inputs, max_new_tokens)?;
    let emits_rationale = model.spec.format.emits_rationale();
    Ok(samples
        .iter()
        .zip(outputs)
        .map(|(s, o)| Prediction {
            id: s.id.clone(),
            rationale: if emits_rationale { Some(strip_answer(&o.text).unwrap_or_default()) } else { None },
            answer_letter: extract_answer(&o.text, s.options.len()).map(letter),
        })
        .collect())
}

/// `(accuracy, rougeL, abstain_rate)` of predictions aligned with `golds`
/// by id. RougeL is absent when no prediction carries a rationale.
pub fn score_predictions(predictions: &[Prediction], golds: &[Sample]) -> Result<(f64, Option<f64>, f64), PipelineError> {
    if predictions.len() != golds.len() {
        return Err(PipelineError::Spec(format!(
            "{} predictions for {} gold samples",
            predictions.len(),
            golds.len()
        )));
    }
    let by_id: std::collections::HashMap<&str, &Prediction> = predictions.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut picks = Vec::with_capacity(golds.len());
    let mut rouge = Vec::new();
    for g in golds {
        let p = by_id
            .get(g.id.as_str())
            .ok_or_else(|| PipelineError::Spec(format!("no prediction for sample {}", g.id)))?;
        picks.push(p.answer_index().filter(|&i| i < g.options.len()));
        if let Some(r) = &p.rationale {
            rouge.push(rouge_l(r, &g.rationale));
        }
    }
    let golds_idx: Vec<usize> = golds.iter().map(|g| g.answer_index).collect();
    let acc = accuracy(&picks, &golds_idx)?;
    let abstain = picks.iter().filter(|p| p.is_none()).count() as f64 / golds.len() as f64;
    let rouge = (!rouge.is_empty()).then(|| rouge.iter().sum::<f64>() / rouge.len() as f64);
    Ok((acc, rouge, abstain))
}
