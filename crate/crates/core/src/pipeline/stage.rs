use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::data::InputFormat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Rationale,
    Answer,
    OneStage,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Rationale => "rationale",
            Stage::Answer => "answer",
            Stage::OneStage => "one_stage",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub stage: Stage,
    pub format: InputFormat,
    pub use_vision: bool,
}

impl StageSpec {
    pub fn rationale(use_vision: bool) -> Self {
        StageSpec {
            stage: Stage::Rationale,
            format: InputFormat::QcmR,
            use_vision,
        }
    }

    pub fn answer(use_vision: bool) -> Self {
        StageSpec {
            stage: Stage::Answer,
            format: InputFormat::QcmrA,
            use_vision,
        }
    }

    pub fn one_stage(format: InputFormat, use_vision: bool) -> Result<Self, PipelineError> {
        let s = StageSpec {
            stage: Stage::OneStage,
            format,
            use_vision,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        use InputFormat::*;
        let ok = match self.stage {
            Stage::Rationale => self.format == QcmR,
            Stage::Answer => self.format == QcmrA,
            Stage::OneStage => matches!(self.format, QcmA | QcmRa | QcmAr),
        };
        if ok {
            Ok(())
        } else {
            Err(PipelineError::Spec(format!(
                "stage {} cannot use format {}",
                self.stage.name(),
                self.format
            )))
        }
    }

    /// Stage selector as written on the command line, without the vision flag.
    pub fn selector(&self) -> String {
        match self.stage {
            Stage::OneStage => format!("one:{}", self.format),
            s => s.name().to_string(),
        }
    }

    /// Whether the generated text is scored for an answer.
    pub fn answers(&self) -> bool {
        self.stage != Stage::Rationale
    }
}

impl fmt::Display for StageSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let vision = if self.use_vision { "vision" } else { "no-vision" };
        write!(f, "{}/{}", self.selector(), vision)
    }
}

/// Parses `rationale`, `answer`, or `one:FORMAT`, with vision on.
impl FromStr for StageSpec {
    type Err = PipelineError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        match s.to_ascii_lowercase().as_str() {
            "rationale" => return Ok(StageSpec::rationale(true)),
            "answer" => return Ok(StageSpec::answer(true)),
            _ => {}
        }
        let format = s
            .strip_prefix("one:")
            .ok_or_else(|| PipelineError::Spec(format!("unknown stage {s:?}; expected rationale, answer, or one:FORMAT")))?;
        let format: InputFormat = format.parse().map_err(PipelineError::Spec)?;
        StageSpec::one_stage(format, true)
    }
}
