use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::DataError;

/// One multiple-choice record: question, context, options, gold rationale,
/// gold answer, and an optional key into a vision feature file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub id: String,
    pub question: String,
    pub context: String,
    pub options: Vec<String>,
    pub rationale: String,
    pub answer_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
}

impl Sample {
    pub fn has_image(&self) -> bool {
        self.image_id.is_some()
    }

    pub fn validate(&self, split: Split) -> Result<(), DataError> {
        let fail = |message: String| {
            Err(DataError::Validation {
                id: self.id.clone(),
                message,
            })
        };
        if self.id.is_empty() {
            return fail("empty id".into());
        }
        if !(2..=5).contains(&self.options.len()) {
            return fail(format!("{} options, expected 2 to 5", self.options.len()));
        }
        if self.answer_index >= self.options.len() {
            return fail(format!(
                "answer_index {} out of range for {} options",
                self.answer_index,
                self.options.len()
            ));
        }
        if split == Split::Train && self.rationale.trim().is_empty() {
            return fail("empty rationale in training split".into());
        }
        if self.image_id.as_deref() == Some("") {
            return fail("empty image_id".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// Parses JSON Lines text. Blank lines are skipped; line numbers are 1-based.
pub fn parse_dataset(text: &str, split: Split) -> Result<Vec<Sample>, DataError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(line).map_err(|e| DataError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        sample.validate(split)?;
        out.push(sample);
    }
    Ok(out)
}

pub fn load_dataset(path: impl AsRef<Path>, split: Split) -> Result<Vec<Sample>, DataError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    parse_dataset(&text, split)
}

pub fn to_jsonl(samples: &[Sample]) -> String {
    let mut out = String::new();
    for s in samples {
        out.push_str(&serde_json::to_string(s).expect("sample serializes"));
        out.push('\n');
    }
    out
}

pub fn write_dataset(path: impl AsRef<Path>, samples: &[Sample]) -> Result<(), DataError> {
    let path = path.as_ref();
    std::fs::write(path, to_jsonl(samples)).map_err(|e| DataError::io(path, e))
}
