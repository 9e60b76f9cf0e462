use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{DataError, Sample};

/// Input -> output rendering variant.
///
/// `Q`uestion, `C`ontext, `M`ultiple options, `R`ationale, `A`nswer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InputFormat {
    #[serde(rename = "QCM_A")]
    QcmA,
    #[serde(rename = "QCM_RA")]
    QcmRa,
    #[serde(rename = "QCM_AR")]
    QcmAr,
    #[serde(rename = "QCM_R")]
    QcmR,
    #[serde(rename = "QCMR_A")]
    QcmrA,
}

impl InputFormat {
    pub const ALL: [InputFormat; 5] = [
        InputFormat::QcmA,
        InputFormat::QcmRa,
        InputFormat::QcmAr,
        InputFormat::QcmR,
        InputFormat::QcmrA,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InputFormat::QcmA => "QCM_A",
            InputFormat::QcmRa => "QCM_RA",
            InputFormat::QcmAr => "QCM_AR",
            InputFormat::QcmR => "QCM_R",
            InputFormat::QcmrA => "QCMR_A",
        }
    }

    pub fn takes_rationale(self) -> bool {
        self == InputFormat::QcmrA
    }

    /// Whether the target contains the gold rationale.
    pub fn emits_rationale(self) -> bool {
        matches!(self, InputFormat::QcmRa | InputFormat::QcmAr | InputFormat::QcmR)
    }

    /// Whether the target contains the answer sentence.
    pub fn emits_answer(self) -> bool {
        self != InputFormat::QcmR
    }
}

impl fmt::Display for InputFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InputFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_uppercase().replace("->", "_").replace('→', "_");
        InputFormat::ALL
            .into_iter()
            .find(|f| f.name() == key)
            .ok_or_else(|| format!("unknown input format {s:?}"))
    }
}

/// `A`..`E` for indices 0..4.
pub fn option_letter(index: usize) -> char {
    assert!(index < 5, "at most five options");
    (b'A' + index as u8) as char
}

fn answer_sentence(sample: &Sample) -> String {
    format!("The answer is ({}).", option_letter(sample.answer_index))
}

/// Renders the language input. `rationale` must be given exactly for
/// [`InputFormat::QcmrA`], whose rendering is the QCM prefix followed by
/// `"Rationale: {r}\n"`.
pub fn render_input(
    sample: &Sample,
    format: InputFormat,
    rationale: Option<&str>,
) -> Result<String, DataError> {
    match (format.takes_rationale(), rationale) {
        (true, None) => return Err(DataError::MissingRationale(format)),
        (false, Some(_)) => return Err(DataError::UnexpectedRationale(format)),
        _ => {}
    }
    let context = if sample.context.trim().is_empty() {
        "N/A"
    } else {
        sample.context.as_str()
    };
    let options: Vec<String> = sample
        .options
        .iter()
        .enumerate()
        .map(|(i, o)| format!("({}) {}", option_letter(i), o))
        .collect();
    let mut out = format!(
        "Question: {}\nContext: {}\nOptions: {}\n",
        sample.question,
        context,
        options.join(" ")
    );
    if let Some(r) = rationale {
        out.push_str("Rationale: ");
        out.push_str(r);
        out.push('\n');
    }
    Ok(out)
}

/// Renders the gold output text for `format`.
pub fn render_target(sample: &Sample, format: InputFormat) -> String {
    let answer = answer_sentence(sample);
    match format {
        InputFormat::QcmA | InputFormat::QcmrA => answer,
        InputFormat::QcmR => sample.rationale.clone(),
        InputFormat::QcmRa => format!("{} {}", sample.rationale, answer),
        InputFormat::QcmAr => format!("{} {}", answer, sample.rationale),
    }
}
