//! RougeL, answer accuracy, and ablation tables.

use serde::{Deserialize, Serialize};

use crate::data::split_tokens;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("{predictions} predictions for {golds} gold answers")]
    LengthMismatch { predictions: usize, golds: usize },
    #[error("nothing to score")]
    Empty,
    #[error("metric {name}: {message}")]
    Invalid { name: String, message: String },
}

/// Length of the longest common subsequence.
pub fn lcs_len<A: PartialEq>(a: &[A], b: &[A]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Balanced LCS F1 over token sequences.
pub fn rouge_l_tokens<A: PartialEq>(candidate: &[A], reference: &[A]) -> f64 {
    let lcs = lcs_len(candidate, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// RougeL of two texts under the corpus tokenizer.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    rouge_l_tokens(&split_tokens(candidate), &split_tokens(reference))
}

/// Fraction of exact matches; `None` predictions count as wrong.
pub fn accuracy(predictions: &[Option<usize>], golds: &[usize]) -> Result<f64, EvalError> {
    if predictions.len() != golds.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            golds: golds.len(),
        });
    }
    if golds.is_empty() {
        return Err(EvalError::Empty);
    }
    let hits = predictions
        .iter()
        .zip(golds)
        .filter(|(p, g)| **p == Some(**g))
        .count();
    Ok(hits as f64 / golds.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRecord {
    pub name: String,
    pub value: f64,
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_sample: Option<Vec<f64>>,
}

impl MetricRecord {
    pub fn new(name: impl Into<String>, value: f64, count: usize) -> Result<Self, EvalError> {
        let r = MetricRecord {
            name: name.into(),
            value,
            count,
            per_sample: None,
        };
        r.validate()?;
        Ok(r)
    }

    /// Mean of `values`, which are kept as the per-sample breakdown.
    pub fn from_samples(name: impl Into<String>, values: Vec<f64>) -> Result<Self, EvalError> {
        if values.is_empty() {
            return Err(EvalError::Empty);
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let mut r = MetricRecord::new(name, mean.clamp(0.0, 1.0), values.len())?;
        r.per_sample = Some(values);
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let fail = |m: &str| {
            Err(EvalError::Invalid {
                name: self.name.clone(),
                message: m.into(),
            })
        };
        if !(0.0..=1.0).contains(&self.value) {
            return fail("value outside [0, 1]");
        }
        if self.count == 0 {
            return fail("count must be at least 1");
        }
        if let Some(v) = &self.per_sample {
            if v.len() != self.count {
                return fail("per-sample length differs from count");
            }
        }
        Ok(())
    }
}

/// Mean and, over several seeds, sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub sd: Option<f64>,
}

impl Summary {
    pub fn single(x: f64) -> Self {
        Summary { mean: x, sd: None }
    }

    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = (n > 1).then(|| {
            let ss: f64 = values.iter().map(|x| (x - mean) * (x - mean)).sum();
            (ss / (n - 1) as f64).sqrt()
        });
        Some(Summary { mean, sd })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub variant: String,
    /// Absent for variants without a generated rationale.
    pub rouge_l: Option<Summary>,
    pub accuracy: Summary,
    pub abstain_rate: Summary,
}

/// `value * 10^shift` rounded half-up to `decimals` places, computed on the
/// shortest decimal representation of `value` so no binary error creeps in.
pub fn round_half_up(value: f64, shift: usize, decimals: usize) -> String {
    let negative = value < 0.0;
    let text = format!("{}", value.abs());
    let (int, frac) = text.split_once('.').unwrap_or((&text, ""));
    let mut digits: Vec<u8> = int.bytes().chain(frac.bytes()).map(|b| b - b'0').collect();
    let point = int.len() + shift;
    let keep = point + decimals;
    if digits.len() < keep + 1 {
        digits.resize(keep + 1, 0);
    }
    let round_up = digits[keep] >= 5;
    digits.truncate(keep);
    if round_up {
        let mut i = keep;
        loop {
            if i == 0 {
                digits.insert(0, 1);
                break;
            }
            i -= 1;
            if digits[i] == 9 {
                digits[i] = 0;
            } else {
                digits[i] += 1;
                break;
            }
        }
    }
    let point = point + digits.len() - keep;
    let int_digits: String = digits[..point].iter().map(|d| (d + b'0') as char).collect();
    let int_digits = int_digits.trim_start_matches('0');
    let int_digits = if int_digits.is_empty() { "0" } else { int_digits };
    let frac_digits: String = digits[point..].iter().map(|d| (d + b'0') as char).collect();
    let sign = if negative && digits.iter().any(|&d| d != 0) { "-" } else { "" };
    if decimals == 0 {
        format!("{sign}{int_digits}")
    } else {
        format!("{sign}{int_digits}.{frac_digits}")
    }
}

fn cell(s: Option<Summary>) -> String {
    match s {
        None => "-".into(),
        Some(Summary { mean, sd: None }) => round_half_up(mean, 2, 2),
        Some(Summary { mean, sd: Some(sd) }) => {
            format!("{}±{}", round_half_up(mean, 2, 2), round_half_up(sd, 2, 2))
        }
    }
}

/// Plain-text table with one row per variant in input order. Values are
/// percentages with two decimals.
pub fn ablation_report(rows: &[ReportRow]) -> String {
    let header = ["Variant", "RougeL", "Accuracy", "Abstain"];
    let body: Vec<[String; 4]> = rows
        .iter()
        .map(|r| {
            [
                r.variant.clone(),
                cell(r.rouge_l),
                cell(Some(r.accuracy)),
                cell(Some(r.abstain_rate)),
            ]
        })
        .collect();
    let mut widths = header.map(|h| h.chars().count());
    for row in &body {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: [&str; 4]| {
        let mut s = String::new();
        for (i, (c, w)) in cells.iter().zip(widths).enumerate() {
            let pad = w - c.chars().count();
            if i == 0 {
                s.push_str(c);
                s.push_str(&" ".repeat(pad));
            } else {
                s.push_str("  ");
                s.push_str(&" ".repeat(pad));
                s.push_str(c);
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(header);
    let total: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
    out.push_str(&"-".repeat(total));
    out.push('\n');
    for row in &body {
        out.push_str(&line([&row[0], &row[1], &row[2], &row[3]]));
    }
    out
}
