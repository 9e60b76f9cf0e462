//! Synthetic multiple-choice questions whose answers live only in the
//! image features.
//!
//! Each image is `m` patches, each patch a one-hot color code plus Gaussian
//! noise. Questions ask for the most frequent color or for the number of
//! patches of a named color. Options are listed in a fixed order (colors in
//! palette order, counts ascending over a fixed window) and the answer is
//! uniform over them, so question and option text carry no information about
//! the answer. The rationale states the count of every color before its
//! conclusion. The context names wrong options a classmate ruled out, which
//! lifts text-only accuracy a little above chance without revealing the
//! answer.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::format::option_letter;
use super::{DataError, FeatureMap, Sample, VisionFeatures};

pub const COLORS: [&str; 10] = [
    "red", "blue", "green", "yellow", "purple", "orange", "brown", "pink", "gray", "black",
];

/// Smallest lead of the most frequent color over the runner-up.
pub const MODE_MARGIN: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_samples: usize,
    pub m: usize,
    pub d_v: usize,
    pub n_colors: usize,
    pub n_distractors: usize,
    pub seed: u64,
    pub noise_std: f64,
    /// Share of "how many" questions; the rest ask for the most frequent color.
    pub count_fraction: f64,
    /// List options in random order instead of palette or ascending order.
    pub shuffle_options: bool,
    /// Wrong options named in the context as ruled out; 0 leaves the
    /// context empty.
    pub ruled_out: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_samples: 1000,
            m: 16,
            d_v: 32,
            n_colors: 4,
            n_distractors: 3,
            seed: 0,
            noise_std: 0.1,
            count_fraction: 0.5,
            shuffle_options: false,
            ruled_out: 1,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |m: String| Err(DataError::Config(m));
        if self.n_colors < 2 {
            return fail(format!("n_colors = {} but at least 2 are needed", self.n_colors));
        }
        if self.n_colors > COLORS.len() {
            return fail(format!("n_colors = {} exceeds the {} named colors", self.n_colors, COLORS.len()));
        }
        if self.d_v < self.n_colors {
            return fail(format!("d_v = {} cannot one-hot encode {} colors", self.d_v, self.n_colors));
        }
        if self.m < self.n_colors {
            return fail(format!("m = {} is smaller than n_colors = {}", self.m, self.n_colors));
        }
        if self.m < MODE_MARGIN {
            return fail(format!("m = {} too small for a unique most frequent color", self.m));
        }
        if self.n_distractors == 0 || self.n_distractors >= self.n_colors {
            return fail(format!(
                "n_distractors = {} must be in 1..{} (n_colors)",
                self.n_distractors, self.n_colors
            ));
        }
        if self.n_distractors + 1 > 5 {
            return fail(format!("{} options exceed the five letters A-E", self.n_distractors + 1));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail(format!("noise_std = {} must be finite and non-negative", self.noise_std));
        }
        if !(0.0..=1.0).contains(&self.count_fraction) {
            return fail(format!("count_fraction = {} outside [0, 1]", self.count_fraction));
        }
        if self.ruled_out > 0 && self.ruled_out + 1 >= self.n_distractors {
            return fail(format!(
                "ruled_out = {} must leave at least two wrong options of {}",
                self.ruled_out, self.n_distractors
            ));
        }
        Ok(())
    }

    pub fn n_options(&self) -> usize {
        self.n_distractors + 1
    }
}

pub fn mode_question() -> String {
    "Which color appears most often in the image?".to_string()
}

pub fn count_question(color: &str) -> String {
    format!("How many {color} patches are there in the image?")
}

/// "There are 3 red, 5 blue and 4 green patches."
pub fn count_sentence(hist: &[usize]) -> String {
    let parts: Vec<String> = hist.iter().zip(COLORS).map(|(k, c)| format!("{k} {c}")).collect();
    let (last, rest) = parts.split_last().expect("at least two colors");
    format!("There are {} and {last} patches.", rest.join(", "))
}

pub fn mode_rationale(hist: &[usize], mode: usize, letter: char) -> String {
    format!(
        "{} The most frequent color is {}, option ({letter}).",
        count_sentence(hist),
        COLORS[mode]
    )
}

pub fn count_rationale(hist: &[usize], asked: usize, letter: char) -> String {
    format!(
        "{} So the number of {} patches is {}, option ({letter}).",
        count_sentence(hist),
        COLORS[asked],
        hist[asked]
    )
}

/// Counts per color as stated by a rationale's first sentence.
pub fn parse_count_sentence(rationale: &str, n_colors: usize) -> Option<Vec<usize>> {
    let body = rationale.strip_prefix("There are ")?;
    let body = &body[..body.find(" patches.")?];
    let body = body.replacen(" and ", ", ", 1);
    let mut hist = vec![None; n_colors];
    for part in body.split(", ") {
        let (k, c) = part.split_once(' ')?;
        let color = COLORS[..n_colors].iter().position(|x| *x == c)?;
        hist[color] = Some(k.parse().ok()?);
    }
    hist.into_iter().collect()
}

/// "A classmate ruled out (B)." / "... ruled out (A) and (D)."
pub fn ruled_out_context(letters: &[char]) -> String {
    let marks: Vec<String> = letters.iter().map(|l| format!("({l})")).collect();
    let list = match marks.split_last() {
        Some((last, [])) => last.clone(),
        Some((last, rest)) => format!("{} and {last}", rest.join(", ")),
        None => return String::new(),
    };
    format!("A classmate ruled out {list}.")
}

fn histogram(colors: &[usize], n_colors: usize) -> Vec<usize> {
    let mut h = vec![0; n_colors];
    for &c in colors {
        h[c] += 1;
    }
    h
}

/// Index of the unique most frequent color if it leads by `MODE_MARGIN`.
fn clear_mode(hist: &[usize]) -> Option<usize> {
    let (best, &top) = hist.iter().enumerate().max_by_key(|&(i, &c)| (c, usize::MAX - i))?;
    let runner_up = hist
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != best)
        .map(|(_, &c)| c)
        .max()
        .unwrap_or(0);
    (top >= runner_up + MODE_MARGIN).then_some(best)
}

fn draw_colors(rng: &mut ChaCha8Rng, m: usize, n_colors: usize) -> Vec<usize> {
    (0..m).map(|_| rng.gen_range(0..n_colors)).collect()
}

/// Largest count of any one color in an image, which keeps the numbers a
/// rationale can state to a small set.
pub fn count_cap(config: &SyntheticConfig) -> usize {
    (config.m / 2).max(config.m.div_ceil(config.n_colors) + MODE_MARGIN)
}

/// Smallest count offered as an option for "how many" questions; options
/// cover `n_options` consecutive counts from here.
pub fn count_window_start(config: &SyntheticConfig) -> usize {
    (config.m / config.n_colors).saturating_sub((config.n_options() - 1) / 2)
}

/// Generates `n_samples` samples and their patch features under `seed`.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<(Vec<Sample>, FeatureMap), DataError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0, config.noise_std).expect("validated noise");
    let n_colors = config.n_colors;
    let mut samples = Vec::with_capacity(config.n_samples);
    let mut features = FeatureMap::with_capacity(config.n_samples);

    for i in 0..config.n_samples {
        let is_count = rng.gen_bool(config.count_fraction);
        let (patch_colors, question, mut options, mut answer_index, asked) = if is_count {
            let asked = rng.gen_range(0..n_colors);
            let start = count_window_start(config);
            let answer_index = rng.gen_range(0..config.n_options());
            let k = start + answer_index;
            let cap = count_cap(config);
            let mut colors = loop {
                let colors: Vec<usize> = (0..config.m)
                    .map(|p| {
                        if p < k {
                            asked
                        } else {
                            (asked + rng.gen_range(1..n_colors)) % n_colors
                        }
                    })
                    .collect();
                if histogram(&colors, n_colors).iter().all(|&c| c <= cap) {
                    break colors;
                }
            };
            colors.shuffle(&mut rng);
            let options: Vec<String> = (start..start + config.n_options()).map(|v| v.to_string()).collect();
            (colors, count_question(COLORS[asked]), options, answer_index, Some(asked))
        } else {
            let (colors, mode) = loop {
                let colors = draw_colors(&mut rng, config.m, n_colors);
                let hist = histogram(&colors, n_colors);
                if hist.iter().all(|&c| c <= count_cap(config)) {
                    if let Some(mode) = clear_mode(&hist) {
                        break (colors, mode);
                    }
                }
            };
            let mut others: Vec<usize> = (0..n_colors).filter(|&c| c != mode).collect();
            others.shuffle(&mut rng);
            let mut offered = vec![mode];
            offered.extend_from_slice(&others[..config.n_distractors]);
            offered.sort_unstable();
            let answer_index = offered.iter().position(|&c| c == mode).unwrap();
            let options: Vec<String> = offered.iter().map(|&c| COLORS[c].to_string()).collect();
            (colors, mode_question(), options, answer_index, None)
        };

        if config.shuffle_options {
            let answer = options[answer_index].clone();
            options.shuffle(&mut rng);
            answer_index = options.iter().position(|o| *o == answer).unwrap();
        }
        let hist = histogram(&patch_colors, n_colors);
        let letter = option_letter(answer_index);
        let rationale = match asked {
            Some(c) => count_rationale(&hist, c, letter),
            None => mode_rationale(&hist, clear_mode(&hist).expect("drawn with a clear mode"), letter),
        };

        let mut wrong: Vec<usize> = (0..options.len()).filter(|&j| j != answer_index).collect();
        wrong.shuffle(&mut rng);
        let mut ruled_out = wrong[..config.ruled_out].to_vec();
        ruled_out.sort_unstable();
        let letters: Vec<char> = ruled_out.into_iter().map(option_letter).collect();
        let context = ruled_out_context(&letters);

        let mut patches = Vec::with_capacity(config.m * config.d_v);
        for &c in &patch_colors {
            for dim in 0..config.d_v {
                let base = if dim == c { 1.0 } else { 0.0 };
                patches.push((base + noise.sample(&mut rng)) as f32);
            }
        }
        let image_id = format!("img{i:05}");
        features.insert(
            image_id.clone(),
            VisionFeatures::new(config.m, config.d_v, patches).expect("finite features"),
        );
        samples.push(Sample {
            id: format!("s{i:05}"),
            question,
            context,
            options,
            rationale,
            answer_index,
            image_id: Some(image_id),
        });
    }
    Ok((samples, features))
}

/// Patch colors recovered as the argmax over the color dimensions.
pub fn decode_patch_colors(features: &VisionFeatures, n_colors: usize) -> Vec<usize> {
    (0..features.m())
        .map(|p| {
            let row = &features.patch(p)[..n_colors];
            (0..n_colors)
                .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                .unwrap()
        })
        .collect()
}

/// Checks a generated sample against its image: the rationale's stated
/// counts match the patches and its conclusion is the gold option.
pub fn audit_sample(sample: &Sample, features: &VisionFeatures, n_colors: usize) -> Result<(), String> {
    let stated = parse_count_sentence(&sample.rationale, n_colors)
        .ok_or_else(|| format!("unrecognized rationale {:?}", sample.rationale))?;
    let hist = histogram(&decode_patch_colors(features, n_colors), n_colors);
    if stated != hist {
        return Err(format!("rationale says {stated:?}, image has {hist:?}"));
    }
    let gold = &sample.options[sample.answer_index];
    let expected = if sample.question.starts_with("How many") {
        let asked = COLORS[..n_colors]
            .iter()
            .position(|c| sample.question.contains(&format!(" {c} ")))
            .ok_or("no color named")?;
        hist[asked].to_string()
    } else {
        COLORS[clear_mode(&hist).ok_or(format!("no clear mode in {hist:?}"))?].to_string()
    };
    if *gold != expected {
        return Err(format!("gold option {gold} but the image gives {expected}"));
    }
    let letter = option_letter(sample.answer_index);
    if !sample.rationale.ends_with(&format!(" {expected}, option ({letter}).")) {
        return Err(format!("rationale does not conclude with {expected}"));
    }
    Ok(())
}
