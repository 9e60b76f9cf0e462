use std::collections::{BTreeSet, HashMap};

use super::DataError;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Word-level tokens: runs of alphanumerics (and `_`), with every other
/// non-whitespace character as its own token.
pub fn split_tokens(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        let word = c.is_alphanumeric() || c == '_';
        if word {
            start.get_or_insert(i);
            continue;
        }
        if let Some(s) = start.take() {
            out.push(&text[s..i]);
        }
        if !c.is_whitespace() {
            out.push(&text[i..i + c.len_utf8()]);
        }
    }
    if let Some(s) = start {
        out.push(&text[s..]);
    }
    out
}

/// Canonical whitespace form: tokens joined by single spaces.
pub fn normalize(text: &str) -> String {
    split_tokens(text).join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved tokens followed by every distinct token of `texts`, sorted.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = BTreeSet::new();
        for t in texts {
            for w in split_tokens(t) {
                if !RESERVED.contains(&w) {
                    words.insert(w.to_string());
                }
            }
        }
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        Self::from_tokens(tokens).expect("built vocabulary is well formed")
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, DataError> {
        let bad = |m: String| DataError::Validation {
            id: "vocabulary".into(),
            message: m,
        };
        if tokens.len() < RESERVED.len() || tokens[..4] != RESERVED {
            return Err(bad("reserved tokens must occupy ids 0..3".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(bad(format!("invalid token {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(bad(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }
}

pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<usize> {
    split_tokens(text).into_iter().map(|w| vocab.id(w)).collect()
}

/// Space-joined tokens; PAD/BOS/EOS are dropped, UNK renders as `<unk>`.
pub fn detokenize(ids: &[usize], vocab: &Vocabulary) -> String {
    ids.iter()
        .filter(|&&id| !matches!(id, PAD | BOS | EOS))
        .map(|&id| vocab.token(id).unwrap_or(RESERVED[UNK]))
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn splits_punctuation() {
        assert_eq!(
            split_tokens("The answer is (B)."),
            ["The", "answer", "is", "(", "B", ")", "."]
        );
        assert_eq!(split_tokens("Context: N/A\n"), ["Context", ":", "N", "/", "A"]);
        assert!(split_tokens("  \n ").is_empty());
    }

    #[test]
    fn roundtrip_up_to_whitespace() {
        let v = Vocabulary::build(["The answer is (B)."]);
        let ids = tokenize("The answer is (B).", &v);
        assert_eq!(detokenize(&ids, &v), "The answer is ( B ) .");
        assert_eq!(normalize("The answer is (B)."), "The answer is ( B ) .");
    }

    #[test]
    fn unknown_word_maps_to_unk() {
        let v = Vocabulary::build(["red blue"]);
        assert_eq!(tokenize("red green", &v), vec![v.id("red"), UNK]);
        assert_eq!(v.id("<pad>"), PAD);
        assert_eq!(v.id("<eos>"), EOS);
    }

    #[test]
    fn from_tokens_validates_reserved_prefix() {
        let v = Vocabulary::build(["a b c"]);
        assert_eq!(Vocabulary::from_tokens(v.tokens().to_vec()).unwrap(), v);
        assert!(Vocabulary::from_tokens(vec!["a".into()]).is_err());
        let mut dup = v.tokens().to_vec();
        dup.push("a".into());
        assert!(Vocabulary::from_tokens(dup).is_err());
    }

    proptest! {
        #[test]
        fn in_vocab_text_roundtrips(words in prop::collection::vec("[a-z]{1,6}|[.,:()?]", 1..20)) {
            let text = words.join(" ");
            let v = Vocabulary::build([text.as_str()]);
            let ids = tokenize(&text, &v);
            prop_assert!(ids.iter().all(|&i| i != UNK));
            prop_assert_eq!(detokenize(&ids, &v), normalize(&text));
        }
    }
}
