use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
/// Words the detector cannot work without.
pub const REQUIRED_WORDS: [&str; 4] = ["yes", "no", "directed", "decision"];
pub const DEFAULT_VOCAB_SIZE: usize = 512;
/// Hypotheses are truncated to this many tokens.
pub const DEFAULT_MAX_TOKENS: usize = 16;

/// Word-level vocabulary with stable ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// `<pad>`, `<unk>`, the required words, then `words` in sorted order,
    /// padded with `<unused_k>` entries up to `size`.
    pub fn build<'w>(words: impl IntoIterator<Item = &'w str>, size: usize) -> Result<Self> {
        let mut tokens: Vec<String> = vec![PAD.into(), UNK.into()];
        tokens.extend(REQUIRED_WORDS.iter().map(|w| w.to_string()));
        let mut rest: Vec<String> =
            words.into_iter().flat_map(normalize_words).filter(|w| !tokens.contains(w)).collect();
        rest.sort();
        rest.dedup();
        tokens.extend(rest);
        if tokens.len() > size {
            return Err(Error::Config(format!("{} distinct words do not fit a vocabulary of {size}", tokens.len())));
        }
        let mut k = 0;
        while tokens.len() < size {
            tokens.push(format!("<unused_{k}>"));
            k += 1;
        }
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate token `{t}`")));
            }
        }
        for w in [PAD, UNK].iter().chain(REQUIRED_WORDS.iter()) {
            if !index.contains_key(*w) {
                return Err(Error::Config(format!("vocabulary lacks `{w}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn pad(&self) -> TokenId {
        self.index[PAD]
    }

    pub fn unk(&self) -> TokenId {
        self.index[UNK]
    }

    pub fn yes(&self) -> TokenId {
        self.index["yes"]
    }

    pub fn no(&self) -> TokenId {
        self.index["no"]
    }

    /// Normalises, maps out-of-vocabulary words to `<unk>` and keeps at most
    /// `max_tokens` ids.
    pub fn tokenize(&self, text: &str, max_tokens: usize) -> Vec<TokenId> {
        normalize_words(text).take(max_tokens).map(|w| self.id(&w).unwrap_or_else(|| self.unk())).collect()
    }

    /// Space-joined tokens, skipping `<pad>`.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        let pad = self.pad();
        ids.iter().filter(|&&id| id != pad).map(|&id| self.token(id).unwrap_or(UNK)).collect::<Vec<_>>().join(" ")
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Self::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// Lowercases, splits on whitespace and trims non-alphanumeric characters
/// from both ends of each word; words left empty are dropped.
pub fn normalize_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().filter_map(|w| {
        let w = w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
        (!w.is_empty()).then_some(w)
    })
}

/// The normalised form of `text`: its words joined by single spaces.
pub fn normalize(text: &str) -> String {
    normalize_words(text).collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> Vocabulary {
        Vocabulary::build(["set", "an", "alarm", "for", "8", "am", "what's", "the", "temperature"], DEFAULT_VOCAB_SIZE)
            .unwrap()
    }

    #[test]
    fn empty_text_is_empty() {
        assert!(vocab().tokenize("", 16).is_empty());
    }

    #[test]
    fn table_example_tokenizes_word_by_word() {
        let v = vocab();
        let ids = v.tokenize("Set an alarm for 8 AM", 16);
        let words: Vec<_> = ids.iter().map(|&i| v.token(i).unwrap()).collect();
        assert_eq!(words, ["set", "an", "alarm", "for", "8", "am"]);
    }

    #[test]
    fn prompt_strips_trailing_colon() {
        let v = vocab();
        let ids = v.tokenize("directed decision:", 16);
        assert_eq!(ids, vec![v.id("directed").unwrap(), v.id("decision").unwrap()]);
    }

    #[test]
    fn inner_apostrophes_survive() {
        let v = vocab();
        assert_eq!(v.detokenize(&v.tokenize("\"What's the temperature?\"", 16)), "what's the temperature");
    }

    #[test]
    fn unknown_words_map_to_unk_and_long_input_truncates() {
        let v = vocab();
        let ids = v.tokenize("zebra set zebra", 2);
        assert_eq!(ids, vec![v.unk(), v.id("set").unwrap()]);
    }

    #[test]
    fn yes_and_no_are_single_tokens() {
        let v = vocab();
        assert_eq!(v.tokenize("yes", 16), vec![v.yes()]);
        assert_eq!(v.tokenize("No.", 16), vec![v.no()]);
        assert_eq!(v.len(), DEFAULT_VOCAB_SIZE);
    }

    #[test]
    fn serde_keeps_ids() {
        let v = vocab();
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(v, back);
    }

    proptest! {
        #[test]
        fn tokenize_is_total(s in "\\PC{0,80}") {
            let v = vocab();
            let ids = v.tokenize(&s, 16);
            prop_assert!(ids.len() <= 16);
            prop_assert!(ids.iter().all(|&i| i < v.len()));
        }

        #[test]
        fn in_vocabulary_round_trip(words in proptest::collection::vec(
            prop::sample::select(vec!["Set", "an", "ALARM", "for", "8", "am!", "what's", "the"]), 0..12)) {
            let v = vocab();
            let s = words.join(" ");
            prop_assert_eq!(v.detokenize(&v.tokenize(&s, 16)), normalize(&s));
        }
    }
}
