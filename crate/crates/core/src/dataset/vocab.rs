use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Lowercases and splits on runs of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Token-to-id map. Ids 0 and 1 are reserved for padding and unknown tokens;
/// real tokens follow in order of decreasing frequency, ties alphabetical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    counts: Vec<usize>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>, counts: Vec<usize>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, counts, index }
    }

    /// Rebuilds the lookup index after deserialization.
    pub fn reindex(mut self) -> Self {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        self
    }

    /// Number of real tokens, excluding the reserved ids.
    pub fn len(&self) -> usize {
        self.tokens.len() - 2
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Size of the id space including reserved ids.
    pub fn id_count(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn count(&self, id: usize) -> usize {
        self.counts.get(id).copied().unwrap_or(0)
    }
}

pub fn build_vocab<S: AsRef<str>>(texts: &[S], min_freq: usize) -> Result<Vocab> {
    if texts.is_empty() {
        return Err(Error::Input("cannot build a vocabulary from no texts".into()));
    }
    let mut freq: HashMap<String, usize> = HashMap::new();
    for t in texts {
        for tok in tokenize(t.as_ref()) {
            *freq.entry(tok).or_default() += 1;
        }
    }
    let mut kept: Vec<(String, usize)> = freq.into_iter().filter(|(_, c)| *c >= min_freq.max(1)).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
    let mut counts = vec![0, 0];
    for (t, c) in kept {
        tokens.push(t);
        counts.push(c);
    }
    Ok(Vocab::from_tokens(tokens, counts))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    /// Exactly `max_len` ids, pad-filled after `length`.
    pub token_ids: Vec<usize>,
    pub length: usize,
    pub max_len: usize,
    /// Token count before truncation.
    pub original_length: usize,
}

impl TokenSequence {
    pub fn truncated(&self) -> bool {
        self.original_length > self.length
    }

    pub fn real_ids(&self) -> &[usize] {
        &self.token_ids[..self.length]
    }
}

/// Tokenizes, keeps the first `max_len` tokens and pads to `max_len`.
pub fn tokenize_and_pad(text: &str, vocab: &Vocab, max_len: usize) -> Result<TokenSequence> {
    if max_len == 0 {
        return Err(Error::Parameter("max_len must be at least 1".into()));
    }
    let toks = tokenize(text);
    let length = toks.len().min(max_len);
    let mut token_ids = vec![PAD_ID; max_len];
    for (slot, tok) in token_ids.iter_mut().zip(&toks) {
        *slot = vocab.id(tok).unwrap_or(UNK_ID);
    }
    Ok(TokenSequence {
        token_ids,
        length,
        max_len,
        original_length: toks.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tokenizer_lowercases_and_splits_punctuation() {
        assert_eq!(tokenize("The start of the race."), ["the", "start", "of", "the", "race"]);
        assert_eq!(tokenize("3/4 full--Bake!"), ["3", "4", "full", "bake"]);
        assert!(tokenize("  ...  ").is_empty());
    }

    #[test]
    fn min_freq_filters_rare_tokens() {
        let v = build_vocab(&["a a b"], 2).unwrap();
        assert_eq!(v.len(), 1);
        assert!(v.id("a").is_some());
        assert!(v.id("b").is_none());
        assert_eq!(v.id(PAD_TOKEN), Some(PAD_ID));
        assert_eq!(v.id(UNK_TOKEN), Some(UNK_ID));
    }

    #[test]
    fn empty_text_list_is_rejected() {
        let none: [&str; 0] = [];
        assert!(build_vocab(&none, 1).is_err());
    }

    #[test]
    fn caption_pads_to_max_len() {
        let v = build_vocab(&["The start of the race."], 1).unwrap();
        let s = tokenize_and_pad("The start of the race.", &v, 40).unwrap();
        assert_eq!(s.length, 5);
        assert_eq!(s.token_ids.len(), 40);
        assert!(s.token_ids[5..].iter().all(|&i| i == PAD_ID));
        assert!(!s.truncated());
    }

    #[test]
    fn long_instruction_keeps_prefix() {
        let text: Vec<String> = (0..250).map(|i| format!("w{i}")).collect();
        let text = text.join(" ");
        let v = build_vocab(&[text.as_str()], 1).unwrap();
        let s = tokenize_and_pad(&text, &v, 200).unwrap();
        assert_eq!(s.length, 200);
        assert!(s.truncated());
        assert_eq!(s.token_ids[0], v.id("w0").unwrap());
        assert_eq!(s.token_ids[199], v.id("w199").unwrap());
    }

    #[test]
    fn empty_string_is_all_pad() {
        let v = build_vocab(&["x"], 1).unwrap();
        let s = tokenize_and_pad("", &v, 4).unwrap();
        assert_eq!(s.length, 0);
        assert_eq!(s.token_ids, vec![PAD_ID; 4]);
        assert!(tokenize_and_pad("x", &v, 0).is_err());
    }

    #[test]
    fn oov_maps_to_unknown() {
        let v = build_vocab(&["known"], 1).unwrap();
        let s = tokenize_and_pad("known unknown", &v, 3).unwrap();
        assert_eq!(&s.token_ids[..2], &[v.id("known").unwrap(), UNK_ID]);
    }

    proptest! {
        #[test]
        fn in_vocab_tokens_round_trip(words in prop::collection::vec("[a-z]{1,6}", 1..30)) {
            let text = words.join(" ");
            let v = build_vocab(&[text.as_str()], 1).unwrap();
            let s = tokenize_and_pad(&text, &v, 64).unwrap();
            let back: Vec<&str> = s.real_ids().iter().map(|&i| v.token(i).unwrap()).collect();
            let expected: Vec<&str> = words.iter().take(64).map(String::as_str).collect();
            prop_assert_eq!(back, expected);
        }
    }
}
