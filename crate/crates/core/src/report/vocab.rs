use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const SOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<sos>", "<eos>", "<unk>"];

fn is_punct(c: char) -> bool {
    matches!(c, '.' | ',' | ';' | ':' | '!' | '?')
}

/// Lowercased word tokens with punctuation split off as separate tokens.
pub fn tokenize_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let mut word = String::new();
        for c in raw.chars() {
            if is_punct(c) {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(c.to_string());
            } else {
                word.extend(c.to_lowercase());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

/// Inverse of [`tokenize_words`] up to capitalisation: punctuation attaches
/// to the previous word and sentence starts are capitalised.
pub fn detokenize_words<S: AsRef<str>>(words: &[S]) -> String {
    let mut out = String::new();
    let mut sentence_start = true;
    for w in words {
        let w = w.as_ref();
        let punct = w.chars().all(is_punct);
        if !out.is_empty() && !punct {
            out.push(' ');
        }
        if sentence_start && !punct {
            let mut chars = w.chars();
            if let Some(first) = chars.next() {
                out.extend(first.to_uppercase());
                out.push_str(chars.as_str());
            }
            sentence_start = false;
        } else {
            out.push_str(w);
        }
        if matches!(w, "." | "!" | "?") {
            sentence_start = true;
        }
    }
    out
}

/// Closed word-level vocabulary with four reserved ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i as TokenId)).collect();
        Vocabulary { words, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.words
    }
}

impl Vocabulary {
    /// Reserved tokens followed by `words` in sorted order, so the ids do not
    /// depend on iteration order of the source.
    pub fn from_words<I, S>(words: I) -> Vocabulary
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let sorted: BTreeSet<String> = words
            .into_iter()
            .map(Into::into)
            .filter(|w| !SPECIALS.contains(&w.as_str()))
            .collect();
        let all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).chain(sorted).collect();
        Vocabulary::from(all)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> TokenId {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        tokenize_words(text).iter().map(|w| self.id(w)).collect()
    }

    /// `<sos> words <eos>`.
    pub fn encode_report(&self, text: &str) -> Vec<TokenId> {
        let mut ids = vec![SOS];
        ids.extend(self.encode(text));
        ids.push(EOS);
        ids
    }

    /// Decodes up to the first `<eos>`, skipping `<pad>` and `<sos>`.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut words = Vec::new();
        for &id in ids {
            match id {
                EOS => break,
                PAD | SOS => continue,
                _ => words.push(
                    self.word(id).ok_or_else(|| Error::invalid(format!("token id {id} out of range")))?,
                ),
            }
        }
        Ok(detokenize_words(&words))
    }

    /// Number of tokens in `text` that fall outside the vocabulary.
    pub fn count_unknown(&self, text: &str) -> usize {
        self.encode(text).iter().filter(|&&id| id == UNK).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_splits_punctuation() {
        assert_eq!(
            tokenize_words("The scan is mirrored, with X."),
            vec!["the", "scan", "is", "mirrored", ",", "with", "x", "."]
        );
    }

    #[test]
    fn detokenize_round_trip() {
        let text = "The scan is mirrored, with the left side shown. The image is not rotated.";
        assert_eq!(detokenize_words(&tokenize_words(text)), text);
    }

    #[test]
    fn reserved_ids_and_sorting() {
        let v = Vocabulary::from_words(["zeta", "alpha", "alpha"]);
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("<pad>"), PAD);
        assert_eq!(v.id("<eos>"), EOS);
        assert_eq!(v.id("alpha"), 4);
        assert_eq!(v.id("zeta"), 5);
        assert_eq!(v.id("missing"), UNK);
    }

    #[test]
    fn decode_stops_at_eos() {
        let v = Vocabulary::from_words(["the", "scan", "."]);
        let ids = v.encode_report("the scan.");
        let mut padded = ids.clone();
        padded.extend([v.id("scan"), PAD]);
        assert_eq!(v.decode(&padded).unwrap(), "The scan.");
        assert!(v.decode(&[99]).is_err());
    }

    #[test]
    fn serde_round_trip() {
        let v = Vocabulary::from_words(["b", "a"]);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
    }
}
