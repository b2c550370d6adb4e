//! Word-level tokenizer with a closed vocabulary.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const SOS: u32 = 2;
pub const EOS: u32 = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<sos>", "<eos>"];

/// Lowercased alphanumeric runs; whitespace and punctuation separate words.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

/// A fixed-length id sequence: `SOS w_1 .. w_n EOS PAD ..`, `M + 2` long.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub real_length: usize,
    pub eos_index: usize,
}

impl TokenSequence {
    /// Words the sequence can hold (`M`).
    pub fn capacity(&self) -> usize {
        self.ids.len() - 2
    }

    /// Non-pad positions.
    pub fn valid_mask(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.ids.len()).map(move |i| i < self.real_length)
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.ids.len() < 2 || self.ids[0] != SOS {
            return Err(Error::contract("token sequence must start with SOS"));
        }
        if self.eos_index >= self.ids.len() || self.ids[self.eos_index] != EOS {
            return Err(Error::contract(format!(
                "eos_index {} does not point at EOS in a sequence of length {}",
                self.eos_index,
                self.ids.len()
            )));
        }
        if let Some(&bad) = self.ids.iter().find(|&&id| id as usize >= vocab_size) {
            return Err(Error::contract(format!(
                "token id {bad} outside vocabulary of {vocab_size}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Specials first, then every distinct word of `corpus` in sorted order.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = corpus.into_iter().flat_map(words).collect();
        Self::from_tokens(SPECIALS.iter().map(|s| s.to_string()).chain(words).collect())
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    /// Lowercase, split, keep at most `m` words, wrap in SOS/EOS, zero-pad.
    pub fn tokenize(&self, text: &str, m: usize) -> TokenSequence {
        let mut ids = Vec::with_capacity(m + 2);
        ids.push(SOS);
        ids.extend(words(text).take(m).map(|w| self.id(&w)));
        let eos_index = ids.len();
        ids.push(EOS);
        let real_length = ids.len();
        ids.resize(m + 2, PAD);
        TokenSequence {
            ids,
            real_length,
            eos_index,
        }
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < SPECIALS.len() || tokens[..4] != SPECIALS {
            return Err(Error::Format {
                what: "vocabulary",
                detail: "the first four lines must be <pad>, <unk>, <sos>, <eos>".into(),
            });
        }
        Ok(Self::from_tokens(tokens))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::build(["a person in a red coat", "blue shoes, black bag."])
    }

    #[test]
    fn empty_query() {
        let t = vocab().tokenize("", 16);
        assert_eq!(t.ids.len(), 18);
        assert_eq!(&t.ids[..3], &[SOS, EOS, PAD]);
        assert_eq!(t.eos_index, 1);
        assert_eq!(t.real_length, 2);
    }

    #[test]
    fn long_query_is_truncated_to_m_words() {
        let text = vec!["red"; 200].join(" ");
        let t = vocab().tokenize(&text, 77);
        assert_eq!(t.ids.len(), 79);
        assert_eq!(t.eos_index, 78);
        assert!(t.ids[1..78].iter().all(|&id| id == vocab().id("red")));
        assert_eq!(t.ids[78], EOS);
    }

    #[test]
    fn case_folding_and_punctuation() {
        let v = vocab();
        assert_eq!(v.tokenize("Red coat", 8), v.tokenize("red coat", 8));
        assert_eq!(v.tokenize("red, coat!", 8), v.tokenize("red coat", 8));
        assert_eq!(v.tokenize("purple", 8).ids[1], UNK);
    }

    #[test]
    fn file_format_roundtrip() {
        let v = vocab();
        let text = v.to_text();
        assert!(text.starts_with("<pad>\n<unk>\n<sos>\n<eos>\n"));
        assert_eq!(Vocabulary::parse(&text).unwrap(), v);
        assert!(Vocabulary::parse("a\nb\n").is_err());
    }

    #[test]
    fn validate_catches_bad_eos() {
        let v = vocab();
        let mut t = v.tokenize("red coat", 4);
        assert!(t.validate(v.len()).is_ok());
        t.eos_index = 9;
        assert!(t.validate(v.len()).is_err());
    }
}
