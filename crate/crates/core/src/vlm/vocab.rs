//! Closed word-level vocabulary over the question/answer lexicon.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::provenance::sha256_hex;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const IMG: usize = 3;
pub const PSEUDO: usize = 4;

pub const PSEUDO_WORD: &str = "s*";

const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<img>", PSEUDO_WORD];

const WORDS: [&str; 35] = [
    // question
    "is", "this", "photo", "fake", ",", "and", "what", "its", "source", "generator", "?",
    // answers
    "no", "it", "a", "real", "sample", ".", "yes", "generated", "by", "model", "gan", "diffusion",
    // generator names ("stable diffusion" is two tokens)
    "progan", "stylegan", "diff-projectedgan", "ldm", "glide", "stable", "adm", "ddpm", "iddpm", "pndm",
    "diff-stylegan2", "projectedgan",
];

/// Position class of a token in the model context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Image,
    Prompt,
    Answer,
}

/// Token ids with a role tag per position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub roles: Vec<Role>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, role: Role) -> Self {
        let roles = vec![role; ids.len()];
        Self { ids, roles }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn pseudo_count(&self) -> usize {
        self.ids.iter().filter(|&&t| t == PSEUDO).count()
    }
}

#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<&'static str>,
    index: HashMap<&'static str, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

fn is_punct(c: char) -> bool {
    matches!(c, ',' | '.' | '?')
}

impl Vocab {
    pub fn new() -> Self {
        let words: Vec<&'static str> = SPECIALS.iter().chain(WORDS.iter()).copied().collect();
        let index = words.iter().enumerate().map(|(i, w)| (*w, i)).collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, id: usize) -> Option<&'static str> {
        self.words.get(id).copied()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Stable fingerprint of the token table, stored in checkpoints.
    pub fn hash(&self) -> String {
        sha256_hex(self.words.join("\n").as_bytes())
    }

    /// Lowercases and splits into words and the punctuation marks `, . ?`.
    pub fn split_words(text: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut cur = String::new();
        for c in text.to_lowercase().chars() {
            if c.is_whitespace() || is_punct(c) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                if is_punct(c) {
                    out.push(c.to_string());
                }
            } else {
                cur.push(c);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
        out
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        Self::split_words(text)
            .into_iter()
            .map(|w| self.id(&w).ok_or(Error::UnknownToken(w)))
            .collect()
    }

    /// Joins words with single spaces, attaching punctuation to the previous
    /// word. Control tokens are dropped; ids past the table render as `<unk>`.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if matches!(id, PAD | BOS | EOS | IMG) {
                continue;
            }
            let w = self.word(id).unwrap_or("<unk>");
            let punct = w.len() == 1 && w.chars().all(is_punct);
            if !out.is_empty() && !punct {
                out.push(' ');
            }
            out.push_str(w);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segments_the_real_template() {
        let v = Vocab::new();
        let ids = v.tokenize("No, it is a real sample.").unwrap();
        let words: Vec<_> = ids.iter().map(|i| v.word(*i).unwrap()).collect();
        assert_eq!(words, ["no", ",", "it", "is", "a", "real", "sample", "."]);
    }

    #[test]
    fn unknown_words_are_errors() {
        let v = Vocab::new();
        assert!(matches!(v.tokenize("zebra"), Err(Error::UnknownToken(w)) if w == "zebra"));
    }

    #[test]
    fn pseudo_word_is_one_token() {
        let v = Vocab::new();
        assert_eq!(v.tokenize("S*").unwrap(), vec![PSEUDO]);
        assert_eq!(v.tokenize("generator S*?").unwrap().len(), 3);
    }

    #[test]
    fn size_and_uniqueness() {
        let v = Vocab::new();
        assert_eq!(v.len(), 40);
        assert_eq!(v.index.len(), v.len());
    }

    #[test]
    fn detokenize_normalizes() {
        let v = Vocab::new();
        let t = "Yes, it is a fake sample generated by stable diffusion, a diffusion model.";
        assert_eq!(v.detokenize(&v.tokenize(t).unwrap()), t.to_lowercase());
        assert_eq!(v.detokenize(&[BOS, EOS, PAD]), "");
    }
}
