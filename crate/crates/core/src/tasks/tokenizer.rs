//! Fixed character-level vocabulary.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const MASK: u32 = 3;
const N_SPECIAL: u32 = 4;

const SYMBOLS: &str = "0123456789+-*/()=,.:;|<>_?!# \n";

#[derive(Debug, Clone)]
pub struct Tokenizer {
    chars: Vec<char>,
    ids: HashMap<char, u32>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::new()
    }
}

impl Tokenizer {
    pub fn new() -> Self {
        let chars: Vec<char> = SYMBOLS.chars().chain('a'..='z').chain('A'..='Z').collect();
        let ids = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i as u32 + N_SPECIAL))
            .collect();
        Self { chars, ids }
    }

    pub fn vocab_size(&self) -> usize {
        self.chars.len() + N_SPECIAL as usize
    }

    pub fn alphabet(&self) -> &[char] {
        &self.chars
    }

    pub fn is_special(id: u32) -> bool {
        id < N_SPECIAL
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.chars()
            .map(|c| {
                self.ids
                    .get(&c)
                    .copied()
                    .ok_or_else(|| Error::Data(format!("character {c:?} is not in the vocabulary")))
            })
            .collect()
    }

    /// Strict inverse of [`encode`](Self::encode); special ids are an error.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        ids.iter()
            .map(|&id| {
                self.char_of(id)
                    .ok_or_else(|| Error::Data(format!("id {id} is not a text character")))
            })
            .collect()
    }

    /// Text of a generated answer: characters up to the first EOS or PAD,
    /// with any other special id dropped.
    pub fn decode_answer(&self, ids: &[u32]) -> String {
        ids.iter()
            .take_while(|&&id| id != EOS && id != PAD)
            .filter_map(|&id| self.char_of(id))
            .collect()
    }

    /// Human-readable rendering that keeps special tokens visible.
    pub fn render(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| match id {
                PAD => "<pad>".to_string(),
                BOS => "<bos>".to_string(),
                EOS => "<eos>".to_string(),
                MASK => "<mask>".to_string(),
                _ => self
                    .char_of(id)
                    .map(String::from)
                    .unwrap_or_else(|| format!("<{id}>")),
            })
            .collect()
    }

    fn char_of(&self, id: u32) -> Option<char> {
        id.checked_sub(N_SPECIAL)
            .and_then(|i| self.chars.get(i as usize).copied())
    }
}
