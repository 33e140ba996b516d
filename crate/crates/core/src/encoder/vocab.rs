//! Word-level tokenizer and vocabulary.
//!
//! Text is lowercased and split on whitespace and punctuation boundaries.
//! Punctuation characters become their own tokens, apostrophes between two
//! letters stay inside the word (`don't` is one token), and reserved bracket
//! tokens such as `[XATTR]` are kept whole.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::oracles::Relation;
use crate::util;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const PERSONA_TAG: &str = "[P]";
pub const HISTORY_TAG: &str = "[H]";

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;

/// Reserved tokens in id order.
pub fn reserved_tokens() -> Vec<String> {
    let mut out = vec![PAD.to_string(), UNK.to_string(), PERSONA_TAG.to_string(), HISTORY_TAG.to_string()];
    for r in Relation::ALL {
        out.push(r.open_token());
        out.push(r.close_token());
    }
    out
}

fn reserved_match(rest: &str) -> Option<usize> {
    let end = rest.find(']')?;
    let candidate = &rest[..=end];
    let upper = candidate.to_uppercase();
    reserved_tokens().iter().any(|t| *t == upper).then_some(end + 1)
}

/// Splits text into token strings without a vocabulary and without truncation.
pub fn split_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        if c == '[' {
            if let Some(len) = reserved_match(&text[pos..]) {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(text[pos..pos + len].to_uppercase());
                while i < chars.len() && chars[i].0 < pos + len {
                    i += 1;
                }
                continue;
            }
        }
        if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
        } else if c == '\'' && !word.is_empty() && chars.get(i + 1).is_some_and(|(_, n)| n.is_alphabetic()) {
            word.push(c);
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
        i += 1;
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::data(format!("duplicate vocabulary token `{t}`")));
            }
        }
        let vocab = Vocab { tokens, index };
        vocab.check_reserved()?;
        Ok(vocab)
    }

    /// Errors unless every reserved token sits at its fixed id.
    pub fn check_reserved(&self) -> Result<()> {
        for (i, t) in reserved_tokens().iter().enumerate() {
            if self.tokens.get(i) != Some(t) {
                return Err(Error::data(format!("vocabulary is missing reserved token {t} at id {i}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn digest(&self) -> String {
        util::sha256_hex(self.tokens.join("\n").as_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        util::atomic_write(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Vocab::from_tokens(text.lines().map(str::to_string).collect())
    }
}

/// Reserved tokens first, then every token seen at least `min_count` times,
/// ordered by descending frequency and then lexicographically.
pub fn build_vocab<'a>(texts: impl IntoIterator<Item = &'a str>, min_count: usize) -> Vocab {
    let reserved = reserved_tokens();
    let mut counts: HashMap<String, usize> = HashMap::new();
    for text in texts {
        for tok in split_tokens(text) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    let mut kept: Vec<(String, usize)> =
        counts.into_iter().filter(|(t, c)| *c >= min_count.max(1) && !reserved.contains(t)).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut tokens = reserved;
    tokens.extend(kept.into_iter().map(|(t, _)| t));
    Vocab::from_tokens(tokens).expect("reserved tokens are unique")
}

pub fn tokenize(text: &str, vocab: &Vocab, max_tokens: usize) -> Vec<u32> {
    split_tokens(text).iter().take(max_tokens.max(1)).map(|t| vocab.id(t)).collect()
}
