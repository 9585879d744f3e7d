//! Word-level vocabulary with fixed reserved ids.
//!
//! Text is lowercased and split on whitespace; every non-alphanumeric
//! character becomes its own token. Vocabulary files are line oriented,
//! `id<TAB>token`, with the five reserved tokens always first.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const MASK: TokenId = 1;
pub const EOS: TokenId = 2;
pub const BOS: TokenId = 3;
pub const UNK: TokenId = 4;

pub const RESERVED: [&str; 5] = ["[PAD]", "[MASK]", "[EOS]", "[BOS]", "[UNK]"];

/// Token used to split documents into sentences.
pub const FULL_STOP: &str = ".";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

/// Lowercased word and punctuation tokens of `text`.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for ch in chunk.chars() {
            if ch.is_alphanumeric() {
                word.extend(ch.to_lowercase());
            } else {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_lowercase().collect());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

/// The canonical form that `decode(encode(s))` reproduces.
pub fn normalize(text: &str) -> String {
    split_words(text).join(" ")
}

impl Vocabulary {
    /// Ranks corpus words by frequency (ties lexicographic) and keeps the
    /// top `max_size - 5` after the reserved block.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Vocabulary> {
        if max_size <= RESERVED.len() {
            return Err(Error::contract(format!("max_size must exceed {}", RESERVED.len())));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in corpus {
            for w in split_words(line) {
                *counts.entry(w).or_default() += 1;
            }
        }
        counts.retain(|w, _| !RESERVED.contains(&w.as_str()));
        if counts.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - RESERVED.len());
        Ok(Self::from_tokens(ranked.into_iter().map(|(w, _)| w)))
    }

    fn from_tokens(words: impl IntoIterator<Item = String>) -> Vocabulary {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as TokenId))
            .collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn full_stop(&self) -> Option<TokenId> {
        self.id(FULL_STOP)
    }

    /// Unknown words map to `UNK`; bracketed reserved spellings in the text
    /// are treated as ordinary (unknown) words.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        split_words(text)
            .iter()
            .map(|w| match self.index.get(w) {
                Some(&id) if id as usize >= RESERVED.len() => id,
                _ => UNK,
            })
            .collect()
    }

    /// Space-joined tokens; `PAD` and `BOS` are dropped.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut words = Vec::with_capacity(ids.len());
        for &id in ids {
            if id == PAD || id == BOS {
                continue;
            }
            let w = self.token(id).ok_or(Error::Index {
                index: id as usize,
                size: self.len(),
            })?;
            words.push(w);
        }
        Ok(words.join(" "))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = Vec::new();
        for (i, tok) in self.tokens.iter().enumerate() {
            writeln!(out, "{i}\t{tok}")?;
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Vocabulary> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Vocabulary> {
        let mut words = Vec::new();
        let mut offset = 0;
        for (line_no, line) in text.lines().enumerate() {
            let bad = |message: String| Error::Format { offset, message };
            let (rank, tok) = line
                .split_once('\t')
                .ok_or_else(|| bad(format!("line {}: expected rank<TAB>token", line_no + 1)))?;
            let rank: usize = rank
                .parse()
                .map_err(|_| bad(format!("line {}: bad rank {rank:?}", line_no + 1)))?;
            if rank != line_no {
                return Err(bad(format!("line {}: rank {rank} out of order", line_no + 1)));
            }
            if line_no < RESERVED.len() {
                if tok != RESERVED[line_no] {
                    return Err(bad(format!("reserved slot {line_no} holds {tok:?}")));
                }
            } else {
                words.push(tok.to_string());
            }
            offset += line.len() + 1;
        }
        if text.lines().count() < RESERVED.len() {
            return Err(Error::Format {
                offset,
                message: "missing reserved header".into(),
            });
        }
        Ok(Self::from_tokens(words))
    }
}
