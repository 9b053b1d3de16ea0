use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{sha256_hex, write_atomic};

pub const UNK: usize = 0;
pub const MASK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const PAD: usize = 4;
pub const NUM_SPECIALS: usize = 5;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<UNK>", "<MASK>", "<BOS>", "<EOS>", "<PAD>"];

const VOCAB_FORMAT: u32 = 1;

/// Token ↔ id map. Specials occupy ids `0..NUM_SPECIALS`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    cutoff: u64,
    counts_hash: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: u32,
    cutoff: u64,
    counts_hash: String,
    size: usize,
}

impl Vocabulary {
    /// Keeps tokens whose training count is strictly greater than `cutoff`,
    /// ordered by descending count then lexicographically.
    pub fn build<S: AsRef<str>>(sentences: &[Vec<S>], cutoff: u64) -> Self {
        let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
        for s in sentences {
            for t in s {
                *counts.entry(t.as_ref()).or_default() += 1;
            }
        }
        let mut counts_blob = Vec::new();
        for (t, c) in &counts {
            counts_blob.extend_from_slice(t.as_bytes());
            counts_blob.push(0);
            counts_blob.extend_from_slice(&c.to_le_bytes());
        }
        let mut kept: Vec<(&str, u64)> = counts
            .iter()
            .filter(|(t, c)| **c > cutoff && !SPECIAL_TOKENS.contains(t))
            .map(|(t, c)| (*t, *c))
            .collect();
        kept.sort_by(|x, y| y.1.cmp(&x.1).then(x.0.cmp(y.0)));

        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t.to_owned()))
            .collect();
        Self::from_tokens(tokens, cutoff, sha256_hex(&counts_blob))
    }

    fn from_tokens(tokens: Vec<String>, cutoff: u64, counts_hash: String) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            tokens,
            index,
            cutoff,
            counts_hash,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn cutoff(&self) -> u64 {
        self.cutoff
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(id: usize) -> bool {
        id < NUM_SPECIALS
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens
            .iter()
            .map(|t| self.id(t.as_ref()).unwrap_or(UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }

    /// Identity of the id assignment; models and question sets record it.
    pub fn hash(&self) -> String {
        sha256_hex(self.tokens.join("\n").as_bytes())
    }

    pub fn counts_hash(&self) -> &str {
        &self.counts_hash
    }

    pub fn to_file_string(&self) -> Result<String> {
        let header = Header {
            format: VOCAB_FORMAT,
            cutoff: self.cutoff,
            counts_hash: self.counts_hash.clone(),
            size: self.tokens.len(),
        };
        let mut s = serde_json::to_string(&header)?;
        s.push('\n');
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_file_string()?.as_bytes())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header: Header = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| Error::Format("empty vocabulary file".into()))?,
        )?;
        if header.format != VOCAB_FORMAT {
            return Err(Error::Format(format!(
                "unsupported vocabulary format {}",
                header.format
            )));
        }
        let tokens: Vec<String> = lines.map(str::to_owned).collect();
        if tokens.len() != header.size {
            return Err(Error::Format(format!(
                "vocabulary header says {} tokens, file has {}",
                header.size,
                tokens.len()
            )));
        }
        if tokens.len() < NUM_SPECIALS
            || tokens[..NUM_SPECIALS]
                .iter()
                .zip(SPECIAL_TOKENS)
                .any(|(a, b)| a != b)
        {
            return Err(Error::Format("vocabulary must start with the special tokens".into()));
        }
        Ok(Self::from_tokens(tokens, header.cutoff, header.counts_hash))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}
