//! Tokenization, vocabulary construction, sentence pairs and corpus splits.

mod abc;
mod split;
pub mod synth;
mod vocab;

pub use abc::{segment_abc, BAR_TOKEN};
pub use split::{split_documents, CorpusSplit, Partition, SplitManifest, SplitRatios};
pub use vocab::{
    Vocabulary, BOS, EOS, MASK, NUM_SPECIALS, PAD, SPECIAL_TOKENS, UNK,
};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// How raw corpus lines become tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusKind {
    /// One sentence per line, blank line between documents, rule-based tokenizer.
    #[default]
    Text,
    /// One pre-tokenized tune per line, four-bar segments as sentences.
    Abc,
}

impl CorpusKind {
    /// Tokenizes a single sentence of this corpus kind.
    pub fn tokenize(self, text: &str) -> Vec<String> {
        match self {
            CorpusKind::Text => tokenize(text),
            CorpusKind::Abc => text.split_whitespace().map(str::to_owned).collect(),
        }
    }
}

/// Lowercases, splits on whitespace, detaches leading and trailing
/// punctuation and splits on apostrophes. Special tokens such as `<UNK>`
/// pass through untouched.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        if SPECIAL_TOKENS.contains(&chunk) {
            out.push(chunk.to_owned());
            continue;
        }
        let lower = chunk.to_lowercase();
        let mut piece = String::new();
        for ch in lower.chars() {
            if is_apostrophe(ch) {
                push_piece(&mut out, &piece);
                piece.clear();
                out.push(ch.to_string());
            } else {
                piece.push(ch);
            }
        }
        push_piece(&mut out, &piece);
    }
    out
}

fn is_apostrophe(ch: char) -> bool {
    ch == '\'' || ch == '\u{2019}'
}

fn is_punct(ch: char) -> bool {
    !ch.is_alphanumeric()
}

fn push_piece(out: &mut Vec<String>, piece: &str) {
    if piece.is_empty() {
        return;
    }
    let chars: Vec<char> = piece.chars().collect();
    let start = chars.iter().position(|c| !is_punct(*c));
    let Some(start) = start else {
        out.extend(chars.iter().map(|c| c.to_string()));
        return;
    };
    let end = chars.iter().rposition(|c| !is_punct(*c)).expect("has a word char") + 1;
    out.extend(chars[..start].iter().map(|c| c.to_string()));
    out.push(chars[start..end].iter().collect());
    out.extend(chars[end..].iter().map(|c| c.to_string()));
}

/// A document as an ordered list of tokenized sentences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawDocument {
    pub id: usize,
    pub sentences: Vec<Vec<String>>,
}

/// Parses a corpus file's contents into documents. Sentences that are
/// empty after tokenization are dropped.
pub fn parse_corpus(text: &str, kind: CorpusKind) -> Vec<RawDocument> {
    match kind {
        CorpusKind::Text => {
            let mut docs = Vec::new();
            let mut current: Vec<Vec<String>> = Vec::new();
            for line in text.lines() {
                if line.trim().is_empty() {
                    if !current.is_empty() {
                        docs.push(std::mem::take(&mut current));
                    }
                    continue;
                }
                let toks = tokenize(line);
                if !toks.is_empty() {
                    current.push(toks);
                }
            }
            if !current.is_empty() {
                docs.push(current);
            }
            docs.into_iter()
                .enumerate()
                .map(|(id, sentences)| RawDocument { id, sentences })
                .collect()
        }
        CorpusKind::Abc => text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(id, line)| {
                let toks: Vec<String> = line.split_whitespace().map(str::to_owned).collect();
                RawDocument {
                    id,
                    sentences: segment_abc(&toks, BAR_TOKEN),
                }
            })
            .collect(),
    }
}

pub fn read_corpus(path: &Path, kind: CorpusKind) -> Result<Vec<RawDocument>> {
    Ok(parse_corpus(&std::fs::read_to_string(path)?, kind))
}

/// Preceding sentence `a` and following sentence `b` from one document.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub a: Vec<usize>,
    pub b: Vec<usize>,
    pub doc: usize,
}

/// An encoded document.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub id: usize,
    pub sentences: Vec<Vec<usize>>,
}

/// One pair per adjacent sentence couple inside each document.
pub fn make_pairs(documents: &[Document]) -> Vec<SentencePair> {
    documents
        .iter()
        .flat_map(|d| {
            d.sentences.windows(2).filter(|&w| !w[0].is_empty() && !w[1].is_empty()).map(|w| SentencePair {
                    a: w[0].clone(),
                    b: w[1].clone(),
                    doc: d.id,
                })
        })
        .collect()
}

pub fn encode_documents(docs: &[RawDocument], vocab: &Vocabulary) -> Vec<Document> {
    docs.iter()
        .map(|d| Document {
            id: d.id,
            sentences: d.sentences.iter().map(|s| vocab.encode(s)).collect(),
        })
        .collect()
}
