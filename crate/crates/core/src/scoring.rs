//! Sentence log-probabilities and the two answer-selection criteria.
//!
//! A context sentence `a` is consumed as `<BOS> a` and its final state
//! starts the run over `b <EOS>`. Unconditional runs start from the state
//! after `<BOS>` alone.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{LmGraph, LmParams};
use crate::tensor::Tape;

/// Which score picks the answer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Criterion {
    /// `log p(b|a)`.
    Conditional,
    /// `log p(b|a) − log p(b)`.
    Contrastive,
}

impl Criterion {
    pub const ALL: [Criterion; 2] = [Criterion::Conditional, Criterion::Contrastive];

    pub fn number(self) -> u8 {
        match self {
            Criterion::Conditional => 1,
            Criterion::Contrastive => 2,
        }
    }
}

impl TryFrom<u8> for Criterion {
    type Error = Error;

    fn try_from(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Criterion::Conditional),
            2 => Ok(Criterion::Contrastive),
            _ => Err(Error::invalid(format!("criterion must be 1 or 2, got {n}"))),
        }
    }
}

impl From<Criterion> for u8 {
    fn from(c: Criterion) -> u8 {
        c.number()
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let n: u8 = s
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("criterion must be 1 or 2, got {s:?}")))?;
        Criterion::try_from(n)
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

/// Conditional and unconditional log-probability of one candidate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceScore {
    pub log_cond: f64,
    pub log_uncond: f64,
}

impl SentenceScore {
    pub fn value(&self, criterion: Criterion) -> f64 {
        match criterion {
            Criterion::Conditional => self.log_cond,
            Criterion::Contrastive => self.log_cond - self.log_uncond,
        }
    }
}

pub(crate) fn check_sentence(lm: &LmParams, s: &[usize], what: &str) -> Result<()> {
    if s.is_empty() {
        return Err(Error::invalid(format!("{what} sentence is empty")));
    }
    if let Some(&bad) = s.iter().find(|&&t| t >= lm.config.vocab_size) {
        return Err(Error::invalid(format!(
            "{what} token id {bad} outside vocabulary of {}",
            lm.config.vocab_size
        )));
    }
    Ok(())
}

/// `log p(b | a)` with a context, `log p(b)` without.
pub fn log_prob(lm: &LmParams, b: &[usize], context: Option<&[usize]>) -> Result<f64> {
    check_sentence(lm, b, "scored")?;
    if let Some(a) = context {
        check_sentence(lm, a, "context")?;
    }
    let mut tape = Tape::inference();
    let mut g = LmGraph::new(lm, &mut tape, None);
    let state = match context {
        Some(a) => g.context_state(&mut tape, &[a]),
        None => g.bos_state(&mut tape, 1),
    };
    let lp = g.sequence_logprob(&mut tape, state, &[b]);
    tape.value(lp).item()
}

pub fn sentence_score(lm: &LmParams, a: &[usize], b: &[usize]) -> Result<SentenceScore> {
    Ok(SentenceScore {
        log_cond: log_prob(lm, b, Some(a))?,
        log_uncond: log_prob(lm, b, None)?,
    })
}

pub fn score_candidate(lm: &LmParams, a: &[usize], b: &[usize], criterion: Criterion) -> Result<f64> {
    match criterion {
        Criterion::Conditional => log_prob(lm, b, Some(a)),
        Criterion::Contrastive => Ok(sentence_score(lm, a, b)?.value(criterion)),
    }
}

/// Index of the highest score; the lowest index wins ties.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

pub fn answer_question(
    lm: &LmParams,
    context: &[usize],
    choices: &[Vec<usize>],
    criterion: Criterion,
) -> Result<usize> {
    if choices.len() < 2 {
        return Err(Error::invalid("a question needs at least two choices"));
    }
    let scores = score_choices(lm, &[(context, choices)])?;
    let values: Vec<f64> = scores[0].iter().map(|s| s.value(criterion)).collect();
    Ok(argmax(&values))
}

/// Roughly how many candidate rows share one batched forward pass.
const ROWS_PER_CHUNK: usize = 128;

/// Scores every choice of every item, batching many candidates per pass and
/// spreading chunks over the current rayon pool. Results do not depend on
/// the number of threads.
pub fn score_choices(
    lm: &LmParams,
    items: &[(&[usize], &[Vec<usize>])],
) -> Result<Vec<Vec<SentenceScore>>> {
    for (a, choices) in items {
        check_sentence(lm, a, "context")?;
        if choices.is_empty() {
            return Err(Error::invalid("a question needs at least one choice"));
        }
        for c in choices.iter() {
            check_sentence(lm, c, "choice")?;
        }
    }
    let mut chunks = Vec::new();
    let mut start = 0;
    let mut rows = 0;
    for (i, (_, choices)) in items.iter().enumerate() {
        rows += choices.len();
        if rows >= ROWS_PER_CHUNK {
            chunks.push(start..i + 1);
            start = i + 1;
            rows = 0;
        }
    }
    if start < items.len() {
        chunks.push(start..items.len());
    }
    let scored: Vec<Vec<Vec<SentenceScore>>> = chunks
        .into_par_iter()
        .map(|r| score_chunk(lm, &items[r]))
        .collect();
    Ok(scored.into_iter().flatten().collect())
}

fn score_chunk(lm: &LmParams, items: &[(&[usize], &[Vec<usize>])]) -> Vec<Vec<SentenceScore>> {
    let mut tape = Tape::inference();
    let mut g = LmGraph::new(lm, &mut tape, None);

    let contexts: Vec<&[usize]> = items.iter().map(|(a, _)| *a).collect();
    let mut owner = Vec::new();
    let mut cands: Vec<&[usize]> = Vec::new();
    for (q, (_, choices)) in items.iter().enumerate() {
        for c in choices.iter() {
            owner.push(q);
            cands.push(c);
        }
    }
    let ctx = g.context_state(&mut tape, &contexts);
    let cond_state = g.gather_state(&mut tape, &ctx, &owner);
    let cond = g.sequence_logprob(&mut tape, cond_state, &cands);

    let mut unique: Vec<&[usize]> = Vec::new();
    let mut slot: HashMap<&[usize], usize> = HashMap::new();
    let which: Vec<usize> = cands
        .iter()
        .map(|c| {
            *slot.entry(c).or_insert_with(|| {
                unique.push(c);
                unique.len() - 1
            })
        })
        .collect();
    let bos = g.bos_state(&mut tape, 1);
    let uncond_state = g.gather_state(&mut tape, &bos, &vec![0; unique.len()]);
    let uncond = g.sequence_logprob(&mut tape, uncond_state, &unique);

    let (cv, uv) = (tape.value(cond).data(), tape.value(uncond).data());
    let mut out = Vec::with_capacity(items.len());
    let mut row = 0;
    for (_, choices) in items {
        out.push(
            (0..choices.len())
                .map(|j| SentenceScore {
                    log_cond: cv[row + j],
                    log_uncond: uv[which[row + j]],
                })
                .collect(),
        );
        row += choices.len();
    }
    out
}

/// One line of a score dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub question: usize,
    pub choice: usize,
    pub log_cond: f64,
    pub log_uncond: f64,
}

pub fn score_records(scores: &[Vec<SentenceScore>]) -> Vec<ScoreRecord> {
    scores
        .iter()
        .enumerate()
        .flat_map(|(q, row)| {
            row.iter().enumerate().map(move |(c, s)| ScoreRecord {
                question: q,
                choice: c,
                log_cond: s.log_cond,
                log_uncond: s.log_uncond,
            })
        })
        .collect()
}

pub fn write_score_dump(records: &[ScoreRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Parses a dump back into per-question score lists. Records must appear in
/// question-then-choice order.
pub fn read_score_dump(text: &str) -> Result<Vec<Vec<SentenceScore>>> {
    let mut out: Vec<Vec<SentenceScore>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: ScoreRecord = serde_json::from_str(line)
            .map_err(|e| Error::Format(format!("score dump line {}: {e}", i + 1)))?;
        if r.question == out.len() && r.choice == 0 {
            out.push(Vec::new());
        }
        let n = out.len();
        match out.last_mut() {
            Some(row) if r.question + 1 == n && r.choice == row.len() => {
                row.push(SentenceScore {
                    log_cond: r.log_cond,
                    log_uncond: r.log_uncond,
                });
            }
            _ => {
                return Err(Error::Format(format!(
                    "score dump line {}: record out of order",
                    i + 1
                )))
            }
        }
    }
    Ok(out)
}
