//! Negative-sentence samplers: the other sentences of a batch, or masked
//! resampling through a frozen bidirectional model.
//!
//! Samplers only ever see the `b` side of the pairs.

mod bilm;

pub use bilm::{
    masked_cross_entropy, train_bilm, BiLmCheckpoint, BiLmConfig, BiLmEpochStats, BiLmParams,
    BiLmTrainConfig,
};

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{BOS, EOS, MASK, PAD};
use crate::error::{Error, Result};

/// Redraw budget for a resampled negative that came out identical to its source.
pub const MAX_REDRAWS: usize = 10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    #[default]
    BatchNce,
    Resampling,
}

impl FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch-nce" => Ok(SamplerKind::BatchNce),
            "resampling" => Ok(SamplerKind::Resampling),
            _ => Err(Error::invalid(format!(
                "sampler must be batch-nce or resampling, got {s:?}"
            ))),
        }
    }
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplerKind::BatchNce => "batch-nce",
            SamplerKind::Resampling => "resampling",
        })
    }
}

/// Produces `nu()` negatives for every `b` of a batch.
pub trait NoiseSampler {
    fn nu(&self) -> usize;

    fn negatives(&mut self, bs: &[&[usize]], rng: &mut ChaCha8Rng) -> Result<Vec<Vec<Vec<usize>>>>;
}

/// For pair `i`, every other `b_j` in ascending `j`.
pub fn batch_negatives(bs: &[&[usize]]) -> Result<Vec<Vec<Vec<usize>>>> {
    if bs.len() < 2 {
        return Err(Error::invalid(format!(
            "batch negatives need at least two pairs, got {}",
            bs.len()
        )));
    }
    Ok((0..bs.len())
        .map(|i| {
            bs.iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, b)| b.to_vec())
                .collect()
        })
        .collect())
}

/// The other sentences of the batch; `ν = B − 1`.
#[derive(Clone, Debug)]
pub struct BatchNce {
    batch_size: usize,
}

impl BatchNce {
    pub fn new(batch_size: usize) -> Result<Self> {
        if batch_size < 2 {
            return Err(Error::invalid("batch NCE needs a batch size of at least 2"));
        }
        Ok(BatchNce { batch_size })
    }
}

impl NoiseSampler for BatchNce {
    fn nu(&self) -> usize {
        self.batch_size - 1
    }

    fn negatives(&mut self, bs: &[&[usize]], _rng: &mut ChaCha8Rng) -> Result<Vec<Vec<Vec<usize>>>> {
        if bs.len() != self.batch_size {
            return Err(Error::invalid(format!(
                "batch of {} pairs, sampler configured for {}",
                bs.len(),
                self.batch_size
            )));
        }
        batch_negatives(bs)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedSentence {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    pub originals: Vec<usize>,
}

impl MaskedSentence {
    pub fn restore(&self) -> Vec<usize> {
        let mut out = self.tokens.clone();
        for (&p, &o) in self.positions.iter().zip(&self.originals) {
            out[p] = o;
        }
        out
    }
}

/// Masks each position with probability `rate`; if none was chosen, one
/// uniformly drawn position is masked instead.
pub fn mask_tokens(sentence: &[usize], rate: f64, rng: &mut impl Rng) -> Result<MaskedSentence> {
    if sentence.is_empty() {
        return Err(Error::invalid("cannot mask an empty sentence"));
    }
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::invalid(format!("mask rate {rate} outside [0, 1]")));
    }
    let mut positions: Vec<usize> = (0..sentence.len()).filter(|_| rng.gen::<f64>() < rate).collect();
    if positions.is_empty() {
        positions.push(rng.gen_range(0..sentence.len()));
    }
    let mut tokens = sentence.to_vec();
    let originals = positions.iter().map(|&p| std::mem::replace(&mut tokens[p], MASK)).collect();
    Ok(MaskedSentence {
        tokens,
        positions,
        originals,
    })
}

fn excluded(id: usize) -> bool {
    matches!(id, MASK | PAD | BOS | EOS)
}

/// Draws an index from `exp(logp)` restricted to non-excluded ids.
fn sample_row(logp: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = logp
        .iter()
        .enumerate()
        .filter(|(j, _)| !excluded(*j))
        .map(|(_, l)| l.exp())
        .sum();
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    let mut last = None;
    for (j, l) in logp.iter().enumerate() {
        if excluded(j) {
            continue;
        }
        acc += l.exp();
        last = Some(j);
        if u < acc {
            return j;
        }
    }
    last.expect("vocabulary has a non-special token")
}

/// Fills every masked slot of every sentence from one batched prediction pass.
pub fn resample_batch(
    masked: &[MaskedSentence],
    bilm: &BiLmParams,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<usize>>> {
    let mut out: Vec<Vec<usize>> = masked.iter().map(|m| m.tokens.clone()).collect();
    let slots: Vec<(usize, usize)> = masked
        .iter()
        .enumerate()
        .flat_map(|(r, m)| m.positions.iter().map(move |&p| (r, p)))
        .collect();
    if slots.is_empty() {
        return Ok(out);
    }
    if bilm.config.vocab_size <= 4 {
        return Err(Error::invalid("vocabulary has no samplable token"));
    }
    let seqs: Vec<&[usize]> = masked.iter().map(|m| m.tokens.as_slice()).collect();
    let lp = bilm.predict(&seqs, &slots)?;
    for (k, &(r, p)) in slots.iter().enumerate() {
        out[r][p] = sample_row(lp.row(k), rng);
    }
    Ok(out)
}

pub fn resample(masked: &MaskedSentence, bilm: &BiLmParams, rng: &mut impl Rng) -> Result<Vec<usize>> {
    Ok(resample_batch(std::slice::from_ref(masked), bilm, rng)?.remove(0))
}

/// One line of the optional negative-sample audit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub pair: usize,
    pub negative: Vec<usize>,
    pub attempts: usize,
    pub identical: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResampledNegatives {
    pub negatives: Vec<Vec<Vec<usize>>>,
    pub audit: Vec<AuditRecord>,
}

impl ResampledNegatives {
    pub fn kept_identical(&self) -> usize {
        self.audit.iter().filter(|a| a.identical).count()
    }
}

/// `nu` independent mask-and-resample transformations of every `b`. Draws
/// identical to their source are redrawn up to [`MAX_REDRAWS`] times, then
/// kept and flagged in the audit.
pub fn make_negatives_by_resampling(
    bs: &[&[usize]],
    bilm: &BiLmParams,
    nu: usize,
    rate: f64,
    rng: &mut impl Rng,
) -> Result<ResampledNegatives> {
    let n = bs.len() * nu;
    let source = |k: usize| bs[k / nu];
    let mut drawn: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut attempts = vec![0usize; n];
    let mut pending: Vec<usize> = (0..n).collect();
    for _ in 0..=MAX_REDRAWS {
        if pending.is_empty() {
            break;
        }
        let masked = pending
            .iter()
            .map(|&k| mask_tokens(source(k), rate, rng))
            .collect::<Result<Vec<_>>>()?;
        let filled = resample_batch(&masked, bilm, rng)?;
        for (&k, s) in pending.iter().zip(filled) {
            drawn[k] = s;
            attempts[k] += 1;
        }
        pending.retain(|&k| drawn[k].as_slice() == source(k));
    }
    let audit = (0..n)
        .map(|k| AuditRecord {
            pair: k / nu,
            negative: drawn[k].clone(),
            attempts: attempts[k],
            identical: drawn[k].as_slice() == source(k),
        })
        .collect();
    let mut it = drawn.into_iter();
    let negatives = (0..bs.len()).map(|_| it.by_ref().take(nu).collect()).collect();
    Ok(ResampledNegatives { negatives, audit })
}

/// Resampling sampler over a frozen bidirectional model.
#[derive(Debug)]
pub struct Resampler {
    pub bilm: BiLmParams,
    pub nu: usize,
    pub mask_rate: f64,
    /// Collects audit records when set.
    pub audit: Option<Vec<AuditRecord>>,
    pub kept_identical: usize,
}

impl Resampler {
    pub fn new(bilm: BiLmParams, nu: usize) -> Result<Self> {
        if nu == 0 {
            return Err(Error::invalid("resampling needs at least one negative"));
        }
        Ok(Resampler {
            bilm,
            nu,
            mask_rate: 0.15,
            audit: None,
            kept_identical: 0,
        })
    }
}

impl NoiseSampler for Resampler {
    fn nu(&self) -> usize {
        self.nu
    }

    fn negatives(&mut self, bs: &[&[usize]], rng: &mut ChaCha8Rng) -> Result<Vec<Vec<Vec<usize>>>> {
        let r = make_negatives_by_resampling(bs, &self.bilm, self.nu, self.mask_rate, rng)?;
        self.kept_identical += r.kept_identical();
        if r.kept_identical() > 0 {
            log::debug!("{} resampled negatives kept identical to their source", r.kept_identical());
        }
        if let Some(a) = self.audit.as_mut() {
            a.extend(r.audit);
        }
        Ok(r.negatives)
    }
}

#[cfg(test)]
mod tests;
