//! Training objectives: word-level cross-entropy, the sentence-level
//! noise-contrastive loss and the sentence-classification loss, plus the
//! training loops and checkpoint selection built on them.

mod select;
mod train;

pub use select::{select_checkpoint, select_from_scores, select_index, Selection};
pub use train::{
    epoch_batches, mean_word_ce, pretrain, train_nce, EpochStats, PretrainConfig, TrainConfig,
};

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{LmGraph, LmParams};
use crate::scoring::{check_sentence, log_prob};
use crate::tensor::{log_sum_exp, softplus, Tape, Var};

/// Non-negative weights of `L = α·L_w + β·L_s + γ·L_c`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl LossWeights {
    pub const WORD_ONLY: LossWeights = LossWeights {
        alpha: 1.0,
        beta: 0.0,
        gamma: 0.0,
    };

    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        let w = LossWeights { alpha, beta, gamma };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for v in [self.alpha, self.beta, self.gamma] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("loss weights must be finite and non-negative, got {self}")));
            }
        }
        Ok(())
    }

    /// Whether negatives are needed at all.
    pub fn uses_sentence_terms(&self) -> bool {
        self.beta > 0.0 || self.gamma > 0.0
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.1,
            beta: 10.0,
            gamma: 0.1,
        }
    }
}

impl fmt::Display for LossWeights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.alpha, self.beta, self.gamma)
    }
}

impl FromStr for LossWeights {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let bad = || Error::invalid(format!("weights must look like A,B,G, got {s:?}"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let v = parts
            .iter()
            .map(|p| p.parse::<f64>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        LossWeights::new(v[0], v[1], v[2])
    }
}

/// Posterior that `b` follows `a` rather than coming from the noise
/// distribution, evaluated in log space.
pub fn nce_posterior(log_pm_cond: f64, log_pm_uncond: f64, nu: usize) -> f64 {
    let log_nu = (nu as f64).ln();
    (log_pm_cond - log_sum_exp(&[log_pm_cond, log_nu + log_pm_uncond])).exp()
}

/// `log p(b|a) − log p(b) − log ν`, the logit of [`nce_posterior`].
fn nce_logit(log_cond: f64, log_uncond: f64, nu: usize) -> f64 {
    log_cond - log_uncond - (nu as f64).ln()
}

/// Sentence NCE loss from `(log p(b|a), log p(b))` of the real sentence and
/// of each negative. `ν` is the number of negatives.
pub fn nce_loss_from_logprobs(real: (f64, f64), negatives: &[(f64, f64)]) -> f64 {
    let nu = negatives.len();
    softplus(-nce_logit(real.0, real.1, nu))
        + negatives
            .iter()
            .map(|&(c, u)| softplus(nce_logit(c, u, nu)))
            .sum::<f64>()
}

/// Sentence-classification cross-entropy from conditional log-probabilities.
pub fn ce_loss_from_logprobs(real_cond: f64, negative_conds: &[f64]) -> f64 {
    let mut all = Vec::with_capacity(negative_conds.len() + 1);
    all.push(real_cond);
    all.extend_from_slice(negative_conds);
    log_sum_exp(&all) - real_cond
}

pub fn combined_loss(lw: f64, ls: f64, lc: f64, w: LossWeights) -> f64 {
    w.alpha * lw + w.beta * ls + w.gamma * lc
}

fn check_negatives(lm: &LmParams, negatives: &[Vec<usize>]) -> Result<()> {
    if negatives.is_empty() {
        return Err(Error::invalid("at least one negative is required"));
    }
    negatives.iter().try_for_each(|n| check_sentence(lm, n, "negative"))
}

pub fn sentence_nce_loss(lm: &LmParams, a: &[usize], b: &[usize], negatives: &[Vec<usize>]) -> Result<f64> {
    check_negatives(lm, negatives)?;
    let real = (log_prob(lm, b, Some(a))?, log_prob(lm, b, None)?);
    let negs = negatives
        .iter()
        .map(|n| Ok((log_prob(lm, n, Some(a))?, log_prob(lm, n, None)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(nce_loss_from_logprobs(real, &negs))
}

pub fn sentence_ce_loss(lm: &LmParams, a: &[usize], b: &[usize], negatives: &[Vec<usize>]) -> Result<f64> {
    check_negatives(lm, negatives)?;
    let real = log_prob(lm, b, Some(a))?;
    let negs = negatives
        .iter()
        .map(|n| log_prob(lm, n, Some(a)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ce_loss_from_logprobs(real, &negs))
}

pub fn word_ce_loss(lm: &LmParams, b: &[usize]) -> Result<f64> {
    Ok(-log_prob(lm, b, None)?)
}

/// Batch means of the three terms and of the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub lw: f64,
    pub ls: Option<f64>,
    pub lc: Option<f64>,
    pub total: f64,
}

/// The per-batch loss graph.
pub struct BatchObjective {
    pub total: Var,
    pub lw: Var,
    pub ls: Option<Var>,
    pub lc: Option<Var>,
}

impl BatchObjective {
    pub fn values(&self, tape: &Tape) -> Result<LossValues> {
        let get = |v: Var| tape.value(v).item();
        Ok(LossValues {
            lw: get(self.lw)?,
            ls: self.ls.map(get).transpose()?,
            lc: self.lc.map(get).transpose()?,
            total: get(self.total)?,
        })
    }
}

/// Builds the batch-mean loss.
///
/// With `negatives == None` only the word-level term is built; this is the
/// pre-training objective. Otherwise `negatives[i]` holds the noise
/// sentences of pair `i`, every pair with the same count ν. When
/// `detach_noise` is set, the unconditional log-probabilities inside the
/// NCE posterior do not receive gradients (the word-level term still does).
pub fn batch_objective(
    g: &mut LmGraph<'_, '_>,
    tape: &mut Tape,
    contexts: &[&[usize]],
    bs: &[&[usize]],
    negatives: Option<&[Vec<Vec<usize>>]>,
    weights: LossWeights,
    detach_noise: bool,
) -> Result<BatchObjective> {
    let rows = bs.len();
    if rows == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let lm = g.params();
    for b in bs {
        check_sentence(lm, b, "target")?;
    }
    let inv_b = 1.0 / rows as f64;

    let Some(negatives) = negatives else {
        let start = g.bos_state(tape, rows);
        let lu = g.sequence_logprob(tape, start, bs);
        let s = tape.sum(lu);
        let lw = tape.scale(s, -inv_b);
        let total = if weights.alpha == 1.0 { lw } else { tape.scale(lw, weights.alpha) };
        return Ok(BatchObjective {
            total,
            lw,
            ls: None,
            lc: None,
        });
    };

    if contexts.len() != rows || negatives.len() != rows {
        return Err(Error::invalid("contexts, targets and negatives must align"));
    }
    let nu = negatives[0].len();
    if nu == 0 || negatives.iter().any(|n| n.len() != nu) {
        return Err(Error::invalid("every pair needs the same positive number of negatives"));
    }
    for (a, negs) in contexts.iter().zip(negatives) {
        check_sentence(lm, a, "context")?;
        check_negatives(lm, negs)?;
    }
    let width = nu + 1;

    // Candidate rows, pair-major: the real b then its negatives.
    let mut cands: Vec<&[usize]> = Vec::with_capacity(rows * width);
    for (b, negs) in bs.iter().zip(negatives) {
        cands.push(b);
        cands.extend(negs.iter().map(|n| n.as_slice()));
    }
    let owner: Vec<usize> = (0..rows * width).map(|k| k / width).collect();
    let real_rows: Vec<usize> = (0..rows).map(|i| i * width).collect();

    // Unconditional runs once per distinct sentence.
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
    let bos = g.bos_state(tape, 1);
    let ustate = g.gather_state(tape, &bos, &vec![0; unique.len()]);
    let lu_unique = g.sequence_logprob(tape, ustate, &unique);

    let ctx = g.context_state(tape, contexts);
    let cstate = g.gather_state(tape, &ctx, &owner);
    let lc = g.sequence_logprob(tape, cstate, &cands);

    // L_w on the real sentences.
    let real_unique: Vec<usize> = real_rows.iter().map(|&r| which[r]).collect();
    let lu_real = tape.gather_rows(lu_unique, &real_unique);
    let s = tape.sum(lu_real);
    let lw = tape.scale(s, -inv_b);

    // L_s: softplus(−d) for the real row, softplus(d) for each negative.
    let lu = tape.gather_rows(lu_unique, &which);
    let lu = if detach_noise { tape.detach(lu) } else { lu };
    let diff = tape.sub(lc, lu);
    let d = tape.add_scalar(diff, -(nu as f64).ln());
    let signs: Vec<f64> = (0..rows * width)
        .map(|k| if k % width == 0 { -1.0 } else { 1.0 })
        .collect();
    let signed = tape.scale_rows(d, &signs);
    let sp = tape.softplus(signed);
    let s = tape.sum(sp);
    let ls = tape.scale(s, inv_b);

    // L_c: log Σ exp(lc) over the candidates minus the real one.
    let grid = tape.reshape(lc, rows, width);
    let lse = tape.logsumexp_rows(grid);
    let lc_real = tape.gather_rows(lc, &real_rows);
    let margin = tape.sub(lse, lc_real);
    let s = tape.sum(margin);
    let lcl = tape.scale(s, inv_b);

    let a = tape.scale(lw, weights.alpha);
    let b = tape.scale(ls, weights.beta);
    let c = tape.scale(lcl, weights.gamma);
    let ab = tape.add(a, b);
    let total = tape.add(ab, c);
    Ok(BatchObjective {
        total,
        lw,
        ls: Some(ls),
        lc: Some(lcl),
    })
}
