use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{batch_objective, LossValues, LossWeights};
use crate::corpus::SentencePair;
use crate::error::{Error, Result};
use crate::lm::{Dropout, LmGraph, LmParams};
use crate::noise::{NoiseSampler, SamplerKind};
use crate::tensor::{clip_by_batch_norm, AdamConfig, AdamState, Tape};
use crate::util::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub max_grad_ratio: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 30,
            batch_size: 20,
            adam: AdamConfig::default(),
            max_grad_ratio: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub nu: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub max_grad_ratio: f64,
    pub seed: u64,
    pub sampler: SamplerKind,
    pub checkpoint_interval: usize,
    /// Stop gradients through the noise-probability branch of the posterior.
    pub detach_noise: bool,
    pub mask_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            nu: 15,
            epochs: 50,
            adam: AdamConfig::default(),
            max_grad_ratio: 1.0,
            seed: 0,
            sampler: SamplerKind::BatchNce,
            checkpoint_interval: 5,
            detach_noise: false,
            mask_rate: 0.15,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if self.checkpoint_interval == 0 {
            return Err(Error::invalid("checkpoint interval must be positive"));
        }
        if self.nu == 0 {
            return Err(Error::invalid("noise count must be positive"));
        }
        if self.sampler == SamplerKind::BatchNce && self.nu + 1 != self.batch_size {
            return Err(Error::invalid(format!(
                "batch NCE needs nu = batch size - 1, got nu {} with batch size {}",
                self.nu, self.batch_size
            )));
        }
        Ok(())
    }

    /// Epochs after which a checkpoint is saved.
    pub fn checkpoint_epochs(&self) -> Vec<usize> {
        (1..=self.epochs / self.checkpoint_interval)
            .map(|k| k * self.checkpoint_interval)
            .collect()
    }
}

/// One line of a training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lw: f64,
    pub ls: Option<f64>,
    pub lc: Option<f64>,
    pub loss: f64,
    pub validation_lw: Option<f64>,
    pub wall_secs: f64,
}

/// Shuffles `0..n` and cuts it into full batches; a short remainder is dropped.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks_exact(batch_size).map(<[usize]>::to_vec).collect()
}

/// Mean `−log p(s)` per sentence.
pub fn mean_word_ce(lm: &LmParams, sentences: &[Vec<usize>]) -> Result<f64> {
    if sentences.is_empty() {
        return Err(Error::invalid("no sentences to evaluate"));
    }
    let mut total = 0.0;
    for chunk in sentences.chunks(64) {
        let refs: Vec<&[usize]> = chunk.iter().map(|s| s.as_slice()).collect();
        for s in &refs {
            crate::scoring::check_sentence(lm, s, "evaluated")?;
        }
        let mut tape = Tape::inference();
        let mut g = LmGraph::new(lm, &mut tape, None);
        let start = g.bos_state(&mut tape, refs.len());
        let lp = g.sequence_logprob(&mut tape, start, &refs);
        total -= tape.value(lp).data().iter().sum::<f64>();
    }
    Ok(total / sentences.len() as f64)
}

struct Stepper {
    adam: AdamState,
    dropout: Dropout,
    max_grad_ratio: f64,
}

impl Stepper {
    fn new(lm: &LmParams, adam: &AdamConfig, max_grad_ratio: f64, seed: u64) -> Self {
        Stepper {
            adam: AdamState::new(&lm.store, *adam),
            dropout: Dropout::new(
                lm.config.dropout,
                ChaCha8Rng::seed_from_u64(derive_seed(seed, "dropout")),
            ),
            max_grad_ratio,
        }
    }

    fn step(
        &mut self,
        lm: &mut LmParams,
        contexts: &[&[usize]],
        bs: &[&[usize]],
        negatives: Option<&[Vec<Vec<usize>>]>,
        weights: LossWeights,
        detach: bool,
    ) -> Result<LossValues> {
        let mut tape = Tape::new();
        let mut g = LmGraph::new(lm, &mut tape, Some(&mut self.dropout));
        let obj = batch_objective(&mut g, &mut tape, contexts, bs, negatives, weights, detach)?;
        let values = obj.values(&tape)?;
        if !values.total.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        let mut grads = tape.backward(obj.total)?;
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradients".into()));
        }
        clip_by_batch_norm(&mut grads, bs.len(), self.max_grad_ratio);
        self.adam.step(&mut lm.store, &grads)?;
        Ok(values)
    }
}

#[derive(Default)]
struct Means {
    n: usize,
    lw: f64,
    ls: f64,
    lc: f64,
    total: f64,
    sentence_terms: bool,
}

impl Means {
    fn add(&mut self, v: &LossValues) {
        self.n += 1;
        self.lw += v.lw;
        self.total += v.total;
        if let (Some(s), Some(c)) = (v.ls, v.lc) {
            self.sentence_terms = true;
            self.ls += s;
            self.lc += c;
        }
    }

    fn finish(&self, epoch: usize, validation_lw: Option<f64>, start: Instant) -> EpochStats {
        let n = self.n.max(1) as f64;
        EpochStats {
            epoch,
            lw: self.lw / n,
            ls: self.sentence_terms.then(|| self.ls / n),
            lc: self.sentence_terms.then(|| self.lc / n),
            loss: self.total / n,
            validation_lw,
            wall_secs: start.elapsed().as_secs_f64(),
        }
    }
}

/// Word-level pre-training on single sentences.
pub fn pretrain(
    lm: &mut LmParams,
    train: &[Vec<usize>],
    validation: &[Vec<usize>],
    config: &PretrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    if train.is_empty() {
        return Err(Error::invalid("empty training corpus"));
    }
    if config.batch_size == 0 || config.batch_size > train.len() {
        return Err(Error::invalid(format!(
            "batch size {} does not fit {} training sentences",
            config.batch_size,
            train.len()
        )));
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "batches"));
    let mut stepper = Stepper::new(lm, &config.adam, config.max_grad_ratio, config.seed);
    let mut stats = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let mut means = Means::default();
        for batch in epoch_batches(train.len(), config.batch_size, &mut order_rng) {
            let bs: Vec<&[usize]> = batch.iter().map(|&i| train[i].as_slice()).collect();
            let v = stepper.step(lm, &[], &bs, None, LossWeights::WORD_ONLY, false)?;
            means.add(&v);
        }
        let val = if validation.is_empty() {
            None
        } else {
            Some(mean_word_ce(lm, validation)?)
        };
        let s = means.finish(epoch, val, start);
        log::info!("pretrain epoch {epoch}: L_w {:.4}", s.lw);
        on_epoch(&s);
        stats.push(s);
    }
    Ok(stats)
}

/// Sentence-level training. `on_checkpoint` runs after every epoch listed
/// by [`TrainConfig::checkpoint_epochs`]. When neither sentence term has
/// weight, the sampler is never called and each step is exactly a
/// pre-training step on the `b` sentences.
#[allow(clippy::too_many_arguments)]
pub fn train_nce(
    lm: &mut LmParams,
    pairs: &[SentencePair],
    validation: &[Vec<usize>],
    sampler: &mut dyn NoiseSampler,
    config: &TrainConfig,
    weights: LossWeights,
    mut on_epoch: impl FnMut(&EpochStats),
    mut on_checkpoint: impl FnMut(usize, &LmParams, &EpochStats) -> Result<()>,
) -> Result<Vec<EpochStats>> {
    config.validate()?;
    weights.validate()?;
    if pairs.is_empty() {
        return Err(Error::invalid("empty pair set"));
    }
    if config.batch_size > pairs.len() {
        return Err(Error::invalid(format!(
            "batch size {} exceeds {} training pairs",
            config.batch_size,
            pairs.len()
        )));
    }
    let sentence_terms = weights.uses_sentence_terms();
    if sentence_terms && sampler.nu() != config.nu {
        return Err(Error::invalid(format!(
            "sampler yields {} negatives, config expects {}",
            sampler.nu(),
            config.nu
        )));
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "batches"));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "negatives"));
    let mut stepper = Stepper::new(lm, &config.adam, config.max_grad_ratio, config.seed);
    let checkpoints = config.checkpoint_epochs();
    let mut stats = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let mut means = Means::default();
        for batch in epoch_batches(pairs.len(), config.batch_size, &mut order_rng) {
            let contexts: Vec<&[usize]> = batch.iter().map(|&i| pairs[i].a.as_slice()).collect();
            let bs: Vec<&[usize]> = batch.iter().map(|&i| pairs[i].b.as_slice()).collect();
            let v = if sentence_terms {
                let negs = sampler.negatives(&bs, &mut noise_rng)?;
                if negs.len() != bs.len() || negs.iter().any(|n| n.len() != config.nu) {
                    return Err(Error::invalid(format!(
                        "sampler must yield {} negatives for each of {} pairs",
                        config.nu,
                        bs.len()
                    )));
                }
                stepper.step(lm, &contexts, &bs, Some(&negs), weights, config.detach_noise)?
            } else {
                stepper.step(lm, &contexts, &bs, None, weights, false)?
            };
            means.add(&v);
        }
        let val = if validation.is_empty() {
            None
        } else {
            Some(mean_word_ce(lm, validation)?)
        };
        let s = means.finish(epoch, val, start);
        log::info!("train epoch {epoch}: L {:.4} (L_w {:.4})", s.loss, s.lw);
        on_epoch(&s);
        if checkpoints.contains(&epoch) {
            on_checkpoint(epoch, lm, &s)?;
        }
        stats.push(s);
    }
    Ok(stats)
}
