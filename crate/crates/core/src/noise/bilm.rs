//! Bidirectional masked language model used to resample negatives.
//!
//! A forward LSTM stack reads `<BOS> w_1 .. w_{i-1}` and a backward stack
//! reads `<EOS> w_n .. w_{i+1}`; their top outputs at position `i` are
//! concatenated and projected into embedding space, then scored against the
//! same embedding matrix the two stacks read their inputs from.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{mask_tokens, MaskedSentence};
use crate::corpus::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::lm::{lstm_bias, uniform, CheckpointManifest, Dropout, LayerIds, ModelKind};
use crate::tensor::{clip_by_batch_norm, AdamConfig, AdamState, ParamId, ParamStore, Tape, Tensor, Var};
use crate::util::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiLmConfig {
    pub vocab_size: usize,
    pub emb_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
}

impl BiLmConfig {
    pub fn new(vocab_size: usize) -> Self {
        BiLmConfig {
            vocab_size,
            emb_dim: 200,
            hidden: 600,
            layers: 2,
            dropout: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.emb_dim == 0 || self.hidden == 0 || self.layers == 0 {
            return Err(Error::invalid(format!("degenerate model config {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct BiIds {
    pub embedding: ParamId,
    pub fwd: Vec<LayerIds>,
    pub bwd: Vec<LayerIds>,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiLmParams {
    pub config: BiLmConfig,
    pub store: ParamStore,
    pub(crate) ids: BiIds,
}

impl BiLmParams {
    pub fn new(config: BiLmConfig, rng: &mut impl Rng) -> Result<Self> {
        Self::build(config, 1.0, |r, c| uniform(r, c, rng))
    }

    pub fn zeros(config: BiLmConfig) -> Result<Self> {
        Self::build(config, 0.0, Tensor::zeros)
    }

    fn build(
        config: BiLmConfig,
        forget_bias: f64,
        mut matrix: impl FnMut(usize, usize) -> Tensor,
    ) -> Result<Self> {
        config.validate()?;
        let (v, e, h) = (config.vocab_size, config.emb_dim, config.hidden);
        let mut store = ParamStore::new();
        let embedding = store.insert("embedding", matrix(v, e));
        let mut stacks = Vec::new();
        for dir in ["forward", "backward"] {
            let mut layers = Vec::new();
            for l in 0..config.layers {
                let input = if l == 0 { e } else { h };
                layers.push(LayerIds {
                    wx: store.insert(format!("{dir}.{l}.w_input"), matrix(input, 4 * h)),
                    wh: store.insert(format!("{dir}.{l}.w_hidden"), matrix(h, 4 * h)),
                    bias: store.insert(format!("{dir}.{l}.bias"), lstm_bias(h, forget_bias)),
                });
            }
            stacks.push(layers);
        }
        let proj_w = store.insert("projection.weight", matrix(2 * h, e));
        let proj_b = store.insert("projection.bias", Tensor::zeros(1, e));
        let bwd = stacks.pop().expect("two stacks");
        let fwd = stacks.pop().expect("two stacks");
        Ok(BiLmParams {
            config,
            store,
            ids: BiIds {
                embedding,
                fwd,
                bwd,
                proj_w,
                proj_b,
            },
        })
    }

    pub fn from_store(config: BiLmConfig, store: ParamStore) -> Result<Self> {
        let reference = Self::zeros(config.clone())?;
        if reference.store.len() != store.len() {
            return Err(Error::Format(format!(
                "expected {} parameter arrays, found {}",
                reference.store.len(),
                store.len()
            )));
        }
        for id in reference.store.ids() {
            let name = reference.store.name(id);
            let ok = store.id_of(name) == Some(id)
                && store.get(id).shape() == reference.store.get(id).shape();
            if !ok {
                return Err(Error::Format(format!("parameter {name} missing or misshapen")));
            }
        }
        Ok(BiLmParams {
            config,
            store,
            ids: reference.ids,
        })
    }

    pub fn embedding_id(&self) -> ParamId {
        self.ids.embedding
    }

    pub fn projection_ids(&self) -> (ParamId, ParamId) {
        (self.ids.proj_w, self.ids.proj_b)
    }

    /// Log-distributions (`P × V`) at the requested `(row, position)` slots.
    pub fn predict(&self, seqs: &[&[usize]], slots: &[(usize, usize)]) -> Result<Tensor> {
        check_batch(self, seqs, slots)?;
        let mut tape = Tape::inference();
        let mut g = BiGraph::new(self, &mut tape, None);
        let lp = g.predict(&mut tape, seqs, slots);
        Ok(tape.value(lp).clone())
    }
}

fn check_batch(bilm: &BiLmParams, seqs: &[&[usize]], slots: &[(usize, usize)]) -> Result<()> {
    for s in seqs {
        if s.is_empty() {
            return Err(Error::invalid("empty sentence"));
        }
        if let Some(&bad) = s.iter().find(|&&t| t >= bilm.config.vocab_size) {
            return Err(Error::invalid(format!("token id {bad} outside vocabulary")));
        }
    }
    for &(r, p) in slots {
        if r >= seqs.len() || p >= seqs[r].len() {
            return Err(Error::invalid(format!("slot ({r}, {p}) out of range")));
        }
    }
    Ok(())
}

pub(crate) struct LayerVars {
    wx: Var,
    wh: Var,
    bias: Var,
}

/// The bidirectional model bound to one tape. The three embedding roles
/// normally share one node; tests may detach individual roles.
pub(crate) struct BiGraph<'m, 'd> {
    bilm: &'m BiLmParams,
    pub(crate) emb_fwd: Var,
    pub(crate) emb_bwd: Var,
    pub(crate) emb_out: Var,
    fwd: Vec<LayerVars>,
    bwd: Vec<LayerVars>,
    proj_w: Var,
    proj_b: Var,
    dropout: Option<&'d mut Dropout>,
}

impl<'m, 'd> BiGraph<'m, 'd> {
    pub(crate) fn new(bilm: &'m BiLmParams, tape: &mut Tape, dropout: Option<&'d mut Dropout>) -> Self {
        let s = &bilm.store;
        let emb = tape.param(s, bilm.ids.embedding);
        let mut bind = |ls: &[LayerIds]| -> Vec<LayerVars> {
            ls.iter()
                .map(|l| LayerVars {
                    wx: tape.param(s, l.wx),
                    wh: tape.param(s, l.wh),
                    bias: tape.param(s, l.bias),
                })
                .collect()
        };
        let fwd = bind(&bilm.ids.fwd);
        let bwd = bind(&bilm.ids.bwd);
        BiGraph {
            bilm,
            emb_fwd: emb,
            emb_bwd: emb,
            emb_out: emb,
            fwd,
            bwd,
            proj_w: tape.param(s, bilm.ids.proj_w),
            proj_b: tape.param(s, bilm.ids.proj_b),
            dropout: dropout.filter(|d| d.rate > 0.0),
        }
    }

    fn drop(dropout: &mut Option<&'d mut Dropout>, tape: &mut Tape, x: Var) -> Var {
        match dropout.as_deref_mut() {
            Some(d) => {
                let mask = d.mask(tape.value(x).len());
                tape.mask(x, mask)
            }
            None => x,
        }
    }

    /// Runs one stack over per-step input ids; returns the top output of every step.
    fn run(
        tape: &mut Tape,
        layers: &[LayerVars],
        emb: Var,
        hidden: usize,
        steps: &[Vec<usize>],
        dropout: &mut Option<&'d mut Dropout>,
    ) -> Vec<Var> {
        let rows = steps[0].len();
        let mut h: Vec<Var> = (0..layers.len()).map(|_| tape.input(Tensor::zeros(rows, hidden))).collect();
        let mut c: Vec<Var> = (0..layers.len()).map(|_| tape.input(Tensor::zeros(rows, hidden))).collect();
        let mut tops = Vec::with_capacity(steps.len());
        for ids in steps {
            let mut x = tape.gather_rows(emb, ids);
            for (l, lv) in layers.iter().enumerate() {
                if l > 0 {
                    x = Self::drop(dropout, tape, x);
                }
                let a = tape.matmul(x, lv.wx);
                let b = tape.matmul(h[l], lv.wh);
                let s = tape.add(a, b);
                let pre = tape.add_bias(s, lv.bias);
                let gates = tape.lstm_gates(pre);
                c[l] = tape.lstm_cell(gates, c[l]);
                h[l] = tape.lstm_hidden(gates, c[l]);
                x = h[l];
            }
            tops.push(x);
        }
        tops
    }

    pub(crate) fn predict(&mut self, tape: &mut Tape, seqs: &[&[usize]], slots: &[(usize, usize)]) -> Var {
        let rows = seqs.len();
        let max = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let hidden = self.bilm.config.hidden;
        let fwd_steps: Vec<Vec<usize>> = (0..max)
            .map(|t| {
                seqs.iter()
                    .map(|s| match t {
                        0 => BOS,
                        _ => s.get(t - 1).copied().unwrap_or(PAD),
                    })
                    .collect()
            })
            .collect();
        let bwd_steps: Vec<Vec<usize>> = (0..max)
            .map(|t| {
                seqs.iter()
                    .map(|s| match t {
                        0 => EOS,
                        _ if t < s.len() => s[s.len() - t],
                        _ => PAD,
                    })
                    .collect()
            })
            .collect();
        let f = Self::run(tape, &self.fwd, self.emb_fwd, hidden, &fwd_steps, &mut self.dropout);
        let b = Self::run(tape, &self.bwd, self.emb_bwd, hidden, &bwd_steps, &mut self.dropout);
        let f_all = tape.concat_rows(&f);
        let b_all = tape.concat_rows(&b);
        let f_idx: Vec<usize> = slots.iter().map(|&(r, p)| p * rows + r).collect();
        let b_idx: Vec<usize> = slots
            .iter()
            .map(|&(r, p)| (seqs[r].len() - 1 - p) * rows + r)
            .collect();
        let fs = tape.gather_rows(f_all, &f_idx);
        let bs = tape.gather_rows(b_all, &b_idx);
        let joint = tape.concat_cols(&[fs, bs]);
        let joint = Self::drop(&mut self.dropout, tape, joint);
        let p = tape.matmul(joint, self.proj_w);
        let p = tape.add_bias(p, self.proj_b);
        let logits = tape.matmul_t(p, self.emb_out);
        tape.log_softmax(logits)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiLmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub mask_rate: f64,
    pub adam: AdamConfig,
    pub max_grad_ratio: f64,
    pub seed: u64,
}

impl Default for BiLmTrainConfig {
    fn default() -> Self {
        BiLmTrainConfig {
            epochs: 50,
            batch_size: 20,
            mask_rate: 0.15,
            adam: AdamConfig::default(),
            max_grad_ratio: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiLmEpochStats {
    pub epoch: usize,
    pub masked_ce: f64,
    pub wall_secs: f64,
}

/// Sum of `−log p(original)` over masked slots, and the slot count.
fn masked_objective(
    g: &mut BiGraph<'_, '_>,
    tape: &mut Tape,
    masked: &[MaskedSentence],
) -> (Var, usize) {
    let seqs: Vec<&[usize]> = masked.iter().map(|m| m.tokens.as_slice()).collect();
    let mut slots = Vec::new();
    let mut targets = Vec::new();
    for (r, m) in masked.iter().enumerate() {
        for (&p, &o) in m.positions.iter().zip(&m.originals) {
            slots.push((r, p));
            targets.push(o);
        }
    }
    let lp = g.predict(tape, &seqs, &slots);
    let picked = tape.pick(lp, &targets);
    let total = tape.sum(picked);
    (tape.scale(total, -1.0), slots.len())
}

/// Trains on masked reconstruction; only masked slots contribute to the loss.
pub fn train_bilm(
    bilm: &mut BiLmParams,
    sentences: &[Vec<usize>],
    config: &BiLmTrainConfig,
    mut on_epoch: impl FnMut(&BiLmEpochStats),
) -> Result<Vec<BiLmEpochStats>> {
    if sentences.is_empty() || sentences.iter().any(|s| s.is_empty()) {
        return Err(Error::invalid("bidirectional model needs non-empty sentences"));
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "bilm-batches"));
    let mut mask_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "bilm-masks"));
    let mut dropout = Dropout::new(
        bilm.config.dropout,
        ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "bilm-dropout")),
    );
    let mut adam = AdamState::new(&bilm.store, config.adam);
    let mut stats = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..sentences.len()).collect();
        order.shuffle(&mut order_rng);
        let (mut ce_sum, mut slots_sum) = (0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            let masked = batch
                .iter()
                .map(|&i| mask_tokens(&sentences[i], config.mask_rate, &mut mask_rng))
                .collect::<Result<Vec<_>>>()?;
            let mut tape = Tape::new();
            let mut g = BiGraph::new(bilm, &mut tape, Some(&mut dropout));
            let (nll, count) = masked_objective(&mut g, &mut tape, &masked);
            let loss = tape.scale(nll, 1.0 / count as f64);
            let value = tape.value(nll).item()?;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("bidirectional loss at epoch {epoch}")));
            }
            let mut grads = tape.backward(loss)?;
            clip_by_batch_norm(&mut grads, batch.len(), config.max_grad_ratio);
            adam.step(&mut bilm.store, &grads)?;
            ce_sum += value;
            slots_sum += count;
        }
        let s = BiLmEpochStats {
            epoch,
            masked_ce: ce_sum / slots_sum as f64,
            wall_secs: start.elapsed().as_secs_f64(),
        };
        on_epoch(&s);
        stats.push(s);
    }
    Ok(stats)
}

/// Mean masked-slot cross-entropy of a frozen model.
pub fn masked_cross_entropy(
    bilm: &BiLmParams,
    sentences: &[Vec<usize>],
    rate: f64,
    rng: &mut impl Rng,
) -> Result<f64> {
    let (mut total, mut count) = (0.0, 0);
    for chunk in sentences.chunks(64) {
        let masked = chunk
            .iter()
            .map(|s| mask_tokens(s, rate, rng))
            .collect::<Result<Vec<_>>>()?;
        let mut tape = Tape::inference();
        let mut g = BiGraph::new(bilm, &mut tape, None);
        let (nll, n) = masked_objective(&mut g, &mut tape, &masked);
        total += tape.value(nll).item()?;
        count += n;
    }
    if count == 0 {
        return Err(Error::invalid("no sentences to evaluate"));
    }
    Ok(total / count as f64)
}

/// A saved bidirectional model.
#[derive(Clone, Debug, PartialEq)]
pub struct BiLmCheckpoint {
    pub params: BiLmParams,
    pub epoch: usize,
    pub config_hash: String,
    pub vocab_hash: String,
}

impl BiLmCheckpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        CheckpointManifest {
            format_version: crate::lm::checkpoint_format(),
            kind: ModelKind::Bilm,
            architecture: serde_json::to_value(&self.params.config)?,
            vocab_hash: self.vocab_hash.clone(),
            epoch: self.epoch,
            validation_metric: None,
            config_hash: self.config_hash.clone(),
        }
        .save(dir, &self.params.store)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (m, store) = CheckpointManifest::load(dir)?;
        if m.kind != ModelKind::Bilm {
            return Err(Error::Format(format!(
                "{} holds a {:?} checkpoint, expected a bidirectional model",
                dir.display(),
                m.kind
            )));
        }
        let config: BiLmConfig = serde_json::from_value(m.architecture)?;
        Ok(BiLmCheckpoint {
            params: BiLmParams::from_store(config, store)?,
            epoch: m.epoch,
            config_hash: m.config_hash,
            vocab_hash: m.vocab_hash,
        })
    }
}
