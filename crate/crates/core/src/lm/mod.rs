//! Word-level recurrent language model.
//!
//! Tokens are embedded, passed through a stack of LSTM layers and linearly
//! projected to `emb_dim + 1` outputs. The first `emb_dim` outputs are
//! multiplied by the (tied) embedding matrix to give vocabulary logits; the
//! extra output drives a per-step softmax temperature in relaxed mode.

mod checkpoint;
mod graph;

pub use checkpoint::{Checkpoint, CheckpointManifest, ModelKind};
pub(crate) use checkpoint::checkpoint_format;
pub use graph::{Dropout, LmGraph, StateVars};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor};

pub const INIT_RANGE: f64 = 0.05;
pub const TEMPERATURE_FLOOR: f64 = 1e-2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SoftmaxMode {
    /// Temperature `softplus(t) + 0.01` predicted at every step.
    #[default]
    Relaxed,
    /// Temperature fixed at 1.
    Vanilla,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub emb_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
    pub softmax: SoftmaxMode,
}

impl LmConfig {
    pub fn new(vocab_size: usize) -> Self {
        LmConfig {
            vocab_size,
            emb_dim: 200,
            hidden: 600,
            layers: 2,
            dropout: 0.5,
            softmax: SoftmaxMode::Relaxed,
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
pub(crate) struct LayerIds {
    pub wx: ParamId,
    pub wh: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct LmIds {
    pub embedding: ParamId,
    pub layers: Vec<LayerIds>,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
}

/// All trainable weights of the language model.
#[derive(Clone, Debug, PartialEq)]
pub struct LmParams {
    pub config: LmConfig,
    pub store: ParamStore,
    pub(crate) ids: LmIds,
}

/// Per-layer hidden and memory-cell vectors of a single sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct LmState {
    pub h: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
}

impl LmState {
    pub fn zeros(config: &LmConfig) -> Self {
        LmState {
            h: vec![vec![0.0; config.hidden]; config.layers],
            c: vec![vec![0.0; config.hidden]; config.layers],
        }
    }
}

pub(crate) fn uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-INIT_RANGE..=INIT_RANGE))
        .collect();
    Tensor::matrix(rows, cols, data).expect("positive extents")
}

pub(crate) fn lstm_bias(hidden: usize, forget: f64) -> Tensor {
    let mut b = Tensor::zeros(1, 4 * hidden);
    b.data_mut()[hidden..2 * hidden].fill(forget);
    b
}

impl LmParams {
    /// Uniform `[-0.05, 0.05]` matrices, zero biases except a forget-gate
    /// bias of 1.
    pub fn new(config: LmConfig, rng: &mut impl Rng) -> Result<Self> {
        Self::build(config, 1.0, |r, c| uniform(r, c, rng))
    }

    /// Every weight and bias set to zero: a uniform predictor.
    pub fn zeros(config: LmConfig) -> Result<Self> {
        Self::build(config, 0.0, Tensor::zeros)
    }

    fn build(
        config: LmConfig,
        forget_bias: f64,
        mut matrix: impl FnMut(usize, usize) -> Tensor,
    ) -> Result<Self> {
        config.validate()?;
        let (v, e, h) = (config.vocab_size, config.emb_dim, config.hidden);
        let mut store = ParamStore::new();
        let embedding = store.insert("embedding", matrix(v, e));
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let input = if l == 0 { e } else { h };
            layers.push(LayerIds {
                wx: store.insert(format!("lstm.{l}.w_input"), matrix(input, 4 * h)),
                wh: store.insert(format!("lstm.{l}.w_hidden"), matrix(h, 4 * h)),
                bias: store.insert(format!("lstm.{l}.bias"), lstm_bias(h, forget_bias)),
            });
        }
        let proj_w = store.insert("projection.weight", matrix(h, e + 1));
        let proj_b = store.insert("projection.bias", Tensor::zeros(1, e + 1));
        Ok(LmParams {
            config,
            store,
            ids: LmIds {
                embedding,
                layers,
                proj_w,
                proj_b,
            },
        })
    }

    /// Rebuilds the parameter handles from a loaded store, checking names and shapes.
    pub fn from_store(config: LmConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
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
            let found = store
                .id_of(name)
                .ok_or_else(|| Error::Format(format!("missing parameter {name}")))?;
            if found != id || store.get(found).shape() != reference.store.get(id).shape() {
                return Err(Error::Format(format!("parameter {name} has wrong shape or position")));
            }
        }
        Ok(LmParams {
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

    /// `(w_input, w_hidden, bias)` of layer `l`.
    pub fn layer_ids(&self, l: usize) -> (ParamId, ParamId, ParamId) {
        let ids = &self.ids.layers[l];
        (ids.wx, ids.wh, ids.bias)
    }

    pub fn check_compatible(&self, vocab: &Vocabulary) -> Result<()> {
        if vocab.len() != self.config.vocab_size {
            return Err(Error::invalid(format!(
                "model expects {} vocabulary entries, vocabulary has {}",
                self.config.vocab_size,
                vocab.len()
            )));
        }
        Ok(())
    }

    /// Runs `tokens` from `init`. Row `i` of the returned `T×V` tensor is
    /// `log p(w_{i+1} | w_1..w_i, init)`.
    pub fn forward(
        &self,
        tokens: &[usize],
        init: &LmState,
        dropout: Option<&mut Dropout>,
    ) -> Result<(Tensor, LmState)> {
        if tokens.is_empty() {
            return Err(Error::invalid("forward needs at least one token"));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::invalid(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        if init.h.len() != self.config.layers
            || init.h.iter().chain(&init.c).any(|v| v.len() != self.config.hidden)
        {
            return Err(Error::shape("initial state does not match layer sizes"));
        }
        let mut tape = Tape::inference();
        let mut g = LmGraph::new(self, &mut tape, dropout);
        let mut state = g.state_from(&mut tape, std::slice::from_ref(init));
        let mut rows = Vec::with_capacity(tokens.len());
        for &t in tokens {
            state = g.step(&mut tape, &state, &[t]);
            let lp = g.head(&mut tape, state.top());
            rows.push(lp);
        }
        let all = tape.concat_rows(&rows);
        let final_state = g.read_state(&tape, &state).pop().expect("one row");
        Ok((tape.value(all).clone(), final_state))
    }
}

/// Normalized softmax of `logits / τ`, τ from the relaxed-temperature rule
/// (`None` for vanilla, i.e. τ = 1).
pub fn relaxed_softmax(logits: &[f64], t_raw: Option<f64>) -> Vec<f64> {
    let tau = t_raw.map_or(1.0, |t| crate::tensor::softplus(t) + TEMPERATURE_FLOOR);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| ((l - max) / tau).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}
