//! Batched forward computation of the language model on a [`Tape`].
//!
//! Sequences in a batch may differ in length. Shorter rows are padded with
//! `<PAD>` while priming a state, and padded steps leave the row's state
//! untouched. Scoring instead drops finished rows from the batch.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{LmParams, LmState, SoftmaxMode, TEMPERATURE_FLOOR};
use crate::corpus::{BOS, EOS, PAD};
use crate::tensor::{Tape, Tensor, Var};

/// Inverted dropout with its own random stream.
#[derive(Debug)]
pub struct Dropout {
    pub rate: f64,
    pub rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, rng: ChaCha8Rng) -> Self {
        Dropout { rate, rng }
    }

    pub(crate) fn mask(&mut self, len: usize) -> Vec<f64> {
        let keep = 1.0 - self.rate;
        let scale = 1.0 / keep;
        (0..len)
            .map(|_| if self.rng.gen::<f64>() < keep { scale } else { 0.0 })
            .collect()
    }
}

/// Recurrent state of a batch: per layer, `rows × hidden` hidden and cell tensors.
#[derive(Clone, Debug)]
pub struct StateVars {
    pub h: Vec<Var>,
    pub c: Vec<Var>,
}

impl StateVars {
    pub fn top(&self) -> Var {
        *self.h.last().expect("at least one layer")
    }
}

struct LayerVars {
    wx: Var,
    wh: Var,
    bias: Var,
}

/// Parameter handles of one model bound to one tape.
pub struct LmGraph<'m, 'd> {
    lm: &'m LmParams,
    emb: Var,
    layers: Vec<LayerVars>,
    proj_w: Var,
    proj_b: Var,
    dropout: Option<&'d mut Dropout>,
}

impl<'m, 'd> LmGraph<'m, 'd> {
    /// Binds the parameters; `dropout` switches on training-mode dropout.
    pub fn new(lm: &'m LmParams, tape: &mut Tape, dropout: Option<&'d mut Dropout>) -> Self {
        let s = &lm.store;
        let emb = tape.param(s, lm.ids.embedding);
        let layers = lm
            .ids
            .layers
            .iter()
            .map(|l| LayerVars {
                wx: tape.param(s, l.wx),
                wh: tape.param(s, l.wh),
                bias: tape.param(s, l.bias),
            })
            .collect();
        let proj_w = tape.param(s, lm.ids.proj_w);
        let proj_b = tape.param(s, lm.ids.proj_b);
        let dropout = dropout.filter(|d| d.rate > 0.0);
        LmGraph {
            lm,
            emb,
            layers,
            proj_w,
            proj_b,
            dropout,
        }
    }

    pub fn params(&self) -> &LmParams {
        self.lm
    }

    pub fn embedding(&self) -> Var {
        self.emb
    }

    fn drop(&mut self, tape: &mut Tape, x: Var) -> Var {
        match self.dropout.as_deref_mut() {
            Some(d) => {
                let mask = d.mask(tape.value(x).len());
                tape.mask(x, mask)
            }
            None => x,
        }
    }

    pub fn zero_state(&self, tape: &mut Tape, rows: usize) -> StateVars {
        let hdim = self.lm.config.hidden;
        let n = self.layers.len();
        StateVars {
            h: (0..n).map(|_| tape.input(Tensor::zeros(rows, hdim))).collect(),
            c: (0..n).map(|_| tape.input(Tensor::zeros(rows, hdim))).collect(),
        }
    }

    /// Constant state holding one row per given single-sequence state.
    pub fn state_from(&self, tape: &mut Tape, states: &[LmState]) -> StateVars {
        let hdim = self.lm.config.hidden;
        let rows = states.len();
        let mut out = StateVars {
            h: Vec::new(),
            c: Vec::new(),
        };
        for l in 0..self.layers.len() {
            let h: Vec<f64> = states.iter().flat_map(|s| s.h[l].iter().copied()).collect();
            let c: Vec<f64> = states.iter().flat_map(|s| s.c[l].iter().copied()).collect();
            out.h.push(tape.input(Tensor::matrix(rows, hdim, h).expect("state shape")));
            out.c.push(tape.input(Tensor::matrix(rows, hdim, c).expect("state shape")));
        }
        out
    }

    pub fn read_state(&self, tape: &Tape, state: &StateVars) -> Vec<LmState> {
        let rows = tape.value(state.h[0]).rows();
        (0..rows)
            .map(|r| LmState {
                h: state.h.iter().map(|v| tape.value(*v).row(r).to_vec()).collect(),
                c: state.c.iter().map(|v| tape.value(*v).row(r).to_vec()).collect(),
            })
            .collect()
    }

    /// Row `i` of the result is row `idx[i]` of `state`.
    pub fn gather_state(&self, tape: &mut Tape, state: &StateVars, idx: &[usize]) -> StateVars {
        StateVars {
            h: state.h.iter().map(|v| tape.gather_rows(*v, idx)).collect(),
            c: state.c.iter().map(|v| tape.gather_rows(*v, idx)).collect(),
        }
    }

    /// Consumes one token per row.
    pub fn step(&mut self, tape: &mut Tape, state: &StateVars, ids: &[usize]) -> StateVars {
        let mut x = tape.gather_rows(self.emb, ids);
        let mut next = StateVars {
            h: Vec::with_capacity(self.layers.len()),
            c: Vec::with_capacity(self.layers.len()),
        };
        for l in 0..self.layers.len() {
            if l > 0 {
                x = self.drop(tape, x);
            }
            let LayerVars { wx, wh, bias } = self.layers[l];
            let a = tape.matmul(x, wx);
            let b = tape.matmul(state.h[l], wh);
            let s = tape.add(a, b);
            let pre = tape.add_bias(s, bias);
            let gates = tape.lstm_gates(pre);
            let c = tape.lstm_cell(gates, state.c[l]);
            let h = tape.lstm_hidden(gates, c);
            next.h.push(h);
            next.c.push(c);
            x = h;
        }
        next
    }

    /// Like [`step`](Self::step), but rows whose `active` weight is 0 keep their old state.
    pub fn advance(
        &mut self,
        tape: &mut Tape,
        state: &StateVars,
        ids: &[usize],
        active: &[f64],
    ) -> StateVars {
        let next = self.step(tape, state, ids);
        if active.iter().all(|&a| a == 1.0) {
            return next;
        }
        StateVars {
            h: next
                .h
                .iter()
                .zip(&state.h)
                .map(|(n, o)| tape.blend_rows(*n, *o, active))
                .collect(),
            c: next
                .c
                .iter()
                .zip(&state.c)
                .map(|(n, o)| tape.blend_rows(*n, *o, active))
                .collect(),
        }
    }

    /// Next-token log-distribution (`rows × V`) from the top-layer output.
    pub fn head(&mut self, tape: &mut Tape, h_top: Var) -> Var {
        let e = self.lm.config.emb_dim;
        let x = self.drop(tape, h_top);
        let p = tape.matmul(x, self.proj_w);
        let p = tape.add_bias(p, self.proj_b);
        let v = tape.slice_cols(p, 0, e);
        let logits = tape.matmul_t(v, self.emb);
        match self.lm.config.softmax {
            SoftmaxMode::Vanilla => tape.log_softmax(logits),
            SoftmaxMode::Relaxed => {
                let t = tape.slice_cols(p, e, 1);
                tape.log_softmax_relaxed(logits, t, TEMPERATURE_FLOOR)
            }
        }
    }

    /// Feeds each row its own token sequence, starting from `init`.
    pub fn prime(&mut self, tape: &mut Tape, init: StateVars, seqs: &[&[usize]]) -> StateVars {
        let max = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut state = init;
        for t in 0..max {
            let ids: Vec<usize> = seqs.iter().map(|s| s.get(t).copied().unwrap_or(PAD)).collect();
            let active: Vec<f64> = seqs.iter().map(|s| f64::from(u8::from(t < s.len()))).collect();
            state = self.advance(tape, &state, &ids, &active);
        }
        state
    }

    /// State after `<BOS>`: the start of every unconditional run.
    pub fn bos_state(&mut self, tape: &mut Tape, rows: usize) -> StateVars {
        let zero = self.zero_state(tape, rows);
        self.step(tape, &zero, &vec![BOS; rows])
    }

    /// State after `<BOS>` followed by each context sentence.
    pub fn context_state(&mut self, tape: &mut Tape, contexts: &[&[usize]]) -> StateVars {
        let start = self.bos_state(tape, contexts.len());
        self.prime(tape, start, contexts)
    }

    /// `Σ log p(token | prefix)` over each row's tokens followed by `<EOS>`,
    /// starting from `state` (whose top output predicts the first token).
    /// Returns a `rows × 1` column.
    ///
    /// Rows run longest first, and a row drops out of the batch once its
    /// `<EOS>` has been scored, so padding costs nothing.
    pub fn sequence_logprob(&mut self, tape: &mut Tape, state: StateVars, seqs: &[&[usize]]) -> Var {
        let rows = seqs.len();
        assert_eq!(tape.value(state.h[0]).rows(), rows, "one state row per sequence");
        let mut order: Vec<usize> = (0..rows).collect();
        order.sort_by_key(|&r| std::cmp::Reverse(seqs[r].len()));
        let sorted: Vec<&[usize]> = order.iter().map(|&r| seqs[r]).collect();
        let max = sorted.first().map_or(0, |s| s.len());
        let identity = order.iter().enumerate().all(|(i, &r)| i == r);
        let mut state = if identity { state } else { self.gather_state(tape, &state, &order) };

        let mut picked = Vec::with_capacity(max + 1);
        let mut live = rows;
        for t in 0..=max {
            // Rows still owed a prediction at step t: those with len >= t.
            let n = sorted.iter().take_while(|s| s.len() >= t).count();
            if n < live {
                let keep: Vec<usize> = (0..n).collect();
                state = self.gather_state(tape, &state, &keep);
                live = n;
            }
            if t > 0 {
                let ids: Vec<usize> = sorted[..n].iter().map(|s| s[t - 1]).collect();
                state = self.step(tape, &state, &ids);
            }
            let targets: Vec<usize> = sorted[..n].iter().map(|s| s.get(t).copied().unwrap_or(EOS)).collect();
            let lp = self.head(tape, state.top());
            picked.push(tape.pick(lp, &targets));
        }

        // Sum the shrinking columns from the shortest up, padding with zeros.
        let mut total = picked.pop().expect("at least the end-of-sentence step");
        while let Some(p) = picked.pop() {
            let (have, want) = (tape.value(total).rows(), tape.value(p).rows());
            if have < want {
                let zeros = tape.input(Tensor::zeros(want - have, 1));
                total = tape.concat_rows(&[total, zeros]);
            }
            total = tape.add(total, p);
        }
        if identity {
            return total;
        }
        let mut inverse = vec![0; rows];
        for (i, &r) in order.iter().enumerate() {
            inverse[r] = i;
        }
        tape.gather_rows(total, &inverse)
    }
}
