//! Hand-checkable models shared by tests and acceptance checks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::lm::{LmConfig, LmParams, SoftmaxMode};
use crate::tensor::{log_sum_exp, sigmoid};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random weights scaled up so every path carries a visible gradient.
pub fn random_lm(config: LmConfig, seed: u64, scale: f64) -> LmParams {
    let mut lm = LmParams::new(config, &mut rng(seed)).unwrap();
    for id in lm.store.ids().collect::<Vec<_>>() {
        lm.store.get_mut(id).scale_in_place(scale);
    }
    lm
}

/// One layer without recurrence and with the forget gate shut, so the
/// next-token distribution depends on the current token only.
pub fn bigram_lm(vocab: usize, seed: u64) -> LmParams {
    let mut lm = random_lm(
        LmConfig {
            vocab_size: vocab,
            emb_dim: 3,
            hidden: 4,
            layers: 1,
            dropout: 0.0,
            softmax: SoftmaxMode::Vanilla,
        },
        seed,
        1.0,
    );
    let (wx, wh, bias) = lm.layer_ids(0);
    lm.store.get_mut(wh).data_mut().fill(0.0);
    lm.store.get_mut(bias).data_mut()[4..8].fill(-1e3);
    for id in [wx, lm.embedding_id(), lm.projection_ids().0] {
        lm.store.get_mut(id).scale_in_place(20.0);
    }
    lm
}

/// `table[x][y] = log p(y | current token x)` computed straight from the
/// weights of a [`bigram_lm`].
pub fn bigram_table(lm: &LmParams) -> Vec<Vec<f64>> {
    let (v, e, h) = (lm.config.vocab_size, lm.config.emb_dim, lm.config.hidden);
    let emb = lm.store.get(lm.embedding_id());
    let (wx, _, bias) = lm.layer_ids(0);
    let (wx, bias) = (lm.store.get(wx), lm.store.get(bias));
    let (pw, pb) = lm.projection_ids();
    let (pw, pb) = (lm.store.get(pw), lm.store.get(pb));
    (0..v)
        .map(|x| {
            let mut pre = bias.data().to_vec();
            for (k, ek) in emb.row(x).iter().enumerate() {
                for (j, p) in pre.iter_mut().enumerate() {
                    *p += ek * wx.row(k)[j];
                }
            }
            let hv: Vec<f64> = (0..h)
                .map(|j| {
                    let c = sigmoid(pre[j]) * pre[2 * h + j].tanh();
                    sigmoid(pre[3 * h + j]) * c.tanh()
                })
                .collect();
            let mut out = pb.data()[..e].to_vec();
            for (j, hj) in hv.iter().enumerate() {
                for (k, o) in out.iter_mut().enumerate() {
                    *o += hj * pw.row(j)[k];
                }
            }
            let logits: Vec<f64> = (0..v)
                .map(|w| emb.row(w).iter().zip(&out).map(|(a, b)| a * b).sum())
                .collect();
            let lse = log_sum_exp(&logits);
            logits.iter().map(|l| l - lse).collect()
        })
        .collect()
}

/// `p(b <EOS> | previous token)` as a plain product of table probabilities.
pub fn chain_probability(table: &[Vec<f64>], prev: usize, b: &[usize]) -> f64 {
    let mut p = 1.0;
    let mut last = prev;
    for &t in b.iter().chain(&[crate::corpus::EOS]) {
        p *= table[last][t].exp();
        last = t;
    }
    p
}

/// Short cyclic sentences over word ids `5..5+words`.
pub fn cyclic_sentences(n: usize, words: usize, len: usize) -> Vec<Vec<usize>> {
    (0..n)
        .map(|k| (0..len).map(|j| 5 + (k + j) % words).collect())
        .collect()
}
