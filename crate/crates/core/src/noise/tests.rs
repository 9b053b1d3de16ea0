use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::bilm::BiGraph;
use super::*;
use crate::gradcheck;
use crate::lm::Dropout;
use crate::tensor::{AdamConfig, Tape};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small_bilm(vocab: usize, seed: u64) -> BiLmParams {
    let cfg = BiLmConfig {
        vocab_size: vocab,
        emb_dim: 4,
        hidden: 5,
        layers: 2,
        dropout: 0.0,
    };
    let mut p = BiLmParams::new(cfg, &mut rng(seed)).unwrap();
    for id in p.store.ids().collect::<Vec<_>>() {
        p.store.get_mut(id).scale_in_place(6.0);
    }
    p
}

#[test]
fn batch_negatives_are_the_other_sentences_in_order() {
    let bs: Vec<Vec<usize>> = (0..16).map(|i| vec![5 + i, 6]).collect();
    let refs: Vec<&[usize]> = bs.iter().map(|b| b.as_slice()).collect();
    let negs = batch_negatives(&refs).unwrap();
    for (i, n) in negs.iter().enumerate() {
        assert_eq!(n.len(), 15);
        let expected: Vec<Vec<usize>> = (0..16).filter(|&j| j != i).map(|j| bs[j].clone()).collect();
        assert_eq!(n, &expected);
        assert!(!n.contains(&bs[i]));
    }
    assert_eq!(batch_negatives(&refs).unwrap(), negs);

    let two: Vec<&[usize]> = vec![&[5], &[6, 7]];
    assert_eq!(batch_negatives(&two).unwrap(), vec![vec![vec![6, 7]], vec![vec![5]]]);
    assert!(batch_negatives(&two[..1]).is_err());

    let mut s = BatchNce::new(16).unwrap();
    assert_eq!(s.nu(), 15);
    assert!(s.negatives(&two, &mut rng(0)).is_err());
    assert!(BatchNce::new(1).is_err());
}

#[test]
fn mask_rate_extremes() {
    let s: Vec<usize> = (5..15).collect();
    let m = mask_tokens(&s, 0.0, &mut rng(1)).unwrap();
    assert_eq!(m.positions.len(), 1);
    assert_eq!(m.tokens.iter().filter(|&&t| t == MASK).count(), 1);
    assert_eq!(m.restore(), s);
    let m = mask_tokens(&s, 1.0, &mut rng(1)).unwrap();
    assert_eq!(m.positions, (0..10).collect::<Vec<_>>());
    assert!(m.tokens.iter().all(|&t| t == MASK));
    assert_eq!(m.restore(), s);
    assert!(mask_tokens(&[], 0.1, &mut rng(1)).is_err());
    assert!(mask_tokens(&s, 1.5, &mut rng(1)).is_err());
}

#[test]
fn mask_rate_concentrates() {
    let s = vec![7usize; 100];
    let mut r = rng(2);
    let total: usize = (0..10_000)
        .map(|_| mask_tokens(&s, 0.15, &mut r).unwrap().positions.len())
        .sum();
    let mean = total as f64 / 10_000.0;
    assert!((14.0..=16.0).contains(&mean), "{mean}");
}

/// All recurrent weights zero and a fixed output: `p(5) = 0.75`, `p(6) = 0.25`,
/// with `<UNK>` pushed to negligible mass and the other specials excluded.
fn fixed_output_bilm() -> BiLmParams {
    let mut p = BiLmParams::zeros(BiLmConfig {
        vocab_size: 7,
        emb_dim: 2,
        hidden: 3,
        layers: 1,
        dropout: 0.0,
    })
    .unwrap();
    let emb = p.store.get_mut(p.embedding_id());
    emb.row_mut(0).copy_from_slice(&[-100.0, 0.0]);
    emb.row_mut(5).copy_from_slice(&[3f64.ln(), 0.0]);
    // Specials get high logits to check they are never drawn.
    for s in [MASK, BOS, EOS, PAD] {
        emb.row_mut(s).copy_from_slice(&[5.0, 0.0]);
    }
    let (_, pb) = p.projection_ids();
    p.store.get_mut(pb).data_mut().copy_from_slice(&[1.0, 0.0]);
    p
}

#[test]
fn resampling_frequencies_follow_the_model() {
    let bilm = fixed_output_bilm();
    let mut r = rng(3);
    let masked = MaskedSentence {
        tokens: vec![6, MASK, 6],
        positions: vec![1],
        originals: vec![6],
    };
    let batch = vec![masked; 10_000];
    let out = resample_batch(&batch, &bilm, &mut r).unwrap();
    let fives = out.iter().filter(|s| s[1] == 5).count() as f64 / 10_000.0;
    let sixes = out.iter().filter(|s| s[1] == 6).count() as f64 / 10_000.0;
    assert!((fives - 0.75).abs() < 0.02, "{fives}");
    assert!((sixes - 0.25).abs() < 0.02, "{sixes}");
    assert!(out.iter().all(|s| s[0] == 6 && s[2] == 6));
}

#[test]
fn resample_only_touches_masked_slots() {
    let bilm = small_bilm(12, 4);
    let mut r = rng(5);
    let unmasked = MaskedSentence {
        tokens: vec![5, 6, 7],
        positions: vec![],
        originals: vec![],
    };
    assert_eq!(resample(&unmasked, &bilm, &mut r).unwrap(), vec![5, 6, 7]);
    for _ in 0..200 {
        let s: Vec<usize> = (0..8).map(|i| 5 + (i * 3) % 7).collect();
        let m = mask_tokens(&s, 0.3, &mut r).unwrap();
        let out = resample(&m, &bilm, &mut r).unwrap();
        assert_eq!(out.len(), s.len());
        for (i, (&o, &t)) in out.iter().zip(&s).enumerate() {
            if !m.positions.contains(&i) {
                assert_eq!(o, t);
            } else {
                assert!(!matches!(o, MASK | BOS | EOS | PAD));
            }
        }
    }
}

#[test]
fn resampled_negatives_count_length_and_redraws() {
    let bilm = small_bilm(12, 6);
    let bs: Vec<Vec<usize>> = vec![vec![5, 6, 7, 8], vec![9, 10], vec![11]];
    let refs: Vec<&[usize]> = bs.iter().map(|b| b.as_slice()).collect();
    let r = make_negatives_by_resampling(&refs, &bilm, 15, 0.15, &mut rng(7)).unwrap();
    assert_eq!(r.negatives.len(), 3);
    for (b, negs) in bs.iter().zip(&r.negatives) {
        assert_eq!(negs.len(), 15);
        assert!(negs.iter().all(|n| n.len() == b.len()));
    }
    assert!(r.audit.iter().all(|a| (1..=MAX_REDRAWS + 1).contains(&a.attempts)));

    // A model that can only ever produce token 5 cannot change [5, 5]: every
    // draw exhausts its redraws and is kept, flagged identical.
    let mut only5 = fixed_output_bilm();
    let e = only5.store.get_mut(only5.embedding_id());
    e.row_mut(6).copy_from_slice(&[-100.0, 0.0]);
    let src: Vec<&[usize]> = vec![&[5, 5]];
    let r = make_negatives_by_resampling(&src, &only5, 3, 0.5, &mut rng(8)).unwrap();
    assert_eq!(r.kept_identical(), 3);
    assert!(r.audit.iter().all(|a| a.attempts == MAX_REDRAWS + 1 && a.identical));
}

fn masked_nll(bilm: &BiLmParams, masked: &[MaskedSentence], detach: [bool; 3]) -> (f64, crate::tensor::Gradients) {
    let mut tape = Tape::new();
    let mut g = BiGraph::new(bilm, &mut tape, None);
    if detach[0] {
        g.emb_fwd = tape.detach(g.emb_fwd);
    }
    if detach[1] {
        g.emb_bwd = tape.detach(g.emb_bwd);
    }
    if detach[2] {
        g.emb_out = tape.detach(g.emb_out);
    }
    let seqs: Vec<&[usize]> = masked.iter().map(|m| m.tokens.as_slice()).collect();
    let mut slots = Vec::new();
    let mut targets = Vec::new();
    for (r, m) in masked.iter().enumerate() {
        for (&p, &o) in m.positions.iter().zip(&m.originals) {
            slots.push((r, p));
            targets.push(o);
        }
    }
    let lp = g.predict(&mut tape, &seqs, &slots);
    let picked = tape.pick(lp, &targets);
    let s = tape.sum(picked);
    let loss = tape.scale(s, -1.0);
    let v = tape.value(loss).item().unwrap();
    (v, tape.backward(loss).unwrap())
}

#[test]
fn embedding_serves_all_three_roles() {
    let bilm = small_bilm(10, 9);
    let m = MaskedSentence {
        tokens: vec![5, MASK, 7],
        positions: vec![1],
        originals: vec![6],
    };
    let row_norm = |g: &crate::tensor::Gradients, r: usize| -> f64 {
        g.get(bilm.embedding_id()).map_or(0.0, |t| t.row(r).iter().map(|v| v * v).sum())
    };
    // Forward input path only: token 5 is read by the forward stack.
    let (_, g) = masked_nll(&bilm, std::slice::from_ref(&m), [false, true, true]);
    assert!(row_norm(&g, 5) > 0.0);
    assert_eq!(row_norm(&g, 7), 0.0);
    // Backward input path only: token 7.
    let (_, g) = masked_nll(&bilm, std::slice::from_ref(&m), [true, false, true]);
    assert!(row_norm(&g, 7) > 0.0);
    assert_eq!(row_norm(&g, 5), 0.0);
    // Output path only: the target row.
    let (_, g) = masked_nll(&bilm, std::slice::from_ref(&m), [true, true, false]);
    assert!(row_norm(&g, 6) > 0.0);
    assert_eq!(bilm.store.len(), 1 + 2 * 2 * 3 + 2);
}

#[test]
fn masked_loss_gradients_match_finite_differences() {
    let bilm = small_bilm(8, 10);
    let masked = vec![
        MaskedSentence {
            tokens: vec![5, MASK, 7, MASK],
            positions: vec![1, 3],
            originals: vec![6, 5],
        },
        MaskedSentence {
            tokens: vec![MASK, 6],
            positions: vec![0],
            originals: vec![7],
        },
    ];
    let (_, grads) = masked_nll(&bilm, &masked, [false; 3]);
    let report = gradcheck::check(&bilm.store, &grads, 1e-5, |store| {
        let probe = BiLmParams::from_store(bilm.config.clone(), store.clone())?;
        Ok(masked_nll(&probe, &masked, [false; 3]).0)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn unmasked_positions_do_not_enter_the_loss() {
    let bilm = small_bilm(10, 11);
    let a = MaskedSentence {
        tokens: vec![5, MASK, 7],
        positions: vec![1],
        originals: vec![6],
    };
    // Same masked slot, different visible tokens' "originals" are irrelevant:
    // only the masked target is scored.
    let lp = bilm.predict(&[&a.tokens], &[(0, 1)]).unwrap();
    let (nll, _) = masked_nll(&bilm, std::slice::from_ref(&a), [false; 3]);
    assert!((nll + lp.row(0)[6]).abs() < 1e-12);
}

fn toy_sentences(n: usize) -> Vec<Vec<usize>> {
    (0..n).map(|k| (0..6).map(|j| 5 + (k + j) % 10).collect()).collect()
}

#[test]
fn training_beats_uniform_and_is_deterministic() {
    let cfg = BiLmConfig {
        vocab_size: 15,
        emb_dim: 8,
        hidden: 16,
        layers: 1,
        dropout: 0.0,
    };
    let train = toy_sentences(1000);
    let tc = BiLmTrainConfig {
        epochs: 2,
        batch_size: 20,
        adam: AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        },
        seed: 3,
        ..BiLmTrainConfig::default()
    };
    let init = BiLmParams::new(cfg, &mut rng(12)).unwrap();
    let mut a = init.clone();
    let stats = train_bilm(&mut a, &train, &tc, |_| {}).unwrap();
    assert_eq!(stats.len(), 2);
    let ce = masked_cross_entropy(&a, &train, 0.15, &mut rng(13)).unwrap();
    assert!(ce < 15f64.ln(), "{ce}");

    let mut b = init;
    train_bilm(&mut b, &train, &tc, |_| {}).unwrap();
    assert_eq!(a, b);

    assert!(train_bilm(&mut b, &[], &tc, |_| {}).is_err());
}

#[test]
fn dropout_training_pass_runs() {
    let mut cfg = small_bilm(10, 14).config;
    cfg.dropout = 0.3;
    let bilm = BiLmParams::new(cfg, &mut rng(14)).unwrap();
    let mut d = Dropout::new(0.3, rng(15));
    let mut tape = Tape::new();
    let mut g = BiGraph::new(&bilm, &mut tape, Some(&mut d));
    let lp = g.predict(&mut tape, &[&[5, MASK, 6]], &[(0, 1)]);
    let s = tape.sum(lp);
    assert!(tape.backward(s).is_ok());
}

#[test]
fn checkpoint_round_trip() {
    let ck = BiLmCheckpoint {
        params: small_bilm(9, 16),
        epoch: 50,
        config_hash: "c".into(),
        vocab_hash: "v".into(),
    };
    let dir = tempfile::tempdir().unwrap();
    ck.save(dir.path()).unwrap();
    assert_eq!(BiLmCheckpoint::load(dir.path()).unwrap(), ck);
    assert!(crate::lm::Checkpoint::load(dir.path()).is_err());
}
