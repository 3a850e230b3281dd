use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{head, HEAD_W, TOK_EMB, POS_EMB};
use super::*;
use crate::synthlang::TokenId;

fn tiny(vocab: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        d_model: 16,
        num_layers: 2,
        num_heads: 2,
        d_ff: 32,
        context_length: 16,
        seed,
    }
}

fn random_tokens(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<TokenId> {
    (0..len).map(|_| rng.gen_range(0..vocab) as TokenId).collect()
}

#[test]
fn identity_hook_is_bitwise_neutral() {
    let m = Model::<f32>::new(tiny(40, 1)).unwrap();
    let toks = [0, 5, 9, 12, 33, 7];
    let (base, cap) = m.forward(&toks, &[0, 1], &[]).unwrap();
    let hooks: Vec<_> = (0..2).map(InterventionHook::identity).collect();
    let (hooked, cap2) = m.forward(&toks, &[0, 1], &hooks).unwrap();
    assert_eq!(base, hooked);
    assert_eq!(cap, cap2);
}

#[test]
fn split_forward_matches_full() {
    let m = Model::<f64>::new(tiny(40, 2)).unwrap();
    let toks = [0, 3, 8, 21, 1, 14, 39];
    for layer in 0..2 {
        let (full, cap) = m.forward(&toks, &[layer], &[]).unwrap();
        let resumed = m.forward_from(layer, cap.layer(layer).unwrap().view()).unwrap();
        for (a, b) in full.iter().zip(resumed.iter()) {
            assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0), "{a} vs {b}");
        }
    }
}

#[test]
fn hook_edit_changes_downstream_and_capture() {
    let m = Model::<f32>::new(tiny(40, 3)).unwrap();
    let toks = [0, 4, 6, 8];
    let zero = InterventionHook::new(0, |_: usize, r: &mut [f64]| r.iter_mut().for_each(|v| *v = 0.0))
        .with_positions(PositionFilter::Only(BTreeSet::from([2])));
    let (base, _) = m.forward(&toks, &[], &[]).unwrap();
    let (edited, cap) = m.forward(&toks, &[0], &[zero]).unwrap();
    let c = cap.layer(0).unwrap();
    assert!(c.row(2).iter().all(|&v| v == 0.0));
    assert!(c.row(1).iter().any(|&v| v != 0.0));
    // causal: positions before the edit are untouched
    assert_eq!(base.row(0), edited.row(0));
    assert_eq!(base.row(1), edited.row(1));
    assert_ne!(base.row(3), edited.row(3));
}

#[test]
fn rejects_bad_inputs() {
    let m = Model::<f32>::new(tiny(10, 0)).unwrap();
    assert!(matches!(m.forward(&[], &[], &[]), Err(Error::Empty(_))));
    assert!(matches!(
        m.forward(&[0, 10], &[], &[]),
        Err(Error::OutOfRange { what: "token", .. })
    ));
    assert!(m.forward(&[0; 17], &[], &[]).is_err());
    assert!(matches!(
        m.forward(&[0, 1], &[2], &[]),
        Err(Error::OutOfRange { what: "layer", .. })
    ));
    assert!(matches!(
        m.forward(&[0, 1], &[], &[InterventionHook::identity(5)]),
        Err(Error::OutOfRange { what: "layer", .. })
    ));
    assert!(Model::<f32>::new(ModelConfig {
        num_heads: 3,
        ..tiny(10, 0)
    })
    .is_err());
    assert!(matches!(
        Model::<f32>::for_vocab(tiny(10, 0), 11),
        Err(Error::Config(_))
    ));
}

#[test]
fn random_init_ce_near_uniform() {
    let v = 200;
    let m = Model::<f32>::new(ModelConfig {
        vocab_size: v,
        d_model: 32,
        num_layers: 2,
        num_heads: 4,
        d_ff: 64,
        context_length: 16,
        seed: 11,
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let texts: Vec<_> = (0..100).map(|_| random_tokens(&mut rng, 12, v)).collect();
    let ce = m.ce_per_text(&texts, &[], 25).unwrap();
    let mean = ce.iter().sum::<f64>() / ce.len() as f64;
    assert!((mean - (v as f64).ln()).abs() < 0.1, "mean CE {mean}");
}

#[test]
fn ce_matches_manual_softmax() {
    let m = Model::<f64>::new(tiny(12, 4)).unwrap();
    let toks = [0, 3, 7, 2];
    let (logits, _) = m.forward(&toks, &[], &[]).unwrap();
    let mut want = 0.0;
    for p in 0..3 {
        let row = logits.row(p);
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        want -= (row[toks[p + 1] as usize].exp() / z).ln();
    }
    let got = m.ce_loss(&toks, &[0, 1, 2], &[]).unwrap();
    assert!((got - want / 3.0).abs() < 1e-12);
}

fn overfit_config(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 1,
        lr: 1e-2,
        warmup_steps: 10,
        min_lr_ratio: 0.1,
        weight_decay: 0.0,
        log_every: 0,
        ..TrainConfig::default()
    }
}

#[test]
fn overfits_single_sentence() {
    let mut m = Model::<f32>::new(tiny(30, 7)).unwrap();
    let ex = Example::full(vec![0, 11, 23, 5, 17, 29, 8, 1]);
    let cfg = overfit_config(200);
    let mut losses = Vec::new();
    {
        let mut t = Trainer::new(&mut m, cfg.clone());
        for _ in 0..cfg.steps {
            losses.push(t.step(std::slice::from_ref(&ex)).unwrap());
        }
    }
    let final_loss = m.loss_and_grad(std::slice::from_ref(&ex)).unwrap().0;
    assert!(final_loss < 0.1, "final loss {final_loss}");
    let after = &losses[cfg.warmup_steps..];
    let drops = after.windows(2).filter(|w| w[1] <= w[0]).count();
    let frac = drops as f64 / (after.len() - 1) as f64;
    assert!(frac >= 0.9, "monotone fraction {frac}");
}

#[test]
fn generate_emits_memorized_suffix() {
    let mut m = Model::<f32>::new(tiny(30, 8)).unwrap();
    let seq = vec![0, 4, 9, 16, 25, 6, 13, 1];
    let ex = Example::full(seq.clone());
    {
        let mut t = Trainer::new(&mut m, overfit_config(200));
        for _ in 0..200 {
            t.step(std::slice::from_ref(&ex)).unwrap();
        }
    }
    let out = m.generate(&seq[..3], 5, &[]).unwrap();
    assert_eq!(out, &seq[3..]);
    assert_eq!(m.generate(&seq[..3], 5, &[]).unwrap(), out);
    let id: Vec<_> = (0..2).map(InterventionHook::identity).collect();
    assert_eq!(m.generate(&seq[..3], 5, &id).unwrap(), out);
    assert!(m.generate(&seq[..3], 14, &[]).is_err());
    let prompts = vec![seq[..3].to_vec(), seq[..1].to_vec(), vec![0, 9]];
    let batched = m.generate_batch(&prompts, 5, &[]).unwrap();
    for (p, b) in prompts.iter().zip(&batched) {
        assert_eq!(&m.generate(p, 5, &[]).unwrap(), b);
    }
    assert!(m.generate(&[], 1, &[]).is_err());
}

#[test]
fn argmax_ties_go_low() {
    let row = ndarray::arr1(&[1.0f32, 3.0, 3.0, -1.0]);
    assert_eq!(argmax_lowest(row.view()), 1);
}

fn grad_batch(vocab: usize) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    vec![
        Example::full(random_tokens(&mut rng, 9, vocab)),
        Example {
            tokens: random_tokens(&mut rng, 6, vocab),
            positions: vec![1, 4],
        },
    ]
}

#[test]
fn gradients_match_finite_differences() {
    let m = Model::<f64>::new(tiny(20, 21)).unwrap();
    let rep = grad_check(&m, &grad_batch(20), 1e-5, 300, 1).unwrap();
    assert!(rep.max_rel_error <= 1e-4, "{rep:?}");
}

#[test]
fn gradients_match_with_zero_head() {
    let mut m = Model::<f64>::new(tiny(20, 22)).unwrap();
    let hw = head(m.config.num_layers, HEAD_W);
    m.params.tensors[hw].data.iter_mut().for_each(|w| *w = 0.0);
    let rep = grad_check(&m, &grad_batch(20), 1e-5, 300, 2).unwrap();
    assert!(rep.max_rel_error <= 1e-4, "{rep:?}");
}

#[test]
fn grad_check_rejects_zero_epsilon() {
    let m = Model::<f64>::new(tiny(20, 0)).unwrap();
    assert!(grad_check(&m, &grad_batch(20), 0.0, 10, 0).is_err());
}

#[test]
fn relabeling_vocabulary_permutes_logits() {
    let v = 24;
    let m = Model::<f64>::new(tiny(v, 31)).unwrap();
    let mut perm: Vec<usize> = (0..v).collect();
    perm.reverse();
    perm.swap(3, 10);
    let mut pm = m.clone();
    let d = m.config.d_model;
    let hw = head(m.config.num_layers, HEAD_W);
    let hb = hw + 1;
    for old in 0..v {
        let new = perm[old];
        for c in 0..d {
            pm.params.tensors[TOK_EMB].data[new * d + c] = m.params.tensors[TOK_EMB].data[old * d + c];
            pm.params.tensors[hw].data[c * v + new] = m.params.tensors[hw].data[c * v + old];
        }
        pm.params.tensors[hb].data[new] = m.params.tensors[hb].data[old];
    }
    let toks: Vec<TokenId> = vec![0, 5, 9, 17, 2];
    let ptoks: Vec<TokenId> = toks.iter().map(|&t| perm[t as usize] as TokenId).collect();
    let (a, _) = m.forward(&toks, &[], &[]).unwrap();
    let (b, _) = pm.forward(&ptoks, &[], &[]).unwrap();
    for r in 0..toks.len() {
        for old in 0..v {
            assert!((a[[r, old]] - b[[r, perm[old]]]).abs() < 1e-12);
        }
    }
}

#[test]
fn same_seed_same_weights() {
    let a = Model::<f32>::new(tiny(30, 5)).unwrap();
    let b = Model::<f32>::new(tiny(30, 5)).unwrap();
    let c = Model::<f32>::new(tiny(30, 6)).unwrap();
    assert_eq!(a.checksum(), b.checksum());
    assert_ne!(a.checksum(), c.checksum());
    assert_eq!(a.params.tensors[POS_EMB].shape, vec![16, 16]);
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.lflm");
    let m = Model::<f32>::new(tiny(30, 9)).unwrap();
    save_checkpoint(&m, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.checksum(), m.checksum());
    let toks = [0, 3, 6];
    assert_eq!(m.forward(&toks, &[], &[]).unwrap().0, back.forward(&toks, &[], &[]).unwrap().0);
}

#[test]
fn truncated_checkpoint_reports_offset() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.lflm");
    let bytes = checkpoint_bytes(&Model::<f32>::new(tiny(30, 9)).unwrap());
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    match load_checkpoint(&path) {
        Err(Error::Corrupt { offset, .. }) => assert!(offset > 0 && (offset as usize) < bytes.len()),
        other => panic!("unexpected {other:?}"),
    }
}
