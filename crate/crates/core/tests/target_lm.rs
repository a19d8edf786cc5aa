use std::collections::HashMap;

use sgt_core::corpus::{chunk_tokens, generate_toy_corpus, split_chunks, Chunk, Tokenizer};
use sgt_core::lm::{pretrain, LmConfig, PretrainConfig, TargetModel};
use sgt_core::RngStream;

fn small_lm(vocab: usize, layers: usize, context: usize) -> LmConfig {
    LmConfig {
        vocab_size: vocab,
        d_model: 32,
        layers,
        heads: 4,
        context,
        ff_mult: 4,
    }
}

/// Add-one smoothed unigram model fitted on `train`, scored on `eval`.
fn unigram_ce(train: &[Chunk], eval: &[Chunk], vocab: usize) -> f64 {
    let mut counts: HashMap<usize, f64> = HashMap::new();
    let mut total = 0.0;
    for c in train {
        for y in c.targets().into_iter().flatten() {
            *counts.entry(y).or_default() += 1.0;
            total += 1.0;
        }
    }
    let mut nll = 0.0;
    let mut n = 0.0;
    for c in eval {
        for y in c.targets().into_iter().flatten() {
            let p = (counts.get(&y).copied().unwrap_or(0.0) + 1.0) / (total + vocab as f64);
            nll -= p.ln();
            n += 1.0;
        }
    }
    nll / n
}

#[test]
fn pretrained_model_beats_the_unigram_baseline_on_held_out_chunks() {
    let text = generate_toy_corpus(120_000, &mut RngStream::new(4, 0));
    let tok = Tokenizer::build_whitespace(&text).unwrap();
    let chunks = chunk_tokens(&tok.encode(&text).unwrap(), 16, &tok).unwrap();
    let (train, eval) = split_chunks(&chunks, 10);
    let baseline = unigram_ce(&train, &eval, tok.vocab_size());

    let mut m = TargetModel::<f32>::new(small_lm(tok.vocab_size(), 1, 16), &mut RngStream::new(4, 1)).unwrap();
    let cfg = PretrainConfig {
        epochs: 2,
        ..PretrainConfig::default()
    };
    pretrain(&mut m, &train, &cfg, &mut RngStream::new(4, 2), |_, _| {}).unwrap();
    let ce = m.cross_entropy(&eval).unwrap();
    assert!(ce < baseline, "held-out CE {ce} vs unigram {baseline}");
}

#[test]
fn byte_level_single_layer_loss_drops_in_two_epochs() {
    let text = generate_toy_corpus(20_000, &mut RngStream::new(5, 0));
    let tok = Tokenizer::byte_level();
    let chunks = chunk_tokens(&tok.encode(&text).unwrap(), 32, &tok).unwrap();
    let mut m = TargetModel::<f32>::new(small_lm(tok.vocab_size(), 1, 32), &mut RngStream::new(5, 1)).unwrap();
    let rep = pretrain(&mut m, &chunks, &PretrainConfig::default(), &mut RngStream::new(5, 2), |_, _| {}).unwrap();
    assert_eq!(rep.epoch_ce.len(), 2);
    let after = m.cross_entropy(&chunks).unwrap();
    assert!(after < rep.initial_ce, "{after} !< {}", rep.initial_ce);
}

#[test]
fn hundred_random_sequences_are_memorised() {
    let tok = Tokenizer::byte_level();
    let mut rng = RngStream::new(6, 0);
    let ctx = 32;
    let ids: Vec<usize> = (0..100 * (ctx - 1)).map(|_| 97 + rng.below(26)).collect();
    let chunks = chunk_tokens(&ids, ctx, &tok).unwrap();
    assert_eq!(chunks.len(), 100);

    let mut m = TargetModel::<f32>::new(small_lm(tok.vocab_size(), 2, ctx), &mut RngStream::new(6, 1)).unwrap();
    let cfg = PretrainConfig {
        epochs: 200,
        batch_size: 10,
        lr: 3e-3,
        ..PretrainConfig::default()
    };
    pretrain(&mut m, &chunks, &cfg, &mut RngStream::new(6, 2), |_, _| {}).unwrap();
    let acc = m.top1_accuracy(&chunks).unwrap();
    assert!(acc > 0.9, "training accuracy {acc}");
}
