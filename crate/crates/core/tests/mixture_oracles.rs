//! Obfuscation densities and entropy estimates checked against direct
//! quadrature of the Gaussian mixture they should follow.

use sgt_core::entropy::{minibatch_mixture_entropy, Pairing};
use sgt_core::quadrature::{simpson, Mixture1d};
use sgt_core::sgt::{obfuscate, GaussianField, SgtConfig, SgtEstimator};
use sgt_core::{RealArray, RngStream};

fn pick(weights: &[f64], rng: &mut RngStream) -> usize {
    let u = rng.uniform();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Three single-token sequences with unequal frequencies pushed through a
/// randomly initialised estimator: the histogram of obfuscations must match
/// the weighted mixture of the per-token Gaussians.
#[test]
fn degenerate_corpus_obfuscates_to_the_token_mixture() {
    let tokens = [-3.0f64, 0.5, 4.0];
    let weights = [0.5, 0.3, 0.2];
    let cfg = SgtConfig {
        d_model: 1,
        width: 8,
        heads: 2,
        ff_mult: 2,
        context: 1,
        scale: 1.0,
        mean_init_std: 0.5,
        sigma_init_rel: 0.8,
        ..SgtConfig::default()
    };
    let est = SgtEstimator::<f64>::new(cfg, &mut RngStream::new(21, 0)).unwrap();

    let n = 100_000;
    let mut pick_rng = RngStream::new(21, 1);
    let ids: Vec<usize> = (0..n).map(|_| pick(&weights, &mut pick_rng)).collect();
    let clean = RealArray::matrix(n, 1, ids.iter().map(|&i| tokens[i]).collect()).unwrap();
    let batch = obfuscate(&est, &clean, 1, &mut RngStream::new(21, 2)).unwrap();

    let mut means = Vec::new();
    let mut sigmas = Vec::new();
    for &x in &tokens {
        let f = est.estimate_field(&RealArray::matrix(1, 1, vec![x]).unwrap(), 1).unwrap();
        means.push(x + f.mu.get(0, 0));
        sigmas.push(f.sigma.get(0, 0));
    }
    let mix = Mixture1d::new(&weights, &means, &sigmas).unwrap();

    let (lo, hi) = mix.support();
    let bins = 80;
    let w = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    let mut outside = 0usize;
    for &y in batch.obfuscated.data() {
        let b = ((y - lo) / w).floor();
        if b >= 0.0 && (b as usize) < bins {
            counts[b as usize] += 1;
        } else {
            outside += 1;
        }
    }
    let mut l1 = outside as f64 / n as f64;
    for (b, &c) in counts.iter().enumerate() {
        let a = lo + b as f64 * w;
        let p = simpson(a, a + w, 16, |z| mix.density(z));
        l1 += (c as f64 / n as f64 - p).abs();
    }
    assert!(l1 < 0.05, "L1 histogram distance {l1}");
}

/// Cross-sampled minibatch entropy against quadrature for random mixtures
/// of up to four components.
#[test]
fn cross_batch_entropy_matches_quadrature_on_random_mixtures() {
    let mut rng = RngStream::new(33, 0);
    for case in 0..20 {
        let k = 1 + rng.below(4);
        let raw: Vec<f64> = (0..k).map(|_| 0.2 + rng.uniform()).collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|r| r / total).collect();
        let means: Vec<f64> = (0..k).map(|_| -8.0 + 16.0 * rng.uniform()).collect();
        let sigmas: Vec<f64> = (0..k).map(|_| 0.5 + 1.5 * rng.uniform()).collect();
        let want = Mixture1d::new(&weights, &means, &sigmas).unwrap().entropy();

        let (n, m) = (20_000, 2_000);
        let mut draw = rng.child(case as u64);
        let obf: Vec<f64> = (0..n)
            .map(|_| {
                let c = pick(&weights, &mut draw);
                means[c] + sigmas[c] * draw.normal()
            })
            .collect();
        let cross: Vec<usize> = (0..m).map(|_| pick(&weights, &mut draw)).collect();
        let cross_clean = RealArray::matrix(m, 1, cross.iter().map(|&c| means[c]).collect()).unwrap();
        let field = GaussianField::new(
            RealArray::zeros(&[m, 1]),
            RealArray::matrix(m, 1, cross.iter().map(|&c| sigmas[c]).collect()).unwrap(),
        )
        .unwrap();
        let got = minibatch_mixture_entropy(
            &RealArray::matrix(n, 1, obf).unwrap(),
            &cross_clean,
            &field,
            Pairing::CrossBatch,
        )
        .unwrap();
        assert!(
            (got / want - 1.0).abs() < 0.02,
            "case {case}: k={k} w={weights:?} mu={means:?} sd={sigmas:?}: {got} vs {want}"
        );
    }
}
