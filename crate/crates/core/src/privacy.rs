//! Reconstruction attacks and privacy metrics over per-token obfuscations.
//!
//! Ranks are 1-based: the rank of an obfuscation is the position of its
//! true token among all vocabulary rows sorted by ascending L2 distance,
//! ties going to the smaller token id.

use alloc::string::String;
use alloc::vec::Vec;

use crate::array::RealArray;
use crate::entropy::mixture_entropy_1d;
use crate::error::{invalid, shape_err, Error, Result};
use crate::lm::EmbeddingTable;
use crate::quadrature::gaussian_entropy;
use crate::real::Real;
use crate::sgt::GaussianField;

fn sorted_ids(d: &[f64]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..d.len()).collect();
    ids.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
    ids
}

pub fn reconstruction_rank<F: Real>(obf: &[F], table: &EmbeddingTable<F>, true_id: usize) -> Result<usize> {
    let v = table.vocab_size();
    if true_id >= v {
        return Err(Error::TokenOutOfRange { id: true_id, vocab: v });
    }
    if obf.len() != table.dim() {
        return Err(shape_err!("obfuscation of length {} vs dimension {}", obf.len(), table.dim()));
    }
    let d = table.sq_distances(obf);
    let dt = d[true_id];
    let ahead = d
        .iter()
        .enumerate()
        .filter(|(k, x)| **x < dt || (**x == dt && *k < true_id))
        .count();
    Ok(ahead + 1)
}

/// Ranks of every row of `obf` against the matching true id.
pub fn ranks<F: Real>(obf: &RealArray<F>, table: &EmbeddingTable<F>, truth: &[usize]) -> Result<Vec<usize>> {
    if obf.rows() != truth.len() {
        return Err(shape_err!("{} rows vs {} ids", obf.rows(), truth.len()));
    }
    truth
        .iter()
        .enumerate()
        .map(|(i, &id)| reconstruction_rank(obf.row(i), table, id))
        .collect()
}

/// Nearest-neighbour reconstruction.
pub fn nn_attack<F: Real>(obf: &[F], table: &EmbeddingTable<F>) -> usize {
    table.nearest(obf)
}

/// Predicts the `r`-th farthest row (`r = |V|` is the nearest).
pub fn mrp_attack<F: Real>(obf: &[F], table: &EmbeddingTable<F>, r: usize) -> Result<usize> {
    let v = table.vocab_size();
    if r == 0 || r > v {
        return Err(invalid!("offset r = {r} outside 1..={v}"));
    }
    Ok(sorted_ids(&table.sq_distances(obf))[v - r])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Attack {
    Nn,
    Mrp(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttackResult {
    pub predicted: Vec<usize>,
    pub truth: Vec<usize>,
    pub failures: Vec<bool>,
}

impl AttackResult {
    pub fn new(predicted: Vec<usize>, truth: Vec<usize>) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(shape_err!("{} predictions vs {} ids", predicted.len(), truth.len()));
        }
        let failures = predicted.iter().zip(&truth).map(|(p, t)| p != t).collect();
        Ok(Self {
            predicted,
            truth,
            failures,
        })
    }

    /// Percent of positions reconstructed incorrectly.
    pub fn failure_rate(&self) -> f64 {
        if self.truth.is_empty() {
            return 0.0;
        }
        100.0 * self.failures.iter().filter(|f| **f).count() as f64 / self.truth.len() as f64
    }
}

pub fn run_attack<F: Real>(obf: &RealArray<F>, table: &EmbeddingTable<F>, truth: &[usize], attack: Attack) -> Result<AttackResult> {
    if obf.rows() != truth.len() {
        return Err(shape_err!("{} rows vs {} ids", obf.rows(), truth.len()));
    }
    let predicted = (0..obf.rows())
        .map(|i| match attack {
            Attack::Nn => Ok(nn_attack(obf.row(i), table)),
            Attack::Mrp(r) => mrp_attack(obf.row(i), table, r),
        })
        .collect::<Result<Vec<_>>>()?;
    AttackResult::new(predicted, truth.to_vec())
}

/// Counts of 1-based ranks over `|V|` bins.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankHistogram {
    counts: Vec<u64>,
    total: u64,
}

impl RankHistogram {
    pub fn new(vocab: usize) -> Self {
        Self {
            counts: alloc::vec![0; vocab],
            total: 0,
        }
    }

    pub fn from_ranks(ranks: &[usize], vocab: usize) -> Result<Self> {
        let mut h = Self::new(vocab);
        for &r in ranks {
            h.add(r)?;
        }
        Ok(h)
    }

    pub fn from_counts(counts: Vec<u64>) -> Self {
        let total = counts.iter().sum();
        Self { counts, total }
    }

    pub fn add(&mut self, rank: usize) -> Result<()> {
        if rank == 0 || rank > self.counts.len() {
            return Err(invalid!("rank {rank} outside 1..={}", self.counts.len()));
        }
        self.counts[rank - 1] += 1;
        self.total += 1;
        Ok(())
    }

    pub fn vocab(&self) -> usize {
        self.counts.len()
    }

    /// `counts()[r - 1]` is the number of rank-`r` obfuscations.
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn count(&self, rank: usize) -> u64 {
        self.counts[rank - 1]
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// Most frequent rank, smallest rank on ties.
    pub fn mode(&self) -> Option<usize> {
        if self.total == 0 {
            return None;
        }
        let mut best = 0;
        for (i, c) in self.counts.iter().enumerate() {
            if *c > self.counts[best] {
                best = i;
            }
        }
        Some(best + 1)
    }

    fn percent(&self, n: u64) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            100.0 * n as f64 / self.total as f64
        }
    }
}

/// MRP offset aimed at the histogram's mode.
pub fn calibrate_mrp(h: &RankHistogram) -> Result<usize> {
    let mode = h.mode().ok_or(Error::EmptyInput)?;
    Ok(h.vocab() - mode + 1)
}

/// Failure rate of the MRP attack with offset `r`, read off the histogram:
/// the attack succeeds exactly on rank `|V| − r + 1`.
pub fn mrp_failure_rate(h: &RankHistogram, r: usize) -> Result<f64> {
    if r == 0 || r > h.vocab() {
        return Err(invalid!("offset r = {r} outside 1..={}", h.vocab()));
    }
    Ok(100.0 - h.percent(h.count(h.vocab() - r + 1)))
}

/// Percent of ranks above `k`.
pub fn ttr_k(h: &RankHistogram, k: usize) -> f64 {
    h.percent(h.counts.iter().skip(k).sum())
}

/// Percent of ranks strictly between `k` and `|V| − k`.
pub fn sym_ttr_k(h: &RankHistogram, k: usize) -> Result<f64> {
    let v = h.vocab();
    if 2 * k >= v {
        return Err(invalid!("symmetric k = {k} needs 2k < |V| = {v}"));
    }
    // ranks k+1 ..= v-k-1
    Ok(h.percent(h.counts[k..v - k - 1].iter().sum()))
}

/// Rank-distribution entropy as a percent of `log |V|`.
pub fn hist_entropy(h: &RankHistogram) -> Result<f64> {
    if h.total == 0 {
        return Err(Error::EmptyInput);
    }
    let n = h.total as f64;
    let ent: f64 = h
        .counts
        .iter()
        .filter(|c| **c > 0)
        .map(|c| {
            let p = *c as f64 / n;
            -p * p.ln()
        })
        .sum();
    Ok(100.0 * ent.max(0.0) / (h.vocab() as f64).ln())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMi {
    pub per_feature: Vec<f64>,
    pub mean: f64,
    pub sum: f64,
}

/// Per-coordinate MI between clean and obfuscated values.
///
/// `obf`/`field` are obfuscations and the fields that produced them;
/// `cross_clean`/`cross_field` are an independent draw whose coordinate
/// marginals form the mixture components. For coordinate `j` the estimate
/// is the cross-sampled mixture entropy minus the mean Gaussian entropy of
/// the sample's own component.
pub fn feature_mi<F: Real>(
    obf: &RealArray<F>,
    field: &GaussianField<F>,
    cross_clean: &RealArray<F>,
    cross_field: &GaussianField<F>,
) -> Result<FeatureMi> {
    obf.same_shape(&field.sigma)?;
    cross_clean.same_shape(&cross_field.mu)?;
    if obf.cols() != cross_clean.cols() {
        return Err(shape_err!("dimension {} vs {}", obf.cols(), cross_clean.cols()));
    }
    let (n, m, d) = (obf.rows(), cross_clean.rows(), obf.cols());
    if n == 0 || m == 0 {
        return Err(Error::EmptyInput);
    }
    let mut per_feature = Vec::with_capacity(d);
    let mut ys = alloc::vec![0.0; n];
    let mut means = alloc::vec![0.0; m];
    let mut sigmas = alloc::vec![0.0; m];
    for j in 0..d {
        for i in 0..n {
            ys[i] = obf.get(i, j).f64();
        }
        for k in 0..m {
            means[k] = cross_clean.get(k, j).f64() + cross_field.mu.get(k, j).f64();
            sigmas[k] = cross_field.sigma.get(k, j).f64();
        }
        let h = mixture_entropy_1d(&ys, &means, &sigmas)?;
        let cond: f64 = (0..n).map(|i| gaussian_entropy(field.sigma.get(i, j).f64())).sum::<f64>() / n as f64;
        per_feature.push(h - cond);
    }
    let sum: f64 = per_feature.iter().sum();
    Ok(FeatureMi {
        mean: sum / d as f64,
        sum,
        per_feature,
    })
}

/// Upper bound (percent) on reconstruction success given `mi` nats of
/// information and a uniform prior over `n` outcomes: the smallest failure
/// probability `δ` whose binary divergence from the prior failure `1 − 1/n`
/// is at most `mi`, reported as `100·(1 − δ)`.
pub fn pac_adv(mi: f64, n: u64) -> Result<f64> {
    if !(mi >= 0.0) {
        return Err(invalid!("mutual information must be nonnegative, got {mi}"));
    }
    if n < 2 {
        return Err(invalid!("need at least two outcomes, got {n}"));
    }
    let nf = n as f64;
    if mi >= nf.ln() {
        return Ok(100.0);
    }
    let d0 = 1.0 - 1.0 / nf;
    let kl = |d: f64| {
        let a = if d > 0.0 { d * (d / d0).ln() } else { 0.0 };
        let b = if d < 1.0 { (1.0 - d) * ((1.0 - d) / (1.0 - d0)).ln() } else { 0.0 };
        a + b
    };
    // kl decreases from log n at 0 to 0 at d0
    let (mut lo, mut hi) = (0.0f64, d0);
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if kl(mid) > mi {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(100.0 * (1.0 - 0.5 * (lo + hi)))
}

/// All metrics for one mechanism on one evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyReport {
    pub mechanism: String,
    pub nn_fr: f64,
    pub mrp_fr: f64,
    pub mrp_r: usize,
    pub ttr: Vec<(usize, f64)>,
    pub sym_ttr: Vec<(usize, f64)>,
    pub hist_entropy: f64,
    /// Mean over coordinates; `None` when MI estimation was skipped.
    pub mi_per_feature: Option<f64>,
    pub mi_feature_sum: Option<f64>,
    pub pac_adv: Option<f64>,
    pub pac_n: u64,
    pub tokens: usize,
    pub calibration_tokens: usize,
    pub mi_samples: usize,
    pub mi_components: usize,
}

impl PrivacyReport {
    /// Checks the report's internal consistency.
    pub fn validate(&self) -> Result<()> {
        let mut pct: Vec<f64> = alloc::vec![self.nn_fr, self.mrp_fr, self.hist_entropy];
        pct.extend(self.pac_adv);
        pct.extend(self.ttr.iter().map(|x| x.1));
        pct.extend(self.sym_ttr.iter().map(|x| x.1));
        if pct.iter().any(|p| !(0.0..=100.0).contains(p)) {
            return Err(invalid!("percent outside [0, 100]"));
        }
        for (k, s) in &self.sym_ttr {
            if let Some((_, t)) = self.ttr.iter().find(|(kt, _)| kt == k) {
                if s > t {
                    return Err(invalid!("sym-ttr-{k} {s} exceeds ttr-{k} {t}"));
                }
            }
        }
        if self.mi_per_feature.is_some_and(|m| !m.is_finite()) {
            return Err(Error::NonFinite("feature MI".into()));
        }
        Ok(())
    }
}
