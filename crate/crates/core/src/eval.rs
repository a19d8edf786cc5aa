//! Held-out evaluation of any [`Mechanism`]: utility against the frozen
//! target model plus the full privacy report.

use alloc::string::String;
use alloc::vec::Vec;

use crate::array::RealArray;
use crate::corpus::Chunk;
use crate::error::{invalid, Error, Result};
use crate::lm::{argmax, EmbeddingTable, TargetModel};
use crate::privacy::{
    calibrate_mrp, feature_mi, hist_entropy, mrp_failure_rate, pac_adv, reconstruction_rank, sym_ttr_k, ttr_k, FeatureMi,
    PrivacyReport, RankHistogram,
};
use crate::real::Real;
use crate::rng::{gaussian_draw, RngStream};
use crate::sgt::{GaussianField, Mechanism, ObfuscationBatch};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Token budget for utility and rank histograms.
    pub tokens: usize,
    /// Token budget of the disjoint subset used to calibrate MRP.
    pub calibration_tokens: usize,
    /// Obfuscation draws for feature MI; 0 skips the estimate.
    pub mi_samples: usize,
    pub mi_components: usize,
    pub mi_min_samples: usize,
    pub ttr_ks: Vec<usize>,
    pub sym_ks: Vec<usize>,
    /// Outcome count for the PAC bound; defaults to `|V|`.
    pub pac_n: Option<u64>,
    pub batch_chunks: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tokens: 10_000,
            calibration_tokens: 2_000,
            mi_samples: 100_000,
            mi_components: 512,
            mi_min_samples: 1_000,
            ttr_ks: alloc::vec![1, 5, 10, 50],
            sym_ks: alloc::vec![1, 5, 10, 50],
            pac_n: None,
            batch_chunks: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UtilityMetrics {
    /// Percent of positions where clean and obfuscated argmax agree.
    pub top1_agreement: f64,
    /// Mean cross-entropy increase against the clean distribution.
    pub ce_gap: f64,
    pub positions: usize,
}

#[derive(Debug, Clone, Default)]
struct UtilityAcc {
    agree: usize,
    gap: f64,
    n: usize,
}

impl UtilityAcc {
    fn add<F: Real>(&mut self, z_clean: &RealArray<F>, z_obf: &RealArray<F>, rows: &[usize]) {
        for &r in rows {
            let (c, o) = (z_clean.row(r), z_obf.row(r));
            if argmax(c) == argmax(o) {
                self.agree += 1;
            }
            let lc = log_softmax(c);
            let lo = log_softmax(o);
            self.gap += lc.iter().zip(&lo).map(|(a, b)| a.exp() * (a - b)).sum::<f64>();
            self.n += 1;
        }
    }

    fn finish(&self) -> UtilityMetrics {
        let n = self.n.max(1) as f64;
        UtilityMetrics {
            top1_agreement: 100.0 * self.agree as f64 / n,
            ce_gap: self.gap / n,
            positions: self.n,
        }
    }
}

fn log_softmax<F: Real>(z: &[F]) -> Vec<f64> {
    let mx = z.iter().fold(f64::NEG_INFINITY, |a, v| a.max(v.f64()));
    let lse = mx + z.iter().map(|v| (v.f64() - mx).exp()).sum::<f64>().ln();
    z.iter().map(|v| v.f64() - lse).collect()
}

/// Rows (within a stacked batch) that hold real tokens.
fn real_rows(chunks: &[&Chunk], t: usize) -> Vec<usize> {
    chunks
        .iter()
        .enumerate()
        .flat_map(|(b, c)| (0..c.real_len).map(move |p| b * t + p))
        .collect()
}

fn take_budget<'a>(chunks: impl Iterator<Item = &'a Chunk>, tokens: usize) -> Vec<&'a Chunk> {
    let mut out = Vec::new();
    let mut n = 0;
    for c in chunks {
        if n >= tokens {
            break;
        }
        n += c.real_len;
        out.push(c);
    }
    out
}

/// Clean inputs, fields and true ids of a set of chunks, kept for reuse.
struct Prepared<F> {
    t: usize,
    clean: Vec<RealArray<F>>,
    fields: Vec<GaussianField<F>>,
    rows: Vec<Vec<usize>>,
    ids: Vec<Vec<usize>>,
}

fn prepare<F: Real, M: Mechanism<F> + ?Sized>(
    mech: &M,
    table: &EmbeddingTable<F>,
    chunks: &[&Chunk],
    batch: usize,
) -> Result<Prepared<F>> {
    let t = chunks.first().ok_or(Error::EmptyInput)?.seq.len();
    let mut p = Prepared {
        t,
        clean: Vec::new(),
        fields: Vec::new(),
        rows: Vec::new(),
        ids: Vec::new(),
    };
    for group in chunks.chunks(batch.max(1)) {
        let ids: Vec<usize> = group.iter().flat_map(|c| c.seq.ids().iter().copied()).collect();
        let clean = table.embed(&ids)?;
        let field = mech.field(&clean, t)?;
        p.rows.push(real_rows(group, t));
        p.ids.push(ids);
        p.clean.push(clean);
        p.fields.push(field);
    }
    Ok(p)
}

fn ranks_of<F: Real>(obf: &RealArray<F>, table: &EmbeddingTable<F>, ids: &[usize], rows: &[usize], h: &mut RankHistogram) -> Result<()> {
    for &r in rows {
        h.add(reconstruction_rank(obf.row(r), table, ids[r])?)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub utility: UtilityMetrics,
    pub report: PrivacyReport,
    pub histogram: RankHistogram,
    pub calibration: RankHistogram,
    pub feature_mi: Option<FeatureMi>,
}

/// Evaluates `mech` on held-out `chunks`. Chunks are split by position into
/// a main set (three of every four) and a disjoint calibration set; each is
/// obfuscated with its own child stream of `stream`.
pub fn evaluate<F: Real, M: Mechanism<F> + ?Sized>(
    mech: &M,
    target: &TargetModel<F>,
    chunks: &[Chunk],
    cfg: &EvalConfig,
    stream: &RngStream,
) -> Result<Evaluation> {
    if chunks.is_empty() {
        return Err(Error::EmptyInput);
    }
    if cfg.mi_samples > 0 && cfg.mi_samples < cfg.mi_min_samples {
        return Err(invalid!(
            "{} MI samples is below the minimum {}",
            cfg.mi_samples,
            cfg.mi_min_samples
        ));
    }
    let table = target.embedding_table()?;
    let v = table.vocab_size();
    let main = take_budget(chunks.iter().enumerate().filter(|(i, _)| i % 4 != 3).map(|x| x.1), cfg.tokens);
    let calib = take_budget(chunks.iter().enumerate().filter(|(i, _)| i % 4 == 3).map(|x| x.1), cfg.calibration_tokens);
    if calib.is_empty() {
        return Err(invalid!("need at least four evaluation chunks for a calibration subset"));
    }

    let prep = prepare(mech, &table, &main, cfg.batch_chunks)?;
    let mut util = UtilityAcc::default();
    let mut hist = RankHistogram::new(v);
    let mut s_main = stream.child(0);
    for b in 0..prep.clean.len() {
        let noise = gaussian_draw(&mut s_main, prep.clean[b].shape());
        let obf = ObfuscationBatch::assemble(prep.clean[b].clone(), prep.fields[b].clone(), noise, prep.t)?;
        let z_clean = target.forward(&obf.clean, prep.t)?;
        let z_obf = target.forward(&obf.obfuscated, prep.t)?;
        util.add(&z_clean, &z_obf, &prep.rows[b]);
        ranks_of(&obf.obfuscated, &table, &prep.ids[b], &prep.rows[b], &mut hist)?;
    }

    let cprep = prepare(mech, &table, &calib, cfg.batch_chunks)?;
    let mut chist = RankHistogram::new(v);
    let mut s_cal = stream.child(1);
    for b in 0..cprep.clean.len() {
        let noise = gaussian_draw(&mut s_cal, cprep.clean[b].shape());
        let obf = ObfuscationBatch::assemble(cprep.clean[b].clone(), cprep.fields[b].clone(), noise, cprep.t)?;
        ranks_of(&obf.obfuscated, &table, &cprep.ids[b], &cprep.rows[b], &mut chist)?;
    }
    let mrp_r = calibrate_mrp(&chist)?;

    let fmi = if cfg.mi_samples > 0 {
        Some(estimate_feature_mi(mech, &table, &prep, chunks, cfg, stream)?)
    } else {
        None
    };
    let pac_n = cfg.pac_n.unwrap_or(v as u64);
    let pac = match &fmi {
        Some(f) => Some(pac_adv(f.mean.max(0.0), pac_n)?),
        None => None,
    };
    let report = PrivacyReport {
        mechanism: String::from(mech.name()),
        nn_fr: ttr_k(&hist, 1),
        mrp_fr: mrp_failure_rate(&hist, mrp_r)?,
        mrp_r,
        ttr: cfg.ttr_ks.iter().map(|&k| (k, ttr_k(&hist, k))).collect(),
        sym_ttr: cfg
            .sym_ks
            .iter()
            .map(|&k| Ok((k, sym_ttr_k(&hist, k)?)))
            .collect::<Result<_>>()?,
        hist_entropy: hist_entropy(&hist)?,
        mi_per_feature: fmi.as_ref().map(|f| f.mean),
        mi_feature_sum: fmi.as_ref().map(|f| f.sum),
        pac_adv: pac,
        pac_n,
        tokens: hist.total() as usize,
        calibration_tokens: chist.total() as usize,
        mi_samples: if fmi.is_some() { cfg.mi_samples } else { 0 },
        mi_components: if fmi.is_some() { cfg.mi_components } else { 0 },
    };
    report.validate()?;
    Ok(Evaluation {
        utility: util.finish(),
        report,
        histogram: hist,
        calibration: chist,
        feature_mi: fmi,
    })
}

/// Feature MI from fresh obfuscations of the prepared main set (cycled
/// until the sample budget is met) against components drawn at random
/// positions of all evaluation chunks.
fn estimate_feature_mi<F: Real, M: Mechanism<F> + ?Sized>(
    mech: &M,
    table: &EmbeddingTable<F>,
    prep: &Prepared<F>,
    chunks: &[Chunk],
    cfg: &EvalConfig,
    stream: &RngStream,
) -> Result<FeatureMi> {
    let d = table.dim();
    let n = cfg.mi_samples;
    let (mut ys, mut ss) = (Vec::with_capacity(n * d), Vec::with_capacity(n * d));
    let mut s_mi = stream.child(2);
    'outer: loop {
        for b in 0..prep.clean.len() {
            let noise = gaussian_draw(&mut s_mi, prep.clean[b].shape());
            let obf = ObfuscationBatch::assemble(prep.clean[b].clone(), prep.fields[b].clone(), noise, prep.t)?;
            for &r in &prep.rows[b] {
                if ys.len() >= n * d {
                    break 'outer;
                }
                ys.extend_from_slice(obf.obfuscated.row(r));
                ss.extend_from_slice(prep.fields[b].sigma.row(r));
            }
        }
        if prep.rows.iter().all(|r| r.is_empty()) {
            return Err(Error::EmptyInput);
        }
    }
    let samples = RealArray::matrix(n, d, ys)?;
    let own = GaussianField::new(RealArray::zeros(&[n, d]), RealArray::matrix(n, d, ss)?)?;

    let mut s_comp = stream.child(3);
    let m = cfg.mi_components.max(1);
    let (mut xc, mut mc, mut sc) = (Vec::with_capacity(m * d), Vec::with_capacity(m * d), Vec::with_capacity(m * d));
    let t = chunks[0].seq.len();
    for _ in 0..m {
        let c = &chunks[s_comp.below(chunks.len())];
        let p = s_comp.below(c.real_len.max(1));
        let clean = table.embed(c.seq.ids())?;
        let f = mech.field(&clean, t)?;
        xc.extend_from_slice(clean.row(p));
        mc.extend_from_slice(f.mu.row(p));
        sc.extend_from_slice(f.sigma.row(p));
    }
    let cross = RealArray::matrix(m, d, xc)?;
    let cross_field = GaussianField::new(RealArray::matrix(m, d, mc)?, RealArray::matrix(m, d, sc)?)?;
    feature_mi(&samples, &own, &cross, &cross_field)
}

/// Cheap training-time probe on a fixed token set: nearest-neighbour
/// failure rate and utility.
pub fn quick_probe<F: Real, M: Mechanism<F> + ?Sized>(
    mech: &M,
    target: &TargetModel<F>,
    chunks: &[Chunk],
    tokens: usize,
    stream: &RngStream,
) -> Result<(f64, UtilityMetrics)> {
    let table = target.embedding_table()?;
    let set = take_budget(chunks.iter(), tokens);
    let prep = prepare(mech, &table, &set, 16)?;
    let mut s = stream.child(0);
    let mut util = UtilityAcc::default();
    let mut hist = RankHistogram::new(table.vocab_size());
    for b in 0..prep.clean.len() {
        let noise = gaussian_draw(&mut s, prep.clean[b].shape());
        let obf = ObfuscationBatch::assemble(prep.clean[b].clone(), prep.fields[b].clone(), noise, prep.t)?;
        let z_clean = target.forward(&obf.clean, prep.t)?;
        let z_obf = target.forward(&obf.obfuscated, prep.t)?;
        util.add(&z_clean, &z_obf, &prep.rows[b]);
        ranks_of(&obf.obfuscated, &table, &prep.ids[b], &prep.rows[b], &mut hist)?;
    }
    Ok((ttr_k(&hist, 1), util.finish()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{chunk_tokens, Tokenizer};
    use crate::lm::LmConfig;
    use crate::sgt::Passthrough;

    fn setup() -> (TargetModel<f32>, Vec<Chunk>) {
        let cfg = LmConfig {
            d_model: 16,
            layers: 1,
            heads: 2,
            context: 8,
            ff_mult: 2,
            ..LmConfig::default()
        };
        let mut m = TargetModel::new(cfg, &mut RngStream::new(50, 0)).unwrap();
        m.freeze();
        let tok = Tokenizer::byte_level();
        let text = "a small corpus for evaluating privacy metrics on held-out data. ".repeat(6);
        let chunks = chunk_tokens(&tok.encode(&text).unwrap(), 8, &tok).unwrap();
        (m, chunks)
    }

    #[test]
    fn passthrough_is_private_nowhere() {
        let (m, chunks) = setup();
        let cfg = EvalConfig {
            mi_samples: 2_000,
            mi_components: 64,
            ..EvalConfig::default()
        };
        let e = evaluate(&Passthrough { sigma: 1e-6 }, &m, &chunks, &cfg, &RngStream::new(1, 9)).unwrap();
        assert_eq!(e.report.nn_fr, 0.0);
        assert_eq!(e.utility.top1_agreement, 100.0);
        assert!(e.utility.ce_gap.abs() < 1e-4);
        assert_eq!(e.report.mrp_r, 256);
        assert_eq!(e.report.mrp_fr, 0.0);
        assert_eq!(e.report.hist_entropy, 0.0);
        assert!(e.report.tokens > 0 && e.report.calibration_tokens > 0);
        assert!(e.report.mi_per_feature.unwrap() > 1.0);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let (m, chunks) = setup();
        let cfg = EvalConfig {
            mi_samples: 1_000,
            mi_components: 32,
            ..EvalConfig::default()
        };
        let mech = Passthrough { sigma: 0.8 };
        let a = evaluate(&mech, &m, &chunks, &cfg, &RngStream::new(2, 0)).unwrap();
        let b = evaluate(&mech, &m, &chunks, &cfg, &RngStream::new(2, 0)).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.utility, b.utility);
        assert!(a.report.nn_fr > 0.0);
        assert_eq!(a.report.nn_fr, ttr_k(&a.histogram, 1));
    }

    #[test]
    fn too_few_mi_samples_is_an_error() {
        let (m, chunks) = setup();
        let cfg = EvalConfig {
            mi_samples: 10,
            ..EvalConfig::default()
        };
        assert!(evaluate(&Passthrough { sigma: 1.0 }, &m, &chunks, &cfg, &RngStream::new(3, 0)).is_err());
    }
}
