//! Training objectives for the estimator. Every loss is built on a
//! [`Tape`] so the optimizer gets exact gradients; values are means over
//! batch and positions.

use alloc::vec::Vec;

use crate::array::RealArray;
use crate::error::{invalid, shape_err, Error, Result};
use crate::lm::TargetModel;
use crate::real::Real;
use crate::sgt::{FieldVars, SgtEstimator};
use crate::tape::{CeTarget, Tape, Var};

/// Foil objectives that look privacy-promoting but are not.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Demonstrative {
    #[default]
    Off,
    /// Component-wise Gaussian entropy (no cross-sampling).
    CompEntropy,
    /// Signed cosine similarity.
    CosSim,
}

/// How the cross batch is paired with the obfuscated batch in the MI loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum MiPairing {
    /// Sequence `i` against cross sequence `i`.
    #[default]
    Elementwise,
    /// Every sequence against every cross sequence, normalized by `B²`.
    DoubleSum,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub alpha_mi: f64,
    pub alpha_abscos: f64,
    pub alpha_norm: f64,
    pub demonstrative: Demonstrative,
    pub demonstrative_weight: f64,
    pub pairing: MiPairing,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha_mi: 1.0,
            alpha_abscos: 1.0,
            alpha_norm: 0.1,
            demonstrative: Demonstrative::Off,
            demonstrative_weight: 1.0,
            pairing: MiPairing::Elementwise,
        }
    }
}

impl LossConfig {
    pub fn utility_only() -> Self {
        Self {
            alpha_mi: 0.0,
            alpha_abscos: 0.0,
            alpha_norm: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("alpha_mi", self.alpha_mi),
            ("alpha_abscos", self.alpha_abscos),
            ("alpha_norm", self.alpha_norm),
            ("demonstrative_weight", self.demonstrative_weight),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(alloc::format!("{name} must be a nonnegative number, got {w}")));
            }
        }
        Ok(())
    }
}

/// Per-step scalar values of every loss component.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub utility: f64,
    pub mi: f64,
    pub abscos: f64,
    pub norm_penalty: f64,
    pub demonstrative: f64,
}

impl LossBreakdown {
    /// `total` recomputed from the parts with the given effective MI weight.
    pub fn recombine(&self, cfg: &LossConfig, alpha_mi: f64) -> f64 {
        let demo = match cfg.demonstrative {
            Demonstrative::Off => 0.0,
            _ => cfg.demonstrative_weight * self.demonstrative,
        };
        self.utility + alpha_mi * self.mi + cfg.alpha_abscos * self.abscos + cfg.alpha_norm * self.norm_penalty + demo
    }

    pub fn all_finite(&self) -> bool {
        [
            self.total,
            self.utility,
            self.mi,
            self.abscos,
            self.norm_penalty,
            self.demonstrative,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Row-wise softmax in f64, cast back.
pub fn softmax_rows<F: Real>(z: &RealArray<F>) -> RealArray<F> {
    let mut out = z.clone();
    for i in 0..z.rows() {
        let row = z.row(i);
        let mx = row.iter().fold(f64::NEG_INFINITY, |a, v| a.max(v.f64()));
        let s: f64 = row.iter().map(|v| (v.f64() - mx).exp()).sum();
        for (o, v) in out.row_mut(i).iter_mut().zip(row) {
            *o = F::of((v.f64() - mx).exp() / s);
        }
    }
    out
}

/// Cross-entropy of the obfuscated-input distribution against the fixed
/// clean-input distribution, averaged over positions.
pub fn utility_loss<F: Real>(tape: &mut Tape<F>, z_clean: &RealArray<F>, z_obf: Var) -> Result<Var> {
    let zo = tape.value(z_obf);
    if zo.shape() != z_clean.shape() {
        return Err(shape_err!("logits {:?} vs {:?}", z_clean.shape(), zo.shape()));
    }
    Ok(tape.cross_entropy(z_obf, CeTarget::Soft(softmax_rows(z_clean))))
}

/// Row indices pairing every sequence of one batch with every sequence of
/// the other at equal positions.
fn double_sum_rows(batch: usize, seq_len: usize) -> (Vec<usize>, Vec<usize>) {
    let mut a = Vec::with_capacity(batch * batch * seq_len);
    let mut b = Vec::with_capacity(batch * batch * seq_len);
    for i in 0..batch {
        for k in 0..batch {
            for t in 0..seq_len {
                a.push(i * seq_len + t);
                b.push(k * seq_len + t);
            }
        }
    }
    (a, b)
}

/// Monte-Carlo mutual-information loss with the θ-constant terms dropped:
/// per position `Σ_j 2(s'_j − s_j) + (x̃_j − x'_j − μ'_j)² e^{−2 s'_j}`,
/// where `s = log σ` belongs to the obfuscated batch and primed values to
/// the independent cross batch.
pub fn mi_loss<F: Real>(
    tape: &mut Tape<F>,
    obf: Var,
    log_sigma: Var,
    cross_clean: Var,
    cross_mu: Var,
    cross_log_sigma: Var,
    seq_len: usize,
    pairing: MiPairing,
) -> Result<Var> {
    let shape = tape.value(obf).shape().to_vec();
    for v in [log_sigma, cross_clean, cross_mu, cross_log_sigma] {
        if tape.value(v).shape() != shape.as_slice() {
            return Err(invalid!(
                "batch sizes differ: {:?} vs {:?}",
                shape,
                tape.value(v).shape()
            ));
        }
    }
    let rows = tape.value(obf).rows();
    if seq_len == 0 || rows % seq_len != 0 {
        return Err(shape_err!("{rows} rows are not whole sequences of length {seq_len}"));
    }
    let (obf, log_sigma, cross_clean, cross_mu, cross_log_sigma) = match pairing {
        MiPairing::Elementwise => (obf, log_sigma, cross_clean, cross_mu, cross_log_sigma),
        MiPairing::DoubleSum => {
            let (ia, ib) = double_sum_rows(rows / seq_len, seq_len);
            (
                tape.gather(obf, &ia),
                tape.gather(log_sigma, &ia),
                tape.gather(cross_clean, &ib),
                tape.gather(cross_mu, &ib),
                tape.gather(cross_log_sigma, &ib),
            )
        }
    };
    let n = tape.value(obf).rows();
    let diff = tape.sub(obf, cross_clean);
    let diff = tape.sub(diff, cross_mu);
    let sq = tape.square(diff);
    let w = tape.scale(cross_log_sigma, -2.0);
    let w = tape.exp(w);
    let maha = tape.mul(sq, w);
    let logdet = tape.sub(cross_log_sigma, log_sigma);
    let logdet = tape.scale(logdet, 2.0);
    let term = tape.add(logdet, maha);
    let s = tape.sum(term);
    Ok(tape.scale(s, 1.0 / n as f64))
}

fn check_nonzero_rows<F: Real>(x: &RealArray<F>) -> Result<()> {
    for i in 0..x.rows() {
        if x.row(i).iter().all(|v| *v == F::zero()) {
            return Err(invalid!("clean embedding at row {i} has zero norm"));
        }
    }
    Ok(())
}

/// Mean absolute cosine similarity between clean and obfuscated rows.
pub fn abscos_loss<F: Real>(tape: &mut Tape<F>, clean: Var, obf: Var) -> Result<Var> {
    check_nonzero_rows(tape.value(clean))?;
    let c = tape.row_cosine(clean, obf);
    let c = tape.abs(c);
    Ok(tape.mean(c))
}

/// Mean signed cosine similarity.
pub fn cossim_loss<F: Real>(tape: &mut Tape<F>, clean: Var, obf: Var) -> Result<Var> {
    check_nonzero_rows(tape.value(clean))?;
    let c = tape.row_cosine(clean, obf);
    Ok(tape.mean(c))
}

/// Mean of `| ‖x + μ‖ − target |`.
pub fn median_norm_penalty<F: Real>(tape: &mut Tape<F>, clean: Var, mu: Var, norm_target: f64) -> Result<Var> {
    if !(norm_target > 0.0) {
        return Err(invalid!("norm target must be positive, got {norm_target}"));
    }
    let shifted = tape.add(clean, mu);
    let n = tape.row_norm(shifted);
    let n = tape.offset(n, -norm_target);
    let n = tape.abs(n);
    Ok(tape.mean(n))
}

/// Mean over positions of `−log|Σ| = −2 Σ_j log σ_j`.
pub fn comp_entropy_loss<F: Real>(tape: &mut Tape<F>, log_sigma: Var) -> Var {
    let rows = tape.value(log_sigma).rows();
    let s = tape.sum(log_sigma);
    tape.scale(s, -2.0 / rows as f64)
}

/// Fixed inputs of one objective evaluation; the noise is frozen so the
/// objective is a deterministic function of the estimator parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveInputs<F = f32> {
    pub clean: RealArray<F>,
    pub noise: RealArray<F>,
    pub cross_clean: RealArray<F>,
    pub seq_len: usize,
    pub norm_target: f64,
}

/// Nodes of a built objective.
#[derive(Debug, Clone)]
pub struct Objective {
    pub total: Var,
    pub obfuscated: Var,
    pub field: FieldVars,
    pub cross_field: FieldVars,
    /// The target model's parameters, bound as constants.
    pub target_vars: Vec<Var>,
    pub breakdown: LossBreakdown,
}

/// Builds `utility + α_mi·mi + α_abscos·abscos + α_norm·norm (+ w·demo)`.
/// `alpha_mi` overrides `cfg.alpha_mi` so callers can warm it up.
pub fn total_loss<F: Real>(
    tape: &mut Tape<F>,
    target: &TargetModel<F>,
    est: &SgtEstimator<F>,
    est_vars: &[Var],
    inp: &ObjectiveInputs<F>,
    cfg: &LossConfig,
    alpha_mi: f64,
) -> Result<Objective> {
    cfg.validate()?;
    inp.clean.same_shape(&inp.noise)?;
    inp.clean.same_shape(&inp.cross_clean)?;
    est.check_input(&inp.clean, inp.seq_len)?;
    target.check_input(&inp.clean, inp.seq_len)?;

    let z_clean = target.forward(&inp.clean, inp.seq_len)?;
    let target_vars = target.params().bind(tape, false);

    let x = tape.constant(inp.clean.clone());
    let field = est.field_on_tape(tape, est_vars, x, inp.seq_len);
    let u = tape.constant(inp.noise.clone());
    let shifted = tape.add(x, field.mu);
    let spread = tape.mul(field.sigma, u);
    let obf = tape.add(shifted, spread);

    let xc = tape.constant(inp.cross_clean.clone());
    let cross_field = est.field_on_tape(tape, est_vars, xc, inp.seq_len);

    let z_obf = target.forward_on_tape(tape, &target_vars, obf, inp.seq_len);
    let utility = utility_loss(tape, &z_clean, z_obf)?;
    let mi = mi_loss(
        tape,
        obf,
        field.log_sigma,
        xc,
        cross_field.mu,
        cross_field.log_sigma,
        inp.seq_len,
        cfg.pairing,
    )?;
    let abscos = abscos_loss(tape, x, obf)?;
    let norm = median_norm_penalty(tape, x, field.mu, inp.norm_target)?;
    let demo = match cfg.demonstrative {
        Demonstrative::Off => None,
        Demonstrative::CompEntropy => Some(comp_entropy_loss(tape, field.log_sigma)),
        Demonstrative::CosSim => Some(cossim_loss(tape, x, obf)?),
    };

    let mut total = utility;
    for (v, w) in [(mi, alpha_mi), (abscos, cfg.alpha_abscos), (norm, cfg.alpha_norm)] {
        if w != 0.0 {
            let t = tape.scale(v, w);
            total = tape.add(total, t);
        }
    }
    if let Some(d) = demo {
        if cfg.demonstrative_weight != 0.0 {
            let t = tape.scale(d, cfg.demonstrative_weight);
            total = tape.add(total, t);
        }
    }
    let breakdown = LossBreakdown {
        total: tape.scalar(total).f64(),
        utility: tape.scalar(utility).f64(),
        mi: tape.scalar(mi).f64(),
        abscos: tape.scalar(abscos).f64(),
        norm_penalty: tape.scalar(norm).f64(),
        demonstrative: demo.map_or(0.0, |d| tape.scalar(d).f64()),
    };
    Ok(Objective {
        total,
        obfuscated: obf,
        field,
        cross_field,
        target_vars,
        breakdown,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::lm::LmConfig;
    use crate::rng::{gaussian_draw, RngStream};
    use crate::sgt::SgtConfig;

    fn m(rows: usize, cols: usize, v: &[f64]) -> RealArray<f64> {
        RealArray::matrix(rows, cols, v.to_vec()).unwrap()
    }

    fn scalar_of(f: impl FnOnce(&mut Tape<f64>) -> Var) -> f64 {
        let mut t = Tape::new();
        let v = f(&mut t);
        t.scalar(v)
    }

    #[test]
    fn utility_closed_forms() {
        let z = m(1, 4, &[0.0; 4]);
        let v = scalar_of(|t| {
            let zo = t.constant(z.clone());
            utility_loss(t, &z, zo).unwrap()
        });
        assert!((v - 4f64.ln()).abs() < 1e-12);
        assert!((v - 1.3863).abs() < 5e-5);

        let zc = m(2, 3, &[1.0, -0.5, 2.0, 0.3, 0.3, -1.0]);
        let base = scalar_of(|t| {
            let zo = t.constant(zc.clone());
            utility_loss(t, &zc, zo).unwrap()
        });
        let other = m(2, 3, &[0.0, 1.0, 0.5, 2.0, -1.0, 0.0]);
        let worse = scalar_of(|t| {
            let zo = t.constant(other.clone());
            utility_loss(t, &zc, zo).unwrap()
        });
        assert!(worse > base);
        let shifted = zc.map(|v| v + 7.5);
        let same = scalar_of(|t| {
            let zo = t.constant(shifted.clone());
            utility_loss(t, &zc, zo).unwrap()
        });
        assert!((same - base).abs() < 1e-12);
        let mut t = Tape::new();
        let zo = t.constant(m(1, 3, &[0.0; 3]));
        assert!(utility_loss(&mut t, &z, zo).is_err());
    }

    fn mi_value(obf: f64, s: f64, xc: f64, muc: f64, sc: f64) -> f64 {
        scalar_of(|t| {
            let a = t.constant(m(1, 1, &[obf]));
            let b = t.constant(m(1, 1, &[s]));
            let c = t.constant(m(1, 1, &[xc]));
            let d = t.constant(m(1, 1, &[muc]));
            let e = t.constant(m(1, 1, &[sc]));
            mi_loss(t, a, b, c, d, e, 1, MiPairing::Elementwise).unwrap()
        })
    }

    #[test]
    fn mi_closed_forms() {
        assert_eq!(mi_value(0.7, 0.0, 0.7, 0.0, 0.0), 0.0);
        let v = mi_value(3.0, 0.0, 1.0, 0.0, 2f64.ln());
        assert!((v - (4f64.ln() + 1.0)).abs() < 1e-12);
        assert!((v - 2.3863).abs() < 5e-5);
    }

    #[test]
    fn mi_is_invariant_to_joint_permutation() {
        let mut rng = RngStream::new(21, 0);
        let arrays: Vec<RealArray<f64>> = (0..5).map(|_| gaussian_draw(&mut rng, &[6, 3])).collect();
        let eval = |perm: &[usize], pairing| {
            scalar_of(|t| {
                let v: Vec<Var> = arrays
                    .iter()
                    .map(|a| {
                        let rows: Vec<&[f64]> = perm.iter().flat_map(|&i| [a.row(2 * i), a.row(2 * i + 1)]).collect();
                        t.constant(RealArray::from_rows(&rows).unwrap())
                    })
                    .collect();
                mi_loss(t, v[0], v[1], v[2], v[3], v[4], 2, pairing).unwrap()
            })
        };
        for p in [MiPairing::Elementwise, MiPairing::DoubleSum] {
            let a = eval(&[0, 1, 2], p);
            let b = eval(&[2, 0, 1], p);
            assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn double_sum_averages_all_pairs() {
        let obf = [0.5, -1.0];
        let s = [0.1, -0.2];
        let xc = [1.0, 2.0];
        let muc = [0.0, 0.3];
        let sc = [0.0, 0.4];
        let want: f64 = (0..2)
            .flat_map(|i| (0..2).map(move |k| (i, k)))
            .map(|(i, k)| mi_value(obf[i], s[i], xc[k], muc[k], sc[k]))
            .sum::<f64>()
            / 4.0;
        let got = scalar_of(|t| {
            let v: Vec<Var> = [obf, s, xc, muc, sc].iter().map(|a| t.constant(m(2, 1, a))).collect();
            mi_loss(t, v[0], v[1], v[2], v[3], v[4], 1, MiPairing::DoubleSum).unwrap()
        });
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn zero_noise_self_pairing_is_component_entropy_form() {
        // x' = x, x̃ = x + μ: only the log-determinant difference remains, 0.
        let x = m(2, 2, &[1.0, 2.0, -1.0, 0.5]);
        let mu = m(2, 2, &[0.1, 0.2, 0.3, 0.4]);
        let s = m(2, 2, &[-0.5, 0.2, 0.0, 1.0]);
        let v = scalar_of(|t| {
            let xv = t.constant(x.clone());
            let mv = t.constant(mu.clone());
            let sv = t.constant(s.clone());
            let obf = t.add(xv, mv);
            mi_loss(t, obf, sv, xv, mv, sv, 1, MiPairing::Elementwise).unwrap()
        });
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn cosine_losses() {
        let x = m(1, 2, &[1.0, 2.0]);
        let run = |y: &[f64], abs: bool| {
            scalar_of(|t| {
                let a = t.constant(x.clone());
                let b = t.constant(m(1, 2, y));
                if abs {
                    abscos_loss(t, a, b).unwrap()
                } else {
                    cossim_loss(t, a, b).unwrap()
                }
            })
        };
        assert!((run(&[1.0, 2.0], true) - 1.0).abs() < 1e-12);
        assert!((run(&[-1.0, -2.0], true) - 1.0).abs() < 1e-12);
        assert!(run(&[-2.0, 1.0], true).abs() < 1e-12);
        assert!((run(&[-1.0, -2.0], false) + 1.0).abs() < 1e-12);
        assert!((run(&[1.0, 2.0], false) - 1.0).abs() < 1e-12);
        assert!(run(&[-2.0, 1.0], false).abs() < 1e-12);
        assert_eq!(run(&[0.0, 0.0], true), 0.0);
        let mut t = Tape::new();
        let z = t.constant(m(1, 2, &[0.0, 0.0]));
        let y = t.constant(m(1, 2, &[1.0, 0.0]));
        assert!(abscos_loss(&mut t, z, y).is_err());
    }

    #[test]
    fn norm_penalty_and_component_entropy() {
        let v = scalar_of(|t| {
            let x = t.constant(m(1, 2, &[1.0, 1.0]));
            let mu = t.constant(m(1, 2, &[2.0, 3.0]));
            median_norm_penalty(t, x, mu, 2.0).unwrap()
        });
        assert!((v - 3.0).abs() < 1e-12);
        let v = scalar_of(|t| {
            let x = t.constant(m(1, 2, &[3.0, 0.0]));
            let mu = t.constant(m(1, 2, &[0.0, 4.0]));
            median_norm_penalty(t, x, mu, 5.0).unwrap()
        });
        assert!(v.abs() < 1e-12);
        let mut t = Tape::<f64>::new();
        let x = t.constant(m(1, 1, &[1.0]));
        assert!(median_norm_penalty(&mut t, x, x, 0.0).is_err());

        assert_eq!(scalar_of(|t| {
            let s = t.constant(m(2, 3, &[0.0; 6]));
            comp_entropy_loss(t, s)
        }), 0.0);
        let v = scalar_of(|t| {
            let s = t.constant(m(1, 1, &[1.0]));
            comp_entropy_loss(t, s)
        });
        assert!((v + 2.0).abs() < 1e-12);
    }

    fn toy(seed: u64) -> (TargetModel<f64>, SgtEstimator<f64>, ObjectiveInputs<f64>) {
        let lm = LmConfig {
            vocab_size: 12,
            d_model: 4,
            layers: 1,
            heads: 2,
            context: 4,
            ff_mult: 2,
        };
        let mut rng = RngStream::new(seed, 0);
        let mut target = TargetModel::<f64>::new(lm, &mut rng).unwrap();
        target.freeze();
        let table = target.embedding_table().unwrap();
        let mut cfg = SgtConfig::for_embeddings(4, table.median_norm(), 4);
        cfg.width = 4;
        cfg.ff_mult = 2;
        // larger head init so every term has a visible gradient
        cfg.mean_init_std = 0.3;
        cfg.sigma_init_rel = 0.5;
        let est = SgtEstimator::<f64>::new(cfg, &mut rng).unwrap();
        let clean = table.embed(&[1, 5, 7, 2]).unwrap();
        let cross = table.embed(&[3, 3, 9, 11]).unwrap();
        let noise = gaussian_draw(&mut rng, &[4, 4]);
        let inp = ObjectiveInputs {
            clean,
            noise,
            cross_clean: cross,
            seq_len: 2,
            norm_target: table.median_norm(),
        };
        (target, est, inp)
    }

    #[test]
    fn breakdown_identity_and_frozen_target() {
        let (target, est, inp) = toy(31);
        let cfg = LossConfig::default();
        let mut t = Tape::new();
        let vars = est.params().bind(&mut t, true);
        let obj = total_loss(&mut t, &target, &est, &vars, &inp, &cfg, 0.7).unwrap();
        let b = obj.breakdown;
        assert!((b.recombine(&cfg, 0.7) - b.total).abs() <= 1e-6 * b.total.abs());
        let g = t.backward(obj.total);
        for v in &obj.target_vars {
            assert!(g.get(*v).is_none());
        }
        assert!(vars.iter().any(|v| g.get(*v).is_some()));

        let mut t = Tape::new();
        let vars = est.params().bind(&mut t, true);
        let obj = total_loss(&mut t, &target, &est, &vars, &inp, &LossConfig::utility_only(), 0.0).unwrap();
        assert_eq!(obj.breakdown.total, obj.breakdown.utility);

        let only_mi = LossConfig {
            alpha_mi: 1.0,
            ..LossConfig::utility_only()
        };
        let mut t = Tape::new();
        let vars = est.params().bind(&mut t, true);
        let b = total_loss(&mut t, &target, &est, &vars, &inp, &only_mi, 1.0).unwrap().breakdown;
        assert!((b.total - b.utility - b.mi).abs() <= 1e-6 * b.mi.abs().max(1e-12));
    }

    #[test]
    fn objective_matches_sampled_obfuscation() {
        let (target, est, inp) = toy(32);
        let mut t = Tape::new();
        let vars = est.params().bind(&mut t, false);
        let obj = total_loss(&mut t, &target, &est, &vars, &inp, &LossConfig::default(), 1.0).unwrap();
        let field = est.estimate_field(&inp.clean, inp.seq_len).unwrap();
        let b = crate::sgt::ObfuscationBatch::assemble(inp.clean.clone(), field, inp.noise.clone(), inp.seq_len).unwrap();
        assert_eq!(t.value(obj.obfuscated), &b.obfuscated);
    }

    #[test]
    fn every_loss_passes_grad_check() {
        let (target, est, inp) = toy(33);
        let configs = [
            LossConfig::utility_only(),
            LossConfig { alpha_mi: 1.0, ..LossConfig::utility_only() },
            LossConfig { alpha_mi: 1.0, pairing: MiPairing::DoubleSum, ..LossConfig::utility_only() },
            LossConfig { alpha_abscos: 1.0, ..LossConfig::utility_only() },
            LossConfig { alpha_norm: 1.0, ..LossConfig::utility_only() },
            LossConfig { demonstrative: Demonstrative::CompEntropy, ..LossConfig::utility_only() },
            LossConfig { demonstrative: Demonstrative::CosSim, ..LossConfig::utility_only() },
            LossConfig::default(),
        ];
        for cfg in configs {
            let rep = grad_check(
                |tape, vars| Ok(total_loss(tape, &target, &est, vars, &inp, &cfg, cfg.alpha_mi)?.total),
                &est.params().iter().map(|(_, v)| v.clone()).collect::<Vec<_>>(),
                1e-3,
                1e-3,
            )
            .unwrap();
            assert!(rep.passed(), "{cfg:?}: {rep:?}");
        }
    }
}
