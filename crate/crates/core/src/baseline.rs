//! Constant Gaussian noise with classical (ε, δ) accounting.

use alloc::vec::Vec;

use crate::array::RealArray;
use crate::corpus::Chunk;
use crate::error::{invalid, Result};
use crate::eval::{evaluate, EvalConfig, UtilityMetrics};
use crate::lm::{EmbeddingTable, TargetModel};
use crate::real::Real;
use crate::rng::{gaussian_draw, RngStream};
use crate::sgt::{GaussianField, Mechanism};

/// `x + σ·u` for every coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantNoise {
    pub sigma: f64,
}

impl ConstantNoise {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(invalid!("noise scale must be finite and ≥ 0, got {sigma}"));
        }
        Ok(Self { sigma })
    }

    pub fn apply<F: Real>(&self, x: &RealArray<F>, stream: &mut RngStream) -> RealArray<F> {
        let u: RealArray<F> = gaussian_draw(stream, x.shape());
        let s = F::of(self.sigma);
        x.zip_map(&u, |a, b| a + s * b).expect("same shape")
    }
}

impl<F: Real> Mechanism<F> for ConstantNoise {
    fn name(&self) -> &str {
        "gaussian"
    }

    /// A zero scale is represented by the smallest positive value, which
    /// leaves every input unchanged.
    fn field(&self, clean: &RealArray<F>, _seq_len: usize) -> Result<GaussianField<F>> {
        let s = if self.sigma > 0.0 { F::of(self.sigma) } else { F::min_positive_value() };
        GaussianField::new(RealArray::zeros(clean.shape()), RealArray::full(clean.shape(), s))
    }
}

/// `ε = Δ₂ √(2 ln(1.25/δ)) / σ`; infinite at `σ = 0`.
pub fn epsilon_of(sigma: f64, sensitivity: f64, dp_delta: f64) -> Result<f64> {
    if !(dp_delta > 0.0 && dp_delta < 1.0) {
        return Err(invalid!("dp_delta must lie in (0, 1), got {dp_delta}"));
    }
    if !(sensitivity > 0.0) || !(sigma >= 0.0) {
        return Err(invalid!("need sensitivity > 0 and sigma ≥ 0"));
    }
    Ok(sensitivity * (2.0 * (1.25 / dp_delta).ln()).sqrt() / sigma)
}

/// Replace-one-token L2 sensitivity: largest distance between table rows.
pub fn sensitivity<F: Real>(table: &EmbeddingTable<F>) -> f64 {
    table.max_pairwise_distance()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub sigma: f64,
    pub epsilon: f64,
    pub utility: UtilityMetrics,
    pub nn_fr: f64,
}

/// One evaluation per noise scale, each with the same stream so rows differ
/// only through σ. The classical calibration is only proven for `ε < 1`;
/// larger values are reported as computed.
pub fn sweep<F: Real>(
    sigmas: &[f64],
    chunks: &[Chunk],
    target: &TargetModel<F>,
    dp_delta: f64,
    cfg: &EvalConfig,
    stream: &RngStream,
) -> Result<Vec<SweepRow>> {
    let delta2 = sensitivity(&target.embedding_table()?);
    let cfg = EvalConfig {
        mi_samples: 0,
        ..cfg.clone()
    };
    sigmas
        .iter()
        .map(|&s| {
            let mech = ConstantNoise::new(s)?;
            let e = evaluate(&mech, target, chunks, &cfg, stream)?;
            Ok(SweepRow {
                sigma: s,
                epsilon: epsilon_of(s, delta2, dp_delta)?,
                utility: e.utility,
                nn_fr: e.report.nn_fr,
            })
        })
        .collect()
}
