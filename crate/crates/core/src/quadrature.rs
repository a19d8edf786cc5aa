//! Deterministic one-dimensional Gaussian-mixture integrals, used as
//! reference values for the Monte-Carlo estimators.

use alloc::vec::Vec;

use crate::error::{invalid, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Differential entropy of `N(·, σ²)` in nats.
pub fn gaussian_entropy(sigma: f64) -> f64 {
    0.5 * (LN_2PI + 1.0) + sigma.ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mixture1d {
    weights: Vec<f64>,
    means: Vec<f64>,
    sigmas: Vec<f64>,
}

impl Mixture1d {
    /// Weights are normalized; all scales must be positive.
    pub fn new(weights: &[f64], means: &[f64], sigmas: &[f64]) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || means.len() != sigmas.len() {
            return Err(invalid!("mixture needs matching nonempty weights, means and scales"));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) || sigmas.iter().any(|s| !(*s > 0.0)) {
            return Err(invalid!("weights must be ≥ 0 and scales > 0"));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(invalid!("weights sum to zero"));
        }
        Ok(Self {
            weights: weights.iter().map(|w| w / total).collect(),
            means: means.to_vec(),
            sigmas: sigmas.to_vec(),
        })
    }

    pub fn equal(means: &[f64], sigmas: &[f64]) -> Result<Self> {
        Self::new(&alloc::vec![1.0; means.len()], means, sigmas)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn log_density(&self, z: f64) -> f64 {
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.means)
            .zip(&self.sigmas)
            .filter(|((w, _), _)| **w > 0.0)
            .map(|((w, m), s)| {
                let u = (z - m) / s;
                w.ln() - 0.5 * LN_2PI - s.ln() - 0.5 * u * u
            })
            .collect();
        log_sum_exp(&terms)
    }

    pub fn density(&self, z: f64) -> f64 {
        self.log_density(z).exp()
    }

    /// Integration range covering every component to ±12σ.
    pub fn support(&self) -> (f64, f64) {
        let lo = self
            .means
            .iter()
            .zip(&self.sigmas)
            .map(|(m, s)| m - 12.0 * s)
            .fold(f64::INFINITY, f64::min);
        let hi = self
            .means
            .iter()
            .zip(&self.sigmas)
            .map(|(m, s)| m + 12.0 * s)
            .fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }

    /// `−∫ p log p` by composite Simpson's rule on `intervals` (made even).
    pub fn entropy_with(&self, intervals: usize) -> f64 {
        let (lo, hi) = self.support();
        simpson(lo, hi, intervals, |z| {
            let lp = self.log_density(z);
            if lp == f64::NEG_INFINITY {
                0.0
            } else {
                -lp.exp() * lp
            }
        })
    }

    pub fn entropy(&self) -> f64 {
        self.entropy_with(40_000)
    }

    /// `I(K; Z)` where `Z | K ~ N(m_K, σ_K²)`: mixture entropy minus the
    /// weighted component entropies.
    pub fn mutual_information(&self) -> f64 {
        let cond: f64 = self
            .weights
            .iter()
            .zip(&self.sigmas)
            .map(|(w, s)| w * gaussian_entropy(*s))
            .sum();
        self.entropy() - cond
    }
}

pub fn simpson(lo: f64, hi: f64, intervals: usize, f: impl Fn(f64) -> f64) -> f64 {
    let n = (intervals.max(2) + 1) & !1;
    let h = (hi - lo) / n as f64;
    let mut acc = f(lo) + f(hi);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(lo + i as f64 * h);
    }
    acc * h / 3.0
}

pub fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_gaussian_entropy() {
        let m = Mixture1d::equal(&[0.0], &[1.0]).unwrap();
        assert!((m.entropy() - 1.418_938_533_204_672_7).abs() < 1e-9);
        let m = Mixture1d::equal(&[3.0], &[2.5]).unwrap();
        assert!((m.entropy() - gaussian_entropy(2.5)).abs() < 1e-9);
        assert!(m.mutual_information().abs() < 1e-9);
    }

    #[test]
    fn separated_pair_adds_log_two() {
        let m = Mixture1d::equal(&[-10.0, 10.0], &[1.0, 1.0]).unwrap();
        let want = 1.418_938_533_204_672_7 + core::f64::consts::LN_2;
        assert!((m.entropy() - want).abs() < 1e-9);
        assert!((m.mutual_information() - core::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn coincident_components_carry_no_information() {
        let m = Mixture1d::equal(&[0.0, 0.0], &[1.3, 1.3]).unwrap();
        assert!(m.mutual_information().abs() < 1e-9);
    }

    #[test]
    fn density_integrates_to_one() {
        let m = Mixture1d::new(&[0.2, 0.5, 0.3], &[-3.0, 0.5, 4.0], &[0.5, 2.0, 1.0]).unwrap();
        let (lo, hi) = m.support();
        assert!((simpson(lo, hi, 20_000, |z| m.density(z)) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn bad_mixtures_rejected() {
        assert!(Mixture1d::equal(&[], &[]).is_err());
        assert!(Mixture1d::equal(&[0.0], &[0.0]).is_err());
        assert!(Mixture1d::new(&[0.0], &[0.0], &[1.0]).is_err());
    }
}
