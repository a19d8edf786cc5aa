//! Monte-Carlo entropy of the obfuscation mixture from two independent
//! minibatches.
//!
//! Each obfuscation from the first batch is scored against the Gaussian
//! components of the second batch. [`Pairing::Elementwise`] scores sample
//! `i` against component `i` only; this is cheap and differentiable but is
//! an upper bound whose gap grows with component separation.
//! [`Pairing::CrossBatch`] scores every sample against the equal-weight
//! mixture of all cross components (a log-mean-exp), which converges to the
//! mixture entropy as both batches grow.

use alloc::vec::Vec;

use crate::array::RealArray;
use crate::error::{invalid, shape_err, Error, Result};
use crate::real::Real;
use crate::sgt::GaussianField;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Pairing {
    #[default]
    Elementwise,
    CrossBatch,
}

/// Entropy estimate (nats, per row) of the distribution of `obf` rows,
/// using the components `cross_clean + field.mu`, `field.sigma`.
pub fn minibatch_mixture_entropy<F: Real>(
    obf: &RealArray<F>,
    cross_clean: &RealArray<F>,
    cross_field: &GaussianField<F>,
    pairing: Pairing,
) -> Result<f64> {
    cross_clean.same_shape(&cross_field.mu)?;
    if obf.cols() != cross_clean.cols() {
        return Err(shape_err!("dimension {} vs {}", obf.cols(), cross_clean.cols()));
    }
    if obf.rows() == 0 || cross_clean.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    let comps = Components::new(cross_clean, cross_field)?;
    match pairing {
        Pairing::Elementwise => {
            if obf.rows() != cross_clean.rows() {
                return Err(invalid!(
                    "batch sizes differ: {} vs {}",
                    obf.rows(),
                    cross_clean.rows()
                ));
            }
            let total: f64 = (0..obf.rows()).map(|i| -comps.log_density(i, obf.row(i))).sum();
            Ok(total / obf.rows() as f64)
        }
        Pairing::CrossBatch => {
            let ln_m = (comps.len() as f64).ln();
            let mut buf = alloc::vec![0.0; comps.len()];
            let total: f64 = (0..obf.rows())
                .map(|i| {
                    for (k, b) in buf.iter_mut().enumerate() {
                        *b = comps.log_density(k, obf.row(i));
                    }
                    ln_m - crate::quadrature::log_sum_exp(&buf)
                })
                .sum();
            Ok(total / obf.rows() as f64)
        }
    }
}

struct Components {
    d: usize,
    centers: Vec<f64>,
    inv_sigma: Vec<f64>,
    log_norm: Vec<f64>,
}

impl Components {
    fn new<F: Real>(clean: &RealArray<F>, field: &GaussianField<F>) -> Result<Self> {
        let d = clean.cols();
        let m = clean.rows();
        let mut centers = Vec::with_capacity(m * d);
        let mut inv_sigma = Vec::with_capacity(m * d);
        let mut log_norm = Vec::with_capacity(m);
        for k in 0..m {
            let mut ln = -0.5 * LN_2PI * d as f64;
            for j in 0..d {
                let s = field.sigma.get(k, j).f64();
                if !(s > 0.0) {
                    return Err(invalid!("nonpositive scale {s}"));
                }
                centers.push(clean.get(k, j).f64() + field.mu.get(k, j).f64());
                inv_sigma.push(1.0 / s);
                ln -= s.ln();
            }
            log_norm.push(ln);
        }
        Ok(Self {
            d,
            centers,
            inv_sigma,
            log_norm,
        })
    }

    fn len(&self) -> usize {
        self.log_norm.len()
    }

    fn log_density<F: Real>(&self, k: usize, y: &[F]) -> f64 {
        let c = &self.centers[k * self.d..(k + 1) * self.d];
        let is = &self.inv_sigma[k * self.d..(k + 1) * self.d];
        let mut q = 0.0;
        for j in 0..self.d {
            let z = (y[j].f64() - c[j]) * is[j];
            q += z * z;
        }
        self.log_norm[k] - 0.5 * q
    }
}

/// One-dimensional cross-batch entropy: every sample is scored against the
/// equal-weight mixture of `N(means[k], sigmas[k]²)`.
pub fn mixture_entropy_1d(samples: &[f64], means: &[f64], sigmas: &[f64]) -> Result<f64> {
    if samples.is_empty() || means.is_empty() {
        return Err(Error::EmptyInput);
    }
    if means.len() != sigmas.len() {
        return Err(shape_err!("{} means vs {} scales", means.len(), sigmas.len()));
    }
    if sigmas.iter().any(|s| !(*s > 0.0)) {
        return Err(invalid!("nonpositive scale"));
    }
    let inv: Vec<f64> = sigmas.iter().map(|s| 1.0 / s).collect();
    let norm: Vec<f64> = sigmas.iter().map(|s| -0.5 * LN_2PI - s.ln()).collect();
    let ln_m = (means.len() as f64).ln();
    let mut total = 0.0;
    for &y in samples {
        let mut mx = f64::NEG_INFINITY;
        for k in 0..means.len() {
            let z = (y - means[k]) * inv[k];
            mx = mx.max(norm[k] - 0.5 * z * z);
        }
        let mut acc = 0.0;
        for k in 0..means.len() {
            let z = (y - means[k]) * inv[k];
            acc += (norm[k] - 0.5 * z * z - mx).exp();
        }
        total += ln_m - mx - acc.ln();
    }
    Ok(total / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::Mixture1d;
    use crate::rng::RngStream;

    fn column(v: &[f64]) -> RealArray<f64> {
        RealArray::matrix(v.len(), 1, v.to_vec()).unwrap()
    }

    fn draw_pm10(rng: &mut RngStream, n: usize) -> (RealArray<f64>, RealArray<f64>) {
        let x: Vec<f64> = (0..n).map(|_| if rng.below(2) == 0 { -10.0 } else { 10.0 }).collect();
        let y: Vec<f64> = x.iter().map(|x| x + rng.normal()).collect();
        (column(&x), column(&y))
    }

    fn unit_field(n: usize) -> GaussianField<f64> {
        GaussianField::new(RealArray::zeros(&[n, 1]), RealArray::full(&[n, 1], 1.0)).unwrap()
    }

    #[test]
    fn standard_normal_entropy() {
        let mut rng = RngStream::new(11, 0);
        let n = 20_000;
        let x = RealArray::<f64>::zeros(&[n, 1]);
        let y = column(&(0..n).map(|_| rng.normal()).collect::<Vec<_>>());
        let f = unit_field(n);
        for p in [Pairing::Elementwise, Pairing::CrossBatch] {
            let h = minibatch_mixture_entropy(&y, &x, &f, p).unwrap();
            assert!((h / 1.418_938_5 - 1.0).abs() < 0.02, "{p:?}: {h}");
        }
    }

    #[test]
    fn cross_batch_matches_quadrature_for_separated_pair() {
        let mut rng = RngStream::new(12, 0);
        let (_, y) = draw_pm10(&mut rng, 4000);
        let (xc, _) = draw_pm10(&mut rng.child(1), 4000);
        let h = minibatch_mixture_entropy(&y, &xc, &unit_field(4000), Pairing::CrossBatch).unwrap();
        let want = Mixture1d::equal(&[-10.0, 10.0], &[1.0, 1.0]).unwrap().entropy();
        assert!((h / want - 1.0).abs() < 0.02, "{h} vs {want}");
    }

    #[test]
    fn forced_pairing_is_below_cross_sampling() {
        let mut rng = RngStream::new(13, 0);
        let (x, y) = draw_pm10(&mut rng, 4000);
        let (xc, _) = draw_pm10(&mut rng.child(1), 4000);
        let f = unit_field(4000);
        let own = minibatch_mixture_entropy(&y, &x, &f, Pairing::Elementwise).unwrap();
        let cross = minibatch_mixture_entropy(&y, &xc, &f, Pairing::Elementwise).unwrap();
        assert!((own - 1.4189).abs() < 0.05);
        assert!(own < cross);
    }

    #[test]
    fn one_dimensional_form_agrees_with_rows() {
        let mut rng = RngStream::new(14, 0);
        let (_, y) = draw_pm10(&mut rng, 500);
        let (xc, _) = draw_pm10(&mut rng.child(1), 300);
        let f = unit_field(300);
        let a = minibatch_mixture_entropy(&y, &xc, &f, Pairing::CrossBatch).unwrap();
        let b = mixture_entropy_1d(y.data(), xc.data(), &alloc::vec![1.0; 300]).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn elementwise_needs_equal_batches() {
        let y = column(&[0.0, 1.0]);
        let x = column(&[0.0]);
        assert!(minibatch_mixture_entropy(&y, &x, &unit_field(1), Pairing::Elementwise).is_err());
        assert!(minibatch_mixture_entropy(&y, &x, &unit_field(1), Pairing::CrossBatch).is_ok());
    }
}
