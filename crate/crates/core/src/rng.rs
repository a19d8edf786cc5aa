//! Explicit, seedable random streams.
//!
//! Every consumer of randomness takes an [`RngStream`]; there is no global
//! generator. Streams are ChaCha20 keyed by the seed, with the stream id
//! selecting ChaCha's 64-bit stream counter, so distinct ids under one seed
//! are independent sequences.

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

use crate::array::RealArray;
use crate::real::Real;

pub const ALGORITHM_TAG: &str = "chacha20-ziggurat-v1";

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha20Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn algorithm_tag(&self) -> &'static str {
        ALGORITHM_TAG
    }

    /// A fresh stream under the same seed whose id is derived from this
    /// stream's id and `label`. Does not advance `self`.
    pub fn child(&self, label: u64) -> Self {
        Self::new(self.seed, splitmix(self.stream_id ^ splitmix(label.wrapping_add(1))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n` (Lemire's nearly-divisionless method).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        loop {
            let x = self.rng.next_u64();
            let m = (x as u128) * (n as u128);
            let lo = m as u64;
            if lo >= n || lo >= n.wrapping_neg() % n {
                return (m >> 64) as usize;
            }
        }
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// I.i.d. standard normal draws of the given shape.
///
/// Draws are generated in f64 and rounded, so the f32 and f64 instantiations
/// see the same underlying noise.
pub fn gaussian_draw<F: Real>(stream: &mut RngStream, shape: &[usize]) -> RealArray<F> {
    assert!(!shape.is_empty(), "gaussian_draw needs a nonempty shape");
    let mut out = RealArray::zeros(shape);
    for x in out.data_mut() {
        *x = F::of(stream.normal());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_state_same_draws() {
        let a: RealArray<f32> = gaussian_draw(&mut RngStream::new(3, 9), &[4, 5]);
        let b: RealArray<f32> = gaussian_draw(&mut RngStream::new(3, 9), &[4, 5]);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn moments_of_a_million_draws() {
        let a: RealArray<f64> = gaussian_draw(&mut RngStream::new(11, 0), &[1_000_000]);
        let n = a.len() as f64;
        let mean = a.sum_f64() / n;
        let var = a.data().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((0.99..=1.01).contains(&var), "var {var}");
    }

    #[test]
    fn distinct_streams_are_uncorrelated() {
        let a: RealArray<f64> = gaussian_draw(&mut RngStream::new(11, 1), &[1_000_000]);
        let b: RealArray<f64> = gaussian_draw(&mut RngStream::new(11, 2), &[1_000_000]);
        let n = a.len() as f64;
        let (ma, mb) = (a.sum_f64() / n, b.sum_f64() / n);
        let mut sab = 0.0;
        let mut saa = 0.0;
        let mut sbb = 0.0;
        for (x, y) in a.data().iter().zip(b.data()) {
            sab += (x - ma) * (y - mb);
            saa += (x - ma) * (x - ma);
            sbb += (y - mb) * (y - mb);
        }
        let corr = sab / (saa * sbb).sqrt();
        assert!(corr.abs() < 0.01, "corr {corr}");
    }

    #[test]
    fn child_streams_differ_and_are_stable() {
        let root = RngStream::new(5, 0);
        let mut c1 = root.child(1);
        let mut c1b = root.child(1);
        let mut c2 = root.child(2);
        let x = c1.next_u64();
        assert_eq!(x, c1b.next_u64());
        assert_ne!(x, c2.next_u64());
    }

    #[test]
    fn below_is_in_range() {
        let mut s = RngStream::new(1, 1);
        for n in 1..50 {
            for _ in 0..20 {
                assert!(s.below(n) < n);
            }
        }
    }
}
