//! First-order optimizers, gradient clipping and learning-rate schedules.

use alloc::vec::Vec;

use crate::array::RealArray;
use crate::error::{invalid, Result};
use crate::nn::ParamSet;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    SgdMomentum { momentum: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state for one [`ParamSet`]; moments are kept in f64.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new<F: Real>(kind: OptimizerKind, params: &ParamSet<F>) -> Self {
        let zeros = || (0..params.len()).map(|i| alloc::vec![0.0; params.value(i).len()]).collect();
        Self {
            kind,
            first: zeros(),
            second: match kind {
                OptimizerKind::Adam { .. } => zeros(),
                OptimizerKind::SgdMomentum { .. } => Vec::new(),
            },
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update with learning rate `lr`. `grads[i]` belongs to
    /// parameter `i`; `None` means no gradient reached it.
    pub fn step<F: Real>(
        &mut self,
        params: &mut ParamSet<F>,
        grads: &[Option<RealArray<F>>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != params.len() {
            return Err(invalid!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            ));
        }
        self.steps += 1;
        let t = self.steps as f64;
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = params.value_mut(i);
            p.same_shape(g)?;
            let m = &mut self.first[i];
            match self.kind {
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let v = &mut self.second[i];
                    let c1 = 1.0 - libm::pow(beta1, t);
                    let c2 = 1.0 - libm::pow(beta2, t);
                    for (k, (x, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        let gv = gv.f64();
                        m[k] = beta1 * m[k] + (1.0 - beta1) * gv;
                        v[k] = beta2 * v[k] + (1.0 - beta2) * gv * gv;
                        let upd = lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                        *x = F::of(x.f64() - upd);
                    }
                }
                OptimizerKind::SgdMomentum { momentum } => {
                    for (k, (x, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[k] = momentum * m[k] + gv.f64();
                        *x = F::of(x.f64() - lr * m[k]);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<F: Real>(grads: &mut [Option<RealArray<F>>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|x| x.f64() * x.f64())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for x in g.data_mut() {
                *x = F::of(x.f64() * s);
            }
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decay {
    Constant,
    Cosine,
}

/// Linear warm-up followed by constant or cosine decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub decay: Decay,
    /// Floor of the cosine decay as a fraction of `base`.
    pub min_frac: f64,
}

impl LrSchedule {
    pub fn rate(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base * (step + 1) as f64 / self.warmup_steps as f64;
        }
        match self.decay {
            Decay::Constant => self.base,
            Decay::Cosine => {
                let span = self.total_steps.saturating_sub(self.warmup_steps).max(1) as f64;
                let p = ((step - self.warmup_steps) as f64 / span).min(1.0);
                let c = 0.5 * (1.0 + (core::f64::consts::PI * p).cos());
                self.base * (self.min_frac + (1.0 - self.min_frac) * c)
            }
        }
    }
}
