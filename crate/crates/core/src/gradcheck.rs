//! Finite-difference verification of tape gradients.

use alloc::vec::Vec;

use crate::array::RealArray;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};

/// Denominator floor of the relative error; entries whose analytic and
/// numeric gradients are both below it are compared absolutely.
pub const ABS_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// (parameter index, flat entry index) of the worst relative error.
    pub worst: Option<(usize, usize)>,
    pub entries_checked: usize,
    pub rel_tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.rel_tol
    }
}

/// Compares tape gradients of `loss_fn` against central differences with
/// step `epsilon` for every entry of every parameter.
///
/// `loss_fn` receives a fresh tape with `params` registered as trainable
/// leaves (in order) and must return a scalar. Any randomness must be frozen
/// inside the closure; two evaluations at the same point that differ are
/// reported as [`Error::NonDeterministic`].
pub fn grad_check<F, L>(
    loss_fn: L,
    params: &[RealArray<F>],
    epsilon: f64,
    rel_tol: f64,
) -> Result<GradCheckReport>
where
    F: Real,
    L: Fn(&mut Tape<F>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[RealArray<F>]| -> Result<(Tape<F>, Var, Vec<Var>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let loss = loss_fn(&mut tape, &vars)?;
        if tape.value(loss).len() != 1 {
            return Err(Error::InvalidArgument("loss must be a scalar".into()));
        }
        Ok((tape, loss, vars))
    };
    let (tape, loss, vars) = eval(params)?;
    let base = tape.scalar(loss).f64();
    let (tape2, loss2, _) = eval(params)?;
    let again = tape2.scalar(loss2).f64();
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic {
            first: base,
            second: again,
        });
    }
    let grads = tape.backward(loss);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        entries_checked: 0,
        rel_tol,
    };
    let mut work: Vec<RealArray<F>> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| RealArray::zeros(params[pi].shape()));
        for e in 0..params[pi].len() {
            let orig = params[pi].data()[e];
            work[pi].data_mut()[e] = F::of(orig.f64() + epsilon);
            let (tp, lp, _) = eval(&work)?;
            work[pi].data_mut()[e] = F::of(orig.f64() - epsilon);
            let (tm, lm, _) = eval(&work)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (tp.scalar(lp).f64() - tm.scalar(lm).f64()) / (2.0 * epsilon);
            let a = analytic.data()[e].f64();
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(ABS_FLOOR);
            report.entries_checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some((pi, e));
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_draw, RngStream};

    #[test]
    fn quadratic_is_exact() {
        let theta: RealArray<f64> = gaussian_draw(&mut RngStream::new(1, 0), &[3, 4]);
        let r = grad_check(
            |t, v| {
                let sq = t.square(v[0]);
                let s = t.sum(sq);
                Ok(t.scale(s, 0.5))
            },
            &[theta],
            1e-3,
            1e-6,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.entries_checked, 12);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let theta: RealArray<f64> = gaussian_draw(&mut RngStream::new(2, 0), &[2, 2]);
        let r = grad_check(
            |t, _| Ok(t.constant(RealArray::scalar(3.0))),
            &[theta],
            1e-3,
            1e-6,
        )
        .unwrap();
        assert_eq!(r.max_abs_error, 0.0);
    }

    #[test]
    fn nondeterminism_is_an_error() {
        use core::cell::Cell;
        let counter = Cell::new(0.0);
        let theta = RealArray::<f64>::scalar(1.0);
        let err = grad_check(
            |t, v| {
                counter.set(counter.get() + 1.0);
                let c = t.constant(RealArray::scalar(counter.get()));
                let m = t.mul(v[0], c);
                Ok(t.sum(m))
            },
            &[theta],
            1e-3,
            1e-6,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }

    fn check_op(build: impl Fn(&mut Tape<f64>, &[Var]) -> Var, shapes: &[(usize, usize)], seed: u64) {
        let mut s = RngStream::new(seed, 0);
        let params: Vec<RealArray<f64>> = shapes
            .iter()
            .map(|&(r, c)| gaussian_draw(&mut s, &[r, c]))
            .collect();
        let r = grad_check(|t, v| Ok(build(t, v)), &params, 1e-4, 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    fn weighted_sum(t: &mut Tape<f64>, x: Var) -> Var {
        let (m, n) = (t.value(x).rows(), t.value(x).cols());
        let w = RealArray::from_fn(m, n, |i, j| ((i * 7 + j * 3) % 5) as f64 - 1.7);
        let w = t.constant(w);
        let p = t.mul(x, w);
        t.sum(p)
    }

    #[test]
    fn elementwise_ops() {
        check_op(
            |t, v| {
                let a = t.mul(v[0], v[1]);
                let b = t.sub(a, v[1]);
                let c = t.exp(b);
                let d = t.square(v[0]);
                let e = t.offset(d, 1.0);
                let f = t.ln(e);
                let g = t.add(c, f);
                let h = t.gelu(g);
                weighted_sum(t, h)
            },
            &[(3, 4), (3, 4)],
            3,
        );
    }

    #[test]
    fn matmul_ops() {
        check_op(
            |t, v| {
                let a = t.matmul(v[0], v[1]);
                let b = t.matmul_t(a, v[2]);
                let c = t.add_row(b, v[3]);
                weighted_sum(t, c)
            },
            &[(3, 4), (4, 5), (2, 5), (1, 2)],
            4,
        );
    }

    #[test]
    fn row_ops() {
        check_op(
            |t, v| {
                let n = t.row_norm(v[0]);
                let c = t.row_cosine(v[0], v[1]);
                let s = t.row_sum(v[1]);
                let p = t.mul(n, c);
                let q = t.add(p, s);
                let r = t.mul_col(v[1], q);
                weighted_sum(t, r)
            },
            &[(4, 3), (4, 3)],
            5,
        );
    }

    #[test]
    fn layer_norm_and_gather() {
        check_op(
            |t, v| {
                let g = t.gather(v[0], &[2, 0, 2, 1]);
                let l = t.layer_norm(g, v[1], v[2]);
                weighted_sum(t, l)
            },
            &[(3, 5), (1, 5), (1, 5)],
            6,
        );
    }

    #[test]
    fn attention_causal_and_bidirectional() {
        for causal in [true, false] {
            check_op(
                |t, v| {
                    let o = t.attention(v[0], v[1], v[2], 2, 3, causal);
                    weighted_sum(t, o)
                },
                &[(6, 4), (6, 4), (6, 4)],
                7,
            );
        }
    }

    #[test]
    fn cross_entropy_targets() {
        check_op(
            |t, v| {
                let l = t.cross_entropy(v[0], crate::tape::CeTarget::Classes(alloc::vec![Some(1), None, Some(3)]));
                let target = RealArray::from_fn(3, 4, |i, j| [0.1, 0.2, 0.3, 0.4][(i + j) % 4]);
                let l2 = t.cross_entropy(v[1], crate::tape::CeTarget::Soft(target));
                let s = t.add(l, l2);
                t.scale(s, 1.3)
            },
            &[(3, 4), (3, 4)],
            8,
        );
    }

    #[test]
    fn reductions_and_abs_clamp() {
        check_op(
            |t, v| {
                let a = t.offset(v[0], 0.05);
                let b = t.abs(a);
                let c = t.clamp(v[0], -0.8, 0.8);
                let d = t.add(b, c);
                let m = t.mean(d);
                let s = t.sum(v[0]);
                let e = t.mul(m, s);
                t.neg(e)
            },
            &[(2, 3)],
            9,
        );
    }
}
