//! Parameter storage and the transformer building blocks shared by the
//! target model and the estimator.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::array::RealArray;
use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::rng::{gaussian_draw, RngStream};
use crate::tape::{Gradients, Tape, Var};

/// Ordered, named parameter arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<F = f32> {
    names: Vec<String>,
    values: Vec<RealArray<F>>,
}

/// A parameter value paired with its loss gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientRecord<F = f32> {
    pub parameter_name: String,
    pub value: RealArray<F>,
    pub gradient: RealArray<F>,
}

impl<F: Real> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamSet<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, value: RealArray<F>) -> usize {
        self.names.push(name.to_string());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn value(&self, i: usize) -> &RealArray<F> {
        &self.values[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut RealArray<F> {
        &mut self.values[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &RealArray<F>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(RealArray::len).sum()
    }

    /// Registers every array on `tape`, trainable or constant.
    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> Vec<Var> {
        self.values
            .iter()
            .map(|v| tape.leaf(v.clone(), trainable))
            .collect()
    }

    pub fn cast<G: Real>(&self) -> ParamSet<G> {
        ParamSet {
            names: self.names.clone(),
            values: self.values.iter().map(RealArray::cast).collect(),
        }
    }

    /// Replaces the values of `self` with those of `other`, requiring
    /// identical names and shapes.
    pub fn assign(&mut self, other: &ParamSet<F>) -> Result<()> {
        if self.names != other.names {
            return Err(shape_err!("parameter names differ"));
        }
        for (a, b) in self.values.iter().zip(&other.values) {
            a.same_shape(b)?;
        }
        self.values.clone_from(&other.values);
        Ok(())
    }

    pub fn gradient_records(&self, vars: &[Var], grads: &Gradients<F>) -> Vec<GradientRecord<F>> {
        self.names
            .iter()
            .zip(&self.values)
            .zip(vars)
            .map(|((n, v), var)| GradientRecord {
                parameter_name: n.clone(),
                value: v.clone(),
                gradient: grads
                    .get(*var)
                    .cloned()
                    .unwrap_or_else(|| RealArray::zeros(v.shape())),
            })
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.values
            .iter()
            .all(|v| v.data().iter().all(|x| x.is_finite()))
    }
}

pub(crate) fn normal_init<F: Real>(rng: &mut RngStream, rows: usize, cols: usize, std: f64) -> RealArray<F> {
    let mut a: RealArray<F> = gaussian_draw(rng, &[rows, cols]);
    for x in a.data_mut() {
        *x = F::of(x.f64() * std);
    }
    a
}

/// Fixed sinusoidal position table, `len × d`.
pub fn sinusoidal_positions<F: Real>(len: usize, d: usize) -> RealArray<F> {
    RealArray::from_fn(len, d, |t, j| {
        let i = (j / 2) as f64;
        let angle = t as f64 / libm::pow(10_000.0, 2.0 * i / d as f64);
        F::of(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Position table tiled over `rows / seq_len` stacked sequences.
pub fn tiled_positions<F: Real>(rows: usize, seq_len: usize, d: usize) -> RealArray<F> {
    let pe = sinusoidal_positions::<F>(seq_len, d);
    RealArray::from_fn(rows, d, |r, j| pe.get(r % seq_len, j))
}

/// Indices of one pre-norm transformer block inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockLayout {
    ln1_g: usize,
    ln1_b: usize,
    w_q: usize,
    w_k: usize,
    w_v: usize,
    w_o: usize,
    b_o: usize,
    ln2_g: usize,
    ln2_b: usize,
    w_fc: usize,
    b_fc: usize,
    w_proj: usize,
    b_proj: usize,
}

pub(crate) fn push_block<F: Real>(
    params: &mut ParamSet<F>,
    prefix: &str,
    width: usize,
    ff: usize,
    residual_std: f64,
    rng: &mut RngStream,
) -> BlockLayout {
    let std = 0.02f64.max(0.5 / (width as f64).sqrt());
    let mut p = |name: &str, v: RealArray<F>| params.push(&alloc::format!("{prefix}.{name}"), v);
    BlockLayout {
        ln1_g: p("ln1.gamma", RealArray::full(&[1, width], F::one())),
        ln1_b: p("ln1.beta", RealArray::zeros(&[1, width])),
        w_q: p("attn.w_q", normal_init(rng, width, width, std)),
        w_k: p("attn.w_k", normal_init(rng, width, width, std)),
        w_v: p("attn.w_v", normal_init(rng, width, width, std)),
        w_o: p("attn.w_o", normal_init(rng, width, width, residual_std)),
        b_o: p("attn.b_o", RealArray::zeros(&[1, width])),
        ln2_g: p("ln2.gamma", RealArray::full(&[1, width], F::one())),
        ln2_b: p("ln2.beta", RealArray::zeros(&[1, width])),
        w_fc: p("mlp.w_fc", normal_init(rng, width, ff, std)),
        b_fc: p("mlp.b_fc", RealArray::zeros(&[1, ff])),
        w_proj: p("mlp.w_proj", normal_init(rng, ff, width, residual_std)),
        b_proj: p("mlp.b_proj", RealArray::zeros(&[1, width])),
    }
}

/// `x + attn(ln1(x))` then `+ mlp(ln2(·))` over stacked sequences.
pub(crate) fn block_forward<F: Real>(
    tape: &mut Tape<F>,
    vars: &[Var],
    layout: &BlockLayout,
    x: Var,
    heads: usize,
    seq_len: usize,
    causal: bool,
) -> Var {
    let h = tape.layer_norm(x, vars[layout.ln1_g], vars[layout.ln1_b]);
    let q = tape.matmul(h, vars[layout.w_q]);
    let k = tape.matmul(h, vars[layout.w_k]);
    let v = tape.matmul(h, vars[layout.w_v]);
    let a = tape.attention(q, k, v, heads, seq_len, causal);
    let o = tape.matmul(a, vars[layout.w_o]);
    let o = tape.add_row(o, vars[layout.b_o]);
    let x = tape.add(x, o);
    let h = tape.layer_norm(x, vars[layout.ln2_g], vars[layout.ln2_b]);
    let f = tape.matmul(h, vars[layout.w_fc]);
    let f = tape.add_row(f, vars[layout.b_fc]);
    let f = tape.gelu(f);
    let f = tape.matmul(f, vars[layout.w_proj]);
    let f = tape.add_row(f, vars[layout.b_proj]);
    tape.add(x, f)
}

/// Walks a freshly built parameter set in construction order and recovers
/// block layouts; used when reloading a checkpoint.
pub(crate) fn check_layout<F: Real>(expected: &ParamSet<F>, loaded: &ParamSet<F>) -> Result<()> {
    if expected.len() != loaded.len() {
        return Err(shape_err!(
            "expected {} parameter arrays, found {}",
            expected.len(),
            loaded.len()
        ));
    }
    for ((n1, v1), (n2, v2)) in expected.iter().zip(loaded.iter()) {
        if n1 != n2 {
            return Err(shape_err!("parameter {n2:?} where {n1:?} was expected"));
        }
        if v1.shape() != v2.shape() {
            return Err(shape_err!(
                "parameter {n1:?} has shape {:?}, expected {:?}",
                v2.shape(),
                v1.shape()
            ));
        }
    }
    Ok(())
}
