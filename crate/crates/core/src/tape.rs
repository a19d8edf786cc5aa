//! Reverse-mode differentiation over 2-D arrays.
//!
//! A [`Tape`] records every operation together with its output value.
//! [`Tape::backward`] walks the record in reverse and accumulates
//! gradients into every node that transitively depends on a trainable leaf.
//! Constant leaves (frozen weights, targets, noise) never receive gradients,
//! so a frozen model simply contributes no gradient entries.

use alloc::vec;
use alloc::vec::Vec;

use crate::array::{gemm_acc, gemm_tn_acc, transpose_raw, RealArray};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Target of a softmax cross-entropy.
#[derive(Debug, Clone)]
pub enum CeTarget<F> {
    /// One class per row; `None` rows are ignored (padding).
    Classes(Vec<Option<usize>>),
    /// A probability distribution per row, treated as a constant.
    Soft(RealArray<F>),
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, F),
    Offset(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Square(Var),
    Gelu(Var),
    Clamp(Var, F, F),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Gather(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
        causal: bool,
        probs: Vec<F>,
    },
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    RowNorm(Var),
    RowCosine(Var, Var),
    CrossEntropy {
        logits: Var,
        probs: Vec<F>,
        target: CeTarget<F>,
        count: usize,
    },
}

struct Node<F> {
    value: RealArray<F>,
    op: Op<F>,
    requires_grad: bool,
}

pub struct Tape<F: Real = f32> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: RealArray<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: RealArray<F>, requires_grad: bool) -> Var {
        let value = if value.shape().len() == 1 {
            let n = value.len();
            value.reshape(&[1, n]).expect("same length")
        } else {
            value
        };
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: RealArray<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: RealArray<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &RealArray<F> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let a = &self.nodes[v.0].value;
        (a.rows(), a.cols())
    }

    fn unary(&mut self, a: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F, op: Op<F>) -> Var {
        let value = self
            .value(a)
            .zip_map(self.value(b), f)
            .unwrap_or_else(|e| panic!("elementwise op: {e}"));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `1×n` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (m, n) = self.dims(a);
        assert_eq!(self.dims(row), (1, n), "add_row: bias shape");
        let r = self.value(row).data().to_vec();
        let mut out = self.value(a).clone();
        for i in 0..m {
            for (o, &b) in out.row_mut(i).iter_mut().zip(&r) {
                *o = *o + b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::AddRow(a, row), rg)
    }

    /// Multiplies row `i` of `a` by `col[i]` (`col` is `m×1`).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (m, _) = self.dims(a);
        assert_eq!(self.dims(col), (m, 1), "mul_col: column shape");
        let c = self.value(col).data().to_vec();
        let mut out = self.value(a).clone();
        for (i, &ci) in c.iter().enumerate() {
            for o in out.row_mut(i) {
                *o = *o * ci;
            }
        }
        let rg = self.rg(a) || self.rg(col);
        self.push(out, Op::MulCol(a, col), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let k = F::of(k);
        self.unary(a, |x| x * k, Op::Scale(a, k))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        let k = F::of(k);
        self.unary(a, |x| x + k, Op::Offset(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), Op::Ln(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| {
                let xf = x.f64();
                let t = (GELU_C * (xf + GELU_A * xf * xf * xf)).tanh();
                F::of(0.5 * xf * (1.0 + t))
            },
            Op::Gelu(a),
        )
    }

    /// Elementwise clamp; gradient passes only inside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (F::of(lo), F::of(hi));
        self.unary(a, |x| x.max(l).min(h), Op::Clamp(a, l, h))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        assert_eq!(k, k2, "matmul inner dims");
        let mut out = vec![F::zero(); m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(
            RealArray::matrix(m, n, out).expect("dims"),
            Op::MatMul(a, b),
            rg,
        )
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        assert_eq!(k, k2, "matmul_t inner dims");
        let bt = transpose_raw(self.value(b).data(), n, k);
        let mut out = vec![F::zero(); m * n];
        gemm_acc(self.value(a).data(), &bt, &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(
            RealArray::matrix(m, n, out).expect("dims"),
            Op::MatMulT(a, b),
            rg,
        )
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let (v, d) = self.dims(table);
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < v, "gather: id {id} >= {v}");
            out.extend_from_slice(t.row(id));
        }
        let rg = self.rg(table);
        self.push(
            RealArray::matrix(ids.len(), d, out).expect("dims"),
            Op::Gather(table, ids.to_vec()),
            rg,
        )
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`1×n`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (m, n) = self.dims(x);
        assert_eq!(self.dims(gamma), (1, n));
        assert_eq!(self.dims(beta), (1, n));
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![F::zero(); m * n];
        let mut rstd = vec![F::zero(); m];
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            let row = xv.row(i);
            let mean = row.iter().map(|v| v.f64()).sum::<f64>() / n as f64;
            let var = row
                .iter()
                .map(|v| (v.f64() - mean) * (v.f64() - mean))
                .sum::<f64>()
                / n as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = F::of(r);
            for j in 0..n {
                let h = F::of((row[j].f64() - mean) * r);
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            RealArray::matrix(m, n, out).expect("dims"),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Multi-head scaled dot-product attention over `rows / seq_len`
    /// independent sequences stacked row-wise. With `causal`, position `i`
    /// attends only to positions `≤ i`; masked scores are never computed.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
        causal: bool,
    ) -> Var {
        let (n, d) = self.dims(q);
        assert_eq!(self.dims(k), (n, d));
        assert_eq!(self.dims(v), (n, d));
        assert!(heads > 0 && d % heads == 0, "heads must divide width");
        assert!(seq_len > 0 && n % seq_len == 0, "rows must be whole sequences");
        let dh = d / heads;
        let t = seq_len;
        let nseq = n / t;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![F::zero(); nseq * heads * t * t];
        let mut out = vec![F::zero(); n * d];
        let mut scores = vec![0.0f64; t];
        for s in 0..nseq {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..t {
                    let jmax = if causal { i + 1 } else { t };
                    let qi = &qv[(s * t + i) * d + c0..(s * t + i) * d + c0 + dh];
                    let mut mx = f64::NEG_INFINITY;
                    for (j, sc) in scores.iter_mut().enumerate().take(jmax) {
                        let kj = &kv[(s * t + j) * d + c0..(s * t + j) * d + c0 + dh];
                        let dot: F = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum();
                        *sc = dot.f64() * scale;
                        mx = mx.max(*sc);
                    }
                    let mut z = 0.0;
                    for sc in scores.iter_mut().take(jmax) {
                        *sc = (*sc - mx).exp();
                        z += *sc;
                    }
                    let prow = &mut probs[((s * heads + h) * t + i) * t..][..t];
                    for j in 0..jmax {
                        prow[j] = F::of(scores[j] / z);
                    }
                    let orow = &mut out[(s * t + i) * d + c0..(s * t + i) * d + c0 + dh];
                    for (j, &p) in prow.iter().enumerate().take(jmax) {
                        let vj = &vv[(s * t + j) * d + c0..(s * t + j) * d + c0 + dh];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o = *o + p * x;
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            RealArray::matrix(n, d, out).expect("dims"),
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq_len,
                causal,
                probs,
            },
            rg,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum_f64();
        let rg = self.rg(a);
        self.push(RealArray::scalar(F::of(s)), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.sum_f64() / x.len() as f64;
        let rg = self.rg(a);
        self.push(RealArray::scalar(F::of(s)), Op::Mean(a), rg)
    }

    /// `m×n → m×1` row sums.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let m = x.rows();
        let out = (0..m)
            .map(|i| F::of(x.row(i).iter().map(|v| v.f64()).sum()))
            .collect();
        let rg = self.rg(a);
        self.push(RealArray::matrix(m, 1, out).expect("dims"), Op::RowSum(a), rg)
    }

    /// `m×n → m×1` Euclidean row norms.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let m = x.rows();
        let out = (0..m)
            .map(|i| F::of(row_norm_f64(x.row(i))))
            .collect();
        let rg = self.rg(a);
        self.push(RealArray::matrix(m, 1, out).expect("dims"), Op::RowNorm(a), rg)
    }

    /// `m×1` cosine similarity of matching rows; rows where either side has
    /// zero norm give 0 with zero gradient.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Var {
        let (xa, xb) = (self.value(a), self.value(b));
        xa.same_shape(xb)
            .unwrap_or_else(|e| panic!("row_cosine: {e}"));
        let m = xa.rows();
        let out = (0..m)
            .map(|i| F::of(cosine_parts(xa.row(i), xb.row(i)).0))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(
            RealArray::matrix(m, 1, out).expect("dims"),
            Op::RowCosine(a, b),
            rg,
        )
    }

    /// Mean softmax cross-entropy of `logits` rows against `target`.
    pub fn cross_entropy(&mut self, logits: Var, target: CeTarget<F>) -> Var {
        let z = self.value(logits);
        let (m, n) = (z.rows(), z.cols());
        let mut probs = vec![F::zero(); m * n];
        let mut total = 0.0f64;
        let mut count = 0usize;
        match &target {
            CeTarget::Classes(c) => assert_eq!(c.len(), m, "one class per row"),
            CeTarget::Soft(p) => assert_eq!((p.rows(), p.cols()), (m, n), "soft target shape"),
        }
        for i in 0..m {
            let row = z.row(i);
            let mx = row.iter().fold(f64::NEG_INFINITY, |a, v| a.max(v.f64()));
            let lse = mx + row.iter().map(|v| (v.f64() - mx).exp()).sum::<f64>().ln();
            for j in 0..n {
                probs[i * n + j] = F::of((row[j].f64() - lse).exp());
            }
            match &target {
                CeTarget::Classes(c) => {
                    if let Some(y) = c[i] {
                        assert!(y < n, "class {y} out of range");
                        total += lse - row[y].f64();
                        count += 1;
                    }
                }
                CeTarget::Soft(p) => {
                    let pr = p.row(i);
                    total += (0..n)
                        .map(|j| -pr[j].f64() * (row[j].f64() - lse))
                        .sum::<f64>();
                    count += 1;
                }
            }
        }
        let value = if count == 0 { 0.0 } else { total / count as f64 };
        let rg = self.rg(logits);
        self.push(
            RealArray::scalar(F::of(value)),
            Op::CrossEntropy {
                logits,
                probs,
                target,
                count,
            },
            rg,
        )
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<RealArray<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Gradients { grads };
        }
        grads[loss.0] = Some(RealArray::scalar(F::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, idx: usize, g: &RealArray<F>, grads: &mut [Option<RealArray<F>>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_with(grads, *a, |o| add_into(o, gd));
                self.acc_with(grads, *b, |o| add_into(o, gd));
            }
            Op::Sub(a, b) => {
                self.acc_with(grads, *a, |o| add_into(o, gd));
                self.acc_with(grads, *b, |o| {
                    for (x, &y) in o.iter_mut().zip(gd) {
                        *x = *x - y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc_with(grads, *a, |o| {
                    for ((x, &y), &w) in o.iter_mut().zip(gd).zip(bv) {
                        *x = *x + y * w;
                    }
                });
                self.acc_with(grads, *b, |o| {
                    for ((x, &y), &w) in o.iter_mut().zip(gd).zip(av) {
                        *x = *x + y * w;
                    }
                });
            }
            Op::AddRow(a, row) => {
                self.acc_with(grads, *a, |o| add_into(o, gd));
                let n = g.cols();
                self.acc_with(grads, *row, |o| {
                    for r in gd.chunks(n) {
                        add_into(o, r);
                    }
                });
            }
            Op::MulCol(a, col) => {
                let n = g.cols();
                let cv = self.value(*col).data();
                let av = self.value(*a).data();
                self.acc_with(grads, *a, |o| {
                    for (i, (orow, grow)) in o.chunks_mut(n).zip(gd.chunks(n)).enumerate() {
                        for (x, &y) in orow.iter_mut().zip(grow) {
                            *x = *x + y * cv[i];
                        }
                    }
                });
                self.acc_with(grads, *col, |o| {
                    for (i, (grow, arow)) in gd.chunks(n).zip(av.chunks(n)).enumerate() {
                        let s: f64 = grow.iter().zip(arow).map(|(y, x)| y.f64() * x.f64()).sum();
                        o[i] = o[i] + F::of(s);
                    }
                });
            }
            Op::Scale(a, k) => {
                self.acc_with(grads, *a, |o| {
                    for (x, &y) in o.iter_mut().zip(gd) {
                        *x = *x + y * *k;
                    }
                });
            }
            Op::Offset(a) => self.acc_with(grads, *a, |o| add_into(o, gd)),
            Op::Exp(a) => {
                let yv = node.value.data();
                self.acc_with(grads, *a, |o| {
                    for ((x, &y), &e) in o.iter_mut().zip(gd).zip(yv) {
                        *x = *x + y * e;
                    }
                });
            }
            Op::Ln(a) => {
                let av = self.value(*a).data();
                self.acc_with(grads, *a, |o| {
                    for ((x, &y), &v) in o.iter_mut().zip(gd).zip(av) {
                        *x = *x + y / v;
                    }
                });
            }
            Op::Abs(a) => {
                let av = self.value(*a).data();
                self.acc_with(grads, *a, |o| {
                    for ((x, &y), &v) in o.iter_mut().zip(gd).zip(av) {
                        if v > F::zero() {
                            *x = *x + y;
                        } else if v < F::zero() {
                            *x = *x - y;
                        }
                    }
                });
            }
            Op::Square(a) => {
                let av = self.value(*a).data();
                let two = F::of(2.0);
                self.acc_with(grads, *a, |o| {
                    for ((x, &y), &v) in o.iter_mut().zip(gd).zip(av) {
                        *x = *x + two * v * y;
                    }
                });
            }
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                self.acc_with(grads, *a, |o| {
                    for ((x, &y), &v) in o.iter_mut().zip(gd).zip(av) {
                        let u = v.f64();
                        let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
                        let d = 0.5 * (1.0 + t)
                            + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u);
                        *x = *x + y * F::of(d);
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let av = self.value(*a).data();
                self.acc_with(grads, *a, |o| {
                    for ((x, &y), &v) in o.iter_mut().zip(gd).zip(av) {
                        if v >= *lo && v <= *hi {
                            *x = *x + y;
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = g.cols();
                if self.rg(*a) {
                    let bt = transpose_raw(self.value(*b).data(), k, n);
                    self.acc_with(grads, *a, |o| gemm_acc(gd, &bt, o, m, n, k));
                }
                let av = self.value(*a).data();
                self.acc_with(grads, *b, |o| gemm_tn_acc(av, gd, o, m, k, n));
            }
            Op::MatMulT(a, b) => {
                let (m, k) = self.dims(*a);
                let n = g.cols();
                let bv = self.value(*b).data();
                self.acc_with(grads, *a, |o| gemm_acc(gd, bv, o, m, n, k));
                let av = self.value(*a).data();
                self.acc_with(grads, *b, |o| gemm_tn_acc(gd, av, o, m, n, k));
            }
            Op::Gather(table, ids) => {
                let d = g.cols();
                self.acc_with(grads, *table, |o| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut o[id * d..(id + 1) * d], &gd[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = g.cols();
                let gam = self.value(*gamma).data();
                self.acc_with(grads, *x, |o| {
                    let mut dxh = vec![0.0f64; n];
                    for (i, (orow, grow)) in o.chunks_mut(n).zip(gd.chunks(n)).enumerate() {
                        let xh = &xhat[i * n..(i + 1) * n];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..n {
                            dxh[j] = grow[j].f64() * gam[j].f64();
                            m1 += dxh[j];
                            m2 += dxh[j] * xh[j].f64();
                        }
                        m1 /= n as f64;
                        m2 /= n as f64;
                        let r = rstd[i].f64();
                        for j in 0..n {
                            orow[j] = orow[j] + F::of(r * (dxh[j] - m1 - xh[j].f64() * m2));
                        }
                    }
                });
                self.acc_with(grads, *gamma, |o| {
                    for (grow, xrow) in gd.chunks(n).zip(xhat.chunks(n)) {
                        for ((x, &y), &h) in o.iter_mut().zip(grow).zip(xrow) {
                            *x = *x + y * h;
                        }
                    }
                });
                self.acc_with(grads, *beta, |o| {
                    for grow in gd.chunks(n) {
                        add_into(o, grow);
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq_len,
                causal,
                probs,
            } => self.attention_backward(grads, gd, *q, *k, *v, *heads, *seq_len, *causal, probs),
            Op::Sum(a) => {
                let y = gd[0];
                self.acc_with(grads, *a, |o| {
                    for x in o.iter_mut() {
                        *x = *x + y;
                    }
                });
            }
            Op::Mean(a) => {
                let y = gd[0] / F::of(self.value(*a).len() as f64);
                self.acc_with(grads, *a, |o| {
                    for x in o.iter_mut() {
                        *x = *x + y;
                    }
                });
            }
            Op::RowSum(a) => {
                let n = self.value(*a).cols();
                self.acc_with(grads, *a, |o| {
                    for (orow, &y) in o.chunks_mut(n).zip(gd) {
                        for x in orow {
                            *x = *x + y;
                        }
                    }
                });
            }
            Op::RowNorm(a) => {
                let av = self.value(*a);
                let n = av.cols();
                let norms = node.value.data();
                self.acc_with(grads, *a, |o| {
                    for (i, orow) in o.chunks_mut(n).enumerate() {
                        let nr = norms[i];
                        if nr == F::zero() {
                            continue;
                        }
                        let c = gd[i] / nr;
                        for (x, &v) in orow.iter_mut().zip(av.row(i)) {
                            *x = *x + c * v;
                        }
                    }
                });
            }
            Op::RowCosine(a, b) => {
                let (xa, xb) = (self.value(*a), self.value(*b));
                let n = xa.cols();
                let parts: Vec<(f64, f64, f64)> = (0..xa.rows())
                    .map(|i| cosine_parts(xa.row(i), xb.row(i)))
                    .collect();
                self.acc_with(grads, *a, |o| {
                    for (i, orow) in o.chunks_mut(n).enumerate() {
                        let (c, na, nb) = parts[i];
                        if na == 0.0 || nb == 0.0 {
                            continue;
                        }
                        let y = gd[i].f64();
                        for ((x, &va), &vb) in orow.iter_mut().zip(xa.row(i)).zip(xb.row(i)) {
                            let d = vb.f64() / (na * nb) - c * va.f64() / (na * na);
                            *x = *x + F::of(y * d);
                        }
                    }
                });
                self.acc_with(grads, *b, |o| {
                    for (i, orow) in o.chunks_mut(n).enumerate() {
                        let (c, na, nb) = parts[i];
                        if na == 0.0 || nb == 0.0 {
                            continue;
                        }
                        let y = gd[i].f64();
                        for ((x, &va), &vb) in orow.iter_mut().zip(xa.row(i)).zip(xb.row(i)) {
                            let d = va.f64() / (na * nb) - c * vb.f64() / (nb * nb);
                            *x = *x + F::of(y * d);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                probs,
                target,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let n = self.value(*logits).cols();
                let scale = gd[0].f64() / *count as f64;
                self.acc_with(grads, *logits, |o| match target {
                    CeTarget::Classes(c) => {
                        for (i, cls) in c.iter().enumerate() {
                            let Some(y) = cls else { continue };
                            let orow = &mut o[i * n..(i + 1) * n];
                            let prow = &probs[i * n..(i + 1) * n];
                            for j in 0..n {
                                let ind = if j == *y { 1.0 } else { 0.0 };
                                orow[j] = orow[j] + F::of(scale * (prow[j].f64() - ind));
                            }
                        }
                    }
                    CeTarget::Soft(p) => {
                        for i in 0..p.rows() {
                            let orow = &mut o[i * n..(i + 1) * n];
                            let prow = &probs[i * n..(i + 1) * n];
                            let qrow = p.row(i);
                            let mass: f64 = qrow.iter().map(|q| q.f64()).sum();
                            for j in 0..n {
                                let d = prow[j].f64() * mass - qrow[j].f64();
                                orow[j] = orow[j] + F::of(scale * d);
                            }
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        grads: &mut [Option<RealArray<F>>],
        gd: &[F],
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        t: usize,
        causal: bool,
        probs: &[F],
    ) {
        let (n, d) = self.dims(q);
        let dh = d / heads;
        let nseq = n / t;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut gq = vec![F::zero(); n * d];
        let mut gk = vec![F::zero(); n * d];
        let mut gv = vec![F::zero(); n * d];
        let mut dp = vec![0.0f64; t];
        let sc = F::of(scale);
        for s in 0..nseq {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..t {
                    let jmax = if causal { i + 1 } else { t };
                    let prow = &probs[((s * heads + h) * t + i) * t..][..t];
                    let go = &gd[(s * t + i) * d + c0..(s * t + i) * d + c0 + dh];
                    let mut dot = 0.0;
                    for j in 0..jmax {
                        let vj = &vv[(s * t + j) * d + c0..(s * t + j) * d + c0 + dh];
                        let x: F = go.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                        dp[j] = x.f64();
                        dot += dp[j] * prow[j].f64();
                        let gvj = &mut gv[(s * t + j) * d + c0..(s * t + j) * d + c0 + dh];
                        for (o, &y) in gvj.iter_mut().zip(go) {
                            *o = *o + prow[j] * y;
                        }
                    }
                    let qi_off = (s * t + i) * d + c0;
                    for j in 0..jmax {
                        let ds = F::of(prow[j].f64() * (dp[j] - dot)) * sc;
                        if ds == F::zero() {
                            continue;
                        }
                        let kj_off = (s * t + j) * d + c0;
                        for c in 0..dh {
                            gq[qi_off + c] = gq[qi_off + c] + ds * kv[kj_off + c];
                            gk[kj_off + c] = gk[kj_off + c] + ds * qv[qi_off + c];
                        }
                    }
                }
            }
        }
        self.acc_with(grads, q, |o| add_into(o, &gq));
        self.acc_with(grads, k, |o| add_into(o, &gk));
        self.acc_with(grads, v, |o| add_into(o, &gv));
    }

    fn acc_with(&self, grads: &mut [Option<RealArray<F>>], v: Var, f: impl FnOnce(&mut [F])) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(RealArray::zeros(self.value(v).shape()));
        }
        f(slot.as_mut().expect("just set").data_mut());
    }
}

fn add_into<F: Real>(o: &mut [F], g: &[F]) {
    for (x, &y) in o.iter_mut().zip(g) {
        *x = *x + y;
    }
}

fn row_norm_f64<F: Real>(r: &[F]) -> f64 {
    r.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt()
}

/// (cosine, |a|, |b|) with cosine 0 when either norm vanishes.
fn cosine_parts<F: Real>(a: &[F], b: &[F]) -> (f64, f64, f64) {
    let na = row_norm_f64(a);
    let nb = row_norm_f64(b);
    if na == 0.0 || nb == 0.0 {
        return (0.0, na, nb);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x.f64() * y.f64()).sum();
    (dot / (na * nb), na, nb)
}

/// Result of [`Tape::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<RealArray<F>>>,
}

impl<F: Real> Gradients<F> {
    /// `None` when `v` does not depend on any trainable leaf.
    pub fn get(&self, v: Var) -> Option<&RealArray<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<RealArray<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> RealArray<f64> {
        RealArray::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn product_rule() {
        let mut t = Tape::<f64>::new();
        let x = t.param(m(1, 2, &[3.0, -2.0]));
        let y = t.mul(x, x);
        let s = t.sum(y);
        let g = t.backward(s);
        assert_eq!(g.get(x).unwrap().data(), &[6.0, -4.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::<f64>::new();
        let w = t.constant(m(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let x = t.param(m(1, 2, &[1.0, 1.0]));
        let y = t.matmul(x, w);
        let s = t.sum(y);
        let g = t.backward(s);
        assert!(g.get(w).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn causal_attention_ignores_future_bitwise() {
        let mk = |last: f64| {
            let mut t = Tape::<f32>::new();
            let data: Vec<f32> = (0..12)
                .map(|i| if i >= 8 { last as f32 } else { (i as f32).sin() })
                .collect();
            let x = t.constant(RealArray::matrix(3, 4, data).unwrap());
            let o = t.attention(x, x, x, 2, 3, true);
            t.value(o).clone()
        };
        let a = mk(0.3);
        let b = mk(-7.0);
        assert_eq!(&a.data()[..8], &b.data()[..8]);
        assert_ne!(&a.data()[8..], &b.data()[8..]);
    }

    #[test]
    fn cross_entropy_uniform() {
        let mut t = Tape::<f64>::new();
        let z = t.param(m(1, 4, &[0.0; 4]));
        let target = m(1, 4, &[0.25; 4]);
        let l = t.cross_entropy(z, CeTarget::Soft(target));
        assert!((t.scalar(l) - 4f64.ln()).abs() < 1e-12);
        let g = t.backward(l);
        assert!(g.get(z).unwrap().max_abs() < 1e-12);
    }
}
