// SPDX-License-Identifier: MIT OR Apache-2.0

use std::sync::Arc;

use super::{AutogradError, Real, Tensor};

/// Epsilon added to the variance inside layer norm's square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `sqrt(2 / pi)` for the tanh approximation of GELU.
const GELU_C: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the tanh approximation of GELU.
const GELU_A: f64 = 0.044_715;

type Result<T> = std::result::Result<T, AutogradError>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Scalar,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize, Bcast),
    Sub(usize, usize, Bcast),
    Mul(usize, usize, Bcast),
    Scale(usize, f64),
    Offset(usize),
    Transpose(usize),
    Softmax(usize),
    LayerNorm(usize, usize, usize),
    Gelu(usize),
    Embedding(usize, Arc<Vec<usize>>),
    Sigmoid(usize),
    Log(usize),
    Exp(usize),
    Clamp(usize, f64, f64),
    CrossEntropy(usize, Arc<Vec<Option<usize>>>),
    KlDiv(usize, usize),
    Sum(usize),
    SliceCols(usize, usize),
    SliceRows(usize, usize),
    Index(usize, usize),
    Row(usize, usize),
    ReplaceRow(usize, usize, usize),
    MaskFill(usize, Arc<Vec<bool>>),
}

#[derive(Debug, Clone)]
struct Node<F> {
    value: Tensor<F>,
    op: Op,
    requires_grad: bool,
}

/// Single-use record of a computation.
///
/// Nodes are appended in evaluation order, so the record is topologically
/// sorted by construction. A tape is not `Sync`-shared; run independent
/// passes on independent tapes.
#[derive(Debug, Clone, Default)]
pub struct Tape<F = f32> {
    nodes: Vec<Node<F>>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<F = f32> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Takes ownership of a gradient, leaving `None` behind.
    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> AutogradError {
    AutogradError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> AutogradError {
    AutogradError::InvalidArgument {
        op,
        msg: msg.into(),
    }
}

fn as_matrix(op: &'static str, t: &[usize]) -> Result<(usize, usize)> {
    match *t {
        [r, c] => Ok((r, c)),
        _ => Err(invalid(op, format!("expected a matrix, got shape {t:?}"))),
    }
}

fn bcast_kind(op: &'static str, a: &[usize], b: &[usize]) -> Result<Bcast> {
    let blen: usize = b.iter().product();
    if a == b {
        Ok(Bcast::Same)
    } else if blen == 1 {
        Ok(Bcast::Scalar)
    } else if b.len() == 1 && a.last() == Some(&b[0]) {
        Ok(Bcast::Row)
    } else {
        Err(shape_err(op, a, b))
    }
}

#[inline]
fn bidx(kind: Bcast, i: usize, cols: usize) -> usize {
    match kind {
        Bcast::Same => i,
        Bcast::Row => i % cols,
        Bcast::Scalar => 0,
    }
}

fn sigmoid64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise log-softmax in `f64`.
fn log_softmax_row<F: Real>(row: &[F]) -> Vec<f64> {
    let max = row
        .iter()
        .map(|x| x.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return vec![f64::NAN; row.len()];
    }
    let lse = max
        + row
            .iter()
            .map(|x| (x.as_f64() - max).exp())
            .sum::<f64>()
            .ln();
    row.iter().map(|x| x.as_f64() - lse).collect()
}

/// Row-wise layer-norm statistics: (normalized row, inverse std).
fn normalize_row<F: Real>(row: &[F]) -> (Vec<f64>, f64) {
    let n = row.len() as f64;
    let mean = row.iter().map(|x| x.as_f64()).sum::<f64>() / n;
    let var = row
        .iter()
        .map(|x| {
            let d = x.as_f64() - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    (row.iter().map(|x| (x.as_f64() - mean) * inv).collect(), inv)
}

fn gelu64(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad64(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[usize]) -> bool {
        vs.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(F) -> F) -> Var {
        let x = &self.nodes[a.0].value;
        let out = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect());
        let rg = self.rg(&[a.0]);
        self.push(out, op, rg)
    }

    /// `a · b` for matrices `[m, k] × [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = as_matrix("matmul", av.shape())?;
        let (k2, n) = as_matrix("matmul", bv.shape())?;
        if k != k2 {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let out = matmul_raw(av.data(), bv.data(), m, k, n);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a.0, b.0), rg))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
        mk: impl Fn(usize, usize, Bcast) -> Op,
    ) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let kind = bcast_kind(name, av.shape(), bv.shape())?;
        let cols = av.cols();
        let (ad, bd) = (av.data(), bv.data());
        let out: Vec<F> = (0..ad.len())
            .map(|i| f(ad[i], bd[bidx(kind, i, cols)]))
            .collect();
        let out = Tensor::from_parts(av.shape().to_vec(), out);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(out, mk(a.0, b.0, kind), rg))
    }

    /// Elementwise sum. `b` may match `a`, be a row vector over `a`'s last
    /// axis, or hold a single element.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cf = F::from_f64(c);
        self.unary(a, Op::Scale(a.0, c), |x| x * cf)
    }

    /// Adds the constant `c` to every element.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let cf = F::from_f64(c);
        self.unary(a, Op::Offset(a.0), |x| x + cf)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let (r, c) = as_matrix("transpose", av.shape())?;
        let d = av.data();
        let out = Tensor::from_fn(vec![c, r], |i| d[(i % r) * c + i / r]);
        let rg = self.rg(&[a.0]);
        Ok(self.push(out, Op::Transpose(a.0), rg))
    }

    /// Softmax over the last axis, accumulated in `f64`.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let cols = av.cols();
        let mut out = Vec::with_capacity(av.len());
        for r in 0..av.rows() {
            out.extend(log_softmax_row(av.row(r)).into_iter().map(|l| F::from_f64(l.exp())));
        }
        let out = Tensor::from_parts(av.shape().to_vec(), out);
        debug_assert_eq!(out.cols(), cols);
        let rg = self.rg(&[a.0]);
        self.push(out, Op::Softmax(a.0), rg)
    }

    /// Layer norm over the last axis with affine `gain` and `bias`.
    ///
    /// A zero-variance row normalizes to zeros (the epsilon keeps the
    /// inverse standard deviation finite).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let (gv, bv) = (&self.nodes[gain.0].value, &self.nodes[bias.0].value);
        let d = xv.cols();
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(shape_err("layer_norm", xv.shape(), gv.shape()));
        }
        let mut out = Vec::with_capacity(xv.len());
        for r in 0..xv.rows() {
            let (xhat, _) = normalize_row(xv.row(r));
            for (j, h) in xhat.into_iter().enumerate() {
                out.push(F::from_f64(h * gv.data()[j].as_f64() + bv.data()[j].as_f64()));
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(&[x.0, gain.0, bias.0]);
        Ok(self.push(out, Op::LayerNorm(x.0, gain.0, bias.0), rg))
    }

    /// GELU, tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a.0), |x| F::from_f64(gelu64(x.as_f64())))
    }

    /// Gathers rows of `table` (`[vocab, d]`) for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = &self.nodes[table.0].value;
        let (v, d) = as_matrix("embedding_lookup", tv.shape())?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(invalid(
                "embedding_lookup",
                format!("id {bad} out of range for table with {v} rows"),
            ));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tv.row(i));
        }
        let out = Tensor::from_parts(vec![ids.len(), d], out);
        let rg = self.rg(&[table.0]);
        Ok(self.push(out, Op::Embedding(table.0, Arc::new(ids.to_vec())), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a.0), |x| F::from_f64(sigmoid64(x.as_f64())))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a.0), |x| x.ln())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a.0), |x| x.exp())
    }

    /// Clamps to `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(invalid("clamp", format!("empty interval [{lo}, {hi}]")));
        }
        let (l, h) = (F::from_f64(lo), F::from_f64(hi));
        Ok(self.unary(a, Op::Clamp(a.0, lo, hi), |x| x.max(l).min(h)))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` (`[rows, vocab]`). `None` targets are skipped.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lv = &self.nodes[logits.0].value;
        let vocab = lv.cols();
        if lv.rows() != targets.len() {
            return Err(shape_err("cross_entropy", lv.shape(), &[targets.len()]));
        }
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= vocab {
                    return Err(invalid("cross_entropy", format!("target {t} >= vocab {vocab}")));
                }
                total -= log_softmax_row(lv.row(r))[t];
                count += 1;
            }
        }
        if count == 0 {
            return Err(invalid("cross_entropy", "no targets"));
        }
        let out = Tensor::scalar(F::from_f64(total / count as f64));
        let rg = self.rg(&[logits.0]);
        Ok(self.push(out, Op::CrossEntropy(logits.0, Arc::new(targets.to_vec())), rg))
    }

    /// `KL(softmax(p) ‖ softmax(q))`, summed over rows of the last axis.
    pub fn kl_divergence(&mut self, p_logits: Var, q_logits: Var) -> Result<Var> {
        let (pv, qv) = (&self.nodes[p_logits.0].value, &self.nodes[q_logits.0].value);
        if pv.shape() != qv.shape() {
            return Err(shape_err("kl_divergence", pv.shape(), qv.shape()));
        }
        let mut total = 0.0f64;
        for r in 0..pv.rows() {
            let (lp, lq) = (log_softmax_row(pv.row(r)), log_softmax_row(qv.row(r)));
            total += kl_row(&lp, &lq);
        }
        let out = Tensor::scalar(F::from_f64(total));
        let rg = self.rg(&[p_logits.0, q_logits.0]);
        Ok(self.push(out, Op::KlDiv(p_logits.0, q_logits.0), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let s: f64 = av.data().iter().map(|x| x.as_f64()).sum();
        let rg = self.rg(&[a.0]);
        self.push(Tensor::scalar(F::from_f64(s)), Op::Sum(a.0), rg)
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let (r, c) = as_matrix("slice_cols", av.shape())?;
        if start + len > c {
            return Err(invalid("slice_cols", format!("{start}+{len} exceeds {c} columns")));
        }
        let d = av.data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&d[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(&[a.0]);
        Ok(self.push(Tensor::from_parts(vec![r, len], out), Op::SliceCols(a.0, start), rg))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let (r, c) = as_matrix("slice_rows", av.shape())?;
        if start + len > r {
            return Err(invalid("slice_rows", format!("{start}+{len} exceeds {r} rows")));
        }
        let out = av.data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(&[a.0]);
        Ok(self.push(Tensor::from_parts(vec![len, c], out), Op::SliceRows(a.0, start), rg))
    }

    /// Element `idx` of the flattened tensor, as a one-element tensor.
    pub fn index(&mut self, a: Var, idx: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if idx >= av.len() {
            return Err(invalid("index", format!("{idx} out of range for {:?}", av.shape())));
        }
        let out = Tensor::scalar(av.data()[idx]);
        let rg = self.rg(&[a.0]);
        Ok(self.push(out, Op::Index(a.0, idx), rg))
    }

    /// Row `r` of a matrix as a vector over the last axis.
    pub fn row(&mut self, a: Var, r: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let (rows, _) = as_matrix("row", av.shape())?;
        if r >= rows {
            return Err(invalid("row", format!("row {r} out of range for {rows} rows")));
        }
        let out = Tensor::vector(av.row(r).to_vec());
        let rg = self.rg(&[a.0]);
        Ok(self.push(out, Op::Row(a.0, r), rg))
    }

    /// Copy of matrix `a` with row `r` replaced by vector `v`.
    pub fn replace_row(&mut self, a: Var, r: usize, v: Var) -> Result<Var> {
        let (av, vv) = (&self.nodes[a.0].value, &self.nodes[v.0].value);
        let (rows, cols) = as_matrix("replace_row", av.shape())?;
        if r >= rows || vv.len() != cols {
            return Err(shape_err("replace_row", av.shape(), vv.shape()));
        }
        let mut out = av.to_vec();
        out[r * cols..(r + 1) * cols].copy_from_slice(vv.data());
        let out = Tensor::from_parts(av.shape().to_vec(), out);
        let rg = self.rg(&[a.0, v.0]);
        Ok(self.push(out, Op::ReplaceRow(a.0, r, v.0), rg))
    }

    /// Sets entries where `allowed` is false to negative infinity.
    pub fn mask_fill(&mut self, a: Var, allowed: Arc<Vec<bool>>) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if allowed.len() != av.len() {
            return Err(shape_err("mask_fill", av.shape(), &[allowed.len()]));
        }
        let out: Vec<F> = av
            .data()
            .iter()
            .zip(allowed.iter())
            .map(|(&x, &ok)| if ok { x } else { F::neg_infinity() })
            .collect();
        let out = Tensor::from_parts(av.shape().to_vec(), out);
        let rg = self.rg(&[a.0]);
        Ok(self.push(out, Op::MaskFill(a.0, allowed), rg))
    }

    /// Reverse pass from `output`, seeded with `seed` (same shape).
    ///
    /// Consumes the tape: a second call returns [`AutogradError::TapeConsumed`].
    /// Every leaf created with `requires_grad` receives a gradient, zero if
    /// it did not influence `output`.
    pub fn backward(&mut self, output: Var, seed: Tensor<F>) -> Result<Gradients<F>> {
        if self.consumed {
            return Err(AutogradError::TapeConsumed);
        }
        let out_shape = self.nodes[output.0].value.shape();
        if seed.shape() != out_shape {
            return Err(AutogradError::SeedShape {
                seed: seed.shape().to_vec(),
                output: out_shape.to_vec(),
            });
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<F>>> = vec![None; n];
        grads[output.0] = Some(seed.to_vec());

        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if !node.requires_grad {
                    return None;
                }
                match (g, &node.op) {
                    (Some(g), _) => Some(Tensor::from_parts(node.value.shape().to_vec(), g)),
                    (None, Op::Leaf) => Some(Tensor::zeros(node.value.shape().to_vec())),
                    (None, _) => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    /// Convenience for scalar outputs: seeds the reverse pass with 1.
    pub fn backward_scalar(&mut self, output: Var) -> Result<Gradients<F>> {
        let shape = self.nodes[output.0].value.shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(invalid("backward", format!("output shape {shape:?} is not scalar")));
        }
        self.backward(output, Tensor::from_parts(shape, vec![F::one()]))
    }

    fn backprop_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        let wants = |j: usize| self.nodes[j].requires_grad;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let nn = bv.shape()[1];
                if wants(*a) {
                    // dA = G · Bᵀ
                    let mut ga = vec![F::zero(); m * k];
                    let bd = bv.data();
                    for r in 0..m {
                        for kk in 0..k {
                            let mut s = F::zero();
                            for c in 0..nn {
                                s = s + g[r * nn + c] * bd[kk * nn + c];
                            }
                            ga[r * k + kk] = s;
                        }
                    }
                    accumulate(grads, *a, &ga);
                }
                if wants(*b) {
                    // dB = Aᵀ · G
                    let mut gb = vec![F::zero(); k * nn];
                    let ad = av.data();
                    for r in 0..m {
                        for kk in 0..k {
                            let x = ad[r * k + kk];
                            if x == F::zero() {
                                continue;
                            }
                            let row = &mut gb[kk * nn..(kk + 1) * nn];
                            for (dst, &gv) in row.iter_mut().zip(&g[r * nn..(r + 1) * nn]) {
                                *dst = *dst + x * gv;
                            }
                        }
                    }
                    accumulate(grads, *b, &gb);
                }
            }
            Op::Add(a, b, kind) | Op::Sub(a, b, kind) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -F::one()
                } else {
                    F::one()
                };
                if wants(*a) {
                    accumulate(grads, *a, g);
                }
                if wants(*b) {
                    let gb = reduce_bcast(g, *kind, val(*b).len(), node.value.cols(), |x, _| x * sign);
                    accumulate(grads, *b, &gb);
                }
            }
            Op::Mul(a, b, kind) => {
                let (av, bv) = (val(*a), val(*b));
                let cols = node.value.cols();
                if wants(*a) {
                    let bd = bv.data();
                    let ga: Vec<F> = (0..g.len()).map(|j| g[j] * bd[bidx(*kind, j, cols)]).collect();
                    accumulate(grads, *a, &ga);
                }
                if wants(*b) {
                    let ad = av.data();
                    let gb = reduce_bcast(g, *kind, bv.len(), cols, |x, j| x * ad[j]);
                    accumulate(grads, *b, &gb);
                }
            }
            Op::Scale(a, c) => {
                let cf = F::from_f64(*c);
                let ga: Vec<F> = g.iter().map(|&x| x * cf).collect();
                accumulate(grads, *a, &ga);
            }
            Op::Offset(a) => accumulate(grads, *a, g),
            Op::Transpose(a) => {
                // output is [c, r]; input is [r, c]
                let (r, c) = (val(*a).shape()[0], val(*a).shape()[1]);
                let ga: Vec<F> = (0..r * c).map(|idx| g[(idx % c) * r + idx / c]).collect();
                accumulate(grads, *a, &ga);
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let cols = node.value.cols();
                let mut ga = vec![F::zero(); g.len()];
                for r in 0..node.value.rows() {
                    let sl = r * cols..(r + 1) * cols;
                    let dot: f64 = y[sl.clone()]
                        .iter()
                        .zip(&g[sl.clone()])
                        .map(|(a, b)| a.as_f64() * b.as_f64())
                        .sum();
                    for j in sl {
                        ga[j] = F::from_f64(y[j].as_f64() * (g[j].as_f64() - dot));
                    }
                }
                accumulate(grads, *a, &ga);
            }
            Op::LayerNorm(x, gain, bias) => {
                let xv = val(*x);
                let gd = val(*gain).data();
                let d = xv.cols();
                let mut gx = vec![F::zero(); xv.len()];
                let mut ggain = vec![0.0f64; d];
                let mut gbias = vec![0.0f64; d];
                for r in 0..xv.rows() {
                    let (xhat, inv) = normalize_row(xv.row(r));
                    let gr = &g[r * d..(r + 1) * d];
                    let mut mean_gh = 0.0;
                    let mut mean_ghx = 0.0;
                    let gh: Vec<f64> = (0..d)
                        .map(|j| {
                            let gj = gr[j].as_f64();
                            ggain[j] += gj * xhat[j];
                            gbias[j] += gj;
                            let v = gj * gd[j].as_f64();
                            mean_gh += v;
                            mean_ghx += v * xhat[j];
                            v
                        })
                        .collect();
                    mean_gh /= d as f64;
                    mean_ghx /= d as f64;
                    for j in 0..d {
                        gx[r * d + j] = F::from_f64(inv * (gh[j] - mean_gh - xhat[j] * mean_ghx));
                    }
                }
                if wants(*x) {
                    accumulate(grads, *x, &gx);
                }
                if wants(*gain) {
                    let v: Vec<F> = ggain.into_iter().map(F::from_f64).collect();
                    accumulate(grads, *gain, &v);
                }
                if wants(*bias) {
                    let v: Vec<F> = gbias.into_iter().map(F::from_f64).collect();
                    accumulate(grads, *bias, &v);
                }
            }
            Op::Gelu(a) => {
                let xd = val(*a).data();
                let ga: Vec<F> = g
                    .iter()
                    .zip(xd)
                    .map(|(&gv, &x)| gv * F::from_f64(gelu_grad64(x.as_f64())))
                    .collect();
                accumulate(grads, *a, &ga);
            }
            Op::Embedding(table, ids) => {
                let tv = val(*table);
                let d = tv.cols();
                let mut gt = vec![F::zero(); tv.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] = gt[id * d + j] + g[r * d + j];
                    }
                }
                accumulate(grads, *table, &gt);
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let ga: Vec<F> = g
                    .iter()
                    .zip(y)
                    .map(|(&gv, &s)| gv * s * (F::one() - s))
                    .collect();
                accumulate(grads, *a, &ga);
            }
            Op::Log(a) => {
                let xd = val(*a).data();
                let ga: Vec<F> = g.iter().zip(xd).map(|(&gv, &x)| gv / x).collect();
                accumulate(grads, *a, &ga);
            }
            Op::Exp(a) => {
                let y = node.value.data();
                let ga: Vec<F> = g.iter().zip(y).map(|(&gv, &e)| gv * e).collect();
                accumulate(grads, *a, &ga);
            }
            Op::Clamp(a, lo, hi) => {
                let xd = val(*a).data();
                let ga: Vec<F> = g
                    .iter()
                    .zip(xd)
                    .map(|(&gv, &x)| {
                        let xf = x.as_f64();
                        if xf >= *lo && xf <= *hi {
                            gv
                        } else {
                            F::zero()
                        }
                    })
                    .collect();
                accumulate(grads, *a, &ga);
            }
            Op::CrossEntropy(logits, targets) => {
                let lv = val(*logits);
                let vocab = lv.cols();
                let count = targets.iter().filter(|t| t.is_some()).count() as f64;
                let scale = g[0].as_f64() / count;
                let mut gl = vec![F::zero(); lv.len()];
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let lp = log_softmax_row(lv.row(r));
                    for j in 0..vocab {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        gl[r * vocab + j] = F::from_f64(scale * (lp[j].exp() - onehot));
                    }
                }
                accumulate(grads, *logits, &gl);
            }
            Op::KlDiv(p, q) => {
                let (pv, qv) = (val(*p), val(*q));
                let cols = pv.cols();
                let g0 = g[0].as_f64();
                let mut gp = vec![F::zero(); pv.len()];
                let mut gq = vec![F::zero(); qv.len()];
                for r in 0..pv.rows() {
                    let (lp, lq) = (log_softmax_row(pv.row(r)), log_softmax_row(qv.row(r)));
                    let kl = kl_row(&lp, &lq);
                    for j in 0..cols {
                        let pj = lp[j].exp();
                        let diff = if pj > 0.0 { lp[j] - lq[j] } else { 0.0 };
                        gp[r * cols + j] = F::from_f64(g0 * pj * (diff - kl));
                        gq[r * cols + j] = F::from_f64(g0 * (lq[j].exp() - pj));
                    }
                }
                if wants(*p) {
                    accumulate(grads, *p, &gp);
                }
                if wants(*q) {
                    accumulate(grads, *q, &gq);
                }
            }
            Op::Sum(a) => {
                let ga = vec![g[0]; val(*a).len()];
                accumulate(grads, *a, &ga);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = (val(*a).shape()[0], val(*a).shape()[1]);
                let len = node.value.cols();
                let mut ga = vec![F::zero(); r * c];
                for i in 0..r {
                    ga[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                accumulate(grads, *a, &ga);
            }
            Op::SliceRows(a, start) => {
                let c = val(*a).cols();
                let mut ga = vec![F::zero(); val(*a).len()];
                ga[start * c..start * c + g.len()].copy_from_slice(g);
                accumulate(grads, *a, &ga);
            }
            Op::Index(a, idx) => {
                let mut ga = vec![F::zero(); val(*a).len()];
                ga[*idx] = g[0];
                accumulate(grads, *a, &ga);
            }
            Op::Row(a, r) => {
                let c = val(*a).cols();
                let mut ga = vec![F::zero(); val(*a).len()];
                ga[r * c..(r + 1) * c].copy_from_slice(g);
                accumulate(grads, *a, &ga);
            }
            Op::ReplaceRow(a, r, v) => {
                let c = node.value.cols();
                if wants(*a) {
                    let mut ga = g.to_vec();
                    ga[r * c..(r + 1) * c].iter_mut().for_each(|x| *x = F::zero());
                    accumulate(grads, *a, &ga);
                }
                if wants(*v) {
                    accumulate(grads, *v, &g[r * c..(r + 1) * c]);
                }
            }
            Op::MaskFill(a, allowed) => {
                let ga: Vec<F> = g
                    .iter()
                    .zip(allowed.iter())
                    .map(|(&gv, &ok)| if ok { gv } else { F::zero() })
                    .collect();
                accumulate(grads, *a, &ga);
            }
        }
    }
}

fn kl_row(lp: &[f64], lq: &[f64]) -> f64 {
    lp.iter()
        .zip(lq)
        .map(|(&a, &b)| {
            let p = a.exp();
            if p > 0.0 {
                p * (a - b)
            } else {
                0.0
            }
        })
        .sum()
}

fn reduce_bcast<F: Real>(
    g: &[F],
    kind: Bcast,
    blen: usize,
    cols: usize,
    f: impl Fn(F, usize) -> F,
) -> Vec<F> {
    match kind {
        Bcast::Same => g.iter().enumerate().map(|(j, &x)| f(x, j)).collect(),
        Bcast::Row => {
            let mut acc = vec![0.0f64; blen];
            for (j, &x) in g.iter().enumerate() {
                acc[j % cols] += f(x, j).as_f64();
            }
            acc.into_iter().map(F::from_f64).collect()
        }
        Bcast::Scalar => {
            let s: f64 = g.iter().enumerate().map(|(j, &x)| f(x, j).as_f64()).sum();
            vec![F::from_f64(s); blen]
        }
    }
}

fn accumulate<F: Real>(grads: &mut [Option<Vec<F>>], idx: usize, g: &[F]) {
    match &mut grads[idx] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

pub(crate) fn matmul_raw<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for r in 0..m {
        let orow = &mut out[r * n..(r + 1) * n];
        for kk in 0..k {
            let x = a[r * k + kk];
            if x == F::zero() {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[kk * n..(kk + 1) * n]) {
                *o = *o + x * bv;
            }
        }
    }
    out
}
