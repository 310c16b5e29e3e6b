use std::borrow::Cow;
use std::collections::BTreeMap;

use super::gemm::{gemm, Layout};
use super::{NumericsError, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    MatMul { a: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Softplus(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    L1Norm(Var),
    L2Norm(Var),
    Conv3x3 { x: Var, k: Var, b: Var },
    MeanOverTime(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    GatherRows { table: Var, ids: Vec<usize> },
    SliceRows { a: Var, start: usize },
    MixtureWeights { kappa: Var, beta: Var, logits: Var },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Affine { x, w, b } | Op::Conv3x3 { x, k: w, b } => vec![*x, *w, *b],
            Op::MixtureWeights { kappa, beta, logits } => vec![*kappa, *beta, *logits],
            Op::MatMul { a, b } | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Softplus(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Square(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Sum(a)
            | Op::L1Norm(a)
            | Op::L2Norm(a)
            | Op::MeanOverTime(a)
            | Op::Reshape(a)
            | Op::GatherRows { table: a, .. }
            | Op::SliceRows { a, .. } => vec![*a],
            Op::Concat(parts) => parts.clone(),
        }
    }
}

/// Stacked rows whose outer products sum to a leaf weight gradient.
struct OuterProducts {
    lhs: Vec<f64>,
    rhs: Vec<f64>,
    n: usize,
    p: usize,
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Tape of tensor operations recorded in topological order.
///
/// Leaves may borrow their values, so binding large parameter tensors does not
/// copy them. Every op checks shapes eagerly and returns a
/// [`NumericsError`] naming both operands on mismatch.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients of a scalar with respect to the leaves of a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    /// Moves the gradient out, `None` when `v` is disconnected from the loss.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), NumericsError> {
    if a.shape() != b.shape() {
        return Err(NumericsError::Shape { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
    }
    Ok(())
}

/// View of a 1-D or 2-D tensor as a matrix.
fn as_matrix(t: &Tensor) -> Option<(usize, usize)> {
    match t.shape() {
        [n] => Some((1, *n)),
        [m, n] => Some((*m, *n)),
        _ => None,
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
        .expect("same shape")
}

/// Softmax over the last axis; also used to get `exp` of log-softmax rows.
fn softmax_rows(t: &Tensor) -> Tensor {
    let cols = t.cols();
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(cols) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

/// Unfolds a zero-padded `c × h × w` image into `(c·9) × (h·w)` columns.
fn im2col(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut cols = vec![0.0; c * 9 * hw];
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * hw;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = ci * hw + sy as usize * w;
                    let dst = row + y * w;
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            cols[dst + xx] = x[src + sx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im(cols: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut x = vec![0.0; c * hw];
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * hw;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = ci * hw + sy as usize * w;
                    let src = row + y * w;
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            x[dst + sx as usize] += cols[src + xx];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Per-position log of the mixture score and component responsibilities.
struct MixtureEval {
    weights: Vec<f64>,
    /// `resp[c * j_len + j]`: share of component `c` in position `j`'s score.
    resp: Vec<f64>,
}

fn mixture_eval(kappa: &[f64], beta: &[f64], logits: &[f64], j_len: usize) -> MixtureEval {
    let c_len = kappa.len();
    let lse = log_sum_exp(logits.iter().cloned());
    let log_rho: Vec<f64> = logits.iter().map(|l| l - lse).collect();
    let mut terms = vec![0.0; c_len * j_len];
    let mut log_score = vec![0.0; j_len];
    for j in 0..j_len {
        for c in 0..c_len {
            let d = kappa[c] - j as f64;
            terms[c * j_len + j] = log_rho[c] - beta[c] * d * d;
        }
        log_score[j] = log_sum_exp((0..c_len).map(|c| terms[c * j_len + j]));
    }
    let mut resp = terms;
    for j in 0..j_len {
        for c in 0..c_len {
            resp[c * j_len + j] = (resp[c * j_len + j] - log_score[j]).exp();
        }
    }
    let weights = softmax_rows(&Tensor::vector(log_score)).into_data();
    MixtureEval { weights, resp }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value: Cow::Owned(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf. `requires_grad` leaves receive gradients in [`Graph::backward`].
    pub fn leaf(&mut self, value: impl Into<Cow<'a, Tensor>>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: value.into(), op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: impl Into<Cow<'a, Tensor>>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: impl Into<Cow<'a, Tensor>>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    /// `x·W + b` for `x` of shape `m × n` (or a length-`n` vector).
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NumericsError> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let shape_err = || NumericsError::Shape {
            op: "affine",
            lhs: xv.shape().to_vec(),
            rhs: wv.shape().to_vec(),
        };
        let (m, n) = as_matrix(xv).ok_or_else(shape_err)?;
        let &[wn, p] = wv.shape() else { return Err(shape_err()) };
        if wn != n {
            return Err(shape_err());
        }
        if bv.shape() != [p] {
            return Err(NumericsError::Shape {
                op: "affine bias",
                lhs: wv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut out = Vec::with_capacity(m * p);
        for _ in 0..m {
            out.extend_from_slice(bv.data());
        }
        gemm(m, n, p, 1.0, xv.data(), Layout::Normal, wv.data(), Layout::Normal, 1.0, &mut out);
        let shape = if xv.rank() == 1 { vec![p] } else { vec![m, p] };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Affine { x, w, b }))
    }

    /// Matrix product; a vector on the left is treated as one row.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        let shape_err =
            || NumericsError::Shape { op: "matmul", lhs: av.shape().to_vec(), rhs: bv.shape().to_vec() };
        let (m, k) = as_matrix(av).ok_or_else(shape_err)?;
        let &[bk, n] = bv.shape() else { return Err(shape_err()) };
        if bk != k {
            return Err(shape_err());
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, av.data(), Layout::Normal, bv.data(), Layout::Normal, 0.0, &mut out);
        let shape = if av.rank() == 1 { vec![n] } else { vec![m, n] };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MatMul { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        same_shape("add", self.value(a), self.value(b))?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        same_shape("sub", self.value(a), self.value(b))?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        same_shape("mul", self.value(a), self.value(b))?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = map(self.value(a), |x| x * factor);
        self.push(value, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Var {
        let value = map(self.value(a), |x| x + offset);
        self.push(value, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = map(self.value(a), |x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = map(self.value(a), softplus);
        self.push(value, Op::Softplus(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = map(self.value(a), f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = map(self.value(a), sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = map(self.value(a), f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = map(self.value(a), |x| x * x);
        self.push(value, Op::Square(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.push(value, Op::Softmax(a))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let cols = t.cols();
        let mut value = t.clone();
        for row in value.data_mut().chunks_mut(cols) {
            let lse = log_sum_exp(row.iter().cloned());
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push(value, Op::LogSoftmax(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn l1_norm(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().map(|v| v.abs()).sum());
        self.push(value, Op::L1Norm(a))
    }

    /// Euclidean norm; its gradient at the origin is taken as zero.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum_squares().sqrt());
        self.push(value, Op::L2Norm(a))
    }

    /// Sum of squared entries.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let sq = self.square(a);
        self.sum(sq)
    }

    /// 3×3 cross-correlation, stride 1, zero padding 1, plus per-channel bias.
    pub fn conv2d_3x3(&mut self, x: Var, k: Var, b: Var) -> Result<Var, NumericsError> {
        let (xv, kv, bv) = (self.value(x), self.value(k), self.value(b));
        let shape_err = || NumericsError::Shape {
            op: "conv2d_3x3",
            lhs: xv.shape().to_vec(),
            rhs: kv.shape().to_vec(),
        };
        let &[c_in, h, w] = xv.shape() else { return Err(shape_err()) };
        let &[c_out, kc, 3, 3] = kv.shape() else { return Err(shape_err()) };
        if kc != c_in || h == 0 || w == 0 {
            return Err(shape_err());
        }
        if bv.shape() != [c_out] {
            return Err(NumericsError::Shape {
                op: "conv2d_3x3 bias",
                lhs: kv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let hw = h * w;
        let cols = im2col(xv.data(), c_in, h, w);
        let mut out = Vec::with_capacity(c_out * hw);
        for &bias in bv.data() {
            out.extend(std::iter::repeat_n(bias, hw));
        }
        gemm(c_out, c_in * 9, hw, 1.0, kv.data(), Layout::Normal, &cols, Layout::Normal, 1.0, &mut out);
        let value = Tensor::new(vec![c_out, h, w], out)?;
        Ok(self.push(value, Op::Conv3x3 { x, k, b }))
    }

    /// Mean along the middle (time) axis of a `c × T × F` tensor.
    pub fn mean_over_time(&mut self, a: Var) -> Result<Var, NumericsError> {
        let av = self.value(a);
        let &[c, t, f] = av.shape() else {
            return Err(NumericsError::Shape { op: "mean_over_time", lhs: av.shape().to_vec(), rhs: vec![] });
        };
        if t == 0 {
            return Err(NumericsError::Empty("mean_over_time"));
        }
        let mut out = vec![0.0; c * f];
        for ci in 0..c {
            for ti in 0..t {
                let row = &av.data()[(ci * t + ti) * f..(ci * t + ti + 1) * f];
                for (o, v) in out[ci * f..(ci + 1) * f].iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        let inv = 1.0 / t as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let value = Tensor::new(vec![c, f], out)?;
        Ok(self.push(value, Op::MeanOverTime(a)))
    }

    /// Concatenation along the first axis; trailing dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = parts.first().ok_or(NumericsError::Empty("concat"))?;
        let tail = self.value(*first).shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            let pv = self.value(*p);
            if pv.shape()[1..] != tail[..] {
                return Err(NumericsError::Shape {
                    op: "concat",
                    lhs: self.value(*first).shape().to_vec(),
                    rhs: pv.shape().to_vec(),
                });
            }
            lead += pv.shape()[0];
            data.extend_from_slice(pv.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat(parts.to_vec())))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var, NumericsError> {
        let value = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// Flattens to a vector.
    pub fn flatten(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        self.reshape(a, vec![n]).expect("same element count")
    }

    /// Row lookup into a `V × d` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let tv = self.value(table);
        let &[v, d] = tv.shape() else {
            return Err(NumericsError::Shape { op: "gather_rows", lhs: tv.shape().to_vec(), rhs: vec![] });
        };
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(NumericsError::OutOfRange { op: "gather_rows", index: id, len: v });
            }
            data.extend_from_slice(tv.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(value, Op::GatherRows { table, ids: ids.to_vec() }))
    }

    /// Rows `start..start + len` along the first axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let av = self.value(a);
        let lead = av.shape()[0];
        if start + len > lead {
            return Err(NumericsError::OutOfRange { op: "slice_rows", index: start + len, len: lead });
        }
        let inner: usize = av.shape()[1..].iter().product();
        let data = av.data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = av.shape().to_vec();
        shape[0] = len;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::SliceRows { a, start }))
    }

    /// Normalized Gaussian-mixture weights over positions `0..positions`.
    ///
    /// Position `j` scores `Σ_c ρ_c exp(−β_c (κ_c − j)²)` with `ρ = softmax(logits)`;
    /// the result is the score vector divided by its sum. Evaluated in the log
    /// domain so distant mixtures never produce an all-zero row.
    pub fn mixture_weights(
        &mut self,
        kappa: Var,
        beta: Var,
        logits: Var,
        positions: usize,
    ) -> Result<Var, NumericsError> {
        let (kv, bv, lv) = (self.value(kappa), self.value(beta), self.value(logits));
        same_shape("mixture_weights", kv, bv)?;
        same_shape("mixture_weights", kv, lv)?;
        if kv.rank() != 1 {
            return Err(NumericsError::Shape { op: "mixture_weights", lhs: kv.shape().to_vec(), rhs: vec![] });
        }
        if positions == 0 {
            return Err(NumericsError::Empty("mixture_weights"));
        }
        let eval = mixture_eval(kv.data(), bv.data(), lv.data(), positions);
        let value = Tensor::vector(eval.weights);
        Ok(self.push(value, Op::MixtureWeights { kappa, beta, logits }))
    }

    /// Reverse-mode sweep from a single-element `loss`.
    ///
    /// Only leaf gradients are retained. Leaves not connected to the loss
    /// report zeros through [`Gradients::wrt`].
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumericsError::NonScalarLoss(lv.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        let mut deferred: BTreeMap<Var, OuterProducts> = BTreeMap::new();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), 1.0));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads, &mut deferred);
        }
        for (leaf, outer) in deferred {
            let (n, p) = (outer.n, outer.p);
            let rows = outer.lhs.len() / n;
            self.gemm_into(&mut grads, leaf, (n, rows, p), (&outer.lhs, Layout::Transposed), (&outer.rhs, Layout::Normal));
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    /// Accumulates `op(a)·op(b)` into the gradient slot of `v` without a
    /// temporary when the slot is already populated.
    fn gemm_into(
        &self,
        grads: &mut [Option<Tensor>],
        v: Var,
        (m, k, n): (usize, usize, usize),
        (a, la): (&[f64], Layout),
        (b, lb): (&[f64], Layout),
    ) {
        match &mut grads[v.0] {
            Some(acc) => gemm(m, k, n, 1.0, a, la, b, lb, 1.0, acc.data_mut()),
            slot => {
                let mut out = vec![0.0; m * n];
                gemm(m, k, n, 1.0, a, la, b, lb, 0.0, &mut out);
                *slot = Some(Tensor::new(self.value(v).shape().to_vec(), out).expect("shape"));
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Weight gradient `op(a)ᵀ·g` for a leaf: deferred and summed with one
    /// product at the end of the sweep, since leaves propagate nothing.
    fn weight_grad(
        &self,
        grads: &mut [Option<Tensor>],
        deferred: &mut BTreeMap<Var, OuterProducts>,
        w: Var,
        input: &[f64],
        g: &[f64],
        (n, p): (usize, usize),
    ) {
        if self.is_leaf(w) {
            let entry = deferred.entry(w).or_insert_with(|| OuterProducts { lhs: Vec::new(), rhs: Vec::new(), n, p });
            entry.lhs.extend_from_slice(input);
            entry.rhs.extend_from_slice(g);
        } else {
            let m = input.len() / n;
            self.gemm_into(grads, w, (n, m, p), (input, Layout::Transposed), (g, Layout::Normal));
        }
    }

    fn backprop_node(
        &self,
        node: &Node<'a>,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        deferred: &mut BTreeMap<Var, OuterProducts>,
    ) {
        let out = &*node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (m, n) = as_matrix(xv).expect("checked in forward");
                let p = wv.shape()[1];
                if self.wants(*x) {
                    let mut dx = vec![0.0; m * n];
                    gemm(m, p, n, 1.0, g.data(), Layout::Normal, wv.data(), Layout::Transposed, 0.0, &mut dx);
                    let dx = Tensor::new(xv.shape().to_vec(), dx).expect("shape");
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*w) {
                    self.weight_grad(grads, deferred, *w, xv.data(), g.data(), (n, p));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; p];
                    for row in g.data().chunks(p) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::vector(db));
                }
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = as_matrix(av).expect("checked in forward");
                let n = bv.shape()[1];
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, g.data(), Layout::Normal, bv.data(), Layout::Transposed, 0.0, &mut da);
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da).expect("shape"));
                }
                if self.wants(*b) {
                    self.weight_grad(grads, deferred, *b, av.data(), g.data(), (k, n));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, map(g, |v| -v));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, zip_map(g, self.value(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, zip_map(g, self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, map(g, |v| v * f)),
            Op::AddScalar(a) | Op::Reshape(a) => {
                let shaped = g.clone().reshaped(self.value(*a).shape().to_vec()).expect("shape");
                self.accumulate(grads, *a, shaped);
            }
            Op::Relu(a) => {
                let d = zip_map(g, self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, *a, d);
            }
            Op::Softplus(a) => {
                let d = zip_map(g, self.value(*a), |gv, x| gv * sigmoid(x));
                self.accumulate(grads, *a, d);
            }
            Op::Tanh(a) => self.accumulate(grads, *a, zip_map(g, out, |gv, y| gv * (1.0 - y * y))),
            Op::Sigmoid(a) => self.accumulate(grads, *a, zip_map(g, out, |gv, y| gv * y * (1.0 - y))),
            Op::Exp(a) => self.accumulate(grads, *a, zip_map(g, out, |gv, y| gv * y)),
            Op::Square(a) => {
                let d = zip_map(g, self.value(*a), |gv, x| 2.0 * gv * x);
                self.accumulate(grads, *a, d);
            }
            Op::Softmax(a) => {
                let cols = out.cols();
                let mut d = g.clone();
                for (drow, yrow) in d.data_mut().chunks_mut(cols).zip(out.data().chunks(cols)) {
                    let dot: f64 = drow.iter().zip(yrow).map(|(gv, y)| gv * y).sum();
                    for (dv, y) in drow.iter_mut().zip(yrow) {
                        *dv = y * (*dv - dot);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::LogSoftmax(a) => {
                let cols = out.cols();
                let mut d = g.clone();
                for (drow, yrow) in d.data_mut().chunks_mut(cols).zip(out.data().chunks(cols)) {
                    let total: f64 = drow.iter().sum();
                    for (dv, y) in drow.iter_mut().zip(yrow) {
                        *dv -= y.exp() * total;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(shape, g.item()));
            }
            Op::L1Norm(a) => {
                let gv = g.item();
                let d = map(self.value(*a), |x| {
                    if x > 0.0 {
                        gv
                    } else if x < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *a, d);
            }
            Op::L2Norm(a) => {
                let norm = out.item();
                let gv = g.item();
                let d = if norm > 0.0 {
                    map(self.value(*a), |x| gv * x / norm)
                } else {
                    Tensor::zeros(self.value(*a).shape().to_vec())
                };
                self.accumulate(grads, *a, d);
            }
            Op::Conv3x3 { x, k, b } => {
                let (xv, kv) = (self.value(*x), self.value(*k));
                let (c_in, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let c_out = kv.shape()[0];
                let hw = h * w;
                if self.wants(*k) {
                    let cols = im2col(xv.data(), c_in, h, w);
                    self.gemm_into(grads, *k, (c_out, hw, c_in * 9), (g.data(), Layout::Normal), (&cols, Layout::Transposed));
                }
                if self.wants(*x) {
                    let mut dcols = vec![0.0; c_in * 9 * hw];
                    gemm(c_in * 9, c_out, hw, 1.0, kv.data(), Layout::Transposed, g.data(), Layout::Normal, 0.0, &mut dcols);
                    let dx = col2im(&dcols, c_in, h, w);
                    self.accumulate(grads, *x, Tensor::new(vec![c_in, h, w], dx).expect("shape"));
                }
                if self.wants(*b) {
                    let db = g.data().chunks(hw).map(|c| c.iter().sum()).collect();
                    self.accumulate(grads, *b, Tensor::vector(db));
                }
            }
            Op::MeanOverTime(a) => {
                let shape = self.value(*a).shape().to_vec();
                let (c, t, f) = (shape[0], shape[1], shape[2]);
                let inv = 1.0 / t as f64;
                let mut d = vec![0.0; c * t * f];
                for ci in 0..c {
                    let grow = &g.data()[ci * f..(ci + 1) * f];
                    for ti in 0..t {
                        let base = (ci * t + ti) * f;
                        for (dv, gv) in d[base..base + f].iter_mut().zip(grow) {
                            *dv = gv * inv;
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(shape, d).expect("shape"));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let len = pv.len();
                    if self.wants(*p) {
                        let d = Tensor::new(pv.shape().to_vec(), g.data()[offset..offset + len].to_vec())
                            .expect("shape");
                        self.accumulate(grads, *p, d);
                    }
                    offset += len;
                }
            }
            Op::GatherRows { table, ids } => {
                let tv = self.value(*table);
                let d_width = tv.shape()[1];
                let mut d = Tensor::zeros(tv.shape().to_vec());
                for (r, &id) in ids.iter().enumerate() {
                    let src = &g.data()[r * d_width..(r + 1) * d_width];
                    for (dv, gv) in d.data_mut()[id * d_width..(id + 1) * d_width].iter_mut().zip(src) {
                        *dv += gv;
                    }
                }
                self.accumulate(grads, *table, d);
            }
            Op::SliceRows { a, start } => {
                let av = self.value(*a);
                let inner: usize = av.shape()[1..].iter().product();
                let mut d = Tensor::zeros(av.shape().to_vec());
                d.data_mut()[start * inner..start * inner + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *a, d);
            }
            Op::MixtureWeights { kappa, beta, logits } => {
                let (kv, bv, lv) = (self.value(*kappa), self.value(*beta), self.value(*logits));
                let j_len = out.len();
                let c_len = kv.len();
                let eval = mixture_eval(kv.data(), bv.data(), lv.data(), j_len);
                let w = &eval.weights;
                let gbar: f64 = g.data().iter().zip(w).map(|(gv, wv)| gv * wv).sum();
                // Gradient with respect to the per-position log score.
                let da: Vec<f64> = g.data().iter().zip(w).map(|(gv, wv)| wv * (gv - gbar)).collect();
                let mut dk = vec![0.0; c_len];
                let mut db = vec![0.0; c_len];
                let mut dl = vec![0.0; c_len];
                for c in 0..c_len {
                    for (j, daj) in da.iter().enumerate() {
                        let q = eval.resp[c * j_len + j];
                        let d = kv.data()[c] - j as f64;
                        dl[c] += daj * q;
                        db[c] -= daj * q * d * d;
                        dk[c] -= 2.0 * daj * q * bv.data()[c] * d;
                    }
                }
                let rho = softmax_rows(lv).into_data();
                let total: f64 = dl.iter().sum();
                let dlogits: Vec<f64> = dl.iter().zip(&rho).map(|(d, r)| d - r * total).collect();
                self.accumulate(grads, *kappa, Tensor::vector(dk));
                self.accumulate(grads, *beta, Tensor::vector(db));
                self.accumulate(grads, *logits, Tensor::vector(dlogits));
            }
        }
    }
}
