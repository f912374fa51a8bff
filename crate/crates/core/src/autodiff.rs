//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and enough
//! context to compute input adjoints. `backward` walks the nodes in exact
//! reverse recording order and sums contributions across fan-out in that
//! order, so gradients are bit-reproducible. A tape can be differentiated
//! once; call [`Tape::reset`] before recording again.

use crate::error::{Error, Result};
use crate::tensor::{matmul_a_bt, matmul_at_b, Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<R> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, R),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNormRows { x: Var, gain: Var, bias: Var, xhat: Vec<R>, rstd: Vec<R> },
    L2Normalize { x: Var, norm: R },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    Sum(Var),
    Reshape(Var),
    SoftmaxCrossEntropy { logits: Var, target: usize, probs: Vec<R> },
}

#[derive(Debug)]
struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape<R> {
    nodes: Vec<Node<R>>,
    consumed: bool,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<R> {
    grads: Vec<Option<Vec<R>>>,
    shapes: Vec<Vec<usize>>,
}

impl<R: Real> Gradients<R> {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does
    /// not require grad or does not influence the loss.
    pub fn get(&self, v: Var) -> Option<Tensor<R>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    /// Gradient data for `v`, zero-filled when absent.
    pub fn get_or_zeros(&self, v: Var) -> Vec<R> {
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => vec![R::zero(); self.shapes[v.0].iter().product()],
        }
    }
}

fn dims<R: Real>(t: &Tensor<R>) -> Result<(usize, usize)> {
    t.as_matrix_dims()
}

fn same_shape<R: Real>(a: &Tensor<R>, b: &Tensor<R>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn softmax_in_place<R: Real>(row: &mut [R]) {
    let max = row.iter().copied().fold(R::neg_infinity(), R::max);
    let mut sum = R::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

fn sigmoid<R: Real>(x: R) -> R {
    // Branches keep exp() from overflowing for large |x|.
    if x >= R::zero() {
        R::one() / (R::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), consumed: false }
    }

    /// Clears all nodes so the tape can record a fresh computation.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, what: &'static str) -> Result<Var> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if !value.all_finite() {
            return Err(Error::NonFinite(what));
        }
        let requires_grad = match &op {
            Op::Leaf => value.requires_grad(),
            _ => self.inputs_of(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_of(&self, op: &Op<R>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                vec![*a, *b]
            }
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Relu(x)
            | Op::SoftmaxRows(x)
            | Op::L2Normalize { x, .. }
            | Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::MeanRows(x)
            | Op::Sum(x)
            | Op::Reshape(x) => vec![*x],
            Op::LayerNormRows { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::ConcatRows(xs) | Op::ConcatCols(xs) => xs.clone(),
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }

    /// Records a leaf; it participates in differentiation when the tensor's
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, t: Tensor<R>) -> Result<Var> {
        self.push(t, Op::Leaf, "leaf")
    }

    /// Records a differentiable leaf.
    pub fn param(&mut self, t: Tensor<R>) -> Result<Var> {
        self.leaf(t.with_requires_grad(true))
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<R>) -> Result<Var> {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = crate::tensor::matmul(self.value(a), self.value(b))?;
        self.push(value, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = dims(t)?;
        let src = t.data();
        let mut out = vec![R::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(x), "transpose")
    }

    fn zip_with(&self, a: Var, b: Var, what: &str, f: impl Fn(R, R) -> R) -> Result<Tensor<R>> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, what)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "add", |x, y| x + y)?;
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "sub", |x, y| x - y)?;
        self.push(v, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "mul", |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), "mul")
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(row));
        let (m, n) = dims(ta)?;
        if tb.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "add_row: {:?} + {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut data = ta.data().to_vec();
        for i in 0..m {
            for (o, &b) in data[i * n..(i + 1) * n].iter_mut().zip(tb.data()) {
                *o = *o + b;
            }
        }
        let v = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(v, Op::AddRow(a, row), "add_row")
    }

    fn map(&mut self, x: Var, op: Op<R>, what: &'static str, f: impl Fn(R) -> R) -> Result<Var> {
        let t = self.value(x);
        let v = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&e| f(e)).collect());
        self.push(v, op, what)
    }

    pub fn scale(&mut self, x: Var, s: R) -> Result<Var> {
        self.map(x, Op::Scale(x, s), "scale", |e| e * s)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Sigmoid(x), "sigmoid", sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Tanh(x), "tanh", R::tanh)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Relu(x), "relu", |e| e.max(R::zero()))
    }

    /// Numerically stable softmax applied to each row independently.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = dims(t)?;
        let mut data = t.data().to_vec();
        for i in 0..m {
            softmax_in_place(&mut data[i * n..(i + 1) * n]);
        }
        let v = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(v, Op::SoftmaxRows(x), "softmax_rows")
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = dims(t)?;
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        if g.len() != n || b.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "layer_norm: width {n}, gain {}, bias {}",
                g.len(),
                b.len()
            )));
        }
        let eps = R::from_f64_lossy(LAYER_NORM_EPS);
        let nf = R::from_usize(n).unwrap();
        let mut xhat = vec![R::zero(); m * n];
        let mut rstd = vec![R::zero(); m];
        let mut out = vec![R::zero(); m * n];
        for i in 0..m {
            let row = &t.data()[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<R>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() / nf;
            let r = R::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let v = Tensor::from_parts(t.shape().to_vec(), out);
        self.push(v, Op::LayerNormRows { x, gain, bias, xhat, rstd }, "layer_norm")
    }

    /// Scales the whole tensor to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let norm = t.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        if norm < crate::data::embed::NORM_FLOOR {
            return Err(Error::NormUnderflow(norm));
        }
        let n = R::from_f64_lossy(norm);
        let v = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&e| e / n).collect());
        self.push(v, Op::L2Normalize { x, norm: n }, "l2_normalize")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = dims(t)?;
        if len == 0 || start + len > m {
            return Err(Error::ShapeMismatch(format!("slice_rows {start}+{len} of {m}")));
        }
        let v = Tensor::from_parts(vec![len, n], t.data()[start * n..(start + len) * n].to_vec());
        self.push(v, Op::SliceRows { x, start }, "slice_rows")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = dims(t)?;
        if len == 0 || start + len > n {
            return Err(Error::ShapeMismatch(format!("slice_cols {start}+{len} of {n}")));
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&t.data()[i * n + start..i * n + start + len]);
        }
        self.push(Tensor::from_parts(vec![m, len], data), Op::SliceCols { x, start }, "slice_cols")
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let n = match xs.first() {
            Some(&x) => dims(self.value(x))?.1,
            None => return Err(Error::ShapeMismatch("concat_rows of nothing".into())),
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let t = self.value(x);
            let (m, w) = dims(t)?;
            if w != n {
                return Err(Error::ShapeMismatch(format!("concat_rows width {w} vs {n}")));
            }
            data.extend_from_slice(t.data());
            rows += m;
        }
        self.push(Tensor::from_parts(vec![rows, n], data), Op::ConcatRows(xs.to_vec()), "concat_rows")
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let m = match xs.first() {
            Some(&x) => dims(self.value(x))?.0,
            None => return Err(Error::ShapeMismatch("concat_cols of nothing".into())),
        };
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (r, w) = dims(self.value(x))?;
            if r != m {
                return Err(Error::ShapeMismatch(format!("concat_cols rows {r} vs {m}")));
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&x, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(x).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(Tensor::from_parts(vec![m, total], data), Op::ConcatCols(xs.to_vec()), "concat_cols")
    }

    /// Mean over rows of an `m×n` matrix, giving a `1×n` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = dims(t)?;
        let mf = R::from_usize(m).unwrap();
        let mut out = vec![R::zero(); n];
        for i in 0..m {
            for (o, &v) in out.iter_mut().zip(&t.data()[i * n..(i + 1) * n]) {
                *o = *o + v;
            }
        }
        out.iter_mut().for_each(|o| *o = *o / mf);
        self.push(Tensor::from_parts(vec![1, n], out), Op::MeanRows(x), "mean_rows")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<R>();
        self.push(Tensor::from_parts(vec![1], vec![s]), Op::Sum(x), "sum")
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(x).clone().with_requires_grad(false).reshape(shape)?;
        self.push(v, Op::Reshape(x), "reshape")
    }

    /// `log Σ exp(z) − z[target]` over all elements of `logits`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let (loss, probs) = cross_entropy_parts(self.value(logits).data(), target)?;
        let v = Tensor::from_parts(vec![1], vec![loss]);
        self.push(v, Op::SoftmaxCrossEntropy { logits, target, probs }, "softmax_cross_entropy")
    }

    /// Propagates adjoints from the scalar `loss` to every node that
    /// requires grad. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<R>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<R>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![R::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[idx].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.propagate(idx, &g, &mut grads)?;
            // Intermediate adjoints are kept so callers can inspect them.
            grads[idx] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| if n.requires_grad { g } else { None })
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, idx: usize, g: &[R], grads: &mut [Option<Vec<R>>]) -> Result<()> {
        let nodes = &self.nodes;
        let node = &nodes[idx];
        let wants = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [R])| {
            if nodes[v.0].requires_grad {
                let len = nodes[v.0].value.len();
                let buf = grads[v.0].get_or_insert_with(|| vec![R::zero(); len]);
                f(buf);
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims(val(*a))?;
                let n = val(*b).shape()[1];
                if wants(*a) {
                    let da = matmul_a_bt(g, val(*b).data(), m, n, k);
                    acc(*a, &mut |buf| add_into(buf, &da));
                }
                if wants(*b) {
                    let db = matmul_at_b(val(*a).data(), g, m, k, n);
                    acc(*b, &mut |buf| add_into(buf, &db));
                }
            }
            Op::Transpose(x) => {
                let (m, n) = dims(val(*x))?;
                acc(*x, &mut |buf| {
                    for i in 0..m {
                        for j in 0..n {
                            buf[i * n + j] = buf[i * n + j] + g[j * m + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| add_into(buf, g));
            }
            Op::AddRow(a, row) => {
                acc(*a, &mut |buf| add_into(buf, g));
                let n = val(*row).len();
                acc(*row, &mut |buf| {
                    for chunk in g.chunks(n) {
                        add_into(buf, chunk);
                    }
                });
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, &d)| *o = *o - d));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |buf| {
                    for ((o, &d), &y) in buf.iter_mut().zip(g).zip(bv) {
                        *o = *o + d * y;
                    }
                });
                acc(*b, &mut |buf| {
                    for ((o, &d), &x) in buf.iter_mut().zip(g).zip(av) {
                        *o = *o + d * x;
                    }
                });
            }
            Op::Scale(x, s) => {
                acc(*x, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, &d)| *o = *o + d * *s));
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, &mut |buf| {
                    for ((o, &d), &y) in buf.iter_mut().zip(g).zip(y) {
                        *o = *o + d * y * (R::one() - y);
                    }
                });
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                acc(*x, &mut |buf| {
                    for ((o, &d), &y) in buf.iter_mut().zip(g).zip(y) {
                        *o = *o + d * (R::one() - y * y);
                    }
                });
            }
            Op::Relu(x) => {
                let xv = val(*x).data();
                acc(*x, &mut |buf| {
                    for ((o, &d), &x) in buf.iter_mut().zip(g).zip(xv) {
                        if x > R::zero() {
                            *o = *o + d;
                        }
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let (m, n) = dims(&node.value)?;
                let y = node.value.data();
                acc(*x, &mut |buf| {
                    for i in 0..m {
                        let r = i * n..(i + 1) * n;
                        let dot: R = g[r.clone()].iter().zip(&y[r.clone()]).map(|(&a, &b)| a * b).sum();
                        for j in r {
                            buf[j] = buf[j] + y[j] * (g[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNormRows { x, gain, bias, xhat, rstd } => {
                let (m, n) = dims(&node.value)?;
                let gv = val(*gain).data();
                let nf = R::from_usize(n).unwrap();
                acc(*x, &mut |buf| {
                    for i in 0..m {
                        let r = i * n..(i + 1) * n;
                        let mut mean_d = R::zero();
                        let mut mean_dx = R::zero();
                        for j in r.clone() {
                            let d = g[j] * gv[j - i * n];
                            mean_d = mean_d + d;
                            mean_dx = mean_dx + d * xhat[j];
                        }
                        mean_d = mean_d / nf;
                        mean_dx = mean_dx / nf;
                        for j in r {
                            let d = g[j] * gv[j - i * n];
                            buf[j] = buf[j] + rstd[i] * (d - mean_d - xhat[j] * mean_dx);
                        }
                    }
                });
                acc(*gain, &mut |buf| {
                    for (j, (&d, &h)) in g.iter().zip(xhat).enumerate() {
                        buf[j % n] = buf[j % n] + d * h;
                    }
                });
                acc(*bias, &mut |buf| {
                    for chunk in g.chunks(n) {
                        add_into(buf, chunk);
                    }
                });
            }
            Op::L2Normalize { x, norm } => {
                let y = node.value.data();
                let dot: R = g.iter().zip(y).map(|(&a, &b)| a * b).sum();
                acc(*x, &mut |buf| {
                    for ((o, &d), &y) in buf.iter_mut().zip(g).zip(y) {
                        *o = *o + (d - y * dot) / *norm;
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let n = dims(val(*x))?.1;
                acc(*x, &mut |buf| add_into(&mut buf[start * n..start * n + g.len()], g));
            }
            Op::SliceCols { x, start } => {
                let n = dims(val(*x))?.1;
                let (m, w) = dims(&node.value)?;
                acc(*x, &mut |buf| {
                    for i in 0..m {
                        add_into(&mut buf[i * n + start..i * n + start + w], &g[i * w..(i + 1) * w]);
                    }
                });
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let len = val(x).len();
                    acc(x, &mut |buf| add_into(buf, &g[off..off + len]));
                    off += len;
                }
            }
            Op::ConcatCols(xs) => {
                let (m, total) = dims(&node.value)?;
                let mut col = 0;
                for &x in xs {
                    let w = dims(val(x))?.1;
                    acc(x, &mut |buf| {
                        for i in 0..m {
                            add_into(&mut buf[i * w..(i + 1) * w], &g[i * total + col..i * total + col + w]);
                        }
                    });
                    col += w;
                }
            }
            Op::MeanRows(x) => {
                let (m, n) = dims(val(*x))?;
                let mf = R::from_usize(m).unwrap();
                acc(*x, &mut |buf| {
                    for i in 0..m {
                        for j in 0..n {
                            buf[i * n + j] = buf[i * n + j] + g[j] / mf;
                        }
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, &mut |buf| buf.iter_mut().for_each(|o| *o = *o + g[0]));
            }
            Op::Reshape(x) => {
                acc(*x, &mut |buf| add_into(buf, g));
            }
            Op::SoftmaxCrossEntropy { logits, target, probs } => {
                acc(*logits, &mut |buf| {
                    for (c, (o, &p)) in buf.iter_mut().zip(probs).enumerate() {
                        let onehot = if c == *target { R::one() } else { R::zero() };
                        *o = *o + g[0] * (p - onehot);
                    }
                });
            }
        }
        Ok(())
    }
}

fn add_into<R: Real>(buf: &mut [R], g: &[R]) {
    for (o, &d) in buf.iter_mut().zip(g) {
        *o = *o + d;
    }
}

/// Loss value and softmax probabilities for one logit vector.
fn cross_entropy_parts<R: Real>(logits: &[R], target: usize) -> Result<(R, Vec<R>)> {
    if target >= logits.len() {
        return Err(Error::IndexOutOfRange { index: target, classes: logits.len() });
    }
    let max = logits.iter().copied().fold(R::neg_infinity(), R::max);
    let sum: R = logits.iter().map(|&z| (z - max).exp()).sum();
    let lse = max + sum.ln();
    let loss = (lse - logits[target]).max(R::zero());
    let probs = logits.iter().map(|&z| (z - lse).exp()).collect();
    Ok((loss, probs))
}

/// Softmax cross-entropy of `logits` against `target`, with its gradient
/// `softmax(z) − onehot(target)`.
pub fn softmax_cross_entropy<R: Real>(logits: &Tensor<R>, target: usize) -> Result<(R, Tensor<R>)> {
    let (loss, mut grad) = cross_entropy_parts(logits.data(), target)?;
    grad[target] = grad[target] - R::one();
    Ok((loss, Tensor::from_parts(logits.shape().to_vec(), grad)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m64(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let z = Tensor::vector(vec![0.3f64; 4]).unwrap();
        let (loss, _) = softmax_cross_entropy(&z, 2).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((loss - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn confident_logits_give_small_loss() {
        let z = Tensor::vector(vec![10.0f64, 0.0, 0.0, 0.0]).unwrap();
        let (loss, _) = softmax_cross_entropy(&z, 0).unwrap();
        // ln(1 + 3e^-10)
        let expected = (1.0 + 3.0 * (-10f64).exp()).ln();
        assert!((loss - expected).abs() < 1e-15);
        // The quoted 1.3618e-4 is this value truncated to five digits.
        assert!((loss - 1.3618e-4).abs() < 1e-8 * 2.0);
    }

    #[test]
    fn cross_entropy_gradient_at_uniform() {
        let z = Tensor::vector(vec![0.0f64, 0.0]).unwrap();
        let (_, g) = softmax_cross_entropy(&z, 0).unwrap();
        assert_eq!(g.data(), &[-0.5, 0.5]);
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let z = Tensor::vector(vec![0.0f32; 3]).unwrap();
        assert!(matches!(
            softmax_cross_entropy(&z, 3),
            Err(Error::IndexOutOfRange { index: 3, classes: 3 })
        ));
        let mut tape = Tape::new();
        let v = tape.constant(z).unwrap();
        assert!(tape.softmax_cross_entropy(v, 7).is_err());
    }

    #[test]
    fn sum_of_squares_gradient() {
        let a = m64(&[vec![1.0, -2.0], vec![0.5, 3.0]]);
        let mut tape = Tape::new();
        let av = tape.param(a.clone()).unwrap();
        let sq = tape.mul(av, av).unwrap();
        let f = tape.sum(sq).unwrap();
        let grads = tape.backward(f).unwrap();
        let ga = grads.get(av).unwrap();
        let expected: Vec<f64> = a.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(ga.data(), expected.as_slice());
    }

    #[test]
    fn sum_of_product_gradient_is_ones_times_bt() {
        let a = m64(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let b = m64(&[vec![0.5, -1.0], vec![2.0, 0.0], vec![1.5, 3.0]]);
        let mut tape = Tape::new();
        let av = tape.param(a).unwrap();
        let bv = tape.param(b.clone()).unwrap();
        let c = tape.matmul(av, bv).unwrap();
        let f = tape.sum(c).unwrap();
        let grads = tape.backward(f).unwrap();
        // dA[i][p] = Σ_j B[p][j] (ones · Bᵀ)
        let row_sums: Vec<f64> = (0..3).map(|p| b.row(p).iter().sum()).collect();
        let expected: Vec<f64> = (0..2).flat_map(|_| row_sums.clone()).collect();
        assert_eq!(grads.get(av).unwrap().data(), expected.as_slice());
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![0.0f64]).unwrap()).unwrap();
        let y = tape.sigmoid(x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.25]);
    }

    #[test]
    fn fan_out_accumulates() {
        // f = sum(x) + sum(x * 3)
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0f64, 2.0]).unwrap()).unwrap();
        let s1 = tape.sum(x).unwrap();
        let x3 = tape.scale(x, 3.0).unwrap();
        let s2 = tape.sum(x3).unwrap();
        let f = tape.add(s1, s2).unwrap();
        let grads = tape.backward(f).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[4.0, 4.0]);
    }

    #[test]
    fn double_backward_needs_reset() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0f32]).unwrap()).unwrap();
        let y = tape.tanh(x).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::TapeConsumed)));
        assert!(matches!(tape.tanh(x), Err(Error::TapeConsumed)));
        tape.reset();
        assert!(tape.is_empty());
        let x = tape.param(Tensor::vector(vec![1.0f32]).unwrap()).unwrap();
        let y = tape.tanh(x).unwrap();
        assert!(tape.backward(y).is_ok());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0f32, 2.0]).unwrap()).unwrap();
        let y = tape.tanh(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::vector(vec![2.0f64]).unwrap()).unwrap();
        let x = tape.param(Tensor::vector(vec![3.0f64]).unwrap()).unwrap();
        let y = tape.mul(c, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn overflowing_ops_are_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![f32::MAX]).unwrap()).unwrap();
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite(_))));
    }
}
