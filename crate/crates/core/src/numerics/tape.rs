//! Define-by-run reverse-mode tape.
//!
//! Every forward call appends a node holding its value and the op that made
//! it. Nodes are only ever appended, so parents always precede children and
//! a single reverse sweep visits each node once.

use super::array::{matmul_nt, matmul_raw, matmul_tn};
use super::{Array, NumericsError};

/// Handle to a node on a [`Tape`].
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
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine(Var, f64),
    BroadcastRows(Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    Sum(Var),
    SumAxis(Var, usize),
    Exp(Var),
    Ln(Var),
    Sigmoid(Var),
    Tanh(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var, Option<Vec<bool>>),
    L2Normalize(Var, Vec<f64>),
    BlockAttention(Box<BlockAttention>),
}

#[derive(Clone, Debug)]
struct BlockAttention {
    q: Var,
    k: Var,
    v: Var,
    offsets: Vec<usize>,
    heads: usize,
    scale: f64,
    /// Per head, per block, row-major `n × n` weights.
    weights: Vec<f64>,
}

#[derive(Clone, Debug)]
struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required one.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    /// `None` when `var` does not lie on a path to the loss.
    pub fn get(&self, var: Var) -> Option<&Array> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

fn shape_err(op: &'static str, lhs: &Array, rhs: &Array) -> NumericsError {
    NumericsError::Shape { op, lhs: lhs.shape().to_vec(), rhs: rhs.shape().to_vec() }
}

fn check_rank2(op: &'static str, a: &Array) -> Result<(), NumericsError> {
    if a.ndim() != 2 {
        return Err(NumericsError::Rank { op, expected: 2, shape: a.shape().to_vec() });
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Array {
        &self.nodes[var.0].value
    }

    /// Leaf that receives a gradient (a parameter or a differentiated input).
    pub fn param(&mut self, value: Array) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Leaf that is treated as a constant.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Array, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Array, op: Op, parents: &[Var]) -> Result<Var, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Array, NumericsError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err(name, x, y));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Array::new(x.shape().to_vec(), data)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (x, y) = (self.value(a), self.value(b));
        check_rank2("matmul", x)?;
        check_rank2("matmul", y)?;
        let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
        if y.shape()[0] != k {
            return Err(shape_err("matmul", x, y));
        }
        let out = Array::matrix(m, n, matmul_raw(x.data(), y.data(), m, k, n))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        check_rank2("transpose", self.value(a))?;
        let out = self.value(a).transpose();
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.elementwise("add", a, b, |p, q| p + q)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.elementwise("sub", a, b, |p, q| p - q)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.elementwise("mul", a, b, |p, q| p * q)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        if self.value(b).data().iter().any(|&v| v == 0.0) {
            return Err(NumericsError::Domain { op: "div", msg: "division by zero".into() });
        }
        let out = self.elementwise("div", a, b, |p, q| p / q)?;
        self.push("div", out, Op::Div(a, b), &[a, b])
    }

    /// `scale · a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var, NumericsError> {
        let out = self.value(a).map(|v| scale * v + shift);
        self.push("affine", out, Op::Affine(a, scale), &[a])
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Result<Var, NumericsError> {
        self.affine(a, scale, 0.0)
    }

    /// Repeats a length-`n` vector into an `rows × n` matrix.
    pub fn broadcast_rows(&mut self, v: Var, rows: usize) -> Result<Var, NumericsError> {
        let x = self.value(v);
        if x.ndim() != 1 {
            return Err(NumericsError::Rank { op: "broadcast_rows", expected: 1, shape: x.shape().to_vec() });
        }
        let n = x.len();
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(x.data());
        }
        let out = Array::matrix(rows, n, data)?;
        self.push("broadcast_rows", out, Op::BroadcastRows(v), &[v])
    }

    /// `a (m×n) + b` where `b` is a length-`n` vector added to every row.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let rows = self.value(a).rows();
        let bb = self.broadcast_rows(b, rows)?;
        self.add(a, bb)
    }

    /// Concatenation of rank-2 arrays along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = self.value(*parts.first().ok_or(NumericsError::Domain {
            op: "concat",
            msg: "no inputs".into(),
        })?);
        check_rank2("concat", first)?;
        let m = first.rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let x = self.value(p);
            check_rank2("concat", x)?;
            if x.rows() != m {
                return Err(shape_err("concat", first, x));
            }
            widths.push(x.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Array::matrix(m, total, data)?;
        self.push("concat", out, Op::Concat(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let x = self.value(a);
        check_rank2("slice_cols", x)?;
        if start > end || end > x.cols() {
            return Err(NumericsError::Index { op: "slice_cols", index: end, bound: x.cols() });
        }
        let m = x.rows();
        let mut data = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            data.extend_from_slice(&x.row(i)[start..end]);
        }
        let out = Array::matrix(m, end - start, data)?;
        self.push("slice_cols", out, Op::SliceCols(a, start), &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let x = self.value(a);
        check_rank2("slice_rows", x)?;
        if start > end || end > x.rows() {
            return Err(NumericsError::Index { op: "slice_rows", index: end, bound: x.rows() });
        }
        let c = x.cols();
        let out = Array::matrix(end - start, c, x.data()[start * c..end * c].to_vec())?;
        self.push("slice_rows", out, Op::SliceRows(a, start), &[a])
    }

    /// Row gather; indices may repeat (their gradients accumulate).
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var, NumericsError> {
        let x = self.value(a);
        check_rank2("gather_rows", x)?;
        let c = x.cols();
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= x.rows() {
                return Err(NumericsError::Index { op: "gather_rows", index: i, bound: x.rows() });
            }
            data.extend_from_slice(x.row(i));
        }
        let out = Array::matrix(index.len(), c, data)?;
        self.push("gather_rows", out, Op::GatherRows(a, index.to_vec()), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let out = self.value(a).clone().reshaped(shape.to_vec())?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = Array::scalar(self.value(a).sum());
        self.push("sum", out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumericsError> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(NumericsError::Domain { op: "mean", msg: "mean of empty array".into() });
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum of a rank-2 array over `axis` (0: down the rows, 1: across columns).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, NumericsError> {
        let x = self.value(a);
        check_rank2("sum_axis", x)?;
        let (m, n) = (x.rows(), x.cols());
        let out = match axis {
            0 => {
                let mut acc = vec![0.0; n];
                for i in 0..m {
                    for (s, v) in acc.iter_mut().zip(x.row(i)) {
                        *s += v;
                    }
                }
                Array::vector(acc)
            }
            1 => Array::vector((0..m).map(|i| x.row(i).iter().sum()).collect()),
            _ => return Err(NumericsError::Index { op: "sum_axis", index: axis, bound: 2 }),
        };
        self.push("sum_axis", out, Op::SumAxis(a, axis), &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, NumericsError> {
        let len = self.value(a).shape().get(axis).copied().unwrap_or(0);
        if len == 0 {
            return Err(NumericsError::Domain { op: "mean_axis", msg: "empty axis".into() });
        }
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / len as f64)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).map(f64::exp);
        self.push("exp", out, Op::Exp(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Result<Var, NumericsError> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&v| v <= 0.0) {
            return Err(NumericsError::Domain { op: "ln", msg: format!("log of non-positive value {bad}") });
        }
        let out = self.value(a).map(f64::ln);
        self.push("ln", out, Op::Ln(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).map(sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).map(f64::tanh);
        self.push("tanh", out, Op::Tanh(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).map(|v| v * v);
        self.push("square", out, Op::Square(a), &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = softmax_rows(self.value(a), None);
        self.push("softmax", out, Op::Softmax(a), &[a])
    }

    /// Multi-head attention `softmax(scale · q kᵀ) v` restricted to the
    /// diagonal blocks `offsets[b]..offsets[b + 1]`: row `i` only sees rows
    /// of its own block. Columns of `q`, `k` and `v` are split evenly over
    /// `heads`; the head outputs are concatenated.
    pub fn block_attention(&mut self, q: Var, k: Var, v: Var, offsets: &[usize], heads: usize, scale: f64) -> Result<Var, NumericsError> {
        let (qa, ka, va) = (self.value(q), self.value(k), self.value(v));
        for x in [qa, ka, va] {
            check_rank2("block_attention", x)?;
        }
        let rows = qa.rows();
        if ka.shape() != qa.shape() || va.rows() != rows {
            return Err(shape_err("block_attention", qa, if ka.shape() != qa.shape() { ka } else { va }));
        }
        if offsets.first() != Some(&0) || offsets.last() != Some(&rows) || offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(NumericsError::Shape { op: "block_attention", lhs: qa.shape().to_vec(), rhs: offsets.to_vec() });
        }
        let (dq, dv) = (qa.cols(), va.cols());
        if heads == 0 || dq % heads != 0 || dv % heads != 0 {
            return Err(NumericsError::Domain { op: "block_attention", msg: format!("{heads} heads do not divide widths {dq} and {dv}") });
        }
        let (hq, hv) = (dq / heads, dv / heads);
        let (qd, kd, vd) = (qa.data(), ka.data(), va.data());
        let mut out = vec![0.0; rows * dv];
        let mut weights = Vec::new();
        for h in 0..heads {
            for b in offsets.windows(2) {
                let (lo, n) = (b[0], b[1] - b[0]);
                let base = weights.len();
                weights.resize(base + n * n, 0.0);
                for i in 0..n {
                    let qi = &qd[(lo + i) * dq + h * hq..(lo + i) * dq + (h + 1) * hq];
                    let w = &mut weights[base + i * n..base + (i + 1) * n];
                    for (j, wj) in w.iter_mut().enumerate() {
                        let kj = &kd[(lo + j) * dq + h * hq..(lo + j) * dq + (h + 1) * hq];
                        *wj = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                    }
                    let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for wj in w.iter_mut() {
                        *wj = (*wj - max).exp();
                        total += *wj;
                    }
                    w.iter_mut().for_each(|wj| *wj /= total);
                    let oi = &mut out[(lo + i) * dv + h * hv..(lo + i) * dv + (h + 1) * hv];
                    for (j, &wj) in w.iter().enumerate() {
                        let vj = &vd[(lo + j) * dv + h * hv..(lo + j) * dv + (h + 1) * hv];
                        oi.iter_mut().zip(vj).for_each(|(o, x)| *o += wj * x);
                    }
                }
            }
        }
        let out = Array::matrix(rows, dv, out)?;
        let op = BlockAttention { q, k, v, offsets: offsets.to_vec(), heads, scale, weights };
        self.push("block_attention", out, Op::BlockAttention(Box::new(op)), &[q, k, v])
    }

    /// Attention weights recorded by a [`Tape::block_attention`] node: one
    /// `n × n` matrix per head and block, heads outermost.
    pub fn attention_weights(&self, var: Var) -> Option<Vec<Array>> {
        let Op::BlockAttention(op) = &self.nodes[var.0].op else { return None };
        let mut mats = Vec::new();
        let mut at = 0;
        for _ in 0..op.heads {
            for b in op.offsets.windows(2) {
                let n = b[1] - b[0];
                mats.push(Array::matrix(n, n, op.weights[at..at + n * n].to_vec()).expect("sized"));
                at += n * n;
            }
        }
        Some(mats)
    }

    /// Softmax over the last axis restricted to entries where `mask` is true.
    /// Excluded entries come out as exactly 0.
    pub fn masked_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var, NumericsError> {
        self.check_mask("masked_softmax", a, mask)?;
        let out = softmax_rows(self.value(a), Some(mask));
        self.push("masked_softmax", out, Op::Softmax(a), &[a])
    }

    /// Log-softmax over the last axis; masked-out entries are excluded from
    /// the normalizer and come out as 0.
    pub fn log_softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var, NumericsError> {
        if let Some(m) = mask {
            self.check_mask("log_softmax", a, m)?;
        }
        let out = log_softmax_rows(self.value(a), mask);
        self.push("log_softmax", out, Op::LogSoftmax(a, mask.map(<[bool]>::to_vec)), &[a])
    }

    fn check_mask(&self, op: &'static str, a: Var, mask: &[bool]) -> Result<(), NumericsError> {
        let x = self.value(a);
        if mask.len() != x.len() {
            return Err(NumericsError::Shape { op, lhs: x.shape().to_vec(), rhs: vec![mask.len()] });
        }
        Ok(())
    }

    /// Scales every row (last axis) to unit L2 norm. All-zero rows are passed
    /// through unchanged with a warning.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var, NumericsError> {
        let x = self.value(a);
        let c = x.cols();
        let mut norms = Vec::with_capacity(x.rows());
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                log::warn!("l2_normalize: zero-norm row left unnormalized");
            } else {
                row.iter_mut().for_each(|v| *v /= norm);
            }
            norms.push(norm);
        }
        let out = Array::new(x.shape().to_vec(), data)?;
        self.push("l2_normalize", out, Op::L2Normalize(a, norms), &[a])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumericsError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Array>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Array>], var: Var, delta: Array) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node, g: &Array, grads: &mut [Option<Array>]) {
        let y = &node.value;
        let with_shape = |like: &Array, data: Vec<f64>| {
            Array::new(like.shape().to_vec(), data).expect("adjoint shape mirrors forward shape")
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (x, w) = (self.value(*a), self.value(*b));
                let (m, k, n) = (x.shape()[0], x.shape()[1], w.shape()[1]);
                if self.nodes[a.0].requires_grad {
                    // dA = dY · Bᵀ
                    self.accumulate(grads, *a, with_shape(x, matmul_nt(g.data(), w.data(), m, n, k)));
                }
                if self.nodes[b.0].requires_grad {
                    // dB = Aᵀ · dY
                    self.accumulate(grads, *b, with_shape(w, matmul_tn(x.data(), g.data(), m, k, n)));
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (x, w) = (self.value(*a), self.value(*b));
                let da = g.data().iter().zip(w.data()).map(|(g, w)| g * w).collect();
                let db = g.data().iter().zip(x.data()).map(|(g, x)| g * x).collect();
                self.accumulate(grads, *a, with_shape(x, da));
                self.accumulate(grads, *b, with_shape(w, db));
            }
            Op::Div(a, b) => {
                let (x, w) = (self.value(*a), self.value(*b));
                let da = g.data().iter().zip(w.data()).map(|(g, w)| g / w).collect();
                let db = g
                    .data()
                    .iter()
                    .zip(x.data().iter().zip(w.data()))
                    .map(|(g, (x, w))| -g * x / (w * w))
                    .collect();
                self.accumulate(grads, *a, with_shape(x, da));
                self.accumulate(grads, *b, with_shape(w, db));
            }
            Op::Affine(a, scale) => self.accumulate(grads, *a, g.map(|v| v * scale)),
            Op::BroadcastRows(v) => {
                let n = g.cols();
                let mut acc = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (s, v) in acc.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                self.accumulate(grads, *v, Array::vector(acc));
            }
            Op::Concat(parts) => {
                let m = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.nodes[p.0].requires_grad {
                        let mut d = Vec::with_capacity(m * w);
                        for i in 0..m {
                            d.extend_from_slice(&g.row(i)[offset..offset + w]);
                        }
                        self.accumulate(grads, p, with_shape(self.value(p), d));
                    }
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let x = self.value(*a);
                let (c, w) = (x.cols(), g.cols());
                let mut d = vec![0.0; x.len()];
                for i in 0..g.rows() {
                    d[i * c + start..i * c + start + w].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *a, with_shape(x, d));
            }
            Op::SliceRows(a, start) => {
                let x = self.value(*a);
                let c = x.cols();
                let mut d = vec![0.0; x.len()];
                d[start * c..start * c + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *a, with_shape(x, d));
            }
            Op::GatherRows(a, index) => {
                let x = self.value(*a);
                let c = x.cols();
                let mut d = vec![0.0; x.len()];
                for (r, &i) in index.iter().enumerate() {
                    for (dst, src) in d[i * c..(i + 1) * c].iter_mut().zip(g.row(r)) {
                        *dst += src;
                    }
                }
                self.accumulate(grads, *a, with_shape(x, d));
            }
            Op::Reshape(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, with_shape(x, g.data().to_vec()));
            }
            Op::Sum(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, Array::full(x.shape(), g.item()));
            }
            Op::SumAxis(a, axis) => {
                let x = self.value(*a);
                let (m, n) = (x.rows(), x.cols());
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        d[i * n + j] = if *axis == 0 { g.data()[j] } else { g.data()[i] };
                    }
                }
                self.accumulate(grads, *a, with_shape(x, d));
            }
            Op::Exp(a) => {
                let d = g.data().iter().zip(y.data()).map(|(g, y)| g * y).collect();
                self.accumulate(grads, *a, with_shape(y, d));
            }
            Op::Ln(a) => {
                let x = self.value(*a);
                let d = g.data().iter().zip(x.data()).map(|(g, x)| g / x).collect();
                self.accumulate(grads, *a, with_shape(x, d));
            }
            Op::Sigmoid(a) => {
                let d = g.data().iter().zip(y.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.accumulate(grads, *a, with_shape(y, d));
            }
            Op::Tanh(a) => {
                let d = g.data().iter().zip(y.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.accumulate(grads, *a, with_shape(y, d));
            }
            Op::Square(a) => {
                let x = self.value(*a);
                let d = g.data().iter().zip(x.data()).map(|(g, x)| 2.0 * g * x).collect();
                self.accumulate(grads, *a, with_shape(x, d));
            }
            Op::BlockAttention(op) => {
                let (qa, ka, va) = (self.value(op.q), self.value(op.k), self.value(op.v));
                let (qd, kd, vd, gd) = (qa.data(), ka.data(), va.data(), g.data());
                let (dq, dv) = (qa.cols(), va.cols());
                let (hq, hv) = (dq / op.heads, dv / op.heads);
                let mut gq = vec![0.0; qa.len()];
                let mut gk = vec![0.0; ka.len()];
                let mut gv = vec![0.0; va.len()];
                let mut at = 0;
                let mut ds = Vec::new();
                for h in 0..op.heads {
                    for b in op.offsets.windows(2) {
                        let (lo, n) = (b[0], b[1] - b[0]);
                        let w = &op.weights[at..at + n * n];
                        at += n * n;
                        for i in 0..n {
                            let gi = &gd[(lo + i) * dv + h * hv..(lo + i) * dv + (h + 1) * hv];
                            let wi = &w[i * n..(i + 1) * n];
                            ds.clear();
                            for (j, &wij) in wi.iter().enumerate() {
                                let vo = (lo + j) * dv + h * hv;
                                let mut dw = 0.0;
                                for (c, &gc) in gi.iter().enumerate() {
                                    dw += gc * vd[vo + c];
                                    gv[vo + c] += wij * gc;
                                }
                                ds.push(dw);
                            }
                            let dot: f64 = wi.iter().zip(&ds).map(|(a, b)| a * b).sum();
                            let qo = (lo + i) * dq + h * hq;
                            for (j, &wij) in wi.iter().enumerate() {
                                let s = op.scale * wij * (ds[j] - dot);
                                let ko = (lo + j) * dq + h * hq;
                                for c in 0..hq {
                                    gq[qo + c] += s * kd[ko + c];
                                    gk[ko + c] += s * qd[qo + c];
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, op.q, with_shape(qa, gq));
                self.accumulate(grads, op.k, with_shape(ka, gk));
                self.accumulate(grads, op.v, with_shape(va, gv));
            }
            Op::Softmax(a) => {
                let c = y.cols();
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d.chunks_mut(c).zip(y.data().chunks(c)).zip(g.data().chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((dv, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *a, with_shape(y, d));
            }
            Op::LogSoftmax(a, mask) => {
                let c = y.cols();
                let mut d = vec![0.0; y.len()];
                for (r, (dr, (yr, gr))) in d
                    .chunks_mut(c)
                    .zip(y.data().chunks(c).zip(g.data().chunks(c)))
                    .enumerate()
                {
                    let keep = |j: usize| mask.as_ref().map_or(true, |m| m[r * c + j]);
                    let gsum: f64 = (0..c).filter(|&j| keep(j)).map(|j| gr[j]).sum();
                    for j in (0..c).filter(|&j| keep(j)) {
                        dr[j] = gr[j] - yr[j].exp() * gsum;
                    }
                }
                self.accumulate(grads, *a, with_shape(y, d));
            }
            Op::L2Normalize(a, norms) => {
                let c = y.cols();
                let mut d = vec![0.0; y.len()];
                for (r, (dr, (yr, gr))) in d
                    .chunks_mut(c)
                    .zip(y.data().chunks(c).zip(g.data().chunks(c)))
                    .enumerate()
                {
                    let norm = norms[r];
                    if norm == 0.0 {
                        dr.copy_from_slice(gr);
                        continue;
                    }
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((dv, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv = (gv - yv * dot) / norm;
                    }
                }
                self.accumulate(grads, *a, with_shape(y, d));
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(x: &Array, mask: Option<&[bool]>) -> Array {
    let c = x.cols().max(1);
    let mut out = vec![0.0; x.len()];
    for (r, (or, xr)) in out.chunks_mut(c).zip(x.data().chunks(c)).enumerate() {
        let keep = |j: usize| mask.map_or(true, |m| m[r * c + j]);
        let max = (0..c).filter(|&j| keep(j)).map(|j| xr[j]).fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut total = 0.0;
        for j in (0..c).filter(|&j| keep(j)) {
            or[j] = (xr[j] - max).exp();
            total += or[j];
        }
        for j in (0..c).filter(|&j| keep(j)) {
            or[j] /= total;
        }
    }
    Array::new(x.shape().to_vec(), out).expect("same shape as input")
}

fn log_softmax_rows(x: &Array, mask: Option<&[bool]>) -> Array {
    let c = x.cols().max(1);
    let mut out = vec![0.0; x.len()];
    for (r, (or, xr)) in out.chunks_mut(c).zip(x.data().chunks(c)).enumerate() {
        let keep = |j: usize| mask.map_or(true, |m| m[r * c + j]);
        let max = (0..c).filter(|&j| keep(j)).map(|j| xr[j]).fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let lse = (0..c).filter(|&j| keep(j)).map(|j| (xr[j] - max).exp()).sum::<f64>().ln();
        for j in (0..c).filter(|&j| keep(j)) {
            or[j] = xr[j] - max - lse;
        }
    }
    Array::new(x.shape().to_vec(), out).expect("same shape as input")
}
