//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records a computation as a flat list of nodes. Forward values
//! are computed eagerly as ops are pushed; [`Tape::backward`] walks the list
//! in reverse and accumulates gradients for every node reachable from the
//! loss. Inputs (trainable leaves) and constants differ only in whether a
//! caller cares about their gradient.
//!
//! The op set is deliberately small: matrix products, broadcasts, a few
//! pointwise nonlinearities, row softmax / normalization, reductions, and
//! row gather/scatter for sparse routing and patch masking. Everything the
//! models need is composed from these.

use std::sync::Arc;

use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Const,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    MulElem(NodeId, NodeId),
    Scale(NodeId, f64),
    /// matrix + row vector, broadcast over rows
    AddRow(NodeId, NodeId),
    /// matrix (*) row vector, broadcast over rows
    MulRow(NodeId, NodeId),
    /// matrix (*) column vector, broadcast over columns
    MulCol(NodeId, NodeId),
    Relu(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    /// sqrt(x + eps), pointwise
    SqrtEps(NodeId),
    SoftmaxRows(NodeId),
    /// (x - mean) / sqrt(var + eps), per row, biased variance
    NormalizeRows(NodeId, f64),
    /// column means -> 1 x c
    MeanRows(NodeId),
    /// sum of all entries -> 1 x 1
    SumAll(NodeId),
    ConcatCols(Vec<NodeId>),
    /// columns [start, start+len)
    SliceCols(NodeId, usize, usize),
    GatherRows(NodeId, Arc<Vec<usize>>),
    /// scatter-add rows of the source into a zero matrix
    ScatterAddRows(NodeId, Arc<Vec<usize>>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by a backward pass, indexed by [`NodeId`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. the node, or `None` if the node does not
    /// influence the loss.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of the loss w.r.t. the node, zeros if unreached.
    pub fn get_or_zeros(&self, id: NodeId, shape: (usize, usize)) -> Tensor {
        match self.grads[id.0].as_ref() {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.0, shape.1),
        }
    }
}

/// A recorded computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// A differentiable leaf.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input)
    }

    /// A non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Const)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).add(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).sub(self.value(b));
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        self.push(v, Op::MulElem(a, b))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_row(&mut self, m: NodeId, row: NodeId) -> NodeId {
        let (mv, rv) = (self.value(m), self.value(row));
        assert_eq!(rv.rows(), 1, "add_row: second operand must be a row vector");
        assert_eq!(mv.cols(), rv.cols(), "add_row width mismatch");
        let v = Tensor::from_fn(mv.rows(), mv.cols(), |i, j| mv.get(i, j) + rv.get(0, j));
        self.push(v, Op::AddRow(m, row))
    }

    pub fn mul_row(&mut self, m: NodeId, row: NodeId) -> NodeId {
        let (mv, rv) = (self.value(m), self.value(row));
        assert_eq!(rv.rows(), 1, "mul_row: second operand must be a row vector");
        assert_eq!(mv.cols(), rv.cols(), "mul_row width mismatch");
        let v = Tensor::from_fn(mv.rows(), mv.cols(), |i, j| mv.get(i, j) * rv.get(0, j));
        self.push(v, Op::MulRow(m, row))
    }

    pub fn mul_col(&mut self, m: NodeId, col: NodeId) -> NodeId {
        let (mv, cv) = (self.value(m), self.value(col));
        assert_eq!(cv.cols(), 1, "mul_col: second operand must be a column vector");
        assert_eq!(mv.rows(), cv.rows(), "mul_col height mismatch");
        let v = Tensor::from_fn(mv.rows(), mv.cols(), |i, j| mv.get(i, j) * cv.get(i, 0));
        self.push(v, Op::MulCol(m, col))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::sin);
        self.push(v, Op::Sin(a))
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::cos);
        self.push(v, Op::Cos(a))
    }

    pub fn sqrt_eps(&mut self, a: NodeId, eps: f64) -> NodeId {
        let v = self.value(a).map(|x| (x + eps).sqrt());
        self.push(v, Op::SqrtEps(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let (r, c) = av.shape();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = av.row_slice(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|&e| e / sum));
        }
        self.push(Tensor::from_vec(r, c, data), Op::SoftmaxRows(a))
    }

    pub fn normalize_rows(&mut self, a: NodeId, eps: f64) -> NodeId {
        let av = self.value(a);
        let (r, c) = av.shape();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = av.row_slice(i);
            let (mean, inv_std) = row_stats(row, eps);
            data.extend(row.iter().map(|&x| (x - mean) * inv_std));
        }
        self.push(Tensor::from_vec(r, c, data), Op::NormalizeRows(a, eps))
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let (r, c) = av.shape();
        let mut data = vec![0.0; c];
        for i in 0..r {
            for (d, &x) in data.iter_mut().zip(av.row_slice(i)) {
                *d += x;
            }
        }
        for d in data.iter_mut() {
            *d /= r as f64;
        }
        self.push(Tensor::from_vec(1, c, data), Op::MeanRows(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        self.push(Tensor::from_vec(rows, total, data), Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let av = self.value(a);
        assert!(start + len <= av.cols(), "slice_cols out of range");
        let v = Tensor::from_fn(av.rows(), len, |i, j| av.get(i, start + j));
        self.push(v, Op::SliceCols(a, start, len))
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: Arc<Vec<usize>>) -> NodeId {
        let av = self.value(a);
        let mut data = Vec::with_capacity(indices.len() * av.cols());
        for &i in indices.iter() {
            data.extend_from_slice(av.row_slice(i));
        }
        let v = Tensor::from_vec(indices.len(), av.cols(), data);
        self.push(v, Op::GatherRows(a, indices))
    }

    pub fn scatter_add_rows(&mut self, a: NodeId, indices: Arc<Vec<usize>>, out_rows: usize) -> NodeId {
        let av = self.value(a);
        assert_eq!(av.rows(), indices.len(), "scatter_add_rows index count mismatch");
        let cols = av.cols();
        let mut data = vec![0.0; out_rows * cols];
        for (r, &i) in indices.iter().enumerate() {
            assert!(i < out_rows, "scatter index out of range");
            for (d, &x) in data[i * cols..(i + 1) * cols].iter_mut().zip(av.row_slice(r)) {
                *d += x;
            }
        }
        self.push(Tensor::from_vec(out_rows, cols, data), Op::ScatterAddRows(a, indices))
    }

    /// Backpropagate from a 1x1 loss node. Returns per-node gradients.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward() requires a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &grad, &mut grads);
            grads[idx] = Some(grad);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, grad: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Input | Op::Const => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, grad.matmul(&bv.transpose()));
                accumulate(grads, *b, av.transpose().matmul(grad));
            }
            Op::Transpose(a) => accumulate(grads, *a, grad.transpose()),
            Op::Add(a, b) => {
                accumulate(grads, *a, grad.clone());
                accumulate(grads, *b, grad.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, grad.clone());
                accumulate(grads, *b, grad.scale(-1.0));
            }
            Op::MulElem(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, grad.zip(bv, |g, y| g * y));
                accumulate(grads, *b, grad.zip(av, |g, x| g * x));
            }
            Op::Scale(a, s) => accumulate(grads, *a, grad.scale(*s)),
            Op::AddRow(m, row) => {
                accumulate(grads, *m, grad.clone());
                accumulate(grads, *row, col_sums(grad));
            }
            Op::MulRow(m, row) => {
                let (mv, rv) = (self.value(*m), self.value(*row));
                let dm = Tensor::from_fn(mv.rows(), mv.cols(), |i, j| grad.get(i, j) * rv.get(0, j));
                accumulate(grads, *m, dm);
                let dr = col_sums(&grad.zip(mv, |g, x| g * x));
                accumulate(grads, *row, dr);
            }
            Op::MulCol(m, col) => {
                let (mv, cv) = (self.value(*m), self.value(*col));
                let dm = Tensor::from_fn(mv.rows(), mv.cols(), |i, j| grad.get(i, j) * cv.get(i, 0));
                accumulate(grads, *m, dm);
                let mut dc = vec![0.0; mv.rows()];
                for i in 0..mv.rows() {
                    dc[i] = grad
                        .row_slice(i)
                        .iter()
                        .zip(mv.row_slice(i))
                        .map(|(g, x)| g * x)
                        .sum();
                }
                accumulate(grads, *col, Tensor::col(&dc));
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                accumulate(grads, *a, grad.zip(av, |g, x| if x > 0.0 { g } else { 0.0 }));
            }
            Op::Softplus(a) => {
                let av = self.value(*a);
                accumulate(grads, *a, grad.zip(av, |g, x| g * sigmoid(x)));
            }
            Op::Exp(a) => accumulate(grads, *a, grad.zip(&node.value, |g, y| g * y)),
            Op::Sin(a) => {
                let av = self.value(*a);
                accumulate(grads, *a, grad.zip(av, |g, x| g * x.cos()));
            }
            Op::Cos(a) => {
                let av = self.value(*a);
                accumulate(grads, *a, grad.zip(av, |g, x| -g * x.sin()));
            }
            Op::SqrtEps(a) => {
                accumulate(grads, *a, grad.zip(&node.value, |g, y| 0.5 * g / y));
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let (r, c) = y.shape();
                let mut dx = Vec::with_capacity(r * c);
                for i in 0..r {
                    let yr = y.row_slice(i);
                    let gr = grad.row_slice(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    dx.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
                }
                accumulate(grads, *a, Tensor::from_vec(r, c, dx));
            }
            Op::NormalizeRows(a, eps) => {
                let av = self.value(*a);
                let y = &node.value;
                let (r, c) = av.shape();
                let mut dx = Vec::with_capacity(r * c);
                for i in 0..r {
                    let (_, inv_std) = row_stats(av.row_slice(i), *eps);
                    let yr = y.row_slice(i);
                    let gr = grad.row_slice(i);
                    let g_mean: f64 = gr.iter().sum::<f64>() / c as f64;
                    let gy_mean: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / c as f64;
                    dx.extend(
                        gr.iter()
                            .zip(yr)
                            .map(|(g, y)| inv_std * (g - g_mean - y * gy_mean)),
                    );
                }
                accumulate(grads, *a, Tensor::from_vec(r, c, dx));
            }
            Op::MeanRows(a) => {
                let av = self.value(*a);
                let inv = 1.0 / av.rows() as f64;
                let d = Tensor::from_fn(av.rows(), av.cols(), |_, j| grad.get(0, j) * inv);
                accumulate(grads, *a, d);
            }
            Op::SumAll(a) => {
                let av = self.value(*a);
                let g = grad.item();
                accumulate(grads, *a, Tensor::from_fn(av.rows(), av.cols(), |_, _| g));
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    let d = Tensor::from_fn(grad.rows(), pc, |i, j| grad.get(i, start + j));
                    accumulate(grads, p, d);
                    start += pc;
                }
            }
            Op::SliceCols(a, start, len) => {
                let av = self.value(*a);
                let d = Tensor::from_fn(av.rows(), av.cols(), |i, j| {
                    if j >= *start && j < start + len {
                        grad.get(i, j - start)
                    } else {
                        0.0
                    }
                });
                accumulate(grads, *a, d);
            }
            Op::GatherRows(a, indices) => {
                let av = self.value(*a);
                let cols = av.cols();
                let mut d = vec![0.0; av.rows() * cols];
                for (r, &i) in indices.iter().enumerate() {
                    for (x, &g) in d[i * cols..(i + 1) * cols].iter_mut().zip(grad.row_slice(r)) {
                        *x += g;
                    }
                }
                accumulate(grads, *a, Tensor::from_vec(av.rows(), cols, d));
            }
            Op::ScatterAddRows(a, indices) => {
                let cols = self.value(*a).cols();
                let mut d = Vec::with_capacity(indices.len() * cols);
                for &i in indices.iter() {
                    d.extend_from_slice(grad.row_slice(i));
                }
                accumulate(grads, *a, Tensor::from_vec(indices.len(), cols, d));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
    match &mut grads[id.0] {
        Some(g) => *g = g.add(&delta),
        slot @ None => *slot = Some(delta),
    }
}

fn col_sums(m: &Tensor) -> Tensor {
    let mut out = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (o, &x) in out.iter_mut().zip(m.row_slice(i)) {
            *o += x;
        }
    }
    Tensor::row(&out)
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Numerically stable softplus: `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}
