//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation eagerly: each call computes its
//! output immediately and appends a node to the tape. Because nodes can only
//! reference nodes that already exist, the tape is acyclic by construction
//! and a single reverse sweep computes all gradients.
//!
//! ```
//! use atagnn::autodiff::Graph;
//! use atagnn::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.variable(Tensor::row(vec![1.0, -2.0]));
//! let y = g.scale(x, 3.0);
//! let loss = g.sum(y);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).unwrap().data(), &[3.0, 3.0]);
//! ```

use std::collections::{BTreeMap, HashMap};

use crate::error::AutodiffError;
use crate::params::ParameterSet;
use crate::tensor::{matmul_raw, Tensor};

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Transpose,
    ConcatCols,
    ConcatRows,
    Reshape,
    Relu,
    Tanh,
    Sigmoid,
    Cos,
    Sum,
    Mean,
    SelectRows,
    Mask,
    SoftmaxRows,
    GroupDot,
    GroupWeightedSum,
    GroupMean,
    Bce,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Cos(Var),
    Sum(Var),
    Mean(Var),
    SelectRows(Var, Vec<usize>),
    Mask(Var, Vec<bool>),
    SoftmaxRows(Var),
    GroupDot { query: Var, keys: Var },
    GroupWeightedSum { weights: Var, values: Var },
    GroupMean { x: Var, mask: Vec<bool> },
    Bce { pred: Var, labels: Vec<f64> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Transpose(..) => OpKind::Transpose,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Relu(..) => OpKind::Relu,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Cos(..) => OpKind::Cos,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::SelectRows(..) => OpKind::SelectRows,
            Op::Mask(..) => OpKind::Mask,
            Op::SoftmaxRows(_) => OpKind::SoftmaxRows,
            Op::GroupDot { .. } => OpKind::GroupDot,
            Op::GroupWeightedSum { .. } => OpKind::GroupWeightedSum,
            Op::GroupMean { .. } => OpKind::GroupMean,
            Op::Bce { .. } => OpKind::Bce,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Cos(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SelectRows(a, _)
            | Op::Mask(a, _)
            | Op::SoftmaxRows(a) => vec![*a],
            Op::ConcatCols(v) | Op::ConcatRows(v) => v.clone(),
            Op::GroupDot { query, keys } => vec![*query, *keys],
            Op::GroupWeightedSum { weights, values } => vec![*weights, *values],
            Op::GroupMean { x, .. } => vec![*x],
            Op::Bce { pred, .. } => vec![*pred],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// The recording tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    clamped: usize,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of every parameter leaf that was used on the tape.
    pub fn params(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter_map(|(name, v)| self.wrt(*v).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

fn mismatch(op: OpKind, shapes: &[&Tensor]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        shapes: shapes.iter().map(|t| t.shape().to_vec()).collect(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Broadcast shape of two matrix views, if compatible.
fn broadcast_dims(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

/// Sums a broadcast gradient back down to `target` dims.
fn reduce_to(grad: &[f64], (r, c): (usize, usize), target: (usize, usize)) -> Vec<f64> {
    if target == (r, c) {
        return grad.to_vec();
    }
    let mut out = vec![0.0; target.0 * target.1];
    for i in 0..r {
        let ti = if target.0 == 1 { 0 } else { i };
        for j in 0..c {
            let tj = if target.1 == 1 { 0 } else { j };
            out[ti * target.1 + tj] += grad[i * c + j];
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of predictions the BCE op had to clamp away from 0 or 1.
    pub fn clamped_predictions(&self) -> usize {
        self.clamped
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let requires_grad = op
            .inputs()
            .iter()
            .any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A free leaf that receives gradients, but is not a named parameter.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// The leaf for parameter `name`; repeated calls return the same node.
    pub fn param(&mut self, set: &ParameterSet, name: &str) -> Result<Var> {
        if let Some(v) = self.params.get(name) {
            return Ok(*v);
        }
        let value = set
            .get(name)
            .ok_or_else(|| AutodiffError::UnknownParameter(name.to_string()))?
            .clone();
        let v = self.leaf(value, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = (ta.dims2(), tb.dims2());
        if k != k2 {
            return Err(mismatch(OpKind::MatMul, &[ta, tb]));
        }
        let data = matmul_raw(ta.data(), (m, k), tb.data(), n);
        let value = Tensor::matrix(m, n, data)?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    fn binary(&mut self, a: Var, b: Var, kind: OpKind, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Ok(Tensor::new(ta.shape().to_vec(), data)?);
        }
        let (da, db) = (ta.dims2(), tb.dims2());
        let (r, c) = broadcast_dims(da, db).ok_or_else(|| mismatch(kind, &[ta, tb]))?;
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let ia = if da.0 == 1 { 0 } else { i };
            let ib = if db.0 == 1 { 0 } else { i };
            for j in 0..c {
                let ja = if da.1 == 1 { 0 } else { j };
                let jb = if db.1 == 1 { 0 } else { j };
                data.push(f(ta.data()[ia * da.1 + ja], tb.data()[ib * db.1 + jb]));
            }
        }
        Ok(Tensor::matrix(r, c, data)?)
    }

    /// Elementwise sum with row/column broadcasting of size-1 dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, OpKind::Add, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, OpKind::Sub, |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), value))
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, OpKind::Mul, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(Op::Scale(a, factor), value)
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Var {
        let value = self.value(a).map(|x| x + offset);
        self.push(Op::AddScalar(a), value)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = t.dims2();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = t.data()[i * c + j];
            }
        }
        let value = Tensor::matrix(c, r, data).expect("transpose preserves length");
        self.push(Op::Transpose(a), value)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |v| self.value(*v).rows());
        let tensors: Vec<&Tensor> = parts.iter().map(|v| self.value(*v)).collect();
        if tensors.iter().any(|t| t.rows() != rows) {
            return Err(mismatch(OpKind::ConcatCols, &tensors));
        }
        let total: usize = tensors.iter().map(|t| t.cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for t in &tensors {
                data.extend_from_slice(t.row_slice(i));
            }
        }
        let value = Tensor::matrix(rows, total, data)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map_or(0, |v| self.value(*v).cols());
        let tensors: Vec<&Tensor> = parts.iter().map(|v| self.value(*v)).collect();
        if tensors.iter().any(|t| t.cols() != cols) {
            return Err(mismatch(OpKind::ConcatRows, &tensors));
        }
        let rows: usize = tensors.iter().map(|t| t.rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for t in &tensors {
            data.extend_from_slice(t.data());
        }
        let value = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(Op::Reshape(a), value))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), value)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), value)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), value)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::cos);
        self.push(Op::Cos(a), value)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(Op::Sum(a), value)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        self.push(Op::Mean(a), value)
    }

    /// Gathers rows `indices` of the matrix view of `a` (repeats allowed).
    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(AutodiffError::RowOutOfRange { index: i, rows: r });
            }
            data.extend_from_slice(t.row_slice(i));
        }
        let value = Tensor::matrix(indices.len(), c, data)?;
        Ok(self.push(Op::SelectRows(a, indices.to_vec()), value))
    }

    /// Zeroes every element whose `keep` flag is false.
    pub fn mask(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let t = self.value(a);
        if keep.len() != t.len() {
            return Err(mismatch(OpKind::Mask, &[t]));
        }
        let data = t
            .data()
            .iter()
            .zip(keep)
            .map(|(&x, &k)| if k { x } else { 0.0 })
            .collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(Op::Mask(a, keep.to_vec()), value))
    }

    /// Row-wise softmax. With a mask, excluded entries are exactly zero and
    /// a fully masked row is all zeros.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let t = self.value(a);
        if let Some(m) = mask {
            if m.len() != t.len() {
                return Err(mismatch(OpKind::SoftmaxRows, &[t]));
            }
        }
        let (r, c) = t.dims2();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = t.row_slice(i);
            let keep = |j: usize| mask.is_none_or(|m| m[i * c + j]);
            let max = (0..c)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for j in (0..c).filter(|&j| keep(j)) {
                let e = (row[j] - max).exp();
                data[i * c + j] = e;
                total += e;
            }
            for j in 0..c {
                data[i * c + j] /= total;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(Op::SoftmaxRows(a), value))
    }

    /// For `query` of shape `[G, h]` and `keys` of shape `[G*n, h]`, returns
    /// the `[G, n]` matrix of dot products between query row `g` and key rows
    /// `g*n .. g*n+n`.
    pub fn group_dot(&mut self, query: Var, keys: Var) -> Result<Var> {
        let (tq, tk) = (self.value(query), self.value(keys));
        let ((g, h), (gk, hk)) = (tq.dims2(), tk.dims2());
        if h != hk || g == 0 || gk % g != 0 {
            return Err(mismatch(OpKind::GroupDot, &[tq, tk]));
        }
        let n = gk / g;
        let mut data = Vec::with_capacity(g * n);
        for i in 0..g {
            let q = tq.row_slice(i);
            for j in 0..n {
                let k = tk.row_slice(i * n + j);
                data.push(q.iter().zip(k).map(|(a, b)| a * b).sum());
            }
        }
        let value = Tensor::matrix(g, n, data)?;
        Ok(self.push(Op::GroupDot { query, keys }, value))
    }

    /// For `weights` `[G, n]` and `values` `[G*n, h]`, returns `[G, h]` with
    /// row `g` equal to `sum_j weights[g, j] * values[g*n + j]`.
    pub fn group_weighted_sum(&mut self, weights: Var, values: Var) -> Result<Var> {
        let (tw, tv) = (self.value(weights), self.value(values));
        let ((g, n), (gv, h)) = (tw.dims2(), tv.dims2());
        if g * n != gv {
            return Err(mismatch(OpKind::GroupWeightedSum, &[tw, tv]));
        }
        let mut data = vec![0.0; g * h];
        for i in 0..g {
            let out = &mut data[i * h..(i + 1) * h];
            for j in 0..n {
                let w = tw.data()[i * n + j];
                for (o, v) in out.iter_mut().zip(tv.row_slice(i * n + j)) {
                    *o += w * v;
                }
            }
        }
        let value = Tensor::matrix(g, h, data)?;
        Ok(self.push(Op::GroupWeightedSum { weights, values }, value))
    }

    /// Mean over the unmasked rows of each group of `n` consecutive rows of
    /// `x`; `mask` has one flag per row of `x`. A group with no unmasked rows
    /// yields zeros.
    pub fn group_mean(&mut self, x: Var, mask: &[bool], n: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, h) = t.dims2();
        if n == 0 || rows % n != 0 || mask.len() != rows {
            return Err(mismatch(OpKind::GroupMean, &[t]));
        }
        let g = rows / n;
        let mut data = vec![0.0; g * h];
        for i in 0..g {
            let out = &mut data[i * h..(i + 1) * h];
            let live: Vec<usize> = (0..n).filter(|&j| mask[i * n + j]).collect();
            let Some((&first, rest)) = live.split_first() else {
                continue;
            };
            out.copy_from_slice(t.row_slice(i * n + first));
            for &j in rest {
                for (o, v) in out.iter_mut().zip(t.row_slice(i * n + j)) {
                    *o += v;
                }
            }
            let count = live.len() as f64;
            for o in out.iter_mut() {
                *o /= count;
            }
        }
        let value = Tensor::matrix(g, h, data)?;
        Ok(self.push(
            Op::GroupMean {
                x,
                mask: mask.to_vec(),
            },
            value,
        ))
    }

    /// Mean binary cross-entropy of probabilities `pred` against `labels`.
    /// Predictions are clamped to `[1e-12, 1 - 1e-12]`; every clamp is counted.
    pub fn bce(&mut self, pred: Var, labels: &[f64]) -> Result<Var> {
        let t = self.value(pred);
        if t.len() != labels.len() || labels.is_empty() {
            return Err(mismatch(OpKind::Bce, &[t]));
        }
        let (loss, clamped) = crate::embed::bce_terms(t.data(), labels);
        self.clamped += clamped;
        Ok(self.push(
            Op::Bce {
                pred,
                labels: labels.to_vec(),
            },
            Tensor::scalar(loss),
        ))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(AutodiffError::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::new(root_value.shape().to_vec(), vec![1.0])?);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &grad, &mut grads)?;
            grads[idx] = Some(grad);
        }
        // Non-differentiable leaves never accumulate anything.
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.iter().map(|(k, v)| (k.clone(), *v)).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, d) in g.data_mut().iter_mut().zip(delta) {
                    *a += d;
                }
            }
            slot @ None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(Tensor::new(shape, delta).expect("gradient matches value shape"));
            }
        }
    }

    fn propagate(&self, node: &Node, grad: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let g = grad.data();
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ((m, k), (_, n)) = (ta.dims2(), tb.dims2());
                // dA = G · Bᵀ, dB = Aᵀ · G
                let mut da = vec![0.0; m * k];
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let a_ip = ta.data()[i * k + p];
                        let mut acc = 0.0;
                        for j in 0..n {
                            let gij = g[i * n + j];
                            acc += gij * tb.data()[p * n + j];
                            db[p * n + j] += a_ip * gij;
                        }
                        da[i * k + p] = acc;
                    }
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let dims = out.dims2();
                let (da_dims, db_dims) = (ta.dims2(), tb.dims2());
                let same = ta.shape() == tb.shape();
                let at = |t: &Tensor, (r, c): (usize, usize), i: usize, j: usize| {
                    if same {
                        t.data()[i * dims.1 + j]
                    } else {
                        let ii = if r == 1 { 0 } else { i };
                        let jj = if c == 1 { 0 } else { j };
                        t.data()[ii * c + jj]
                    }
                };
                let mut ga = Vec::with_capacity(g.len());
                let mut gb = Vec::with_capacity(g.len());
                for i in 0..dims.0 {
                    for j in 0..dims.1 {
                        let gij = g[i * dims.1 + j];
                        match node.op {
                            Op::Add(..) => {
                                ga.push(gij);
                                gb.push(gij);
                            }
                            Op::Sub(..) => {
                                ga.push(gij);
                                gb.push(-gij);
                            }
                            _ => {
                                ga.push(gij * at(tb, db_dims, i, j));
                                gb.push(gij * at(ta, da_dims, i, j));
                            }
                        }
                    }
                }
                let (ga, gb) = if same {
                    (ga, gb)
                } else {
                    (reduce_to(&ga, dims, da_dims), reduce_to(&gb, dims, db_dims))
                };
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Scale(a, f) => {
                self.accumulate(grads, *a, g.iter().map(|x| x * f).collect());
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                self.accumulate(grads, *a, g.to_vec());
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = g[j * r + i];
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let (r, c) = self.value(*p).dims2();
                    let mut d = Vec::with_capacity(r * c);
                    for i in 0..r {
                        d.extend_from_slice(&g[i * total + offset..i * total + offset + c]);
                    }
                    self.accumulate(grads, *p, d);
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    self.accumulate(grads, *p, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = g
                    .iter()
                    .zip(out.data())
                    .map(|(gi, y)| gi * (1.0 - y * y))
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = g
                    .iter()
                    .zip(out.data())
                    .map(|(gi, y)| gi * y * (1.0 - y))
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Cos(a) => {
                let x = self.value(*a).data();
                let d = g.iter().zip(x).map(|(gi, xi)| -gi * xi.sin()).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![g[0] / n as f64; n]);
            }
            Op::SelectRows(a, indices) => {
                let (r, c) = self.value(*a).dims2();
                let mut d = vec![0.0; r * c];
                for (k, &i) in indices.iter().enumerate() {
                    for j in 0..c {
                        d[i * c + j] += g[k * c + j];
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Mask(a, keep) => {
                let d = g
                    .iter()
                    .zip(keep)
                    .map(|(gi, &k)| if k { *gi } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                // Masked outputs are exactly zero, so y ⊙ (g - y·g) is zero
                // there without consulting the mask.
                let (r, c) = out.dims2();
                let y = out.data();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let row = i * c..(i + 1) * c;
                    let dot: f64 = y[row.clone()].iter().zip(&g[row.clone()]).map(|(a, b)| a * b).sum();
                    for j in row {
                        d[j] = y[j] * (g[j] - dot);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::GroupDot { query, keys } => {
                let (tq, tk) = (self.value(*query), self.value(*keys));
                let (gq, h) = tq.dims2();
                let n = out.cols();
                let mut dq = vec![0.0; gq * h];
                let mut dk = vec![0.0; tk.len()];
                for i in 0..gq {
                    let q = tq.row_slice(i);
                    for j in 0..n {
                        let gij = g[i * n + j];
                        let k = tk.row_slice(i * n + j);
                        for t in 0..h {
                            dq[i * h + t] += gij * k[t];
                            dk[(i * n + j) * h + t] = gij * q[t];
                        }
                    }
                }
                self.accumulate(grads, *query, dq);
                self.accumulate(grads, *keys, dk);
            }
            Op::GroupWeightedSum { weights, values } => {
                let (tw, tv) = (self.value(*weights), self.value(*values));
                let (gw, n) = tw.dims2();
                let h = tv.cols();
                let mut dw = vec![0.0; gw * n];
                let mut dv = vec![0.0; tv.len()];
                for i in 0..gw {
                    let go = &g[i * h..(i + 1) * h];
                    for j in 0..n {
                        let v = tv.row_slice(i * n + j);
                        let w = tw.data()[i * n + j];
                        dw[i * n + j] = go.iter().zip(v).map(|(a, b)| a * b).sum();
                        for t in 0..h {
                            dv[(i * n + j) * h + t] = w * go[t];
                        }
                    }
                }
                self.accumulate(grads, *weights, dw);
                self.accumulate(grads, *values, dv);
            }
            Op::GroupMean { x, mask } => {
                let (rows, h) = self.value(*x).dims2();
                let groups = out.rows();
                let n = rows / groups;
                let mut d = vec![0.0; rows * h];
                for i in 0..groups {
                    let count = (0..n).filter(|&j| mask[i * n + j]).count();
                    if count == 0 {
                        continue;
                    }
                    for j in (0..n).filter(|&j| mask[i * n + j]) {
                        for t in 0..h {
                            d[(i * n + j) * h + t] = g[i * h + t] / count as f64;
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Bce { pred, labels } => {
                let p = self.value(*pred).data();
                let n = p.len() as f64;
                let d = p
                    .iter()
                    .zip(labels)
                    .map(|(&pi, &y)| {
                        let pc = pi.clamp(crate::embed::BCE_EPS, 1.0 - crate::embed::BCE_EPS);
                        g[0] * (pc - y) / (pc * (1.0 - pc)) / n
                    })
                    .collect();
                self.accumulate(grads, *pred, d);
            }
        }
        Ok(())
    }
}
