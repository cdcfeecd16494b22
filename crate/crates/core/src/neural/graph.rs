//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node holding its forward value. [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients for the parameters that
//! were marked trainable when the graph was created. Constants and frozen
//! parameters never receive gradients, so subgraphs that depend only on them
//! are skipped entirely.

use std::collections::HashMap;
use std::sync::Arc;

use super::params::{Gradients, ParamId, ParameterSet};
use super::tensor::{matmul_acc, matmul_t, matmul_tn_acc, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMulT(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    MulConst(NodeId, Arc<Tensor>),
    AddConst(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Log(NodeId),
    Concat(Vec<NodeId>),
    Slice(NodeId, usize),
    Gather(NodeId, Vec<usize>),
    Reshape(NodeId),
    LogSoftmax(NodeId),
    LogSumExp(NodeId),
    Pick(NodeId, Vec<usize>),
    Sum(NodeId),
    Dot(NodeId, Arc<Tensor>),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
    trainable: Vec<bool>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph in which no parameter is trainable (inference).
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), param_nodes: HashMap::new(), trainable: Vec::new() }
    }

    pub fn with_trainable(params: &ParameterSet, which: impl Fn(ParamId) -> bool) -> Self {
        Graph { nodes: Vec::new(), param_nodes: HashMap::new(), trainable: params.ids().map(which).collect() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.push_shared(Arc::new(value), op, needs_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shared_value(&self, id: NodeId) -> Arc<Tensor> {
        Arc::clone(&self.nodes[id.0].value)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    pub fn constant_shared(&mut self, t: Arc<Tensor>) -> NodeId {
        self.push_shared(t, Op::Leaf, false)
    }

    /// Parameter leaf; repeated calls return the same node.
    pub fn param(&mut self, params: &ParameterSet, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let trainable = self.trainable.get(id.0).copied().unwrap_or(false);
        let n = self.push_shared(params.shared(id), Op::Param, trainable);
        self.param_nodes.insert(id, n);
        n
    }

    pub fn matmul_t(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.cols() != wv.cols() {
            return Err(Error::shape(format!("matmul: input width {} vs weight width {}", xv.cols(), wv.cols())));
        }
        let mut out = Tensor::zeros(xv.rows(), wv.rows());
        matmul_t(xv, wv, &mut out, false);
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(out, Op::MatMulT(x, w), ng))
    }

    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::shape("bias width mismatch"));
        }
        let mut out = xv.clone();
        let cols = out.cols();
        for r in 0..out.rows() {
            for (o, bb) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        debug_assert_eq!(cols, bv.cols());
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(out, Op::AddBias(x, b), ng))
    }

    fn binary(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(Error::shape(format!("elementwise op on {:?} and {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, op, ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let out = self.value(a).map(|v| v * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let out = self.value(a).map(|v| v + s);
        let ng = self.ng(a);
        self.push(out, Op::AddScalar(a), ng)
    }

    /// Elementwise product with a constant (dropout and row masks).
    pub fn mul_const(&mut self, a: NodeId, m: Arc<Tensor>) -> Result<NodeId> {
        let av = self.value(a);
        if !av.same_shape(&m) {
            return Err(Error::shape("mul_const shape mismatch"));
        }
        let data = av.data().iter().zip(m.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::MulConst(a, m), ng))
    }

    pub fn add_const(&mut self, a: NodeId, c: &Tensor) -> Result<NodeId> {
        let av = self.value(a);
        if !av.same_shape(c) {
            return Err(Error::shape("add_const shape mismatch"));
        }
        let data = av.data().iter().zip(c.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::AddConst(a), ng))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(f64::ln);
        let ng = self.ng(a);
        self.push(out, Op::Log(a), ng)
    }

    /// Column-wise concatenation of equal-height nodes.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::shape("concat row mismatch"));
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            let row = out.row_mut(r);
            for &p in parts {
                let pv = &self.nodes[p.0].value;
                let w = pv.cols();
                row[off..off + w].copy_from_slice(pv.row(r));
                off += w;
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::Concat(parts.to_vec()), ng))
    }

    /// Columns `start..start+len`.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let av = self.value(a);
        if start + len > av.cols() {
            return Err(Error::shape("slice out of range"));
        }
        let mut out = Tensor::zeros(av.rows(), len);
        for r in 0..av.rows() {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::Slice(a, start), ng))
    }

    /// Row gather (embedding lookup, row replication).
    pub fn gather_rows(&mut self, a: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        let av = self.value(a);
        if let Some(&bad) = rows.iter().find(|&&r| r >= av.rows()) {
            return Err(Error::shape(format!("gather row {bad} of {}-row table", av.rows())));
        }
        let mut out = Tensor::zeros(rows.len(), av.cols());
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(av.row(r));
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::Gather(a, rows), ng))
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let out = self.value(a).clone().reshaped(rows, cols)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let mut out = av.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::LogSoftmax(a), ng)
    }

    /// Row-wise log-sum-exp into an `R x 1` column. `-inf` entries are allowed.
    pub fn log_sum_exp(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let data = (0..av.rows()).map(|r| log_sum_exp(av.row(r))).collect();
        let ng = self.ng(a);
        self.push(Tensor::column(data), Op::LogSumExp(a), ng)
    }

    /// One element per row: `out[r] = a[r, cols[r]]`.
    pub fn pick(&mut self, a: NodeId, cols: Vec<usize>) -> Result<NodeId> {
        let av = self.value(a);
        if cols.len() != av.rows() || cols.iter().any(|&c| c >= av.cols()) {
            return Err(Error::shape("pick index mismatch"));
        }
        let data = cols.iter().enumerate().map(|(r, &c)| av.get(r, c)).collect();
        let ng = self.ng(a);
        Ok(self.push(Tensor::column(data), Op::Pick(a, cols), ng))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// `sum(a * w)` for a constant weight tensor.
    pub fn dot_const(&mut self, a: NodeId, w: Arc<Tensor>) -> Result<NodeId> {
        let av = self.value(a);
        if !av.same_shape(&w) {
            return Err(Error::shape("dot_const shape mismatch"));
        }
        let s = av.data().iter().zip(w.data()).map(|(x, y)| x * y).sum();
        let ng = self.ng(a);
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, w), ng))
    }

    /// Reverse pass from a `1 x 1` loss. Every trainable parameter gets a
    /// gradient, zero when the loss does not reach it.
    pub fn backward(&self, loss: NodeId, params: &ParameterSet) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape(format!("backward needs a scalar loss, got {:?}", lv.shape())));
        }
        if !lv.item().is_finite() {
            return Err(Error::NonFinite(format!("loss = {}", lv.item())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.propagate(node, &dy, &mut grads);
            if matches!(node.op, Op::Param) {
                grads[idx] = Some(dy);
            }
        }

        let mut out = vec![None; params.len()];
        for (i, t) in self.trainable.iter().enumerate() {
            if *t {
                let id = ParamId(i);
                let g = self.param_nodes.get(&id).and_then(|n| grads[n.0].take()).unwrap_or_else(|| {
                    let p = params.get(id);
                    Tensor::zeros(p.rows(), p.cols())
                });
                out[i] = Some(g);
            }
        }
        Ok(Gradients::new(out))
    }

    fn propagate(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMulT(x, w) => {
                if self.ng(*x) {
                    let wv = self.value(*w);
                    let g = slot(grads, *x, self.value(*x));
                    matmul_acc(dy, wv, g);
                }
                if self.ng(*w) {
                    let xv = self.value(*x);
                    let g = slot(grads, *w, self.value(*w));
                    matmul_tn_acc(dy, xv, g);
                }
            }
            Op::AddBias(x, b) => {
                if self.ng(*x) {
                    slot(grads, *x, self.value(*x)).add_assign(dy);
                }
                if self.ng(*b) {
                    let g = slot(grads, *b, self.value(*b));
                    for r in 0..dy.rows() {
                        for (gg, d) in g.data_mut().iter_mut().zip(dy.row(r)) {
                            *gg += d;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for &p in [a, b] {
                    if self.ng(p) {
                        slot(grads, p, self.value(p)).add_assign(dy);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    slot(grads, *a, self.value(*a)).add_assign(dy);
                }
                if self.ng(*b) {
                    let g = slot(grads, *b, self.value(*b));
                    for (gg, d) in g.data_mut().iter_mut().zip(dy.data()) {
                        *gg -= d;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.shared_value(*a), self.shared_value(*b));
                if self.ng(*a) {
                    let g = slot(grads, *a, &av);
                    for ((gg, d), o) in g.data_mut().iter_mut().zip(dy.data()).zip(bv.data()) {
                        *gg += d * o;
                    }
                }
                if self.ng(*b) {
                    let g = slot(grads, *b, &bv);
                    for ((gg, d), o) in g.data_mut().iter_mut().zip(dy.data()).zip(av.data()) {
                        *gg += d * o;
                    }
                }
            }
            Op::Scale(a, s) => {
                let g = slot(grads, *a, self.value(*a));
                for (gg, d) in g.data_mut().iter_mut().zip(dy.data()) {
                    *gg += d * s;
                }
            }
            Op::AddScalar(a) | Op::AddConst(a) | Op::Reshape(a) => {
                let g = slot(grads, *a, self.value(*a));
                for (gg, d) in g.data_mut().iter_mut().zip(dy.data()) {
                    *gg += d;
                }
            }
            Op::MulConst(a, m) => {
                let g = slot(grads, *a, self.value(*a));
                for ((gg, d), mm) in g.data_mut().iter_mut().zip(dy.data()).zip(m.data()) {
                    *gg += d * mm;
                }
            }
            Op::Sigmoid(a) => {
                let g = slot(grads, *a, self.value(*a));
                for ((gg, d), s) in g.data_mut().iter_mut().zip(dy.data()).zip(y.data()) {
                    *gg += d * s * (1.0 - s);
                }
            }
            Op::Tanh(a) => {
                let g = slot(grads, *a, self.value(*a));
                for ((gg, d), t) in g.data_mut().iter_mut().zip(dy.data()).zip(y.data()) {
                    *gg += d * (1.0 - t * t);
                }
            }
            Op::Log(a) => {
                let av = self.shared_value(*a);
                let g = slot(grads, *a, &av);
                for ((gg, d), x) in g.data_mut().iter_mut().zip(dy.data()).zip(av.data()) {
                    *gg += d / x;
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.ng(p) {
                        let g = slot(grads, p, self.value(p));
                        for r in 0..dy.rows() {
                            for (gg, d) in g.row_mut(r).iter_mut().zip(&dy.row(r)[off..off + w]) {
                                *gg += d;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::Slice(a, start) => {
                let g = slot(grads, *a, self.value(*a));
                let w = dy.cols();
                for r in 0..dy.rows() {
                    for (gg, d) in g.row_mut(r)[*start..start + w].iter_mut().zip(dy.row(r)) {
                        *gg += d;
                    }
                }
            }
            Op::Gather(a, rows) => {
                let g = slot(grads, *a, self.value(*a));
                for (i, &r) in rows.iter().enumerate() {
                    for (gg, d) in g.row_mut(r).iter_mut().zip(dy.row(i)) {
                        *gg += d;
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let g = slot(grads, *a, self.value(*a));
                for r in 0..dy.rows() {
                    let total: f64 = dy.row(r).iter().sum();
                    for ((gg, d), ly) in g.row_mut(r).iter_mut().zip(dy.row(r)).zip(y.row(r)) {
                        *gg += d - ly.exp() * total;
                    }
                }
            }
            Op::LogSumExp(a) => {
                let av = self.shared_value(*a);
                let g = slot(grads, *a, &av);
                for r in 0..dy.rows() {
                    let lse = y.get(r, 0);
                    if lse == f64::NEG_INFINITY {
                        continue;
                    }
                    let d = dy.get(r, 0);
                    for (gg, x) in g.row_mut(r).iter_mut().zip(av.row(r)) {
                        *gg += d * (x - lse).exp();
                    }
                }
            }
            Op::Pick(a, cols) => {
                let g = slot(grads, *a, self.value(*a));
                let cols_n = g.cols();
                for (r, &c) in cols.iter().enumerate() {
                    g.data_mut()[r * cols_n + c] += dy.get(r, 0);
                }
            }
            Op::Sum(a) => {
                let d = dy.item();
                let g = slot(grads, *a, self.value(*a));
                for gg in g.data_mut() {
                    *gg += d;
                }
            }
            Op::Dot(a, w) => {
                let d = dy.item();
                let g = slot(grads, *a, self.value(*a));
                for (gg, ww) in g.data_mut().iter_mut().zip(w.data()) {
                    *gg += d * ww;
                }
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], id: NodeId, like: &Tensor) -> &'a mut Tensor {
    grads[id.0].get_or_insert_with(|| Tensor::zeros(like.rows(), like.cols()))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted log-sum-exp; `-inf` when every entry is `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
