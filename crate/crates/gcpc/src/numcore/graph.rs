//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! Operations are recorded on a tape in construction order, which is also a
//! topological order of the acyclic graph. `backward` walks the tape in
//! reverse and accumulates gradients into every node that can reach a
//! trainable parameter.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numcore::params::{Gradients, ParameterStore};
use crate::numcore::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// A[m,k] * B[n,k]^T -> [m,n]
    MatMulBt(NodeId, NodeId),
    /// W[m,n] * x[n] -> [m]
    MatVec(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// A[m,n] + b[n] per row
    AddRowBroadcast(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    /// Row i of a 2-D tensor -> 1-D
    Row(NodeId, usize),
    /// 1-D slice (start, len)
    Slice(NodeId, usize, usize),
    /// Selected rows of a 2-D tensor; duplicates allowed.
    GatherRows(NodeId, Vec<usize>),
    /// Stack equal-length 1-D nodes into a matrix.
    StackRows(Vec<NodeId>),
    /// 1-D log-softmax with max subtraction.
    LogSoftmax(NodeId),
    /// 1-D -> scalar
    LogSumExp(NodeId),
    /// scalar, scalar -> scalar
    LogAddExp(NodeId, NodeId),
    /// 1-D element -> scalar
    Index(NodeId, usize),
    Sum(NodeId),
    Mean(NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bindings: HashMap<String, NodeId>,
}

fn logsumexp_slice(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` root w.r.t. this node, if it was reached.
    pub fn grad(&self, id: NodeId) -> Option<Tensor> {
        let n = &self.nodes[id.0];
        n.grad
            .as_ref()
            .map(|g| Tensor::new(n.value.shape().to_vec(), g.clone()).expect("grad tensor"))
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Insert a constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> NodeId {
        self.constant(Tensor::zeros(shape))
    }

    /// Bind a named parameter as a leaf. Binding the same name twice returns
    /// the same node, so gradients accumulate once per parameter.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.bindings.get(name) {
            return Ok(id);
        }
        let tensor = store.get(name)?.clone();
        let trainable = store.is_trainable(name);
        let id = self.push(Op::Leaf, tensor, trainable);
        self.bindings.insert(name.to_string(), id);
        Ok(id)
    }

    // ---- op constructors ---------------------------------------------------

    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dim2()?;
        let (n, k2) = self.value(b).dim2()?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul_bt: inner dims {k} vs {k2}"
            )));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = &av[i * k..(i + 1) * k];
            for j in 0..n {
                let br = &bv[j * k..(j + 1) * k];
                out[i * n + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMulBt(a, b), Tensor::matrix(m, n, out)?, rg))
    }

    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(w).dim2()?;
        if self.value(x).shape() != [n] {
            return Err(Error::Dimension(format!(
                "matvec: W is {m}x{n}, x has shape {:?}",
                self.value(x).shape()
            )));
        }
        let wv = self.value(w).data();
        let xv = self.value(x).data();
        let out: Vec<f64> = (0..m)
            .map(|i| wv[i * n..(i + 1) * n].iter().zip(xv).map(|(a, b)| a * b).sum())
            .collect();
        let rg = self.rg(w) || self.rg(x);
        Ok(self.push(Op::MatVec(w, x), Tensor::vector(out)?, rg))
    }

    fn binary_same_shape(&mut self, a: NodeId, b: NodeId, name: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "{name}: shapes {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "add")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), Tensor::new(shape, out)?, rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "sub")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Sub(a, b), Tensor::new(shape, out)?, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "mul")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), Tensor::new(shape, out)?, rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        if !c.is_finite() {
            return Err(Error::Numeric(format!("scale by non-finite {c}")));
        }
        let out: Vec<f64> = self.value(a).data().iter().map(|x| x * c).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a);
        Ok(self.push(Op::Scale(a, c), Tensor::new(shape, out)?, rg))
    }

    pub fn add_row_broadcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).dim2()?;
        if self.value(b).shape() != [n] {
            return Err(Error::Dimension(format!(
                "add_row_broadcast: matrix cols {n}, bias shape {:?}",
                self.value(b).shape()
            )));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(av[i * n + j] + bv[j]);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::AddRowBroadcast(a, b), Tensor::matrix(m, n, out)?, rg))
    }

    fn unary<F: Fn(f64) -> f64>(&mut self, a: NodeId, f: F, op: Op) -> Result<NodeId> {
        let out: Vec<f64> = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a);
        Ok(self.push(op, Tensor::new(shape, out)?, rg))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn row(&mut self, a: NodeId, i: usize) -> Result<NodeId> {
        let (m, _n) = self.value(a).dim2()?;
        if i >= m {
            return Err(Error::Dimension(format!("row {i} of {m}-row matrix")));
        }
        let out = self.value(a).row(i).to_vec();
        let rg = self.rg(a);
        Ok(self.push(Op::Row(a, i), Tensor::vector(out)?, rg))
    }

    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        if self.value(a).ndim() != 1 {
            return Err(Error::Dimension("slice expects a 1-D tensor".into()));
        }
        let total = self.value(a).numel();
        if start + len > total || len == 0 {
            return Err(Error::Dimension(format!(
                "slice [{start}, {start}+{len}) out of 1-D tensor of length {total}"
            )));
        }
        let out = self.value(a).data()[start..start + len].to_vec();
        let rg = self.rg(a);
        Ok(self.push(Op::Slice(a, start, len), Tensor::vector(out)?, rg))
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let (m, n) = self.value(a).dim2()?;
        if indices.is_empty() {
            return Err(Error::Dimension("gather_rows: empty index list".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::Dimension(format!(
                "gather_rows: index {bad} out of {m} rows"
            )));
        }
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in &indices {
            out.extend_from_slice(&av[i * n..(i + 1) * n]);
        }
        let k = indices.len();
        let rg = self.rg(a);
        Ok(self.push(Op::GatherRows(a, indices), Tensor::matrix(k, n, out)?, rg))
    }

    pub fn stack_rows(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        if rows.is_empty() {
            return Err(Error::Dimension("stack_rows: no rows".into()));
        }
        let n = self.value(rows[0]).numel();
        let mut out = Vec::with_capacity(rows.len() * n);
        let mut rg = false;
        for &r in rows {
            let v = self.value(r);
            if v.ndim() != 1 || v.numel() != n {
                return Err(Error::Dimension(format!(
                    "stack_rows: row shape {:?}, expected [{n}]",
                    v.shape()
                )));
            }
            out.extend_from_slice(v.data());
            rg |= self.rg(r);
        }
        let t = Tensor::matrix(rows.len(), n, out)?;
        Ok(self.push(Op::StackRows(rows.to_vec()), t, rg))
    }

    /// x - logsumexp(x), computed with max subtraction.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).ndim() != 1 || self.value(a).numel() == 0 {
            return Err(Error::Dimension("log_softmax expects a non-empty 1-D tensor".into()));
        }
        let xs = self.value(a).data();
        let lse = logsumexp_slice(xs);
        let out: Vec<f64> = xs.iter().map(|x| x - lse).collect();
        let rg = self.rg(a);
        Ok(self.push(Op::LogSoftmax(a), Tensor::vector(out)?, rg))
    }

    pub fn logsumexp(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).ndim() != 1 || self.value(a).numel() == 0 {
            return Err(Error::Dimension("logsumexp expects a non-empty 1-D tensor".into()));
        }
        let v = logsumexp_slice(self.value(a).data());
        let rg = self.rg(a);
        Ok(self.push(Op::LogSumExp(a), Tensor::scalar(v)?, rg))
    }

    pub fn logaddexp(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).numel() != 1 || self.value(b).numel() != 1 {
            return Err(Error::Dimension("logaddexp expects scalars".into()));
        }
        let (x, y) = (self.value(a).item(), self.value(b).item());
        let m = x.max(y);
        let v = m + ((x - m).exp() + (y - m).exp()).ln();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::LogAddExp(a, b), Tensor::scalar(v)?, rg))
    }

    pub fn index(&mut self, a: NodeId, i: usize) -> Result<NodeId> {
        if self.value(a).ndim() != 1 {
            return Err(Error::Dimension("index expects a 1-D tensor".into()));
        }
        if i >= self.value(a).numel() {
            return Err(Error::Dimension(format!(
                "index {i} out of length {}",
                self.value(a).numel()
            )));
        }
        let v = self.value(a).data()[i];
        let rg = self.rg(a);
        Ok(self.push(Op::Index(a, i), Tensor::scalar(v)?, rg))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        Ok(self.push(Op::Sum(a), Tensor::scalar(v)?, rg))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).numel();
        let v = self.value(a).data().iter().sum::<f64>() / n as f64;
        let rg = self.rg(a);
        Ok(self.push(Op::Mean(a), Tensor::scalar(v)?, rg))
    }

    /// W*x + b for W[m,n], x[n], b[m].
    pub fn affine(&mut self, w: NodeId, x: NodeId, b: NodeId) -> Result<NodeId> {
        let wx = self.matvec(w, x)?;
        self.add(wx, b)
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse accumulation from a scalar root. Gradients are stored on the
    /// nodes and can be read with `grad` / `param_grads`.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[root.0].requires_grad {
            // Root does not depend on any trainable leaf; all gradients are zero.
            return Ok(());
        }
        self.nodes[root.0].grad = Some(vec![1.0]);

        for id in (0..=root.0).rev() {
            let Some(g) = self.nodes[id].grad.take() else {
                continue;
            };
            self.propagate(id, &g);
            self.nodes[id].grad = Some(g);
        }
        Ok(())
    }

    fn accum(&mut self, id: NodeId, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let numel = self.nodes[id.0].value.numel();
        let slot = self.nodes[id.0].grad.get_or_insert_with(|| vec![0.0; numel]);
        f(slot);
    }

    fn propagate(&mut self, id: usize, g: &[f64]) {
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMulBt(a, b) => {
                let (m, k) = self.nodes[a.0].value.dim2().unwrap();
                let (n, _) = self.nodes[b.0].value.dim2().unwrap();
                if self.rg(a) {
                    let bv = self.nodes[b.0].value.data().to_vec();
                    self.accum(a, |da| {
                        for i in 0..m {
                            for j in 0..n {
                                let gij = g[i * n + j];
                                if gij == 0.0 {
                                    continue;
                                }
                                let br = &bv[j * k..(j + 1) * k];
                                let dr = &mut da[i * k..(i + 1) * k];
                                for (d, bb) in dr.iter_mut().zip(br) {
                                    *d += gij * bb;
                                }
                            }
                        }
                    });
                }
                if self.rg(b) {
                    let av = self.nodes[a.0].value.data().to_vec();
                    self.accum(b, |db| {
                        for i in 0..m {
                            let ar = &av[i * k..(i + 1) * k];
                            for j in 0..n {
                                let gij = g[i * n + j];
                                if gij == 0.0 {
                                    continue;
                                }
                                let dr = &mut db[j * k..(j + 1) * k];
                                for (d, aa) in dr.iter_mut().zip(ar) {
                                    *d += gij * aa;
                                }
                            }
                        }
                    });
                }
            }
            Op::MatVec(w, x) => {
                let (m, n) = self.nodes[w.0].value.dim2().unwrap();
                if self.rg(w) {
                    let xv = self.nodes[x.0].value.data().to_vec();
                    self.accum(w, |dw| {
                        for i in 0..m {
                            let gi = g[i];
                            if gi == 0.0 {
                                continue;
                            }
                            let dr = &mut dw[i * n..(i + 1) * n];
                            for (d, xx) in dr.iter_mut().zip(&xv) {
                                *d += gi * xx;
                            }
                        }
                    });
                }
                if self.rg(x) {
                    let wv = self.nodes[w.0].value.data().to_vec();
                    self.accum(x, |dx| {
                        for i in 0..m {
                            let gi = g[i];
                            if gi == 0.0 {
                                continue;
                            }
                            let wr = &wv[i * n..(i + 1) * n];
                            for (d, ww) in dx.iter_mut().zip(wr) {
                                *d += gi * ww;
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                self.accum(a, |da| {
                    for (d, gg) in da.iter_mut().zip(g) {
                        *d += gg;
                    }
                });
                self.accum(b, |db| {
                    for (d, gg) in db.iter_mut().zip(g) {
                        *d += gg;
                    }
                });
            }
            Op::Sub(a, b) => {
                self.accum(a, |da| {
                    for (d, gg) in da.iter_mut().zip(g) {
                        *d += gg;
                    }
                });
                self.accum(b, |db| {
                    for (d, gg) in db.iter_mut().zip(g) {
                        *d -= gg;
                    }
                });
            }
            Op::Mul(a, b) => {
                if self.rg(a) {
                    let bv = self.nodes[b.0].value.data().to_vec();
                    self.accum(a, |da| {
                        for ((d, gg), bb) in da.iter_mut().zip(g).zip(&bv) {
                            *d += gg * bb;
                        }
                    });
                }
                if self.rg(b) {
                    let av = self.nodes[a.0].value.data().to_vec();
                    self.accum(b, |db| {
                        for ((d, gg), aa) in db.iter_mut().zip(g).zip(&av) {
                            *d += gg * aa;
                        }
                    });
                }
            }
            Op::Scale(a, c) => {
                self.accum(a, |da| {
                    for (d, gg) in da.iter_mut().zip(g) {
                        *d += gg * c;
                    }
                });
            }
            Op::AddRowBroadcast(a, b) => {
                let (m, n) = self.nodes[a.0].value.dim2().unwrap();
                self.accum(a, |da| {
                    for (d, gg) in da.iter_mut().zip(g) {
                        *d += gg;
                    }
                });
                self.accum(b, |db| {
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += g[i * n + j];
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let xv = self.nodes[a.0].value.data().to_vec();
                self.accum(a, |da| {
                    for ((d, gg), x) in da.iter_mut().zip(g).zip(&xv) {
                        if *x > 0.0 {
                            *d += gg;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let yv = self.nodes[id].value.data().to_vec();
                self.accum(a, |da| {
                    for ((d, gg), y) in da.iter_mut().zip(g).zip(&yv) {
                        *d += gg * y * (1.0 - y);
                    }
                });
            }
            Op::Tanh(a) => {
                let yv = self.nodes[id].value.data().to_vec();
                self.accum(a, |da| {
                    for ((d, gg), y) in da.iter_mut().zip(g).zip(&yv) {
                        *d += gg * (1.0 - y * y);
                    }
                });
            }
            Op::Row(a, i) => {
                let n = g.len();
                self.accum(a, |da| {
                    for (d, gg) in da[i * n..(i + 1) * n].iter_mut().zip(g) {
                        *d += gg;
                    }
                });
            }
            Op::Slice(a, start, len) => {
                self.accum(a, |da| {
                    for (d, gg) in da[start..start + len].iter_mut().zip(g) {
                        *d += gg;
                    }
                });
            }
            Op::GatherRows(a, indices) => {
                let n = g.len() / indices.len();
                self.accum(a, |da| {
                    for (r, &i) in indices.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        for (d, gg) in da[i * n..(i + 1) * n].iter_mut().zip(gr) {
                            *d += gg;
                        }
                    }
                });
            }
            Op::StackRows(rows) => {
                let n = g.len() / rows.len();
                for (r, &row) in rows.iter().enumerate() {
                    let gr = &g[r * n..(r + 1) * n];
                    self.accum(row, |da| {
                        for (d, gg) in da.iter_mut().zip(gr) {
                            *d += gg;
                        }
                    });
                }
            }
            Op::LogSoftmax(a) => {
                let yv = self.nodes[id].value.data().to_vec();
                let gsum: f64 = g.iter().sum();
                self.accum(a, |da| {
                    for ((d, gg), y) in da.iter_mut().zip(g).zip(&yv) {
                        *d += gg - y.exp() * gsum;
                    }
                });
            }
            Op::LogSumExp(a) => {
                let out = self.nodes[id].value.item();
                let xv = self.nodes[a.0].value.data().to_vec();
                self.accum(a, |da| {
                    for (d, x) in da.iter_mut().zip(&xv) {
                        *d += (x - out).exp() * g[0];
                    }
                });
            }
            Op::LogAddExp(a, b) => {
                let out = self.nodes[id].value.item();
                let xa = self.nodes[a.0].value.item();
                let xb = self.nodes[b.0].value.item();
                self.accum(a, |da| da[0] += (xa - out).exp() * g[0]);
                self.accum(b, |db| db[0] += (xb - out).exp() * g[0]);
            }
            Op::Index(a, i) => {
                self.accum(a, |da| da[i] += g[0]);
            }
            Op::Sum(a) => {
                self.accum(a, |da| {
                    for d in da.iter_mut() {
                        *d += g[0];
                    }
                });
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel() as f64;
                self.accum(a, |da| {
                    for d in da.iter_mut() {
                        *d += g[0] / n;
                    }
                });
            }
        }
    }

    /// Gradients for every parameter in the store after `backward`.
    /// Parameters the root cannot reach get zero gradients.
    pub fn param_grads(&self, store: &ParameterStore) -> Gradients {
        let mut out = Gradients::new();
        for (name, tensor, _) in store.iter() {
            let grad = self
                .bindings
                .get(name)
                .and_then(|id| self.grad(*id))
                .unwrap_or_else(|| Tensor::zeros(tensor.shape().to_vec()));
            out.insert(name.to_string(), grad);
        }
        out
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, t: Tensor) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert(name, t, true).unwrap();
        s
    }

    #[test]
    fn sum_of_squares_gradient() {
        // f = sum(x^2), x = [1, 2] -> grad [2, 4]
        let store = store_with("x", Tensor::vector(vec![1.0, 2.0]).unwrap());
        let mut g = Graph::new();
        let x = g.param(&store, "x").unwrap();
        let sq = g.mul(x, x).unwrap();
        let f = g.sum(sq).unwrap();
        g.backward(f).unwrap();
        let grads = g.param_grads(&store);
        assert_eq!(grads["x"].data(), &[2.0, 4.0]);
    }

    #[test]
    fn unreached_parameter_gets_zero_gradient() {
        let mut store = store_with("x", Tensor::vector(vec![1.0]).unwrap());
        store
            .insert("unused", Tensor::vector(vec![5.0, 5.0]).unwrap(), true)
            .unwrap();
        let mut g = Graph::new();
        let x = g.param(&store, "x").unwrap();
        let f = g.sum(x).unwrap();
        g.backward(f).unwrap();
        let grads = g.param_grads(&store);
        assert_eq!(grads["unused"].data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let store = store_with("x", Tensor::vector(vec![1.0, 2.0]).unwrap());
        let mut g = Graph::new();
        let x = g.param(&store, "x").unwrap();
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_deterministic_bit_identical() {
        let store = store_with("w", Tensor::matrix(2, 2, vec![0.3, -0.7, 0.11, 0.9]).unwrap());
        let run = || {
            let mut g = Graph::new();
            let w = g.param(&store, "w").unwrap();
            let x = g.constant(Tensor::vector(vec![0.5, -0.25]).unwrap());
            let y = g.matvec(w, x).unwrap();
            let t = g.tanh(y).unwrap();
            let f = g.sum(t).unwrap();
            g.backward(f).unwrap();
            (
                g.value(f).item(),
                g.param_grads(&store)["w"].data().to_vec(),
            )
        };
        let (f1, g1) = run();
        let (f2, g2) = run();
        assert_eq!(f1.to_bits(), f2.to_bits());
        assert_eq!(
            g1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            g2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn log_softmax_matches_hand_values() {
        // [1,2,3] -> approx [-2.407606, -1.407606, -0.407606]
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
        let y = g.log_softmax(x).unwrap();
        let expect = [-2.407605964445, -1.407605964445, -0.407605964445];
        for (a, b) in g.value(y).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn log_softmax_extreme_magnitudes_stable() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1000.0, 0.0]).unwrap());
        let y = g.log_softmax(x).unwrap();
        let v = g.value(y).data();
        assert!(v[0].abs() < 1e-12);
        assert!((v[1] + 1000.0).abs() < 1e-9);
        let sum: f64 = v.iter().map(|x| x.exp()).sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn same_param_bound_once() {
        let store = store_with("x", Tensor::vector(vec![2.0]).unwrap());
        let mut g = Graph::new();
        let a = g.param(&store, "x").unwrap();
        let b = g.param(&store, "x").unwrap();
        assert_eq!(a, b);
        // f = x * x -> grad 2x = 4
        let m = g.mul(a, b).unwrap();
        let f = g.sum(m).unwrap();
        g.backward(f).unwrap();
        assert_eq!(g.param_grads(&store)["x"].data(), &[4.0]);
    }
}
