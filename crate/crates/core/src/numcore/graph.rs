//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`DiffGraph`] is a static tape: operations are recorded once, then
//! `forward`/`backward` may be re-run after mutating leaf values in place.
//! Training loops exploit this by building the loss graph a single time and
//! only writing updated parameters back into the leaves each step.
//!
//! The backward pass walks nodes in exact reverse insertion order (inputs
//! always precede consumers, so insertion order is topological) and uses
//! fixed sequential accumulation, which makes gradients bitwise deterministic.
//! Leaves flagged frozen never receive gradient.

use std::collections::BTreeMap;

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    /// y = a * x + b elementwise.
    AffineScalar(NodeId, f64, f64),
    Exp(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Gelu(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    CrossEntropyMean {
        logits: NodeId,
        labels: Vec<usize>,
    },
    EmbedRows {
        table: NodeId,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<NodeId>),
    SliceRows {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    /// y[r, :] = x[r, :] + row for every r.
    AddRowBroadcast {
        x: NodeId,
        row: NodeId,
    },
    RowL2Normalize(NodeId),
    /// Scalar: mean over rows of the row L2 norms.
    MeanRowNorms(NodeId),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    /// Gradient buffer, allocated only when this node needs gradient.
    grad: Option<Vec<f64>>,
    needs_grad: bool,
}

/// A named parameter slot: a leaf node plus its trainable flag.
#[derive(Debug, Clone)]
struct ParamSlot {
    node: NodeId,
    trainable: bool,
}

#[derive(Debug, Default)]
pub struct DiffGraph {
    nodes: Vec<Node>,
    params: BTreeMap<String, ParamSlot>,
    output: Option<NodeId>,
}

impl DiffGraph {
    pub fn new() -> Self {
        DiffGraph::default()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        let grad = needs_grad.then(|| vec![0.0; value.numel()]);
        self.nodes.push(Node {
            op,
            value,
            grad,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Registers a named leaf. Trainable leaves receive gradient; frozen ones
    /// never do.
    pub fn param(&mut self, name: &str, value: Tensor, trainable: bool) -> NodeId {
        let id = self.push(Op::Leaf, value, trainable);
        self.params.insert(
            name.to_string(),
            ParamSlot {
                node: id,
                trainable,
            },
        );
        id
    }

    /// Anonymous frozen leaf.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn set_output(&mut self, id: NodeId) {
        self.output = Some(id);
    }

    pub fn output_value(&self) -> Result<f64> {
        let out = self
            .output
            .ok_or_else(|| Error::Contract("graph has no output set".into()))?;
        let t = self.value(out);
        if !t.is_scalar() {
            return Err(Error::Contract(format!(
                "graph output is not scalar (shape {:?})",
                t.shape()
            )));
        }
        Ok(t.scalar_value())
    }

    /// Overwrites a leaf value in place; shape must match.
    pub fn set_param_value(&mut self, name: &str, value: &Tensor) -> Result<()> {
        let slot = self
            .params
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?
            .clone();
        let node = &mut self.nodes[slot.node.0];
        if node.value.shape() != value.shape() {
            return Err(Error::Shape {
                op: "set_param_value",
                left: node.value.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        node.value.data_mut().copy_from_slice(value.data());
        Ok(())
    }

    /// Perturbs one scalar of a leaf (used by the finite-difference checker).
    pub fn nudge_param(&mut self, name: &str, index: usize, delta: f64) -> Result<()> {
        let slot = self
            .params
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?
            .clone();
        let node = &mut self.nodes[slot.node.0];
        if index >= node.value.numel() {
            return Err(Error::Index {
                what: "parameter element",
                got: index,
                bound: node.value.numel(),
            });
        }
        node.value.data_mut()[index] += delta;
        Ok(())
    }

    pub fn param_value(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|s| &self.nodes[s.node.0].value)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, s)| s.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.params.get(name).is_some_and(|s| s.trainable)
    }

    /// Gradient of the current output w.r.t. a trainable parameter. `None`
    /// for unknown or frozen parameters.
    pub fn grad(&self, name: &str) -> Option<Tensor> {
        let slot = self.params.get(name)?;
        if !slot.trainable {
            return None;
        }
        let node = &self.nodes[slot.node.0];
        let g = node.grad.as_ref()?;
        Some(Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    // ── Operations ──────────────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let needs = self.needs(a) || self.needs(b);
        let mut v = self.nodes[a.0].value.clone();
        for (o, &x) in v.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o += x;
        }
        Ok(self.push(Op::Add(a, b), v, needs))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let needs = self.needs(a) || self.needs(b);
        let mut v = self.nodes[a.0].value.clone();
        for (o, &x) in v.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o -= x;
        }
        Ok(self.push(Op::Sub(a, b), v, needs))
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let needs = self.needs(x);
        let mut v = self.nodes[x.0].value.clone();
        for o in v.data_mut() {
            *o *= k;
        }
        self.push(Op::Scale(x, k), v, needs)
    }

    pub fn affine(&mut self, x: NodeId, a: f64, b: f64) -> NodeId {
        let needs = self.needs(x);
        let mut v = self.nodes[x.0].value.clone();
        for o in v.data_mut() {
            *o = a * *o + b;
        }
        self.push(Op::AffineScalar(x, a, b), v, needs)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let needs = self.needs(x);
        let mut v = self.nodes[x.0].value.clone();
        for o in v.data_mut() {
            *o = o.exp();
        }
        self.push(Op::Exp(x), v, needs)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let needs = self.needs(x);
        let mut v = self.nodes[x.0].value.clone();
        for o in v.data_mut() {
            *o = o.tanh();
        }
        self.push(Op::Tanh(x), v, needs)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let needs = self.needs(x);
        let mut v = self.nodes[x.0].value.clone();
        for o in v.data_mut() {
            *o = o.max(0.0);
        }
        self.push(Op::Relu(x), v, needs)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let needs = self.needs(x);
        let mut v = self.nodes[x.0].value.clone();
        for o in v.data_mut() {
            *o = kernels::gelu(*o);
        }
        self.push(Op::Gelu(x), v, needs)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.mat_dims(a);
        let (k2, n) = self.mat_dims(b);
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: self.nodes[a.0].value.shape().to_vec(),
                right: self.nodes[b.0].value.shape().to_vec(),
            });
        }
        let needs = self.needs(a) || self.needs(b);
        let mut out = Tensor::zeros(vec![m, n]);
        kernels::matmul(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            m,
            k,
            n,
            out.data_mut(),
        );
        Ok(self.push(Op::MatMul(a, b), out, needs))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let (m, n) = self.mat_dims(x);
        let needs = self.needs(x);
        let mut out = Tensor::zeros(vec![n, m]);
        kernels::transpose(self.nodes[x.0].value.data(), m, n, out.data_mut());
        self.push(Op::Transpose(x), out, needs)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let (m, n) = self.mat_dims(x);
        let needs = self.needs(x);
        let mut out = Tensor::zeros(self.nodes[x.0].value.shape().to_vec());
        kernels::softmax_rows(self.nodes[x.0].value.data(), m, n, out.data_mut());
        self.push(Op::SoftmaxRows(x), out, needs)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.mat_dims(x);
        if n < 2 {
            return Err(Error::Config(format!(
                "layer_norm needs at least 2 columns, got {n}"
            )));
        }
        if self.nodes[gain.0].value.numel() != n || self.nodes[bias.0].value.numel() != n {
            return Err(Error::Shape {
                op: "layer_norm",
                left: vec![m, n],
                right: vec![self.nodes[gain.0].value.numel()],
            });
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        let mut out = Tensor::zeros(self.nodes[x.0].value.shape().to_vec());
        kernels::layer_norm_rows(
            self.nodes[x.0].value.data(),
            self.nodes[gain.0].value.data(),
            self.nodes[bias.0].value.data(),
            m,
            n,
            out.data_mut(),
        );
        Ok(self.push(Op::LayerNorm { x, gain, bias }, out, needs))
    }

    pub fn cross_entropy_mean(&mut self, logits: NodeId, labels: Vec<usize>) -> Result<NodeId> {
        let (m, n) = self.mat_dims(logits);
        if labels.len() != m {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: vec![m, n],
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::Index {
                what: "class label",
                got: bad,
                bound: n,
            });
        }
        let needs = self.needs(logits);
        let loss = kernels::cross_entropy_mean(self.nodes[logits.0].value.data(), m, n, &labels);
        Ok(self.push(
            Op::CrossEntropyMean { logits, labels },
            Tensor::scalar(loss),
            needs,
        ))
    }

    pub fn embed_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (rows, cols) = self.mat_dims(table);
        if let Some(&bad) = ids.iter().find(|&&t| t >= rows) {
            return Err(Error::Index {
                what: "token id",
                got: bad,
                bound: rows,
            });
        }
        let needs = self.needs(table);
        let mut out = Tensor::zeros(vec![ids.len(), cols]);
        for (r, &t) in ids.iter().enumerate() {
            out.data_mut()[r * cols..(r + 1) * cols]
                .copy_from_slice(self.nodes[table.0].value.row(t));
        }
        Ok(self.push(
            Op::EmbedRows {
                table,
                ids: ids.to_vec(),
            },
            out,
            needs,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = self.mat_dims(parts[0]).1;
        let mut rows = 0;
        for &p in parts {
            let (m, n) = self.mat_dims(p);
            if n != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    left: vec![rows, cols],
                    right: self.nodes[p.0].value.shape().to_vec(),
                });
            }
            rows += m;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let mut out = Tensor::zeros(vec![rows, cols]);
        let mut at = 0;
        for &p in parts {
            let v = self.nodes[p.0].value.data();
            out.data_mut()[at..at + v.len()].copy_from_slice(v);
            at += v.len();
        }
        Ok(self.push(Op::ConcatRows(parts.to_vec()), out, needs))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.mat_dims(x);
        if start + len > m || len == 0 {
            return Err(Error::Index {
                what: "row slice end",
                got: start + len,
                bound: m,
            });
        }
        let needs = self.needs(x);
        let data = self.nodes[x.0].value.data()[start * n..(start + len) * n].to_vec();
        let out = Tensor::new(vec![len, n], data).expect("slice shape");
        Ok(self.push(Op::SliceRows { x, start, len }, out, needs))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = self.mat_dims(parts[0]).0;
        let mut cols = 0;
        for &p in parts {
            let (m, n) = self.mat_dims(p);
            if m != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: vec![rows, cols],
                    right: self.nodes[p.0].value.shape().to_vec(),
                });
            }
            cols += n;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let mut out = Tensor::zeros(vec![rows, cols]);
        let mut at = 0;
        for &p in parts {
            let (m, n) = self.mat_dims(p);
            let v = self.nodes[p.0].value.data();
            for r in 0..m {
                out.data_mut()[r * cols + at..r * cols + at + n]
                    .copy_from_slice(&v[r * n..(r + 1) * n]);
            }
            at += n;
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out, needs))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.mat_dims(x);
        if start + len > n || len == 0 {
            return Err(Error::Index {
                what: "col slice end",
                got: start + len,
                bound: n,
            });
        }
        let needs = self.needs(x);
        let mut out = Tensor::zeros(vec![m, len]);
        let src = self.nodes[x.0].value.data();
        for r in 0..m {
            out.data_mut()[r * len..(r + 1) * len]
                .copy_from_slice(&src[r * n + start..r * n + start + len]);
        }
        Ok(self.push(Op::SliceCols { x, start, len }, out, needs))
    }

    pub fn add_row_broadcast(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (m, n) = self.mat_dims(x);
        if self.nodes[row.0].value.numel() != n {
            return Err(Error::Shape {
                op: "add_row_broadcast",
                left: vec![m, n],
                right: self.nodes[row.0].value.shape().to_vec(),
            });
        }
        let needs = self.needs(x) || self.needs(row);
        let mut out = self.nodes[x.0].value.clone();
        let rv = self.nodes[row.0].value.data();
        for r in 0..m {
            for c in 0..n {
                out.data_mut()[r * n + c] += rv[c];
            }
        }
        Ok(self.push(Op::AddRowBroadcast { x, row }, out, needs))
    }

    /// L2-normalizes every row; errors on a zero row.
    pub fn row_l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.mat_dims(x);
        let needs = self.needs(x);
        let mut out = Tensor::zeros(self.nodes[x.0].value.shape().to_vec());
        let norms = kernels::row_l2_normalize(self.nodes[x.0].value.data(), m, n, out.data_mut());
        if norms.iter().any(|&v| v == 0.0) {
            return Err(Error::DegenerateInput {
                op: "row_l2_normalize",
                detail: "zero-norm row".into(),
            });
        }
        Ok(self.push(Op::RowL2Normalize(x), out, needs))
    }

    /// Mean over rows of the row L2 norms (the Eq.-3 style distance reducer).
    pub fn mean_row_norms(&mut self, x: NodeId) -> NodeId {
        let (m, n) = self.mat_dims(x);
        let needs = self.needs(x);
        let data = self.nodes[x.0].value.data();
        let mut total = 0.0;
        for r in 0..m {
            total += data[r * n..(r + 1) * n]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
        }
        self.push(Op::MeanRowNorms(x), Tensor::scalar(total / m as f64), needs)
    }

    // ── Execution ───────────────────────────────────────────────────────

    /// Recomputes every non-leaf node in insertion order.
    pub fn forward(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            let val = |id: NodeId| -> &Tensor {
                debug_assert!(id.0 < i);
                &before[id.0].value
            };
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let (av, bv) = (val(*a).data(), val(*b).data());
                    for (o, (&x, &y)) in node.value.data_mut().iter_mut().zip(av.iter().zip(bv)) {
                        *o = x + y;
                    }
                }
                Op::Sub(a, b) => {
                    let (av, bv) = (val(*a).data(), val(*b).data());
                    for (o, (&x, &y)) in node.value.data_mut().iter_mut().zip(av.iter().zip(bv)) {
                        *o = x - y;
                    }
                }
                Op::Scale(x, k) => {
                    let k = *k;
                    for (o, &v) in node.value.data_mut().iter_mut().zip(val(*x).data()) {
                        *o = k * v;
                    }
                }
                Op::AffineScalar(x, a, b) => {
                    let (a, b) = (*a, *b);
                    for (o, &v) in node.value.data_mut().iter_mut().zip(val(*x).data()) {
                        *o = a * v + b;
                    }
                }
                Op::Exp(x) => {
                    for (o, &v) in node.value.data_mut().iter_mut().zip(val(*x).data()) {
                        *o = v.exp();
                    }
                }
                Op::Tanh(x) => {
                    for (o, &v) in node.value.data_mut().iter_mut().zip(val(*x).data()) {
                        *o = v.tanh();
                    }
                }
                Op::Relu(x) => {
                    for (o, &v) in node.value.data_mut().iter_mut().zip(val(*x).data()) {
                        *o = v.max(0.0);
                    }
                }
                Op::Gelu(x) => {
                    for (o, &v) in node.value.data_mut().iter_mut().zip(val(*x).data()) {
                        *o = kernels::gelu(v);
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = mat_dims_of(val(*a));
                    let n = mat_dims_of(val(*b)).1;
                    let a_data = val(*a).data();
                    let b_data = val(*b).data();
                    kernels::matmul(a_data, b_data, m, k, n, node.value.data_mut());
                }
                Op::Transpose(x) => {
                    let (m, n) = mat_dims_of(val(*x));
                    kernels::transpose(val(*x).data(), m, n, node.value.data_mut());
                }
                Op::SoftmaxRows(x) => {
                    let (m, n) = mat_dims_of(val(*x));
                    kernels::softmax_rows(val(*x).data(), m, n, node.value.data_mut());
                }
                Op::LayerNorm { x, gain, bias } => {
                    let (m, n) = mat_dims_of(val(*x));
                    kernels::layer_norm_rows(
                        val(*x).data(),
                        val(*gain).data(),
                        val(*bias).data(),
                        m,
                        n,
                        node.value.data_mut(),
                    );
                }
                Op::CrossEntropyMean { logits, labels } => {
                    let (m, n) = mat_dims_of(val(*logits));
                    let loss = kernels::cross_entropy_mean(val(*logits).data(), m, n, labels);
                    node.value.data_mut()[0] = loss;
                }
                Op::EmbedRows { table, ids } => {
                    let cols = mat_dims_of(val(*table)).1;
                    let t = val(*table);
                    for (r, &tok) in ids.iter().enumerate() {
                        node.value.data_mut()[r * cols..(r + 1) * cols].copy_from_slice(t.row(tok));
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let v = val(p).data();
                        node.value.data_mut()[at..at + v.len()].copy_from_slice(v);
                        at += v.len();
                    }
                }
                Op::SliceRows { x, start, len } => {
                    let n = mat_dims_of(val(*x)).1;
                    node.value
                        .data_mut()
                        .copy_from_slice(&val(*x).data()[start * n..(start + len) * n]);
                }
                Op::ConcatCols(parts) => {
                    let rows = mat_dims_of(val(parts[0])).0;
                    let cols = node.value.cols();
                    let mut at = 0;
                    for &p in parts {
                        let n = mat_dims_of(val(p)).1;
                        let v = val(p).data();
                        for r in 0..rows {
                            node.value.data_mut()[r * cols + at..r * cols + at + n]
                                .copy_from_slice(&v[r * n..(r + 1) * n]);
                        }
                        at += n;
                    }
                }
                Op::SliceCols { x, start, len } => {
                    let (m, n) = mat_dims_of(val(*x));
                    let src = val(*x).data();
                    for r in 0..m {
                        node.value.data_mut()[r * len..(r + 1) * len]
                            .copy_from_slice(&src[r * n + start..r * n + start + len]);
                    }
                }
                Op::AddRowBroadcast { x, row } => {
                    let (m, n) = mat_dims_of(val(*x));
                    let xv = val(*x).data();
                    let rv = val(*row).data();
                    for r in 0..m {
                        for c in 0..n {
                            node.value.data_mut()[r * n + c] = xv[r * n + c] + rv[c];
                        }
                    }
                }
                Op::RowL2Normalize(x) => {
                    let (m, n) = mat_dims_of(val(*x));
                    let norms =
                        kernels::row_l2_normalize(val(*x).data(), m, n, node.value.data_mut());
                    if norms.iter().any(|&v| v == 0.0) {
                        return Err(Error::DegenerateInput {
                            op: "row_l2_normalize",
                            detail: "zero-norm row".into(),
                        });
                    }
                }
                Op::MeanRowNorms(x) => {
                    let (m, n) = mat_dims_of(val(*x));
                    let data = val(*x).data();
                    let mut total = 0.0;
                    for r in 0..m {
                        total += data[r * n..(r + 1) * n]
                            .iter()
                            .map(|v| v * v)
                            .sum::<f64>()
                            .sqrt();
                    }
                    node.value.data_mut()[0] = total / m as f64;
                }
            }
        }
        Ok(())
    }

    /// Backpropagates from the scalar output. Must follow a `forward` call.
    pub fn backward(&mut self) -> Result<()> {
        let out = self
            .output
            .ok_or_else(|| Error::Contract("graph has no output set".into()))?;
        if !self.nodes[out.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires scalar output, got shape {:?}",
                self.nodes[out.0].value.shape()
            )));
        }
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.fill(0.0);
            }
        }
        if let Some(g) = self.nodes[out.0].grad.as_mut() {
            g[0] = 1.0;
        } else {
            // Output does not depend on any trainable leaf; nothing to do.
            return Ok(());
        }

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let g = node.grad.as_ref().expect("needs_grad implies buffer");
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(before, *a, |dst| add_assign(dst, g));
                    acc(before, *b, |dst| add_assign(dst, g));
                }
                Op::Sub(a, b) => {
                    acc(before, *a, |dst| add_assign(dst, g));
                    acc(before, *b, |dst| {
                        for (d, &gv) in dst.iter_mut().zip(g) {
                            *d -= gv;
                        }
                    });
                }
                Op::Scale(x, k) => {
                    let k = *k;
                    acc(before, *x, |dst| {
                        for (d, &gv) in dst.iter_mut().zip(g) {
                            *d += k * gv;
                        }
                    });
                }
                Op::AffineScalar(x, a, _) => {
                    let a = *a;
                    acc(before, *x, |dst| {
                        for (d, &gv) in dst.iter_mut().zip(g) {
                            *d += a * gv;
                        }
                    });
                }
                Op::Exp(x) => {
                    let y = node.value.data();
                    acc(before, *x, |dst| {
                        for ((d, &gv), &yv) in dst.iter_mut().zip(g).zip(y) {
                            *d += gv * yv;
                        }
                    });
                }
                Op::Tanh(x) => {
                    let y = node.value.data();
                    acc(before, *x, |dst| {
                        for ((d, &gv), &yv) in dst.iter_mut().zip(g).zip(y) {
                            *d += gv * (1.0 - yv * yv);
                        }
                    });
                }
                Op::Relu(x) => {
                    let xv = before[x.0].value.data().to_vec();
                    acc(before, *x, |dst| {
                        for ((d, &gv), &v) in dst.iter_mut().zip(g).zip(&xv) {
                            if v > 0.0 {
                                *d += gv;
                            }
                        }
                    });
                }
                Op::Gelu(x) => {
                    let xv = before[x.0].value.data().to_vec();
                    acc(before, *x, |dst| {
                        for ((d, &gv), &v) in dst.iter_mut().zip(g).zip(&xv) {
                            *d += gv * kernels::gelu_grad(v);
                        }
                    });
                }
                Op::MatMul(a, b) => {
                    let (m, k) = mat_dims_of(&before[a.0].value);
                    let n = mat_dims_of(&before[b.0].value).1;
                    if before[a.0].needs_grad {
                        // dA += g * B^T
                        let mut bt = vec![0.0; k * n];
                        kernels::transpose(before[b.0].value.data(), k, n, &mut bt);
                        acc(before, *a, |dst| kernels::matmul_acc(g, &bt, m, n, k, dst));
                    }
                    if before[b.0].needs_grad {
                        // dB += A^T * g
                        let mut at = vec![0.0; m * k];
                        kernels::transpose(before[a.0].value.data(), m, k, &mut at);
                        acc(before, *b, |dst| kernels::matmul_acc(&at, g, k, m, n, dst));
                    }
                }
                Op::Transpose(x) => {
                    let (m, n) = mat_dims_of(&before[x.0].value);
                    // node value is n x m; gradient transposes back
                    acc(before, *x, |dst| {
                        for r in 0..m {
                            for c in 0..n {
                                dst[r * n + c] += g[c * m + r];
                            }
                        }
                    });
                }
                Op::SoftmaxRows(x) => {
                    let (m, n) = mat_dims_of(&before[x.0].value);
                    let y = node.value.data();
                    acc(before, *x, |dst| {
                        for r in 0..m {
                            let yr = &y[r * n..(r + 1) * n];
                            let gr = &g[r * n..(r + 1) * n];
                            let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                            let dr = &mut dst[r * n..(r + 1) * n];
                            for c in 0..n {
                                dr[c] += yr[c] * (gr[c] - dot);
                            }
                        }
                    });
                }
                Op::LayerNorm { x, gain, bias } => {
                    let (m, n) = mat_dims_of(&before[x.0].value);
                    let xv = before[x.0].value.data().to_vec();
                    let gv = before[gain.0].value.data().to_vec();
                    // recompute per-row mean / rstd / normalized input
                    let mut xhat = vec![0.0; m * n];
                    let mut rstd = vec![0.0; m];
                    for r in 0..m {
                        let xr = &xv[r * n..(r + 1) * n];
                        let mean = xr.iter().sum::<f64>() / n as f64;
                        let var =
                            xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                        let rs = 1.0 / (var + kernels::LAYER_NORM_EPS).sqrt();
                        rstd[r] = rs;
                        for c in 0..n {
                            xhat[r * n + c] = (xr[c] - mean) * rs;
                        }
                    }
                    if before[x.0].needs_grad {
                        acc(before, *x, |dst| {
                            for r in 0..m {
                                let gr = &g[r * n..(r + 1) * n];
                                let xh = &xhat[r * n..(r + 1) * n];
                                let mut mean_t = 0.0;
                                let mut mean_tx = 0.0;
                                for c in 0..n {
                                    let t = gr[c] * gv[c];
                                    mean_t += t;
                                    mean_tx += t * xh[c];
                                }
                                mean_t /= n as f64;
                                mean_tx /= n as f64;
                                let dr = &mut dst[r * n..(r + 1) * n];
                                for c in 0..n {
                                    let t = gr[c] * gv[c];
                                    dr[c] += (t - mean_t - xh[c] * mean_tx) * rstd[r];
                                }
                            }
                        });
                    }
                    if before[gain.0].needs_grad {
                        acc(before, *gain, |dst| {
                            for r in 0..m {
                                for c in 0..n {
                                    dst[c] += g[r * n + c] * xhat[r * n + c];
                                }
                            }
                        });
                    }
                    if before[bias.0].needs_grad {
                        acc(before, *bias, |dst| {
                            for r in 0..m {
                                for c in 0..n {
                                    dst[c] += g[r * n + c];
                                }
                            }
                        });
                    }
                }
                Op::CrossEntropyMean { logits, labels } => {
                    let (m, n) = mat_dims_of(&before[logits.0].value);
                    let mut probs = vec![0.0; m * n];
                    kernels::softmax_rows(before[logits.0].value.data(), m, n, &mut probs);
                    let gout = g[0];
                    let labels = labels.clone();
                    acc(before, *logits, |dst| {
                        for r in 0..m {
                            for c in 0..n {
                                let delta = if labels[r] == c { 1.0 } else { 0.0 };
                                dst[r * n + c] += gout * (probs[r * n + c] - delta) / m as f64;
                            }
                        }
                    });
                }
                Op::EmbedRows { table, ids } => {
                    let cols = mat_dims_of(&before[table.0].value).1;
                    let ids = ids.clone();
                    acc(before, *table, |dst| {
                        for (r, &tok) in ids.iter().enumerate() {
                            for c in 0..cols {
                                dst[tok * cols + c] += g[r * cols + c];
                            }
                        }
                    });
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for &p in parts.iter() {
                        let len = before[p.0].value.numel();
                        let seg = &g[at..at + len];
                        acc(before, p, |dst| add_assign(dst, seg));
                        at += len;
                    }
                }
                Op::SliceRows { x, start, len } => {
                    let n = mat_dims_of(&before[x.0].value).1;
                    let (start, len) = (*start, *len);
                    acc(before, *x, |dst| {
                        add_assign(&mut dst[start * n..(start + len) * n], g);
                    });
                }
                Op::ConcatCols(parts) => {
                    let rows = mat_dims_of(&before[parts[0].0].value).0;
                    let total: usize = parts
                        .iter()
                        .map(|&p| mat_dims_of(&before[p.0].value).1)
                        .sum();
                    let mut at = 0;
                    for &p in parts.iter() {
                        let n = mat_dims_of(&before[p.0].value).1;
                        acc(before, p, |dst| {
                            for r in 0..rows {
                                for c in 0..n {
                                    dst[r * n + c] += g[r * total + at + c];
                                }
                            }
                        });
                        at += n;
                    }
                }
                Op::SliceCols { x, start, len } => {
                    let (m, n) = mat_dims_of(&before[x.0].value);
                    let (start, len) = (*start, *len);
                    acc(before, *x, |dst| {
                        for r in 0..m {
                            for c in 0..len {
                                dst[r * n + start + c] += g[r * len + c];
                            }
                        }
                    });
                }
                Op::AddRowBroadcast { x, row } => {
                    let (m, n) = mat_dims_of(&before[x.0].value);
                    acc(before, *x, |dst| add_assign(dst, g));
                    acc(before, *row, |dst| {
                        for r in 0..m {
                            for c in 0..n {
                                dst[c] += g[r * n + c];
                            }
                        }
                    });
                }
                Op::RowL2Normalize(x) => {
                    let (m, n) = mat_dims_of(&before[x.0].value);
                    let xv = before[x.0].value.data().to_vec();
                    let y = node.value.data();
                    acc(before, *x, |dst| {
                        for r in 0..m {
                            let xr = &xv[r * n..(r + 1) * n];
                            let yr = &y[r * n..(r + 1) * n];
                            let gr = &g[r * n..(r + 1) * n];
                            let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                            let dot: f64 = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                            let dr = &mut dst[r * n..(r + 1) * n];
                            for c in 0..n {
                                dr[c] += (gr[c] - yr[c] * dot) / norm;
                            }
                        }
                    });
                }
                Op::MeanRowNorms(x) => {
                    let (m, n) = mat_dims_of(&before[x.0].value);
                    let xv = before[x.0].value.data().to_vec();
                    let gout = g[0];
                    acc(before, *x, |dst| {
                        for r in 0..m {
                            let xr = &xv[r * n..(r + 1) * n];
                            let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                            if norm > 0.0 {
                                let dr = &mut dst[r * n..(r + 1) * n];
                                for c in 0..n {
                                    dr[c] += gout * xr[c] / (m as f64 * norm);
                                }
                            }
                        }
                    });
                }
            }
        }
        Ok(())
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (
            self.nodes[a.0].value.shape(),
            self.nodes[b.0].value.shape(),
        );
        if sa != sb {
            return Err(Error::Shape {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn mat_dims(&self, id: NodeId) -> (usize, usize) {
        mat_dims_of(&self.nodes[id.0].value)
    }
}

fn mat_dims_of(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Applies `f` to the gradient buffer of `id` if that node wants gradient.
fn acc<F: FnOnce(&mut [f64])>(nodes: &mut [Node], id: NodeId, f: F) {
    let node = &mut nodes[id.0];
    if node.needs_grad {
        f(node.grad.as_mut().expect("needs_grad implies buffer"));
    }
}
