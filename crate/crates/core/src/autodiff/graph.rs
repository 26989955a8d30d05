use std::collections::HashMap;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::gemm;
use super::{AutodiffError, ParamId, ParamStore, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Col,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId, trans_b: bool },
    Add { a: NodeId, b: NodeId, bc: Broadcast },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId, bc: Broadcast },
    Scale { a: NodeId, factor: f64 },
    Concat { parts: Vec<NodeId>, axis: Axis },
    Slice { a: NodeId, rows: Range<usize>, cols: Range<usize> },
    Gather { table: NodeId, ids: Vec<usize> },
    Pick { a: NodeId, cols: Vec<usize> },
    Sigmoid { a: NodeId },
    LogSigmoid { a: NodeId },
    Tanh { a: NodeId },
    Relu { a: NodeId },
    Softmax { a: NodeId },
    LogSoftmax { a: NodeId },
    Dropout { a: NodeId, mask: Vec<f64> },
    LayerNorm { a: NodeId, normed: Vec<f64>, inv_std: Vec<f64> },
    MaskedFill { a: NodeId, mask: Vec<bool> },
    Transpose { a: NodeId },
    Reshape { a: NodeId },
    Sum { a: NodeId },
    Mean { a: NodeId },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Gather { .. } => "embedding_gather",
            Op::Pick { .. } => "pick",
            Op::Sigmoid { .. } => "sigmoid",
            Op::LogSigmoid { .. } => "log_sigmoid",
            Op::Tanh { .. } => "tanh",
            Op::Relu { .. } => "relu",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Dropout { .. } => "dropout",
            Op::LayerNorm { .. } => "layer_norm",
            Op::MaskedFill { .. } => "masked_fill",
            Op::Transpose { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Gradients produced by [`Graph::backward`], keyed by parameter.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: HashMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient of `id`, or `None` when the parameter was not on any path to
    /// the loss (its gradient is zero).
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    /// Gradient of `id` with missing entries materialised as zeros.
    pub fn dense(&self, store: &ParamStore, id: ParamId) -> Tensor {
        self.grads
            .get(&id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }
}

/// Reverse-mode tape.
///
/// Each primitive computes its forward value immediately and records what
/// the backward pass needs. Parameters enter through [`Graph::param`];
/// everything else is a constant. `backward` consumes the graph.
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
    train: bool,
    rng: ChaCha8Rng,
}

impl Default for Graph {
    fn default() -> Self {
        Self::inference()
    }
}

impl Graph {
    /// Graph with dropout disabled.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Graph with dropout enabled; masks are drawn from `seed`.
    pub fn training(seed: u64) -> Self {
        Self {
            train: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ..Self::inference()
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
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

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
            param: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf for a trainable parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&node) = self.param_nodes.get(&id) {
            return node;
        }
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Leaf,
            needs_grad: true,
            param: Some(id),
        });
        let node = NodeId(self.nodes.len() - 1);
        self.param_nodes.insert(id, node);
        node
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> Result<NodeId, AutodiffError> {
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite(op.name()));
        }
        let needs_grad = self.needs(inputs);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn shape_err<T>(&self, op: &str, msg: String) -> Result<T, AutodiffError> {
        Err(AutodiffError::Shape(format!("{op}: {msg}")))
    }

    fn broadcast_kind(&self, a: NodeId, b: NodeId, op: &str) -> Result<Broadcast, AutodiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() == vb.shape() {
            Ok(Broadcast::Same)
        } else if vb.rows() == 1 && vb.cols() == va.cols() {
            Ok(Broadcast::Row)
        } else if vb.cols() == 1 && vb.rows() == va.rows() {
            Ok(Broadcast::Col)
        } else {
            self.shape_err(op, format!("{:?} vs {:?}", va.shape(), vb.shape()))
        }
    }

    fn zip_broadcast(&self, a: NodeId, b: NodeId, bc: Broadcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        let cols = va.cols();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = match bc {
                    Broadcast::Same => vb.data()[i],
                    Broadcast::Row => vb.data()[i % cols],
                    Broadcast::Col => vb.data()[i / cols],
                };
                f(x, y)
            })
            .collect();
        Tensor::new(va.shape().to_vec(), data).expect("shape preserved")
    }

    fn map(&self, a: NodeId, f: impl Fn(f64) -> f64) -> Tensor {
        let va = self.value(a);
        Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect()).expect("shape preserved")
    }

    /// `a x b` for `a: m x k`, `b: k x n`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.matmul_impl(a, b, false)
    }

    /// `a x b^T` for `a: m x k`, `b: n x k`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId, AutodiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = (va.rows(), va.cols());
        let (kb, n) = if trans_b { (vb.cols(), vb.rows()) } else { (vb.rows(), vb.cols()) };
        if k != kb {
            return self.shape_err("matmul", format!("{:?} x {:?} (trans_b={trans_b})", va.shape(), vb.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, va.data(), false, vb.data(), trans_b, &mut out, 0.0);
        let value = Tensor::new(vec![m, n], out)?;
        self.push(value, Op::MatMul { a, b, trans_b }, &[a, b])
    }

    /// Elementwise sum; `b` may also be a row vector (broadcast over rows) or
    /// a column vector (broadcast over columns).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let bc = self.broadcast_kind(a, b, "add")?;
        let value = self.zip_broadcast(a, b, bc, |x, y| x + y);
        self.push(value, Op::Add { a, b, bc }, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        if self.value(a).shape() != self.value(b).shape() {
            return self.shape_err("sub", format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()));
        }
        let value = self.zip_broadcast(a, b, Broadcast::Same, |x, y| x - y);
        self.push(value, Op::Sub { a, b }, &[a, b])
    }

    /// Elementwise product with the same broadcasting rules as [`Graph::add`].
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let bc = self.broadcast_kind(a, b, "mul")?;
        let value = self.zip_broadcast(a, b, bc, |x, y| x * y);
        self.push(value, Op::Mul { a, b, bc }, &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId, AutodiffError> {
        let value = self.map(a, |x| x * factor);
        self.push(value, Op::Scale { a, factor }, &[a])
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: Axis) -> Result<NodeId, AutodiffError> {
        let Some(&first) = parts.first() else {
            return self.shape_err("concat", "no inputs".into());
        };
        let value = match axis {
            Axis::Rows => {
                let cols = self.value(first).cols();
                let mut data = Vec::new();
                let mut rows = 0;
                for &p in parts {
                    let v = self.value(p);
                    if v.cols() != cols {
                        return self.shape_err("concat", format!("column mismatch {} vs {cols}", v.cols()));
                    }
                    rows += v.rows();
                    data.extend_from_slice(v.data());
                }
                Tensor::new(vec![rows, cols], data)?
            }
            Axis::Cols => {
                let rows = self.value(first).rows();
                let mut total = 0;
                for &p in parts {
                    let v = self.value(p);
                    if v.rows() != rows {
                        return self.shape_err("concat", format!("row mismatch {} vs {rows}", v.rows()));
                    }
                    total += v.cols();
                }
                let mut data = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(r));
                    }
                }
                Tensor::new(vec![rows, total], data)?
            }
        };
        self.push(value, Op::Concat { parts: parts.to_vec(), axis }, parts)
    }

    /// Sub-matrix `rows x cols` of a 2-D view.
    pub fn slice(&mut self, a: NodeId, rows: Range<usize>, cols: Range<usize>) -> Result<NodeId, AutodiffError> {
        let va = self.value(a);
        if rows.end > va.rows() || cols.end > va.cols() || rows.start > rows.end || cols.start > cols.end {
            return self.shape_err("slice", format!("{rows:?},{cols:?} out of {:?}", va.shape()));
        }
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for r in rows.clone() {
            data.extend_from_slice(&va.row(r)[cols.clone()]);
        }
        let value = Tensor::new(vec![rows.len(), cols.len()], data)?;
        self.push(value, Op::Slice { a, rows, cols }, &[a])
    }

    pub fn slice_cols(&mut self, a: NodeId, cols: Range<usize>) -> Result<NodeId, AutodiffError> {
        let rows = self.value(a).rows();
        self.slice(a, 0..rows, cols)
    }

    pub fn slice_rows(&mut self, a: NodeId, rows: Range<usize>) -> Result<NodeId, AutodiffError> {
        let cols = self.value(a).cols();
        self.slice(a, rows, 0..cols)
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn embedding_gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, AutodiffError> {
        let vt = self.value(table);
        let cols = vt.cols();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= vt.rows() {
                return self.shape_err("embedding_gather", format!("id {id} out of {} rows", vt.rows()));
            }
            data.extend_from_slice(vt.row(id));
        }
        let value = Tensor::new(vec![ids.len(), cols], data)?;
        self.push(value, Op::Gather { table, ids: ids.to_vec() }, &[table])
    }

    /// One element per row: output is `rows x 1` with `out[r] = a[r, cols[r]]`.
    pub fn pick(&mut self, a: NodeId, cols: &[usize]) -> Result<NodeId, AutodiffError> {
        let va = self.value(a);
        if cols.len() != va.rows() || cols.iter().any(|&c| c >= va.cols()) {
            return self.shape_err("pick", format!("{} indices for {:?}", cols.len(), va.shape()));
        }
        let data = cols.iter().enumerate().map(|(r, &c)| va.row(r)[c]).collect();
        let value = Tensor::new(vec![cols.len(), 1], data)?;
        self.push(value, Op::Pick { a, cols: cols.to_vec() }, &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let value = self.map(a, sigmoid);
        self.push(value, Op::Sigmoid { a }, &[a])
    }

    /// `ln sigmoid(x)`, evaluated without overflow.
    pub fn log_sigmoid(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let value = self.map(a, log_sigmoid);
        self.push(value, Op::LogSigmoid { a }, &[a])
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let value = self.map(a, f64::tanh);
        self.push(value, Op::Tanh { a }, &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let value = self.map(a, |x| x.max(0.0));
        self.push(value, Op::Relu { a }, &[a])
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let va = self.value(a);
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(va.cols().max(1)) {
            softmax_in_place(row);
        }
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(value, Op::Softmax { a }, &[a])
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let va = self.value(a);
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(va.cols().max(1)) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(value, Op::LogSoftmax { a }, &[a])
    }

    /// Inverted dropout. Identity when the graph is not training or `p == 0`.
    pub fn dropout(&mut self, a: NodeId, p: f64) -> Result<NodeId, AutodiffError> {
        if !(0.0..1.0).contains(&p) {
            return Err(AutodiffError::Shape(format!("dropout: p={p} outside [0, 1)")));
        }
        if !self.train || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let va = self.value(a);
        let data = va.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(value, Op::Dropout { a, mask }, &[a])
    }

    /// Row-wise normalisation to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> Result<NodeId, AutodiffError> {
        let va = self.value(a);
        let cols = va.cols();
        let mut normed = Vec::with_capacity(va.len());
        let mut inv_std = Vec::with_capacity(va.rows());
        for r in 0..va.rows() {
            let row = va.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            normed.extend(row.iter().map(|x| (x - mean) * inv));
        }
        let value = Tensor::new(va.shape().to_vec(), normed.clone())?;
        self.push(value, Op::LayerNorm { a, normed, inv_std }, &[a])
    }

    /// Replace entries where `mask` is true with `fill`. The gradient through
    /// filled entries is zero.
    pub fn masked_fill(&mut self, a: NodeId, mask: &[bool], fill: f64) -> Result<NodeId, AutodiffError> {
        let va = self.value(a);
        if mask.len() != va.len() {
            return self.shape_err("masked_fill", format!("mask {} vs {}", mask.len(), va.len()));
        }
        let data = va
            .data()
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { fill } else { x })
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(value, Op::MaskedFill { a, mask: mask.to_vec() }, &[a])
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let va = self.value(a);
        let (r, c) = (va.rows(), va.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = va.data()[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], data)?;
        self.push(value, Op::Transpose { a }, &[a])
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, AutodiffError> {
        let va = self.value(a);
        let value = Tensor::new(shape.to_vec(), va.data().to_vec())?;
        self.push(value, Op::Reshape { a }, &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let va = self.value(a);
        if va.is_empty() {
            return self.shape_err("mean", "empty input".into());
        }
        let s = va.data().iter().sum::<f64>() / va.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean { a }, &[a])
    }

    /// `x W + b` for a dense layer.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    /// Reverse-mode accumulation from a scalar `loss`. Consumes the graph.
    pub fn backward(self, loss: NodeId) -> Result<Gradients, AutodiffError> {
        if !self.value(loss).is_scalar() {
            return Err(AutodiffError::NotScalar(self.value(loss).shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if node.param.is_some() {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        let mut out = Gradients::default();
        for (&pid, &node) in &self.param_nodes {
            if let Some(g) = grads[node.0].take() {
                let shape = self.nodes[node.0].value.shape().to_vec();
                out.grads.insert(pid, Tensor::new(shape, g)?);
            }
        }
        Ok(out)
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = &node.value;
        let mut acc = |id: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            let n = &self.nodes[id.0];
            if !n.needs_grad {
                return;
            }
            let buf = grads[id.0].get_or_insert_with(|| vec![0.0; n.value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.rows(), va.cols());
                let n = y.cols();
                // dA = dC B^T (or dC B when b was transposed)
                acc(*a, &mut |buf| gemm(m, n, k, g, false, vb.data(), !trans_b, buf, 1.0));
                if *trans_b {
                    // C = A B^T  =>  dB = dC^T A  (n x k)
                    acc(*b, &mut |buf| gemm(n, m, k, g, true, va.data(), false, buf, 1.0));
                } else {
                    acc(*b, &mut |buf| gemm(k, m, n, va.data(), true, g, false, buf, 1.0));
                }
            }
            Op::Add { a, b, bc } => {
                acc(*a, &mut |buf| add_into(buf, g));
                let cols = y.cols();
                acc(*b, &mut |buf| reduce_broadcast(buf, g, *bc, cols, |x, _| x));
            }
            Op::Sub { a, b } => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| buf.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
            }
            Op::Mul { a, b, bc } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let cols = y.cols();
                acc(*a, &mut |buf| {
                    for (i, d) in buf.iter_mut().enumerate() {
                        let other = match bc {
                            Broadcast::Same => vb.data()[i],
                            Broadcast::Row => vb.data()[i % cols],
                            Broadcast::Col => vb.data()[i / cols],
                        };
                        *d += g[i] * other;
                    }
                });
                acc(*b, &mut |buf| reduce_broadcast(buf, g, *bc, cols, |x, i| x * va.data()[i]));
            }
            Op::Scale { a, factor } => {
                acc(*a, &mut |buf| buf.iter_mut().zip(g).for_each(|(d, s)| *d += s * factor));
            }
            Op::Concat { parts, axis } => match axis {
                Axis::Rows => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        acc(p, &mut |buf| add_into(buf, &g[offset..offset + len]));
                        offset += len;
                    }
                }
                Axis::Cols => {
                    let total = y.cols();
                    let mut col0 = 0;
                    for &p in parts {
                        let pc = self.value(p).cols();
                        acc(p, &mut |buf| {
                            for (r, dst) in buf.chunks_mut(pc.max(1)).enumerate() {
                                add_into(dst, &g[r * total + col0..r * total + col0 + pc]);
                            }
                        });
                        col0 += pc;
                    }
                }
            },
            Op::Slice { a, rows, cols } => {
                let src_cols = self.value(*a).cols();
                let w = cols.len();
                acc(*a, &mut |buf| {
                    for (i, r) in rows.clone().enumerate() {
                        let dst = &mut buf[r * src_cols + cols.start..r * src_cols + cols.end];
                        add_into(dst, &g[i * w..(i + 1) * w]);
                    }
                });
            }
            Op::Gather { table, ids } => {
                let c = y.cols();
                acc(*table, &mut |buf| {
                    for (i, &id) in ids.iter().enumerate() {
                        add_into(&mut buf[id * c..(id + 1) * c], &g[i * c..(i + 1) * c]);
                    }
                });
            }
            Op::Pick { a, cols } => {
                let src_cols = self.value(*a).cols();
                acc(*a, &mut |buf| {
                    for (r, &c) in cols.iter().enumerate() {
                        buf[r * src_cols + c] += g[r];
                    }
                });
            }
            Op::Sigmoid { a } => {
                acc(*a, &mut |buf| {
                    for ((d, s), yv) in buf.iter_mut().zip(g).zip(y.data()) {
                        *d += s * yv * (1.0 - yv);
                    }
                });
            }
            Op::LogSigmoid { a } => {
                let va = self.value(*a);
                acc(*a, &mut |buf| {
                    for ((d, s), x) in buf.iter_mut().zip(g).zip(va.data()) {
                        *d += s * sigmoid(-x);
                    }
                });
            }
            Op::Tanh { a } => {
                acc(*a, &mut |buf| {
                    for ((d, s), yv) in buf.iter_mut().zip(g).zip(y.data()) {
                        *d += s * (1.0 - yv * yv);
                    }
                });
            }
            Op::Relu { a } => {
                let va = self.value(*a);
                acc(*a, &mut |buf| {
                    for ((d, s), x) in buf.iter_mut().zip(g).zip(va.data()) {
                        if *x > 0.0 {
                            *d += s;
                        }
                    }
                });
            }
            Op::Softmax { a } => {
                let c = y.cols().max(1);
                acc(*a, &mut |buf| {
                    for ((d, gs), ys) in buf.chunks_mut(c).zip(g.chunks(c)).zip(y.data().chunks(c)) {
                        let dot: f64 = gs.iter().zip(ys).map(|(p, q)| p * q).sum();
                        for ((dd, gg), yy) in d.iter_mut().zip(gs).zip(ys) {
                            *dd += yy * (gg - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax { a } => {
                let c = y.cols().max(1);
                acc(*a, &mut |buf| {
                    for ((d, gs), ys) in buf.chunks_mut(c).zip(g.chunks(c)).zip(y.data().chunks(c)) {
                        let total: f64 = gs.iter().sum();
                        for ((dd, gg), yy) in d.iter_mut().zip(gs).zip(ys) {
                            *dd += gg - yy.exp() * total;
                        }
                    }
                });
            }
            Op::Dropout { a, mask } => {
                acc(*a, &mut |buf| {
                    for ((d, s), m) in buf.iter_mut().zip(g).zip(mask) {
                        *d += s * m;
                    }
                });
            }
            Op::LayerNorm { a, normed, inv_std } => {
                let c = y.cols().max(1);
                acc(*a, &mut |buf| {
                    for (r, d) in buf.chunks_mut(c).enumerate() {
                        let gs = &g[r * c..(r + 1) * c];
                        let xs = &normed[r * c..(r + 1) * c];
                        let mean_g = gs.iter().sum::<f64>() / c as f64;
                        let mean_gx = gs.iter().zip(xs).map(|(p, q)| p * q).sum::<f64>() / c as f64;
                        for ((dd, gg), xx) in d.iter_mut().zip(gs).zip(xs) {
                            *dd += inv_std[r] * (gg - mean_g - xx * mean_gx);
                        }
                    }
                });
            }
            Op::MaskedFill { a, mask } => {
                acc(*a, &mut |buf| {
                    for ((d, s), m) in buf.iter_mut().zip(g).zip(mask) {
                        if !m {
                            *d += s;
                        }
                    }
                });
            }
            Op::Transpose { a } => {
                // y is c x r, source is r x c
                let (yr, yc) = (y.rows(), y.cols());
                acc(*a, &mut |buf| {
                    for i in 0..yr {
                        for j in 0..yc {
                            buf[j * yr + i] += g[i * yc + j];
                        }
                    }
                });
            }
            Op::Reshape { a } => acc(*a, &mut |buf| add_into(buf, g)),
            Op::Sum { a } => acc(*a, &mut |buf| buf.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean { a } => {
                let n = self.value(*a).len() as f64;
                acc(*a, &mut |buf| buf.iter_mut().for_each(|d| *d += g[0] / n));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn reduce_broadcast(buf: &mut [f64], g: &[f64], bc: Broadcast, cols: usize, f: impl Fn(f64, usize) -> f64) {
    match bc {
        Broadcast::Same => buf.iter_mut().enumerate().for_each(|(i, d)| *d += f(g[i], i)),
        Broadcast::Row => {
            for (i, &gv) in g.iter().enumerate() {
                buf[i % cols] += f(gv, i);
            }
        }
        Broadcast::Col => {
            for (i, &gv) in g.iter().enumerate() {
                buf[i / cols] += f(gv, i);
            }
        }
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

pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn store_with(values: &[(&str, Tensor)]) -> (ParamStore, Vec<ParamId>) {
        let mut store = ParamStore::default();
        let ids = values.iter().map(|(n, t)| store.insert(n, t.clone())).collect();
        (store, ids)
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::inference();
        let x = g.constant(Tensor::zeros(&[1, 2]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn gather_returns_row() {
        let mut g = Graph::inference();
        let table = g.constant(Tensor::new(vec![4, 2], (0..8).map(f64::from).collect()).unwrap());
        let row = g.embedding_gather(table, &[2]).unwrap();
        assert_eq!(g.value(row).data(), &[4.0, 5.0]);
        assert!(g.embedding_gather(table, &[4]).is_err());
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let mut g = Graph::inference();
        let x = g.constant(Tensor::full(&[1, 5], 3.25));
        let y = g.layer_norm(x, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let (store, ids) = store_with(&[("p", Tensor::new(vec![3], vec![1.0, -2.0, 5.0]).unwrap())]);
        let mut g = Graph::inference();
        let p = g.param(&store, ids[0]);
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(ids[0]).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient() {
        let (store, ids) = store_with(&[("p", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap())]);
        let mut g = Graph::inference();
        let p = g.param(&store, ids[0]);
        let pp = g.mul(p, p).unwrap();
        let s = g.sum(pp).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(ids[0]).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn disconnected_parameter_has_no_gradient() {
        let (store, ids) = store_with(&[("p", Tensor::scalar(1.0)), ("q", Tensor::scalar(2.0))]);
        let mut g = Graph::inference();
        let p = g.param(&store, ids[0]);
        let _q = g.param(&store, ids[1]);
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(ids[1]).is_none());
        assert_eq!(grads.dense(&store, ids[1]).data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::inference();
        let x = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(AutodiffError::NotScalar(_))));
    }

    #[test]
    fn non_finite_output_trips() {
        let mut g = Graph::inference();
        let x = g.constant(Tensor::scalar(1e308));
        assert!(matches!(g.scale(x, 10.0), Err(AutodiffError::NonFinite("scale"))));
    }

    #[test]
    fn dropout_identity_cases() {
        let mut g = Graph::training(3);
        let x = g.constant(Tensor::full(&[2, 3], 1.5));
        assert_eq!(g.dropout(x, 0.0).unwrap(), x);
        let mut g = Graph::inference();
        let x = g.constant(Tensor::full(&[2, 3], 1.5));
        assert_eq!(g.dropout(x, 0.5).unwrap(), x);
    }

    #[test]
    fn dropout_scales_survivors() {
        let mut g = Graph::training(11);
        let x = g.constant(Tensor::full(&[1, 1000], 1.0));
        let y = g.dropout(x, 0.25).unwrap();
        for &v in g.value(y).data() {
            assert!(v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::inference();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(g.matmul(a, b).is_err());
        assert!(g.matmul_t(a, b).is_ok());
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert_abs_diff_eq!(log_sigmoid(0.0), -std::f64::consts::LN_2, epsilon = 1e-15);
        assert!(log_sigmoid(-800.0).is_finite());
        assert_abs_diff_eq!(log_sigmoid(800.0), 0.0);
    }
}
