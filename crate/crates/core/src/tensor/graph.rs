use super::{LAYER_NORM_EPS, Tensor, gemm};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors, addressed by [`ParamId`] in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Var,
    Param(ParamId),
    MatMul { a: NodeId, b: NodeId, transpose_b: bool },
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    LayerNorm(NodeId),
    Concat { inputs: Vec<NodeId>, axis: usize },
    Slice { a: NodeId, axis: usize, start: usize },
    Gather { table: NodeId, indices: Vec<usize> },
    OuterAddTanh { a: NodeId, b: NodeId },
    Attention(Box<Attention>),
}

/// Sparse multi-head attention record: CSR key lists and the softmax weights.
#[derive(Debug, Clone)]
struct Attention {
    qkv: NodeId,
    heads: usize,
    scale: f64,
    offsets: Vec<usize>,
    keys: Vec<usize>,
    /// `heads × nnz` attention weights, head-major.
    probs: Vec<f64>,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Var => "var",
            Op::Param(_) => "param",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::LayerNorm(_) => "layer_norm",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Gather { .. } => "gather",
            Op::Affine { .. } => "affine",
            Op::OuterAddTanh { .. } => "outer_add_tanh",
            Op::Attention(_) => "attention",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// How the right operand of an elementwise binary op lines up with the left.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Scalar,
}

/// Reverse-mode tape. Operations are evaluated as they are recorded.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    /// Gradient with respect to a recorded node, if it requires one.
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient summed over every use of a parameter in the graph.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }

    pub fn params(&self) -> &[(ParamId, Tensor)] {
        &self.params
    }
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

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn shape_err(&self, op: &'static str, detail: String) -> Error {
        Error::Shape {
            node: self.nodes.len(),
            op,
            detail,
        }
    }

    fn check_rank2(&self, op: &'static str, id: NodeId) -> Result<()> {
        let s = self.nodes[id.0].value.shape();
        if s.len() != 2 {
            return Err(self.shape_err(op, format!("expected rank-2 operand, got {s:?}")));
        }
        Ok(())
    }

    /// Constant leaf; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, value, false)
    }

    /// Differentiable leaf that is not a stored parameter.
    pub fn var(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Var, value, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.push(Op::Param(id), store.get(id).clone(), true)
    }

    /// `a · b`, or `a · bᵀ` when `transpose_b`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> Result<NodeId> {
        self.check_rank2("matmul", a)?;
        self.check_rank2("matmul", b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = (va.rows(), va.cols());
        let (kb, n) = if transpose_b {
            (vb.cols(), vb.rows())
        } else {
            (vb.rows(), vb.cols())
        };
        if k != kb {
            return Err(self.shape_err(
                "matmul",
                format!(
                    "inner dimensions differ: {:?} x {:?}{}",
                    va.shape(),
                    vb.shape(),
                    if transpose_b { "ᵀ" } else { "" }
                ),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(va.data(), vb.data(), &mut out, m, k, n, false, transpose_b, 0.0);
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(
            Op::MatMul { a, b, transpose_b },
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            rg,
        ))
    }

    /// `x · w + b` with `b` a `1 × n` row broadcast over the rows.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        for id in [x, w, b] {
            self.check_rank2("affine", id)?;
        }
        let (vx, vw, vb) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        let (m, k, n) = (vx.rows(), vx.cols(), vw.cols());
        if vw.rows() != k || vb.shape() != [1, n] {
            return Err(self.shape_err(
                "affine",
                format!("{:?} x {:?} + {:?}", vx.shape(), vw.shape(), vb.shape()),
            ));
        }
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(&vb.data);
        }
        gemm(vx.data(), vw.data(), &mut out, m, k, n, false, false, 1.0);
        let rg = [x, w, b].iter().any(|id| self.nodes[id.0].requires_grad);
        Ok(self.push(Op::Affine { x, w, b }, Tensor { shape: vec![m, n], data: out }, rg))
    }

    fn broadcast(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Broadcast> {
        self.check_rank2(op, a)?;
        self.check_rank2(op, b)?;
        let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        if sa == sb {
            Ok(Broadcast::Same)
        } else if sb == [1, 1] {
            Ok(Broadcast::Scalar)
        } else if sb[0] == 1 && sb[1] == sa[1] {
            Ok(Broadcast::Row)
        } else {
            Err(self.shape_err(op, format!("cannot broadcast {sb:?} onto {sa:?}")))
        }
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        let bc = self.broadcast(op, a, b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let cols = va.cols();
        let data: Vec<f64> = match bc {
            Broadcast::Same => va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Scalar => {
                let s = vb.data[0];
                va.data.iter().map(|&x| f(x, s)).collect()
            }
            Broadcast::Row => {
                let mut out = Vec::with_capacity(va.len());
                for row in va.data.chunks_exact(cols) {
                    out.extend(row.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)));
                }
                out
            }
        };
        let value = Tensor {
            shape: va.shape.clone(),
            data,
        };
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        let op = if op == "add" {
            Op::Add { a, b }
        } else {
            Op::Mul { a, b }
        };
        Ok(self.push(op, value, rg))
    }

    /// Elementwise sum; `b` may be a `[1, cols]` row or a `[1, 1]` scalar.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "add", |x, y| x + y)
    }

    /// Elementwise product with the same broadcasting rules as [`Graph::add`].
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "mul", |x, y| x * y)
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let v = &self.nodes[a.0].value;
        let value = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&x| f(x)).collect(),
        };
        let rg = self.nodes[a.0].requires_grad;
        self.push(op, value, rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Tanh(a), tanh)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    fn rowwise(
        &mut self,
        a: NodeId,
        op: Op,
        f: impl Fn(&[f64], &mut [f64]),
    ) -> Result<NodeId> {
        self.check_rank2(op.name(), a)?;
        let v = &self.nodes[a.0].value;
        let cols = v.cols();
        let mut data = vec![0.0; v.len()];
        if cols > 0 {
            for (src, dst) in v.data.chunks(cols).zip(data.chunks_mut(cols)) {
                f(src, dst);
            }
        }
        let value = Tensor {
            shape: v.shape.clone(),
            data,
        };
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(op, value, rg))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.rowwise(a, Op::Softmax(a), softmax_row)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.rowwise(a, Op::LogSoftmax(a), log_softmax_row)
    }

    /// Row-wise normalisation to zero mean, unit variance (no affine part).
    pub fn layer_norm(&mut self, a: NodeId) -> Result<NodeId> {
        self.rowwise(a, Op::LayerNorm(a), |src, dst| {
            let inv = layer_norm_inv_std(src);
            let mean = mean(src);
            for (d, &x) in dst.iter_mut().zip(src) {
                *d = (x - mean) * inv;
            }
        })
    }

    /// Concatenate along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        if inputs.is_empty() || axis > 1 {
            return Err(self.shape_err("concat", "needs ≥1 input and axis 0 or 1".into()));
        }
        for &i in inputs {
            self.check_rank2("concat", i)?;
        }
        let first = self.nodes[inputs[0].0].value.shape().to_vec();
        let other = 1 - axis;
        for &i in inputs {
            let s = self.nodes[i.0].value.shape();
            if s[other] != first[other] {
                return Err(self.shape_err(
                    "concat",
                    format!("axis {other} differs: {first:?} vs {s:?}"),
                ));
            }
        }
        let value = if axis == 0 {
            let rows = inputs.iter().map(|i| self.nodes[i.0].value.rows()).sum();
            let mut data = Vec::with_capacity(rows * first[1]);
            for &i in inputs {
                data.extend_from_slice(&self.nodes[i.0].value.data);
            }
            Tensor {
                shape: vec![rows, first[1]],
                data,
            }
        } else {
            let rows = first[0];
            let cols: usize = inputs.iter().map(|i| self.nodes[i.0].value.cols()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for &i in inputs {
                    data.extend_from_slice(self.nodes[i.0].value.row_slice(r));
                }
            }
            Tensor {
                shape: vec![rows, cols],
                data,
            }
        };
        let rg = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        Ok(self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            value,
            rg,
        ))
    }

    /// Contiguous `len`-long range starting at `start` along `axis`.
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        self.check_rank2("slice", a)?;
        let v = &self.nodes[a.0].value;
        let (rows, cols) = (v.rows(), v.cols());
        let extent = if axis == 0 { rows } else { cols };
        if axis > 1 || start + len > extent {
            return Err(self.shape_err(
                "slice",
                format!("range {start}..{} outside axis {axis} of {:?}", start + len, v.shape),
            ));
        }
        let value = if axis == 0 {
            Tensor {
                shape: vec![len, cols],
                data: v.data[start * cols..(start + len) * cols].to_vec(),
            }
        } else {
            let mut data = Vec::with_capacity(rows * len);
            for r in 0..rows {
                data.extend_from_slice(&v.data[r * cols + start..r * cols + start + len]);
            }
            Tensor {
                shape: vec![rows, len],
                data,
            }
        };
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Op::Slice { a, axis, start }, value, rg))
    }

    /// Row lookup: output row `i` is `table[indices[i]]`.
    pub fn gather(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        self.check_rank2("gather", table)?;
        let v = &self.nodes[table.0].value;
        let (rows, cols) = (v.rows(), v.cols());
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(self.shape_err("gather", format!("index {bad} out of {rows} rows")));
        }
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(&v.data[i * cols..(i + 1) * cols]);
        }
        let rg = self.nodes[table.0].requires_grad;
        Ok(self.push(
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            Tensor {
                shape: vec![indices.len(), cols],
                data,
            },
            rg,
        ))
    }

    /// Joint grid: output row `i·m + j` is `tanh(a[i] + b[j])` for an `n × w`
    /// `a` and an `m × w` `b`.
    pub fn outer_add_tanh(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_rank2("outer_add_tanh", a)?;
        self.check_rank2("outer_add_tanh", b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (n, m, w) = (va.rows(), vb.rows(), va.cols());
        if vb.cols() != w {
            return Err(self.shape_err("outer_add_tanh", format!("widths {w} and {}", vb.cols())));
        }
        let mut data = Vec::with_capacity(n * m * w);
        for ra in va.data.chunks_exact(w) {
            for rb in vb.data.chunks_exact(w) {
                data.extend(ra.iter().zip(rb).map(|(x, y)| tanh(x + y)));
            }
        }
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(Op::OuterAddTanh { a, b }, Tensor { shape: vec![n * m, w], data }, rg))
    }

    /// Multi-head self-attention over a fused `n × 3w` block laid out as
    /// `[Q | K | V]`. Query row `i` attends only to the rows in `keys[i]`.
    /// Returns `n × w` with heads side by side.
    pub fn masked_attention(&mut self, qkv: NodeId, heads: usize, keys: &[Vec<usize>], scale: f64) -> Result<NodeId> {
        self.check_rank2("masked_attention", qkv)?;
        let v = &self.nodes[qkv.0].value;
        let (n, cols) = (v.rows(), v.cols());
        if heads == 0 || cols % (3 * heads) != 0 || keys.len() != n {
            return Err(self.shape_err(
                "masked_attention",
                format!("{n}×{cols} block with {heads} heads and {} key lists", keys.len()),
            ));
        }
        if let Some(i) = keys.iter().position(|k| k.is_empty() || k.iter().any(|&j| j >= n)) {
            return Err(self.shape_err("masked_attention", format!("query {i} has an empty or out-of-range key list")));
        }
        let w = cols / 3;
        let dh = w / heads;
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        for k in keys {
            offsets.push(offsets.last().unwrap() + k.len());
        }
        let flat: Vec<usize> = keys.iter().flatten().copied().collect();
        let nnz = flat.len();
        let x = v.data();
        let mut probs = vec![0.0; heads * nnz];
        let mut out = vec![0.0; n * w];
        for h in 0..heads {
            let (qo, ko, vo) = (h * dh, w + h * dh, 2 * w + h * dh);
            for i in 0..n {
                let q = &x[i * cols + qo..i * cols + qo + dh];
                let p = &mut probs[h * nnz + offsets[i]..h * nnz + offsets[i + 1]];
                let ks = &flat[offsets[i]..offsets[i + 1]];
                let mut max = f64::NEG_INFINITY;
                for (pj, &j) in p.iter_mut().zip(ks) {
                    let k = &x[j * cols + ko..j * cols + ko + dh];
                    *pj = scale * q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>();
                    max = max.max(*pj);
                }
                let mut total = 0.0;
                for pj in p.iter_mut() {
                    *pj = (*pj - max).exp();
                    total += *pj;
                }
                let o = &mut out[i * w + h * dh..i * w + (h + 1) * dh];
                for (pj, &j) in p.iter_mut().zip(ks) {
                    *pj /= total;
                    let vr = &x[j * cols + vo..j * cols + vo + dh];
                    o.iter_mut().zip(vr).for_each(|(d, s)| *d += *pj * s);
                }
            }
        }
        let rg = self.nodes[qkv.0].requires_grad;
        let op = Op::Attention(Box::new(Attention {
            qkv,
            heads,
            scale,
            offsets,
            keys: flat,
            probs,
        }));
        Ok(self.push(op, Tensor { shape: vec![n, w], data: out }, rg))
    }

    pub fn backward(&self, output: NodeId, seed: &Tensor) -> Result<Gradients> {
        if output.0 >= self.nodes.len() {
            return Err(Error::Backward(format!(
                "node {} has not been evaluated (graph holds {} nodes)",
                output.0,
                self.nodes.len()
            )));
        }
        let out_shape = self.nodes[output.0].value.shape();
        if seed.shape() != out_shape {
            return Err(Error::Backward(format!(
                "seed shape {:?} does not match output shape {out_shape:?}",
                seed.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(seed.data.clone());
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut params: Vec<(ParamId, Tensor)> = Vec::new();
        let mut nodes = Vec::with_capacity(grads.len());
        for (idx, g) in grads.into_iter().enumerate() {
            let node = &self.nodes[idx];
            let t = g.map(|data| Tensor {
                shape: node.value.shape.clone(),
                data,
            });
            if let (Op::Param(pid), Some(t)) = (&node.op, &t) {
                match params.iter_mut().find(|(p, _)| p == pid) {
                    Some((_, acc)) => acc
                        .data
                        .iter_mut()
                        .zip(&t.data)
                        .for_each(|(a, b)| *a += b),
                    None => params.push((*pid, t.clone())),
                }
            }
            nodes.push(t);
        }
        params.sort_by_key(|(p, _)| *p);
        Ok(Gradients { nodes, params })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = &node.value;
        match &node.op {
            Op::Input | Op::Var | Op::Param(_) => {}
            Op::MatMul { a, b, transpose_b } => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k) = (va.rows(), va.cols());
                let n = y.cols();
                if let Some(ga) = self.slot(*a, grads) {
                    // dA = dY · Bᵀ  (B stored k×n) or dY · B (B stored n×k)
                    gemm(g, vb.data(), ga, m, n, k, false, !transpose_b, 1.0);
                }
                if let Some(gb) = self.slot(*b, grads) {
                    if *transpose_b {
                        // B stored n×k: dB = dYᵀ · A
                        gemm(g, va.data(), gb, n, m, k, true, false, 1.0);
                    } else {
                        gemm(va.data(), g, gb, k, m, n, true, false, 1.0);
                    }
                }
            }
            Op::Affine { x, w, b } => {
                let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                let (m, k, n) = (vx.rows(), vx.cols(), y.cols());
                if let Some(gx) = self.slot(*x, grads) {
                    gemm(g, vw.data(), gx, m, n, k, false, true, 1.0);
                }
                if let Some(gw) = self.slot(*w, grads) {
                    gemm(vx.data(), g, gw, k, m, n, true, false, 1.0);
                }
                if let Some(gb) = self.slot(*b, grads) {
                    for row in g.chunks_exact(n) {
                        gb.iter_mut().zip(row).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Add { a, b } => {
                let bc = self.broadcast("add", *a, *b).expect("checked at record time");
                self.accumulate(*a, grads, g);
                let cols = y.cols();
                if bc == Broadcast::Same {
                    self.accumulate(*b, grads, g);
                } else if let Some(gb) = self.slot(*b, grads) {
                    if bc == Broadcast::Row {
                        for row in g.chunks_exact(cols) {
                            gb.iter_mut().zip(row).for_each(|(d, s)| *d += s);
                        }
                    } else {
                        reduce_into(gb, g.iter().copied(), bc, cols);
                    }
                }
            }
            Op::Mul { a, b } => {
                let bc = self.broadcast("mul", *a, *b).expect("checked at record time");
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let cols = y.cols();
                if let Some(ga) = self.slot(*a, grads) {
                    match bc {
                        Broadcast::Same => ga.iter_mut().zip(g).zip(&vb.data).for_each(|((d, s), b)| *d += s * b),
                        Broadcast::Scalar => ga.iter_mut().zip(g).for_each(|(d, s)| *d += s * vb.data[0]),
                        Broadcast::Row => {
                            for (dr, gr) in ga.chunks_exact_mut(cols).zip(g.chunks_exact(cols)) {
                                dr.iter_mut().zip(gr).zip(&vb.data).for_each(|((d, s), b)| *d += s * b);
                            }
                        }
                    }
                }
                if let Some(gb) = self.slot(*b, grads) {
                    if bc == Broadcast::Row {
                        for (gr, xr) in g.chunks_exact(cols).zip(va.data.chunks_exact(cols)) {
                            gb.iter_mut().zip(gr).zip(xr).for_each(|((d, s), x)| *d += s * x);
                        }
                    } else {
                        reduce_into(gb, g.iter().zip(&va.data).map(|(s, x)| s * x), bc, cols);
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = self.slot(*a, grads) {
                    for ((d, &s), &t) in ga.iter_mut().zip(g).zip(&y.data) {
                        *d += s * (1.0 - t * t);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.slot(*a, grads) {
                    for ((d, &s), &t) in ga.iter_mut().zip(g).zip(&y.data) {
                        *d += s * t * (1.0 - t);
                    }
                }
            }
            Op::Relu(a) => {
                if let Some(ga) = self.slot(*a, grads) {
                    for ((d, &s), &t) in ga.iter_mut().zip(g).zip(&y.data) {
                        if t > 0.0 {
                            *d += s;
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let cols = y.cols();
                if let Some(ga) = self.slot(*a, grads) {
                    for ((d, s), t) in ga.chunks_mut(cols).zip(g.chunks(cols)).zip(y.data.chunks(cols)) {
                        let dot: f64 = s.iter().zip(t).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            d[j] += t[j] * (s[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let cols = y.cols();
                if let Some(ga) = self.slot(*a, grads) {
                    for ((d, s), t) in ga.chunks_mut(cols).zip(g.chunks(cols)).zip(y.data.chunks(cols)) {
                        let total: f64 = s.iter().sum();
                        for j in 0..cols {
                            d[j] += s[j] - t[j].exp() * total;
                        }
                    }
                }
            }
            Op::LayerNorm(a) => {
                let cols = y.cols();
                let x = &self.nodes[a.0].value;
                if let Some(ga) = self.slot(*a, grads) {
                    let n = cols as f64;
                    for (((d, s), t), xr) in ga
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(y.data.chunks(cols))
                        .zip(x.data.chunks(cols))
                    {
                        let inv = layer_norm_inv_std(xr);
                        let mean_g = s.iter().sum::<f64>() / n;
                        let mean_gy = s.iter().zip(t).map(|(a, b)| a * b).sum::<f64>() / n;
                        for j in 0..cols {
                            d[j] += inv * (s[j] - mean_g - t[j] * mean_gy);
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let cols = y.cols();
                let mut offset = 0;
                for &i in inputs {
                    let v = &self.nodes[i.0].value;
                    let (r, c) = (v.rows(), v.cols());
                    if let Some(gi) = self.slot(i, grads) {
                        if *axis == 0 {
                            let src = &g[offset * cols..(offset + r) * cols];
                            gi.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        } else {
                            for row in 0..r {
                                let src = &g[row * cols + offset..row * cols + offset + c];
                                gi[row * c..(row + 1) * c]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(d, s)| *d += s);
                            }
                        }
                    }
                    offset += if *axis == 0 { r } else { c };
                }
            }
            Op::Slice { a, axis, start } => {
                let cols_in = self.nodes[a.0].value.cols();
                let (rows, cols) = (y.rows(), y.cols());
                if let Some(ga) = self.slot(*a, grads) {
                    if *axis == 0 {
                        ga[start * cols_in..(start + rows) * cols_in]
                            .iter_mut()
                            .zip(g)
                            .for_each(|(d, s)| *d += s);
                    } else {
                        for r in 0..rows {
                            ga[r * cols_in + start..r * cols_in + start + cols]
                                .iter_mut()
                                .zip(&g[r * cols..(r + 1) * cols])
                                .for_each(|(d, s)| *d += s);
                        }
                    }
                }
            }
            Op::Attention(a) => self.attention_backward(a, g, grads),
            Op::OuterAddTanh { a, b } => {
                let (m, w) = (self.nodes[b.0].value.rows(), y.cols());
                let dz: Vec<f64> = g.iter().zip(&y.data).map(|(s, t)| s * (1.0 - t * t)).collect();
                if let Some(ga) = self.slot(*a, grads) {
                    for (da, block) in ga.chunks_exact_mut(w).zip(dz.chunks_exact(m * w)) {
                        for row in block.chunks_exact(w) {
                            da.iter_mut().zip(row).for_each(|(d, s)| *d += s);
                        }
                    }
                }
                if let Some(gb) = self.slot(*b, grads) {
                    for block in dz.chunks_exact(m * w) {
                        gb.iter_mut().zip(block).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Gather { table, indices } => {
                let cols = y.cols();
                if let Some(gt) = self.slot(*table, grads) {
                    for (out_row, &i) in indices.iter().enumerate() {
                        gt[i * cols..(i + 1) * cols]
                            .iter_mut()
                            .zip(&g[out_row * cols..(out_row + 1) * cols])
                            .for_each(|(d, s)| *d += s);
                    }
                }
            }
        }
    }

    fn attention_backward(&self, a: &Attention, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let x = &self.nodes[a.qkv.0].value;
        let cols = x.cols();
        let n = x.rows();
        let x = x.data();
        let w = cols / 3;
        let dh = w / a.heads;
        let nnz = a.keys.len();
        let Some(gx) = self.slot(a.qkv, grads) else { return };
        let mut dp = Vec::new();
        let mut dq = vec![0.0; dh];
        for h in 0..a.heads {
            let (qo, ko, vo) = (h * dh, w + h * dh, 2 * w + h * dh);
            for i in 0..n {
                let (lo, hi) = (a.offsets[i], a.offsets[i + 1]);
                let ks = &a.keys[lo..hi];
                let p = &a.probs[h * nnz + lo..h * nnz + hi];
                let go = &g[i * w + h * dh..i * w + (h + 1) * dh];
                dp.clear();
                let mut dot = 0.0;
                for (&pj, &j) in p.iter().zip(ks) {
                    let vr = &x[j * cols + vo..j * cols + vo + dh];
                    let d = go.iter().zip(vr).map(|(a, b)| a * b).sum::<f64>();
                    dot += pj * d;
                    dp.push(d);
                    gx[j * cols + vo..j * cols + vo + dh]
                        .iter_mut()
                        .zip(go)
                        .for_each(|(t, s)| *t += pj * s);
                }
                let q = &x[i * cols + qo..i * cols + qo + dh];
                dq.fill(0.0);
                for ((&pj, &j), &d) in p.iter().zip(ks).zip(&dp) {
                    let ds = a.scale * pj * (d - dot);
                    let k = &x[j * cols + ko..j * cols + ko + dh];
                    dq.iter_mut().zip(k).for_each(|(t, s)| *t += ds * s);
                    gx[j * cols + ko..j * cols + ko + dh]
                        .iter_mut()
                        .zip(q)
                        .for_each(|(t, s)| *t += ds * s);
                }
                gx[i * cols + qo..i * cols + qo + dh]
                    .iter_mut()
                    .zip(&dq)
                    .for_each(|(t, s)| *t += s);
            }
        }
    }

    /// Add `g` into the gradient of `id`; the first contribution is copied.
    fn accumulate(&self, id: NodeId, grads: &mut [Option<Vec<f64>>], g: &[f64]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(d) => d.iter_mut().zip(g).for_each(|(d, s)| *d += s),
            slot => *slot = Some(g.to_vec()),
        }
    }

    /// Zero-initialised gradient buffer for `id`, or `None` if it needs none.
    fn slot<'g>(&self, id: NodeId, grads: &'g mut [Option<Vec<f64>>]) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        let len = self.nodes[id.0].value.len();
        Some(grads[id.0].get_or_insert_with(|| vec![0.0; len]))
    }
}

fn reduce_into(dst: &mut [f64], src: impl Iterator<Item = f64>, bc: Broadcast, cols: usize) {
    match bc {
        Broadcast::Same => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
        Broadcast::Row => {
            let mut j = 0;
            for s in src {
                dst[j] += s;
                j += 1;
                if j == cols {
                    j = 0;
                }
            }
        }
        Broadcast::Scalar => dst[0] += src.sum::<f64>(),
    }
}

/// exp-based tanh, about 2.5x faster than libm's; a Taylor series covers
/// |x| < 0.02 where `1 − e` would cancel.
pub(crate) fn tanh(x: f64) -> f64 {
    let a = x.abs();
    if a < 0.02 {
        let x2 = x * x;
        return x * (1.0 - x2 * (1.0 / 3.0 - x2 * (2.0 / 15.0 - x2 * (17.0 / 315.0))));
    }
    let e = (-2.0 * a).exp();
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn layer_norm_inv_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
    1.0 / (var + LAYER_NORM_EPS).sqrt()
}

pub(crate) fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (d, &x) in dst.iter_mut().zip(src) {
        *d = (x - max).exp();
        total += *d;
    }
    dst.iter_mut().for_each(|d| *d /= total);
}

pub(crate) fn log_softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + src.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    for (d, &x) in dst.iter_mut().zip(src) {
        *d = x - lse;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn square_and_its_derivative() {
        let mut g = Graph::new();
        let x = g.var(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        assert_eq!(g.value(y).data(), &[9.0]);
        let grads = g.backward(y, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads.node(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.input(t(1, 2, &[0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.input(t(1, 4, &[2.5; 4]));
        let y = g.layer_norm(x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_sum_gradient_is_broadcast_column_sums() {
        let mut g = Graph::new();
        let a = g.var(t(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.input(t(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = g.matmul(a, b, false).unwrap();
        let grads = g.backward(y, &Tensor::full(vec![2, 2], 1.0)).unwrap();
        // d sum(AB)/dA[i][k] = sum_j B[k][j]
        assert_eq!(grads.node(a).unwrap().data(), &[3.0, 7.0, 11.0, 3.0, 7.0, 11.0]);
        assert!(grads.node(b).is_none());
    }

    #[test]
    fn fast_tanh_matches_libm() {
        for x in [0.0, 1e-9, -0.0199, 0.02, -0.5, 3.0, 40.0, -800.0] {
            assert!((tanh(x) - x.tanh()).abs() <= 1e-14 * x.tanh().abs().max(1e-300), "{x}");
        }
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.var(Tensor::scalar(2.0));
        let a = g.tanh(x);
        let b = g.sigmoid(x);
        let c = g.add(a, b).unwrap();
        let d = g.add(c, x).unwrap();
        let grads = g.backward(d, &Tensor::scalar(1.0)).unwrap();
        let th = 2.0f64.tanh();
        let sg = sigmoid(2.0);
        let expected = (1.0 - th * th) + sg * (1.0 - sg) + 1.0;
        assert!((grads.node(x).unwrap().data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn shape_errors_name_the_node() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(vec![2, 3]));
        let b = g.input(Tensor::zeros(vec![2, 3]));
        match g.matmul(a, b, false) {
            Err(Error::Shape { node, op, .. }) => {
                assert_eq!(node, 2);
                assert_eq!(op, "matmul");
            }
            other => panic!("unexpected {other:?}"),
        }
        let c = g.input(Tensor::zeros(vec![3, 2]));
        assert!(g.add(a, c).is_err());
        let row = g.input(Tensor::zeros(vec![1, 3]));
        assert!(g.add(a, row).is_ok());
    }

    #[test]
    fn backward_rejects_unevaluated_nodes_and_bad_seeds() {
        let g = Graph::new();
        assert!(matches!(
            g.backward(NodeId(0), &Tensor::scalar(1.0)),
            Err(Error::Backward(_))
        ));
        let mut g = Graph::new();
        let x = g.var(Tensor::zeros(vec![1, 2]));
        assert!(g.backward(x, &Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn param_gradients_sum_over_uses() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(1.5));
        let mut g = Graph::new();
        let a = g.param(&store, w);
        let b = g.param(&store, w);
        let y = g.mul(a, b).unwrap();
        let grads = g.backward(y, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads.param(w).unwrap().data(), &[3.0]);
    }

    #[test]
    fn masked_attention_matches_dense_composition() {
        let (n, heads, dh) = (5, 2, 3);
        let w = heads * dh;
        let data: Vec<f64> = (0..n * 3 * w).map(|i| ((i * 37 % 23) as f64 - 11.0) * 0.07).collect();
        let keys: Vec<Vec<usize>> = vec![vec![0, 1], vec![0, 1, 2], vec![1, 2, 4], vec![3], vec![0, 3, 4]];
        let upstream: Vec<f64> = (0..n * w).map(|i| ((i * 13 % 7) as f64 - 3.0) * 0.2).collect();
        let scale = 0.6;

        let mut g = Graph::new();
        let x = g.var(t(n, 3 * w, &data));
        let fused = g.masked_attention(x, heads, &keys, scale).unwrap();
        let fused_val = g.value(fused).clone();
        let fused_grad = g.backward(fused, &t(n, w, &upstream)).unwrap().node(x).unwrap().clone();

        let mut g = Graph::new();
        let x = g.var(t(n, 3 * w, &data));
        let mut additive = vec![-1e9; n * n];
        for (i, ks) in keys.iter().enumerate() {
            for &j in ks {
                additive[i * n + j] = 0.0;
            }
        }
        let mask = g.input(t(n, n, &additive));
        let sc = g.input(Tensor::scalar(scale));
        let mut outs = Vec::new();
        for h in 0..heads {
            let q = g.slice(x, 1, h * dh, dh).unwrap();
            let k = g.slice(x, 1, w + h * dh, dh).unwrap();
            let v = g.slice(x, 1, 2 * w + h * dh, dh).unwrap();
            let s = g.matmul(q, k, true).unwrap();
            let s = g.mul(s, sc).unwrap();
            let s = g.add(s, mask).unwrap();
            let p = g.softmax(s).unwrap();
            outs.push(g.matmul(p, v, false).unwrap());
        }
        let dense = g.concat(&outs, 1).unwrap();
        let dense_grad = g.backward(dense, &t(n, w, &upstream)).unwrap().node(x).unwrap().clone();

        for (a, b) in fused_val.data().iter().zip(g.value(dense).data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in fused_grad.data().iter().zip(dense_grad.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn affine_matches_matmul_plus_bias() {
        let (m, k, n) = (3, 4, 2);
        let dx: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).cos()).collect();
        let dw: Vec<f64> = (0..k * n).map(|i| (i as f64 - 3.0) * 0.2).collect();
        let up: Vec<f64> = (0..m * n).map(|i| (i as f64 * 1.3).sin()).collect();
        let run = |fused: bool| {
            let mut g = Graph::new();
            let (x, w, b) = (g.var(t(m, k, &dx)), g.var(t(k, n, &dw)), g.var(t(1, n, &[0.5, -1.5])));
            let y = if fused {
                g.affine(x, w, b).unwrap()
            } else {
                let p = g.matmul(x, w, false).unwrap();
                g.add(p, b).unwrap()
            };
            let gr = g.backward(y, &t(m, n, &up)).unwrap();
            let mut all = g.value(y).data().to_vec();
            for id in [x, w, b] {
                all.extend_from_slice(gr.node(id).unwrap().data());
            }
            all
        };
        for (a, b) in run(true).iter().zip(run(false)) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut g = Graph::new();
        let (x, w) = (g.var(t(m, k, &dx)), g.var(t(k, n, &dw)));
        let bad = g.var(Tensor::zeros(vec![1, n + 1]));
        assert!(g.affine(x, w, bad).is_err());
    }

    #[test]
    fn outer_add_tanh_matches_gather_composition() {
        let (n, m, w) = (3, 4, 2);
        let da: Vec<f64> = (0..n * w).map(|i| (i as f64 - 2.5) * 0.3).collect();
        let db: Vec<f64> = (0..m * w).map(|i| (i as f64 * 0.7).sin()).collect();
        let up: Vec<f64> = (0..n * m * w).map(|i| ((i * 5 % 9) as f64 - 4.0) * 0.1).collect();

        let mut g = Graph::new();
        let (a, b) = (g.var(t(n, w, &da)), g.var(t(m, w, &db)));
        let z = g.outer_add_tanh(a, b).unwrap();
        let fused = g.backward(z, &t(n * m, w, &up)).unwrap();
        let fused_val = g.value(z).clone();

        let mut h = Graph::new();
        let (a2, b2) = (h.var(t(n, w, &da)), h.var(t(m, w, &db)));
        let ia: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, m)).collect();
        let ib: Vec<usize> = (0..n).flat_map(|_| 0..m).collect();
        let (ra, rb) = (h.gather(a2, &ia).unwrap(), h.gather(b2, &ib).unwrap());
        let s = h.add(ra, rb).unwrap();
        let z2 = h.tanh(s);
        let dense = h.backward(z2, &t(n * m, w, &up)).unwrap();

        let close = |x: &Tensor, y: &Tensor| x.data().iter().zip(y.data()).all(|(p, q)| (p - q).abs() < 1e-12);
        assert!(close(&fused_val, h.value(z2)));
        assert!(close(fused.node(a).unwrap(), dense.node(a2).unwrap()));
        assert!(close(fused.node(b).unwrap(), dense.node(b2).unwrap()));
        let bad = g.var(Tensor::zeros(vec![2, 3]));
        assert!(g.outer_add_tanh(a, bad).is_err());
    }

    #[test]
    fn masked_attention_rejects_bad_key_lists() {
        let mut g = Graph::new();
        let x = g.var(Tensor::zeros(vec![2, 6]));
        assert!(g.masked_attention(x, 2, &[vec![0], vec![]], 1.0).is_err());
        assert!(g.masked_attention(x, 2, &[vec![0], vec![2]], 1.0).is_err());
        assert!(g.masked_attention(x, 4, &[vec![0], vec![1]], 1.0).is_err());
    }
}
