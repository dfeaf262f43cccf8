//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! A [`Graph`] records every operation of a forward pass in construction
//! order; [`Graph::backward`] replays the tape in reverse, pushing adjoints
//! to parents by the chain rule. Gradients accumulate additively on leaves,
//! so running backward twice on the same graph doubles them.
//!
//! Everything is f64. log-softmax and softmax use max subtraction and are
//! safe for large logits (including `-1e30` attention-mask fills).

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// [m,k] x [k,n]
    MatMul { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    Add { a: NodeId, b: NodeId },
    /// a: [m,n], b: [n] broadcast over rows
    AddRow { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    AddScalar { a: NodeId },
    Relu { a: NodeId },
    Gelu { a: NodeId },
    Exp { a: NodeId },
    Softmax { a: NodeId },
    LogSoftmax { a: NodeId },
    /// Row-wise layer normalization; gain/bias have one entry per column.
    LayerNorm { a: NodeId, gain: NodeId, bias: NodeId },
    /// out[i,:] = table[ids[i],:]
    EmbedLookup { table: NodeId, ids: Vec<usize> },
    /// out[i] = a[i, ids[i]]
    GatherPerRow { a: NodeId, ids: Vec<usize> },
    Sum { a: NodeId },
    Mean { a: NodeId },
    /// Entries where mask is true were replaced by a constant; no gradient
    /// flows through them.
    MaskedFill { a: NodeId, mask: Vec<bool> },
    SliceCols { a: NodeId, start: usize, len: usize },
    ConcatCols { parts: Vec<NodeId> },
    StackScalars { parts: Vec<NodeId> },
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    /// Persistent gradient, accumulated across backward calls (leaves only).
    grad: Vec<f64>,
    /// Extra forward-pass scalars needed by the backward rule (layer norm
    /// stores per-row mean and reciprocal std).
    saved: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

const LAYER_NORM_EPS: f64 = 1e-5;

/// Dynamic computation graph (Wengert tape).
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, saved: Vec<f64>, op: Op) -> NodeId {
        let needs_grad = match &op {
            Op::Leaf => false, // set by leaf()
            Op::MatMul { a, b }
            | Op::Add { a, b }
            | Op::AddRow { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b } => self.needs(*a) || self.needs(*b),
            Op::LayerNorm { a, gain, bias } => {
                self.needs(*a) || self.needs(*gain) || self.needs(*bias)
            }
            Op::Transpose { a }
            | Op::Scale { a, .. }
            | Op::AddScalar { a, .. }
            | Op::Relu { a }
            | Op::Gelu { a }
            | Op::Exp { a }
            | Op::Softmax { a }
            | Op::LogSoftmax { a }
            | Op::EmbedLookup { table: a, .. }
            | Op::GatherPerRow { a, .. }
            | Op::Sum { a }
            | Op::Mean { a }
            | Op::MaskedFill { a, .. }
            | Op::SliceCols { a, .. } => self.needs(*a),
            Op::ConcatCols { parts } | Op::StackScalars { parts } => {
                parts.iter().any(|p| self.needs(*p))
            }
        };
        self.nodes.push(Node {
            shape,
            values,
            grad: Vec::new(),
            saved,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    // ── leaves ───────────────────────────────────────────────────────

    /// Insert a tensor as a leaf; it participates in gradients when
    /// `requires_grad` is set on the tensor.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.leaf_slice(&t.shape, &t.data, t.requires_grad)
    }

    pub fn leaf_slice(&mut self, shape: &[usize], data: &[f64], requires_grad: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = self.push(shape.to_vec(), data.to_vec(), Vec::new(), Op::Leaf);
        self.nodes[id.0].needs_grad = requires_grad;
        id
    }

    pub fn constant(&mut self, shape: &[usize], data: &[f64]) -> NodeId {
        self.leaf_slice(shape, data, false)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.leaf_slice(&[], &[v], false)
    }

    // ── accessors ────────────────────────────────────────────────────

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.node(id).values
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.node(id).shape
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.node(id).values.len(), 1);
        self.node(id).values[0]
    }

    /// Accumulated gradient of a leaf; `None` before any backward pass
    /// reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        let n = self.node(id);
        if n.grad.is_empty() {
            None
        } else {
            Some(&n.grad)
        }
    }

    pub fn value_tensor(&self, id: NodeId) -> Tensor {
        let n = self.node(id);
        Tensor {
            shape: n.shape.clone(),
            data: n.values.clone(),
            requires_grad: false,
        }
    }

    fn rows_cols(&self, id: NodeId) -> (usize, usize) {
        let s = &self.node(id).shape;
        match s.len() {
            0 => (1, 1),
            1 => (1, s[0]),
            _ => (s[0], s[1]),
        }
    }

    fn mismatch(&self, op: &'static str, a: NodeId, b: NodeId) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.node(a).shape.clone(),
            rhs: self.node(b).shape.clone(),
        }
    }

    // ── operations ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.node(a).shape, &self.node(b).shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.mismatch("matmul", a, b));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let values = kernels::matmul_nn(&self.node(a).values, &self.node(b).values, m, k, n);
        Ok(self.push(vec![m, n], values, Vec::new(), Op::MatMul { a, b }))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let s = &self.node(a).shape;
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                lhs: s.clone(),
                rhs: vec![],
            });
        }
        let (m, n) = (s[0], s[1]);
        let src = &self.node(a).values;
        let mut values = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                values[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push(vec![n, m], values, Vec::new(), Op::Transpose { a }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.node(a).shape != self.node(b).shape {
            return Err(self.mismatch("add", a, b));
        }
        let values: Vec<f64> = self
            .node(a)
            .values
            .iter()
            .zip(&self.node(b).values)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(self.node(a).shape.clone(), values, Vec::new(), Op::Add { a, b }))
    }

    /// Broadcast-add a row vector `b` to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, n) = self.rows_cols(a);
        if self.node(b).shape.len() != 1 || self.node(b).shape[0] != n {
            return Err(self.mismatch("add_row", a, b));
        }
        let bv = self.node(b).values.clone();
        let mut values = self.node(a).values.clone();
        for i in 0..m {
            for j in 0..n {
                values[i * n + j] += bv[j];
            }
        }
        Ok(self.push(self.node(a).shape.clone(), values, Vec::new(), Op::AddRow { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.node(a).shape != self.node(b).shape {
            return Err(self.mismatch("sub", a, b));
        }
        let values: Vec<f64> = self
            .node(a)
            .values
            .iter()
            .zip(&self.node(b).values)
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(self.node(a).shape.clone(), values, Vec::new(), Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.node(a).shape != self.node(b).shape {
            return Err(self.mismatch("mul", a, b));
        }
        let values: Vec<f64> = self
            .node(a)
            .values
            .iter()
            .zip(&self.node(b).values)
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(self.node(a).shape.clone(), values, Vec::new(), Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let values: Vec<f64> = self.node(a).values.iter().map(|x| x * c).collect();
        self.push(self.node(a).shape.clone(), values, Vec::new(), Op::Scale { a, c })
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let values: Vec<f64> = self.node(a).values.iter().map(|x| x + c).collect();
        self.push(self.node(a).shape.clone(), values, Vec::new(), Op::AddScalar { a })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let values: Vec<f64> = self.node(a).values.iter().map(|x| x.max(0.0)).collect();
        self.push(self.node(a).shape.clone(), values, Vec::new(), Op::Relu { a })
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let values: Vec<f64> = self.node(a).values.iter().map(|&x| kernels::gelu(x)).collect();
        self.push(self.node(a).shape.clone(), values, Vec::new(), Op::Gelu { a })
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let values: Vec<f64> = self.node(a).values.iter().map(|x| x.exp()).collect();
        self.push(self.node(a).shape.clone(), values, Vec::new(), Op::Exp { a })
    }

    /// Row-wise softmax (1D tensors are one row). Rows are nonnegative and
    /// sum to one.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.rowwise(a, "softmax", kernels::softmax_row, |a| Op::Softmax { a })
    }

    /// Row-wise log-softmax, stabilized by max subtraction.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.rowwise(a, "log_softmax", kernels::log_softmax_row, |a| Op::LogSoftmax { a })
    }

    fn rowwise(
        &mut self,
        a: NodeId,
        name: &'static str,
        f: fn(&mut [f64]),
        mk: fn(NodeId) -> Op,
    ) -> Result<NodeId> {
        let rank = self.node(a).shape.len();
        if rank == 0 || rank > 2 {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: self.node(a).shape.clone(),
                rhs: vec![],
            });
        }
        let (m, n) = self.rows_cols(a);
        let mut values = self.node(a).values.clone();
        for i in 0..m {
            f(&mut values[i * n..(i + 1) * n]);
        }
        Ok(self.push(self.node(a).shape.clone(), values, Vec::new(), mk(a)))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, a: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.rows_cols(a);
        for p in [gain, bias] {
            if self.node(p).shape != [n] {
                return Err(self.mismatch("layer_norm", a, p));
            }
        }
        let mut values = vec![0.0; m * n];
        let mut saved = Vec::with_capacity(2 * m);
        {
            let src = &self.node(a).values;
            let g = &self.node(gain).values;
            let b = &self.node(bias).values;
            for i in 0..m {
                let (mean, rstd) = kernels::layer_norm_row(
                    &src[i * n..(i + 1) * n],
                    g,
                    b,
                    LAYER_NORM_EPS,
                    &mut values[i * n..(i + 1) * n],
                );
                saved.push(mean);
                saved.push(rstd);
            }
        }
        Ok(self.push(
            self.node(a).shape.clone(),
            values,
            saved,
            Op::LayerNorm { a, gain, bias },
        ))
    }

    /// Gather rows of an embedding table: `out[i,:] = table[ids[i],:]`.
    pub fn embed_lookup(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let s = &self.node(table).shape;
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "embed_lookup",
                lhs: s.clone(),
                rhs: vec![ids.len()],
            });
        }
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::TokenOutOfRange {
                id: bad as u32,
                vocab: v as u32,
            });
        }
        let src = &self.node(table).values;
        let mut values = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            values.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            vec![ids.len(), d],
            values,
            Vec::new(),
            Op::EmbedLookup {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Per-row index gather: `out[i] = a[i, ids[i]]` (log-prob extraction).
    pub fn gather_per_row(&mut self, a: NodeId, ids: &[usize]) -> Result<NodeId> {
        let s = &self.node(a).shape;
        if s.len() != 2 || s[0] != ids.len() {
            return Err(Error::ShapeMismatch {
                op: "gather_per_row",
                lhs: s.clone(),
                rhs: vec![ids.len()],
            });
        }
        let n = s[1];
        if let Some(&bad) = ids.iter().find(|&&j| j >= n) {
            return Err(Error::TokenOutOfRange {
                id: bad as u32,
                vocab: n as u32,
            });
        }
        let src = &self.node(a).values;
        let values: Vec<f64> = ids.iter().enumerate().map(|(i, &j)| src[i * n + j]).collect();
        Ok(self.push(
            vec![ids.len()],
            values,
            Vec::new(),
            Op::GatherPerRow {
                a,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = self.node(a).values.iter().sum();
        self.push(vec![], vec![v], Vec::new(), Op::Sum { a })
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.node(a).values.len().max(1);
        let v = self.node(a).values.iter().sum::<f64>() / n as f64;
        self.push(vec![], vec![v], Vec::new(), Op::Mean { a })
    }

    /// Replace masked entries with a constant; masked entries get no gradient.
    pub fn masked_fill(&mut self, a: NodeId, mask: &[bool], fill: f64) -> Result<NodeId> {
        if mask.len() != self.node(a).values.len() {
            return Err(Error::ShapeMismatch {
                op: "masked_fill",
                lhs: self.node(a).shape.clone(),
                rhs: vec![mask.len()],
            });
        }
        let values: Vec<f64> = self
            .node(a)
            .values
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { fill } else { v })
            .collect();
        Ok(self.push(
            self.node(a).shape.clone(),
            values,
            Vec::new(),
            Op::MaskedFill {
                a,
                mask: mask.to_vec(),
            },
        ))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = &self.node(a).shape;
        if s.len() != 2 || start + len > s[1] {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: s.clone(),
                rhs: vec![start, len],
            });
        }
        let (m, n) = (s[0], s[1]);
        let src = &self.node(a).values;
        let mut values = Vec::with_capacity(m * len);
        for i in 0..m {
            values.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        Ok(self.push(vec![m, len], values, Vec::new(), Op::SliceCols { a, start, len }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_cols parts"));
        }
        let m = self.node(parts[0]).shape[0];
        let mut total = 0;
        for &p in parts {
            let s = &self.node(p).shape;
            if s.len() != 2 || s[0] != m {
                return Err(self.mismatch("concat_cols", parts[0], p));
            }
            total += s[1];
        }
        let mut values = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                let n = self.node(p).shape[1];
                values.extend_from_slice(&self.node(p).values[i * n..(i + 1) * n]);
            }
        }
        Ok(self.push(
            vec![m, total],
            values,
            Vec::new(),
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Stack scalar nodes into a 1D vector.
    pub fn stack_scalars(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("stack_scalars parts"));
        }
        let mut values = Vec::with_capacity(parts.len());
        for &p in parts {
            if self.node(p).values.len() != 1 {
                return Err(Error::ShapeMismatch {
                    op: "stack_scalars",
                    lhs: self.node(p).shape.clone(),
                    rhs: vec![],
                });
            }
            values.push(self.node(p).values[0]);
        }
        Ok(self.push(
            vec![parts.len()],
            values,
            Vec::new(),
            Op::StackScalars {
                parts: parts.to_vec(),
            },
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Gradients of `requires_grad` leaves
    /// accumulate additively across calls.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let lid = loss.0;
        {
            let n = self.node(loss);
            if n.values.len() != 1 || n.shape.iter().product::<usize>() != 1 {
                return Err(Error::NonScalarLoss(n.shape.clone()));
            }
        }
        let mut adjoint: Vec<Option<Vec<f64>>> = Vec::new();
        adjoint.resize_with(lid + 1, || None);
        adjoint[lid] = Some(vec![1.0]);

        for i in (0..=lid).rev() {
            let Some(up) = adjoint[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let n = &mut self.nodes[i];
                if n.grad.is_empty() {
                    n.grad = vec![0.0; n.values.len()];
                }
                for (g, u) in n.grad.iter_mut().zip(&up) {
                    *g += u;
                }
                continue;
            }
            propagate(&self.nodes, i, &up, &mut adjoint);
        }
        Ok(())
    }
}

fn adj_buf<'a>(
    adjoint: &'a mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: NodeId,
) -> &'a mut Vec<f64> {
    let slot = &mut adjoint[id.0];
    if slot.is_none() {
        *slot = Some(vec![0.0; nodes[id.0].values.len()]);
    }
    slot.as_mut().unwrap()
}

/// Push the adjoint `up` of node `i` onto its parents.
fn propagate(nodes: &[Node], i: usize, up: &[f64], adjoint: &mut [Option<Vec<f64>>]) {
    let node = &nodes[i];
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
            let n = nodes[b.0].shape[1];
            if nodes[a.0].needs_grad {
                // dA += up * B^T
                let bt = &nodes[b.0].values;
                let da = adj_buf(adjoint, nodes, *a);
                kernels::matmul_nt_acc(up, bt, da, m, n, k);
            }
            if nodes[b.0].needs_grad {
                // dB += A^T * up
                let av = &nodes[a.0].values;
                let db = adj_buf(adjoint, nodes, *b);
                kernels::matmul_tn_acc(av, up, db, k, m, n);
            }
        }
        Op::Transpose { a } => {
            if nodes[a.0].needs_grad {
                let (m, n) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let da = adj_buf(adjoint, nodes, *a);
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] += up[j * m + i];
                    }
                }
            }
        }
        Op::Add { a, b } => {
            for p in [a, b] {
                if nodes[p.0].needs_grad {
                    let dp = adj_buf(adjoint, nodes, *p);
                    for (g, u) in dp.iter_mut().zip(up) {
                        *g += u;
                    }
                }
            }
        }
        Op::AddRow { a, b } => {
            if nodes[a.0].needs_grad {
                let da = adj_buf(adjoint, nodes, *a);
                for (g, u) in da.iter_mut().zip(up) {
                    *g += u;
                }
            }
            if nodes[b.0].needs_grad {
                let n = nodes[b.0].shape[0];
                let db = adj_buf(adjoint, nodes, *b);
                for (idx, u) in up.iter().enumerate() {
                    db[idx % n] += u;
                }
            }
        }
        Op::Sub { a, b } => {
            if nodes[a.0].needs_grad {
                let da = adj_buf(adjoint, nodes, *a);
                for (g, u) in da.iter_mut().zip(up) {
                    *g += u;
                }
            }
            if nodes[b.0].needs_grad {
                let db = adj_buf(adjoint, nodes, *b);
                for (g, u) in db.iter_mut().zip(up) {
                    *g -= u;
                }
            }
        }
        Op::Mul { a, b } => {
            if nodes[a.0].needs_grad {
                let bv = &nodes[b.0].values;
                let da = adj_buf(adjoint, nodes, *a);
                for ((g, u), v) in da.iter_mut().zip(up).zip(bv) {
                    *g += u * v;
                }
            }
            if nodes[b.0].needs_grad {
                let av = &nodes[a.0].values;
                let db = adj_buf(adjoint, nodes, *b);
                for ((g, u), v) in db.iter_mut().zip(up).zip(av) {
                    *g += u * v;
                }
            }
        }
        Op::Scale { a, c } => {
            if nodes[a.0].needs_grad {
                let da = adj_buf(adjoint, nodes, *a);
                for (g, u) in da.iter_mut().zip(up) {
                    *g += u * c;
                }
            }
        }
        Op::AddScalar { a } => {
            if nodes[a.0].needs_grad {
                let da = adj_buf(adjoint, nodes, *a);
                for (g, u) in da.iter_mut().zip(up) {
                    *g += u;
                }
            }
        }
        Op::Relu { a } => {
            if nodes[a.0].needs_grad {
                let av = &nodes[a.0].values;
                let da = adj_buf(adjoint, nodes, *a);
                for ((g, u), &x) in da.iter_mut().zip(up).zip(av) {
                    if x > 0.0 {
                        *g += u;
                    }
                }
            }
        }
        Op::Gelu { a } => {
            if nodes[a.0].needs_grad {
                let av = &nodes[a.0].values;
                let da = adj_buf(adjoint, nodes, *a);
                for ((g, u), &x) in da.iter_mut().zip(up).zip(av) {
                    *g += u * kernels::gelu_prime(x);
                }
            }
        }
        Op::Exp { a } => {
            if nodes[a.0].needs_grad {
                let out = &node.values;
                let da = adj_buf(adjoint, nodes, *a);
                for ((g, u), &y) in da.iter_mut().zip(up).zip(out) {
                    *g += u * y;
                }
            }
        }
        Op::Softmax { a } => {
            if nodes[a.0].needs_grad {
                let (m, n) = rows_cols_of(&node.shape);
                let y = &node.values;
                let da = adj_buf(adjoint, nodes, *a);
                for r in 0..m {
                    let yr = &y[r * n..(r + 1) * n];
                    let ur = &up[r * n..(r + 1) * n];
                    let s = kernels::dot(ur, yr);
                    let dr = &mut da[r * n..(r + 1) * n];
                    for j in 0..n {
                        dr[j] += yr[j] * (ur[j] - s);
                    }
                }
            }
        }
        Op::LogSoftmax { a } => {
            if nodes[a.0].needs_grad {
                let (m, n) = rows_cols_of(&node.shape);
                let y = &node.values;
                let da = adj_buf(adjoint, nodes, *a);
                for r in 0..m {
                    let yr = &y[r * n..(r + 1) * n];
                    let ur = &up[r * n..(r + 1) * n];
                    let s: f64 = ur.iter().sum();
                    let dr = &mut da[r * n..(r + 1) * n];
                    for j in 0..n {
                        dr[j] += ur[j] - yr[j].exp() * s;
                    }
                }
            }
        }
        Op::LayerNorm { a, gain, bias } => {
            let (m, n) = rows_cols_of(&node.shape);
            let x = &nodes[a.0].values;
            let g = &nodes[gain.0].values;
            for r in 0..m {
                let mean = node.saved[2 * r];
                let rstd = node.saved[2 * r + 1];
                let xr = &x[r * n..(r + 1) * n];
                let ur = &up[r * n..(r + 1) * n];
                // xhat and d-xhat statistics for this row
                let mut dxhat = vec![0.0; n];
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                for j in 0..n {
                    let xhat = (xr[j] - mean) * rstd;
                    dxhat[j] = ur[j] * g[j];
                    sum_dxhat += dxhat[j];
                    sum_dxhat_xhat += dxhat[j] * xhat;
                }
                let inv_n = 1.0 / n as f64;
                if nodes[a.0].needs_grad {
                    let da = adj_buf(adjoint, nodes, *a);
                    let dr = &mut da[r * n..(r + 1) * n];
                    for j in 0..n {
                        let xhat = (xr[j] - mean) * rstd;
                        dr[j] += rstd
                            * (dxhat[j] - inv_n * sum_dxhat - xhat * inv_n * sum_dxhat_xhat);
                    }
                }
                if nodes[gain.0].needs_grad {
                    let dg = adj_buf(adjoint, nodes, *gain);
                    for j in 0..n {
                        let xhat = (xr[j] - mean) * rstd;
                        dg[j] += ur[j] * xhat;
                    }
                }
                if nodes[bias.0].needs_grad {
                    let db = adj_buf(adjoint, nodes, *bias);
                    for j in 0..n {
                        db[j] += ur[j];
                    }
                }
            }
        }
        Op::EmbedLookup { table, ids } => {
            if nodes[table.0].needs_grad {
                let d = nodes[table.0].shape[1];
                let dt = adj_buf(adjoint, nodes, *table);
                for (row, &id) in ids.iter().enumerate() {
                    let dst = &mut dt[id * d..(id + 1) * d];
                    let src = &up[row * d..(row + 1) * d];
                    for (g, u) in dst.iter_mut().zip(src) {
                        *g += u;
                    }
                }
            }
        }
        Op::GatherPerRow { a, ids } => {
            if nodes[a.0].needs_grad {
                let n = nodes[a.0].shape[1];
                let da = adj_buf(adjoint, nodes, *a);
                for (i, &j) in ids.iter().enumerate() {
                    da[i * n + j] += up[i];
                }
            }
        }
        Op::Sum { a } => {
            if nodes[a.0].needs_grad {
                let u = up[0];
                let da = adj_buf(adjoint, nodes, *a);
                for g in da.iter_mut() {
                    *g += u;
                }
            }
        }
        Op::Mean { a } => {
            if nodes[a.0].needs_grad {
                let u = up[0] / nodes[a.0].values.len().max(1) as f64;
                let da = adj_buf(adjoint, nodes, *a);
                for g in da.iter_mut() {
                    *g += u;
                }
            }
        }
        Op::MaskedFill { a, mask } => {
            if nodes[a.0].needs_grad {
                let da = adj_buf(adjoint, nodes, *a);
                for ((g, u), &m) in da.iter_mut().zip(up).zip(mask) {
                    if !m {
                        *g += u;
                    }
                }
            }
        }
        Op::SliceCols { a, start, len } => {
            if nodes[a.0].needs_grad {
                let n = nodes[a.0].shape[1];
                let m = nodes[a.0].shape[0];
                let da = adj_buf(adjoint, nodes, *a);
                for i in 0..m {
                    for j in 0..*len {
                        da[i * n + start + j] += up[i * len + j];
                    }
                }
            }
        }
        Op::ConcatCols { parts } => {
            let m = node.shape[0];
            let total = node.shape[1];
            let mut offset = 0;
            for &p in parts {
                let n = nodes[p.0].shape[1];
                if nodes[p.0].needs_grad {
                    let dp = adj_buf(adjoint, nodes, p);
                    for i in 0..m {
                        for j in 0..n {
                            dp[i * n + j] += up[i * total + offset + j];
                        }
                    }
                }
                offset += n;
            }
        }
        Op::StackScalars { parts } => {
            for (i, &p) in parts.iter().enumerate() {
                if nodes[p.0].needs_grad {
                    let dp = adj_buf(adjoint, nodes, p);
                    dp[0] += up[i];
                }
            }
        }
    }
}

fn rows_cols_of(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[0], shape[1]),
    }
}
