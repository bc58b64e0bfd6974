//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! A [`Tape`] owns an arena of value buffers (one per node) and the list of
//! recorded operations that produced them. Forward helpers validate shapes
//! eagerly and return [`NodeId`]s; [`Tape::backward`] seeds the scalar loss
//! node with 1.0 and walks the record once in reverse, accumulating a
//! gradient buffer per node. [`Tape::apply_grads`] then folds parameter
//! gradients into their [`ParamStore`] accumulators.
//!
//! Node ids are only meaningful on the tape that issued them.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::tensor::numel;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(u32);

impl NodeId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
}

enum Op {
    /// out = a · b, a:[m,k], b:[k,n]
    Matmul { a: NodeId, b: NodeId, out: NodeId },
    /// out = a · bᵀ, a:[m,k], b:[n,k]
    MatmulTb { a: NodeId, b: NodeId, out: NodeId },
    Add { a: NodeId, b: NodeId, out: NodeId },
    Mul { a: NodeId, b: NodeId, out: NodeId },
    /// out[i,:] = a[i,:] + v, a:[r,c], v:[c]
    AddRowVec { a: NodeId, v: NodeId, out: NodeId },
    Scale { x: NodeId, c: f64, out: NodeId },
    AddConst { x: NodeId, out: NodeId },
    Relu { x: NodeId, out: NodeId },
    Sigmoid { x: NodeId, out: NodeId },
    /// out = x^p elementwise; defined for x ≥ 0
    PowConst { x: NodeId, p: f64, out: NodeId },
    /// out = ln(max(x, floor)); entries at or below the floor get zero grad
    LogFloor { x: NodeId, floor: f64, out: NodeId },
    Softmax { x: NodeId, axis: usize, out: NodeId },
    /// normalizes the last axis; gain/bias have that axis's extent
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, eps: f64, out: NodeId },
    Concat { parts: Vec<NodeId>, axis: usize, out: NodeId },
    SliceRows { x: NodeId, start: usize, out: NodeId },
    SliceCols { x: NodeId, start: usize, out: NodeId },
    /// out:[rows,c] repeats the length-c input in every row
    BroadcastRow { x: NodeId, out: NodeId },
    /// out[i] = x[i, idx[i]]
    GatherCols { x: NodeId, idx: Vec<usize>, out: NodeId },
    SumAll { x: NodeId, out: NodeId },
    /// out[j] = mean_i x[i,j]
    MeanRows { x: NodeId, out: NodeId },
    Reshape { x: NodeId, out: NodeId },
    /// out = Σ_{m∈pos} Σ_{n∈neg} max(0, 1 − x[m] + x[n]) over a flat input
    MarginPairs { x: NodeId, pos: Vec<usize>, neg: Vec<usize>, out: NodeId },
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    ops: Vec<Op>,
    // Registration order of first use; iterated when applying gradients so
    // accumulation order is deterministic.
    param_nodes: Vec<(ParamId, NodeId)>,
    param_lookup: HashMap<ParamId, NodeId>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn shape(&self, n: NodeId) -> &[usize] {
        &self.nodes[n.idx()].shape
    }

    pub fn values(&self, n: NodeId) -> &[f64] {
        &self.nodes[n.idx()].values
    }

    pub fn value_scalar(&self, n: NodeId) -> Result<f64> {
        let node = &self.nodes[n.idx()];
        if node.values.len() != 1 {
            return Err(Error::Shape {
                op: "scalar read",
                lhs: node.shape.clone(),
                rhs: vec![1],
            });
        }
        Ok(node.values[0])
    }

    /// Gradient buffer of a node after [`Tape::backward`].
    pub fn grad(&self, n: NodeId) -> Option<&[f64]> {
        self.grads.get(n.idx()).and_then(|g| g.as_deref())
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>) -> NodeId {
        debug_assert_eq!(numel(&shape), values.len());
        let id = NodeId(u32::try_from(self.nodes.len()).expect("node count fits u32"));
        self.nodes.push(Node { shape, values });
        id
    }

    /// Bring a parameter onto the tape. Repeated calls for the same id
    /// return the node created on first use, so gradient contributions from
    /// every use accumulate into one buffer.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_lookup.get(&id) {
            return n;
        }
        let t = store.get(id);
        let n = self.push(t.shape().to_vec(), t.values().to_vec());
        self.param_nodes.push((id, n));
        self.param_lookup.insert(id, n);
        n
    }

    /// A leaf that receives no gradient. Values must be finite.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<NodeId> {
        if numel(&shape) != values.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape {
                op: "constant",
                lhs: shape,
                rhs: vec![values.len()],
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "tape constant".into(),
            });
        }
        Ok(self.push(shape, values))
    }

    fn shape2(&self, op: &'static str, n: NodeId) -> Result<(usize, usize)> {
        match self.nodes[n.idx()].shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Shape {
                op,
                lhs: self.nodes[n.idx()].shape.clone(),
                rhs: vec![0, 0],
            }),
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.shape2("matmul", a)?;
        let (k2, n) = self.shape2("matmul", b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        mm_accum(
            &self.nodes[a.idx()].values,
            &self.nodes[b.idx()].values,
            &mut out,
            m,
            k,
            n,
        );
        let o = self.push(vec![m, n], out);
        self.ops.push(Op::Matmul { a, b, out: o });
        Ok(o)
    }

    /// out = a · bᵀ without materializing the transpose.
    pub fn matmul_tb(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.shape2("matmul_tb", a)?;
        let (n, k2) = self.shape2("matmul_tb", b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_tb",
                lhs: vec![m, k],
                rhs: vec![n, k2],
            });
        }
        let mut out = vec![0.0; m * n];
        mm_tb_accum(
            &self.nodes[a.idx()].values,
            &self.nodes[b.idx()].values,
            &mut out,
            m,
            k,
            n,
        );
        let o = self.push(vec![m, n], out);
        self.ops.push(Op::MatmulTb { a, b, out: o });
        Ok(o)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same("add", a, b)?;
        let vals: Vec<f64> = self.nodes[a.idx()]
            .values
            .iter()
            .zip(&self.nodes[b.idx()].values)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.idx()].shape.clone();
        let o = self.push(shape, vals);
        self.ops.push(Op::Add { a, b, out: o });
        Ok(o)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same("mul", a, b)?;
        let vals: Vec<f64> = self.nodes[a.idx()]
            .values
            .iter()
            .zip(&self.nodes[b.idx()].values)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.idx()].shape.clone();
        let o = self.push(shape, vals);
        self.ops.push(Op::Mul { a, b, out: o });
        Ok(o)
    }

    fn check_same(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.nodes[a.idx()].shape != self.nodes[b.idx()].shape {
            return Err(Error::Shape {
                op,
                lhs: self.nodes[a.idx()].shape.clone(),
                rhs: self.nodes[b.idx()].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add_row_vec(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape2("add_row_vec", a)?;
        if self.nodes[v.idx()].shape != [c] {
            return Err(Error::Shape {
                op: "add_row_vec",
                lhs: vec![r, c],
                rhs: self.nodes[v.idx()].shape.clone(),
            });
        }
        let mut vals = self.nodes[a.idx()].values.clone();
        let vv = &self.nodes[v.idx()].values;
        for row in vals.chunks_exact_mut(c) {
            for (x, y) in row.iter_mut().zip(vv) {
                *x += y;
            }
        }
        let o = self.push(vec![r, c], vals);
        self.ops.push(Op::AddRowVec { a, v, out: o });
        Ok(o)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        debug_assert!(c.is_finite());
        let vals: Vec<f64> = self.nodes[x.idx()].values.iter().map(|v| v * c).collect();
        let shape = self.nodes[x.idx()].shape.clone();
        let o = self.push(shape, vals);
        self.ops.push(Op::Scale { x, c, out: o });
        o
    }

    pub fn add_const(&mut self, x: NodeId, c: f64) -> NodeId {
        debug_assert!(c.is_finite());
        let vals: Vec<f64> = self.nodes[x.idx()].values.iter().map(|v| v + c).collect();
        let shape = self.nodes[x.idx()].shape.clone();
        let o = self.push(shape, vals);
        self.ops.push(Op::AddConst { x, out: o });
        o
    }

    /// Gradient at exactly zero is zero.
    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let vals: Vec<f64> = self.nodes[x.idx()].values.iter().map(|v| v.max(0.0)).collect();
        let shape = self.nodes[x.idx()].shape.clone();
        let o = self.push(shape, vals);
        self.ops.push(Op::Relu { x, out: o });
        o
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let vals: Vec<f64> = self.nodes[x.idx()]
            .values
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let shape = self.nodes[x.idx()].shape.clone();
        let o = self.push(shape, vals);
        self.ops.push(Op::Sigmoid { x, out: o });
        o
    }

    /// Elementwise x^p for x ≥ 0. p = 1 is an exact pass-through.
    pub fn pow_const(&mut self, x: NodeId, p: f64) -> NodeId {
        debug_assert!(p.is_finite());
        let vals: Vec<f64> = self.nodes[x.idx()].values.iter().map(|v| v.powf(p)).collect();
        let shape = self.nodes[x.idx()].shape.clone();
        let o = self.push(shape, vals);
        self.ops.push(Op::PowConst { x, p, out: o });
        o
    }

    pub fn log_floor(&mut self, x: NodeId, floor: f64) -> Result<NodeId> {
        if !(floor > 0.0 && floor.is_finite()) {
            return Err(Error::Numerical(format!(
                "log floor must be positive and finite, got {floor}"
            )));
        }
        let vals: Vec<f64> = self.nodes[x.idx()]
            .values
            .iter()
            .map(|v| v.max(floor).ln())
            .collect();
        let shape = self.nodes[x.idx()].shape.clone();
        let o = self.push(shape, vals);
        self.ops.push(Op::LogFloor { x, floor, out: o });
        Ok(o)
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.nodes[x.idx()].shape.clone();
        if axis >= shape.len() {
            return Err(Error::Shape {
                op: "softmax",
                lhs: shape,
                rhs: vec![axis],
            });
        }
        let (outer, lane, inner) = lane_split(&shape, axis);
        let xs = &self.nodes[x.idx()].values;
        let mut vals = vec![0.0; xs.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * lane + l) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for l in 0..lane {
                    max = max.max(xs[at(l)]);
                }
                let mut sum = 0.0;
                for l in 0..lane {
                    let e = (xs[at(l)] - max).exp();
                    vals[at(l)] = e;
                    sum += e;
                }
                for l in 0..lane {
                    vals[at(l)] /= sum;
                }
            }
        }
        let o = self.push(shape, vals);
        self.ops.push(Op::Softmax { x, axis, out: o });
        Ok(o)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let shape = self.nodes[x.idx()].shape.clone();
        let d = *shape.last().ok_or(Error::Shape {
            op: "layer_norm",
            lhs: vec![],
            rhs: vec![],
        })?;
        if self.nodes[gain.idx()].shape != [d] || self.nodes[bias.idx()].shape != [d] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: shape,
                rhs: self.nodes[gain.idx()].shape.clone(),
            });
        }
        let xs = &self.nodes[x.idx()].values;
        let g = &self.nodes[gain.idx()].values;
        let b = &self.nodes[bias.idx()].values;
        let mut vals = vec![0.0; xs.len()];
        for (row, out_row) in xs.chunks_exact(d).zip(vals.chunks_exact_mut(d)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out_row[j] = g[j] * ((row[j] - mean) * inv) + b[j];
            }
        }
        let o = self.push(shape, vals);
        self.ops.push(Op::LayerNorm { x, gain, bias, eps, out: o });
        Ok(o)
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = parts.first().ok_or_else(|| {
            Error::Numerical("concat requires at least one input".into())
        })?;
        let base = self.nodes[first.idx()].shape.clone();
        if axis >= base.len() {
            return Err(Error::Shape {
                op: "concat",
                lhs: base,
                rhs: vec![axis],
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = &self.nodes[p.idx()].shape;
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.clone(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = lane_split(&shape, axis);
        let mut vals = vec![0.0; numel(&shape)];
        let mut offset = 0;
        for &p in parts {
            let ps = &self.nodes[p.idx()];
            let e = ps.shape[axis];
            for o in 0..outer {
                let src = &ps.values[o * e * inner..(o + 1) * e * inner];
                let dst_start = (o * total + offset) * inner;
                vals[dst_start..dst_start + e * inner].copy_from_slice(src);
            }
            offset += e;
        }
        let o = self.push(shape, vals);
        self.ops.push(Op::Concat {
            parts: parts.to_vec(),
            axis,
            out: o,
        });
        Ok(o)
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.shape2("slice_rows", x)?;
        if len == 0 || start + len > r {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: vec![r, c],
                rhs: vec![start, len],
            });
        }
        let vals = self.nodes[x.idx()].values[start * c..(start + len) * c].to_vec();
        let o = self.push(vec![len, c], vals);
        self.ops.push(Op::SliceRows { x, start, out: o });
        Ok(o)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.shape2("slice_cols", x)?;
        if len == 0 || start + len > c {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: vec![r, c],
                rhs: vec![start, len],
            });
        }
        let xs = &self.nodes[x.idx()].values;
        let mut vals = vec![0.0; r * len];
        for i in 0..r {
            vals[i * len..(i + 1) * len].copy_from_slice(&xs[i * c + start..i * c + start + len]);
        }
        let o = self.push(vec![r, len], vals);
        self.ops.push(Op::SliceCols { x, start, out: o });
        Ok(o)
    }

    /// Repeat a length-c vector (shape [c] or [1,c]) as `rows` rows.
    pub fn broadcast_row(&mut self, x: NodeId, rows: usize) -> Result<NodeId> {
        let xs = &self.nodes[x.idx()];
        let c = match xs.shape[..] {
            [c] => c,
            [1, c] => c,
            _ => {
                return Err(Error::Shape {
                    op: "broadcast_row",
                    lhs: xs.shape.clone(),
                    rhs: vec![rows],
                })
            }
        };
        if rows == 0 {
            return Err(Error::Shape {
                op: "broadcast_row",
                lhs: xs.shape.clone(),
                rhs: vec![0],
            });
        }
        let mut vals = vec![0.0; rows * c];
        for row in vals.chunks_exact_mut(c) {
            row.copy_from_slice(&xs.values);
        }
        let o = self.push(vec![rows, c], vals);
        self.ops.push(Op::BroadcastRow { x, out: o });
        Ok(o)
    }

    /// out[i] = x[i, idx[i]].
    pub fn gather_cols(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let (r, c) = self.shape2("gather_cols", x)?;
        if idx.len() != r || idx.iter().any(|&j| j >= c) {
            return Err(Error::Shape {
                op: "gather_cols",
                lhs: vec![r, c],
                rhs: vec![idx.len()],
            });
        }
        let xs = &self.nodes[x.idx()].values;
        let vals: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| xs[i * c + j]).collect();
        let o = self.push(vec![r], vals);
        self.ops.push(Op::GatherCols {
            x,
            idx: idx.to_vec(),
            out: o,
        });
        Ok(o)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x.idx()].values.iter().sum();
        let o = self.push(vec![1], vec![s]);
        self.ops.push(Op::SumAll { x, out: o });
        o
    }

    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape2("mean_rows", x)?;
        let xs = &self.nodes[x.idx()].values;
        let mut vals = vec![0.0; c];
        for row in xs.chunks_exact(c) {
            for (v, &x) in vals.iter_mut().zip(row) {
                *v += x;
            }
        }
        for v in &mut vals {
            *v /= r as f64;
        }
        let o = self.push(vec![c], vals);
        self.ops.push(Op::MeanRows { x, out: o });
        Ok(o)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        if numel(&shape) != self.nodes[x.idx()].values.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.nodes[x.idx()].shape.clone(),
                rhs: shape,
            });
        }
        let vals = self.nodes[x.idx()].values.clone();
        let o = self.push(shape, vals);
        self.ops.push(Op::Reshape { x, out: o });
        Ok(o)
    }

    /// Σ over (m, n) ∈ pos × neg of max(0, 1 − x[m] + x[n]), flat indexing.
    /// Empty index lists give a zero with no gradient.
    pub fn margin_pairs(&mut self, x: NodeId, pos: &[usize], neg: &[usize]) -> Result<NodeId> {
        let n = self.nodes[x.idx()].values.len();
        if pos.iter().chain(neg).any(|&i| i >= n) {
            return Err(Error::Shape {
                op: "margin_pairs",
                lhs: self.nodes[x.idx()].shape.clone(),
                rhs: vec![n],
            });
        }
        let xs = &self.nodes[x.idx()].values;
        let mut total = 0.0;
        for &m in pos {
            for &nn in neg {
                total += (1.0 - xs[m] + xs[nn]).max(0.0);
            }
        }
        let o = self.push(vec![1], vec![total]);
        self.ops.push(Op::MarginPairs {
            x,
            pos: pos.to_vec(),
            neg: neg.to_vec(),
            out: o,
        });
        Ok(o)
    }

    /// Reverse sweep from a scalar loss. Errors if the loss is non-scalar or
    /// non-finite. Gradients live on the tape until the next backward call;
    /// leaf accumulation happens via [`Tape::apply_grads`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let ln = &self.nodes[loss.idx()];
        if ln.values.len() != 1 {
            return Err(Error::Numerical(format!(
                "backward requires a scalar loss, got shape {:?}",
                ln.shape
            )));
        }
        if !ln.values[0].is_finite() {
            return Err(Error::NonFinite {
                context: "loss value entering backward".into(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.idx()] = Some(vec![1.0]);
        for op in self.ops.iter().rev() {
            step(op, &self.nodes, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    /// Fold parameter gradients into the store's accumulators, in parameter
    /// first-use order.
    pub fn apply_grads(&self, store: &mut ParamStore) {
        for &(pid, nid) in &self.param_nodes {
            if let Some(g) = self.grad(nid) {
                store.get_mut(pid).accumulate_grad(g);
            }
        }
    }

    /// Gradient buffer for a parameter used on this tape.
    pub fn param_grad(&self, id: ParamId) -> Option<&[f64]> {
        self.param_lookup.get(&id).and_then(|&n| self.grad(n))
    }
}

/// (outer, lane, inner) extents around `axis`.
fn lane_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Accumulate the gradient contribution for one input of one op.
/// `out` is always a younger node than `input`, so the arena splits cleanly.
fn with_input_grad<F>(grads: &mut [Option<Vec<f64>>], nodes: &[Node], out: NodeId, input: NodeId, f: F)
where
    F: FnOnce(&[f64], &mut [f64]),
{
    let oi = out.idx();
    let ii = input.idx();
    debug_assert!(ii < oi);
    let (left, right) = grads.split_at_mut(oi);
    let dout = match right[0].as_deref() {
        Some(g) => g,
        None => return,
    };
    let slot = &mut left[ii];
    if slot.is_none() {
        *slot = Some(vec![0.0; nodes[ii].values.len()]);
    }
    f(dout, slot.as_deref_mut().expect("just initialized"));
}

fn step(op: &Op, nodes: &[Node], grads: &mut [Option<Vec<f64>>]) {
    match op {
        Op::Matmul { a, b, out } => {
            let (m, k) = dims2(nodes, *a);
            let n = nodes[out.idx()].shape[1];
            // dA += dC · Bᵀ
            with_input_grad(grads, nodes, *out, *a, |dout, da| {
                mm_tb_accum(dout, &nodes[b.idx()].values, da, m, n, k);
            });
            // dB += Aᵀ · dC
            with_input_grad(grads, nodes, *out, *b, |dout, db| {
                mm_ta_accum(&nodes[a.idx()].values, dout, db, m, k, n);
            });
        }
        Op::MatmulTb { a, b, out } => {
            let (m, k) = dims2(nodes, *a);
            let n = nodes[out.idx()].shape[1];
            // dA += dC · B
            with_input_grad(grads, nodes, *out, *a, |dout, da| {
                mm_accum(dout, &nodes[b.idx()].values, da, m, n, k);
            });
            // dB += dCᵀ · A
            with_input_grad(grads, nodes, *out, *b, |dout, db| {
                mm_ta_accum(dout, &nodes[a.idx()].values, db, m, n, k);
            });
        }
        Op::Add { a, b, out } => {
            for &inp in [a, b].into_iter() {
                with_input_grad(grads, nodes, *out, inp, |dout, din| {
                    for (d, g) in din.iter_mut().zip(dout) {
                        *d += g;
                    }
                });
            }
        }
        Op::Mul { a, b, out } => {
            with_input_grad(grads, nodes, *out, *a, |dout, da| {
                for ((d, g), v) in da.iter_mut().zip(dout).zip(&nodes[b.idx()].values) {
                    *d += g * v;
                }
            });
            with_input_grad(grads, nodes, *out, *b, |dout, db| {
                for ((d, g), v) in db.iter_mut().zip(dout).zip(&nodes[a.idx()].values) {
                    *d += g * v;
                }
            });
        }
        Op::AddRowVec { a, v, out } => {
            with_input_grad(grads, nodes, *out, *a, |dout, da| {
                for (d, g) in da.iter_mut().zip(dout) {
                    *d += g;
                }
            });
            let c = nodes[v.idx()].values.len();
            with_input_grad(grads, nodes, *out, *v, |dout, dv| {
                for row in dout.chunks_exact(c) {
                    for (d, g) in dv.iter_mut().zip(row) {
                        *d += g;
                    }
                }
            });
        }
        Op::Scale { x, c, out } => {
            with_input_grad(grads, nodes, *out, *x, |dout, dx| {
                for (d, g) in dx.iter_mut().zip(dout) {
                    *d += g * c;
                }
            });
        }
        Op::AddConst { x, out } => {
            with_input_grad(grads, nodes, *out, *x, |dout, dx| {
                for (d, g) in dx.iter_mut().zip(dout) {
                    *d += g;
                }
            });
        }
        Op::Relu { x, out } => {
            with_input_grad(grads, nodes, *out, *x, |dout, dx| {
                for ((d, g), v) in dx.iter_mut().zip(dout).zip(&nodes[x.idx()].values) {
                    if *v > 0.0 {
                        *d += g;
                    }
                }
            });
        }
        Op::Sigmoid { x, out } => {
            with_input_grad(grads, nodes, *out, *x, |dout, dx| {
                for ((d, g), y) in dx.iter_mut().zip(dout).zip(&nodes[out.idx()].values) {
                    *d += g * y * (1.0 - y);
                }
            });
        }
        Op::PowConst { x, p, out } => {
            let p = *p;
            with_input_grad(grads, nodes, *out, *x, |dout, dx| {
                for ((d, g), v) in dx.iter_mut().zip(dout).zip(&nodes[x.idx()].values) {
                    if p == 1.0 {
                        *d += g;
                    } else if *v > 0.0 {
                        *d += g * p * v.powf(p - 1.0);
                    }
                }
            });
        }
        Op::LogFloor { x, floor, out } => {
            let floor = *floor;
            with_input_grad(grads, nodes, *out, *x, |dout, dx| {
                for ((d, g), v) in dx.iter_mut().zip(dout).zip(&nodes[x.idx()].values) {
                    if *v > floor {
                        *d += g / v;
                    }
                }
            });
        }
        Op::Softmax { x, axis, out } => {
            let (outer, lane, inner) = lane_split(&nodes[out.idx()].shape, *axis);
            with_input_grad(grads, nodes, *out, *x, |dout, dx| {
                let y = &nodes[out.idx()].values;
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * lane + l) * inner + i;
                        let mut s = 0.0;
                        for l in 0..lane {
                            s += dout[at(l)] * y[at(l)];
                        }
                        for l in 0..lane {
                            let idx = at(l);
                            dx[idx] += y[idx] * (dout[idx] - s);
                        }
                    }
                }
            });
        }
        Op::LayerNorm { x, gain, bias, eps, out } => {
            let d = *nodes[x.idx()].shape.last().expect("layer_norm rank");
            let rows = nodes[x.idx()].values.len() / d;
            // Per-row normalization stats, recomputed once for all three inputs.
            let xs = &nodes[x.idx()].values;
            let mut inv = vec![0.0; rows];
            let mut xhat = vec![0.0; rows * d];
            for r in 0..rows {
                let row = &xs[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                inv[r] = 1.0 / (var + eps).sqrt();
                for j in 0..d {
                    xhat[r * d + j] = (row[j] - mean) * inv[r];
                }
            }
            let g = &nodes[gain.idx()].values;
            with_input_grad(grads, nodes, *out, *x, |dout, dx| {
                for r in 0..rows {
                    let dy = &dout[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        let t = dy[j] * g[j];
                        m1 += t;
                        m2 += t * xh[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        dx[r * d + j] += inv[r] * (dy[j] * g[j] - m1 - xh[j] * m2);
                    }
                }
            });
            with_input_grad(grads, nodes, *out, *gain, |dout, dg| {
                for r in 0..rows {
                    for j in 0..d {
                        dg[j] += dout[r * d + j] * xhat[r * d + j];
                    }
                }
            });
            with_input_grad(grads, nodes, *out, *bias, |dout, db| {
                for r in 0..rows {
                    for j in 0..d {
                        db[j] += dout[r * d + j];
                    }
                }
            });
        }
        Op::Concat { parts, axis, out } => {
            let (outer, total, inner) = lane_split(&nodes[out.idx()].shape, *axis);
            let mut offset = 0;
            for &p in parts {
                let e = nodes[p.idx()].shape[*axis];
                with_input_grad(grads, nodes, *out, p, |dout, dp| {
                    for o in 0..outer {
                        let src = &dout[(o * total + offset) * inner..][..e * inner];
                        let dst = &mut dp[o * e * inner..(o + 1) * e * inner];
                        for (d, g) in dst.iter_mut().zip(src) {
                            *d += g;
                        }
                    }
                });
                offset += e;
            }
            let _ = (outer, total, inner);
        }
        Op::SliceRows { x, start, out } => {
            let c = nodes[x.idx()].shape[1];
            let start = *start;
            with_input_grad(grads, nodes, *out, *x, |dout, dx| {
                for (d, g) in dx[start * c..start * c + dout.len()].iter_mut().zip(dout) {
                    *d += g;
                }
            });
        }
        Op::SliceCols { x, start, out } => {
            let c = nodes[x.idx()].shape[1];
            let len = nodes[out.idx()].shape[1];
            let rows = nodes[out.idx()].shape[0];
            let start = *start;
            with_input_grad(grads, nodes, *out, *x, |dout, dx| {
                for i in 0..rows {
                    for j in 0..len {
                        dx[i * c + start + j] += dout[i * len + j];
                    }
                }
            });
        }
        Op::BroadcastRow { x, out } => {
            let c = nodes[x.idx()].values.len();
            with_input_grad(grads, nodes, *out, *x, |dout, dx| {
                for row in dout.chunks_exact(c) {
                    for (d, g) in dx.iter_mut().zip(row) {
                        *d += g;
                    }
                }
            });
        }
        Op::GatherCols { x, idx, out } => {
            let c = nodes[x.idx()].shape[1];
            with_input_grad(grads, nodes, *out, *x, |dout, dx| {
                for (i, &j) in idx.iter().enumerate() {
                    dx[i * c + j] += dout[i];
                }
            });
        }
        Op::SumAll { x, out } => {
            with_input_grad(grads, nodes, *out, *x, |dout, dx| {
                for d in dx.iter_mut() {
                    *d += dout[0];
                }
            });
        }
        Op::MeanRows { x, out } => {
            let c = nodes[out.idx()].values.len();
            let r = nodes[x.idx()].shape[0];
            with_input_grad(grads, nodes, *out, *x, |dout, dx| {
                let scale = 1.0 / r as f64;
                for (row, _) in dx.chunks_exact_mut(c).zip(0..r) {
                    for (d, g) in row.iter_mut().zip(dout) {
                        *d += g * scale;
                    }
                }
            });
        }
        Op::Reshape { x, out } => {
            with_input_grad(grads, nodes, *out, *x, |dout, dx| {
                for (d, g) in dx.iter_mut().zip(dout) {
                    *d += g;
                }
            });
        }
        Op::MarginPairs { x, pos, neg, out } => {
            let xs = &nodes[x.idx()].values;
            with_input_grad(grads, nodes, *out, *x, |dout, dx| {
                let g = dout[0];
                for &m in pos {
                    for &n in neg {
                        if 1.0 - xs[m] + xs[n] > 0.0 {
                            dx[m] -= g;
                            dx[n] += g;
                        }
                    }
                }
            });
        }
    }
}

fn dims2(nodes: &[Node], n: NodeId) -> (usize, usize) {
    match nodes[n.idx()].shape[..] {
        [r, c] => (r, c),
        _ => unreachable!("op recorded with non-2d input"),
    }
}

/// out[m,n] += a[m,k] · b[k,n]
fn mm_accum(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] · bᵀ where b:[n,k]
fn mm_tb_accum(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (j, o) in o_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (av, bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// out[k,n] += aᵀ · c where a:[m,k], c:[m,n]
fn mm_ta_accum(a: &[f64], c: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &c[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            let o_row = &mut out[kk * n..(kk + 1) * n];
            for (o, &cv) in o_row.iter_mut().zip(c_row) {
                *o += aik * cv;
            }
        }
    }
}
