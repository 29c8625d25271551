use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use super::gemm::{gemm, Layout};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A contiguous run of rows belonging to one sequence in a packed batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

/// Row layout of a packed batch of variable-length sequences.
pub type Segments = Arc<[Segment]>;

#[derive(Clone, Debug)]
enum Op {
    Param,
    Input,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddRow(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Gather(NodeId, Arc<[usize]>),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    LayerNorm(NodeId, NodeId, NodeId),
    Gelu(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    PrefixMean(NodeId, Segments),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        segments: Segments,
    },
    Dropout(NodeId, Arc<[f64]>),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Param => "param",
            Op::Input => "input",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Gather(..) => "gather",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm(..) => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::PrefixMean(..) => "prefix_mean",
            Op::Attention { .. } => "attention",
            Op::Dropout(..) => "dropout",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Param | Op::Input => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MatMul(a, b)
            | Op::MatMulNt(a, b) => vec![*a, *b],
            Op::LayerNorm(x, g, b) => vec![*x, *g, *b],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::Scale(a, _)
            | Op::Gather(a, _)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Gelu(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::PrefixMean(a, _)
            | Op::Dropout(a, _) => vec![*a],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    name: Option<String>,
    requires_grad: bool,
}

/// Recorded computation over dense tensors with reverse-mode gradients.
///
/// Operations run eagerly as they are recorded, so intermediate values are
/// available immediately. The recorded program can be replayed with new leaf
/// bindings through [`Graph::evaluate`].
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    values: Vec<Tensor>,
    outputs: Vec<(String, NodeId)>,
}

fn describe(nodes: &[Node], values: &[Tensor], id: NodeId) -> String {
    let node = &nodes[id.0];
    match &node.name {
        Some(name) => format!(
            "node {} ({} `{}`, dims {:?})",
            id.0,
            node.op.kind(),
            name,
            values[id.0].dims()
        ),
        None => format!(
            "node {} ({}, dims {:?})",
            id.0,
            node.op.kind(),
            values[id.0].dims()
        ),
    }
}

fn shape_err(nodes: &[Node], values: &[Tensor], op: &str, a: NodeId, b: NodeId) -> Error {
    Error::Shape(format!(
        "{op}: {} is incompatible with {}",
        describe(nodes, values, a),
        describe(nodes, values, b)
    ))
}

fn require_matrix(nodes: &[Node], values: &[Tensor], op: &str, id: NodeId) -> Result<()> {
    if values[id.0].dims().len() == 2 {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "{op}: {} must be a matrix",
            describe(nodes, values, id)
        )))
    }
}

fn check_segments(segments: &[Segment], rows: usize, op: &str) -> Result<()> {
    let mut next = 0;
    for s in segments {
        if s.start != next || s.len == 0 {
            return Err(Error::Shape(format!(
                "{op}: segments must tile the rows contiguously"
            )));
        }
        next += s.len;
    }
    if next != rows {
        return Err(Error::Shape(format!(
            "{op}: segments cover {next} rows but input has {rows}"
        )));
    }
    Ok(())
}

fn row_softmax(data: &[f64], cols: usize, out: &mut [f64]) {
    for (src, dst) in data.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
}

fn layer_norm_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

/// Causal multi-head attention for one head of one segment, writing the
/// attention weights of query `i` into `probs[..=i]`.
#[allow(clippy::too_many_arguments)]
fn causal_probs(
    q: &[f64],
    k: &[f64],
    d: usize,
    seg: Segment,
    col: usize,
    dh: usize,
    i: usize,
    scale: f64,
    probs: &mut [f64],
) {
    let qi = &q[(seg.start + i) * d + col..(seg.start + i) * d + col + dh];
    let mut max = f64::NEG_INFINITY;
    for j in 0..=i {
        let kj = &k[(seg.start + j) * d + col..(seg.start + j) * d + col + dh];
        let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
        probs[j] = s;
        max = max.max(s);
    }
    let mut total = 0.0;
    for p in probs[..=i].iter_mut() {
        *p = (*p - max).exp();
        total += *p;
    }
    for p in probs[..=i].iter_mut() {
        *p /= total;
    }
}

fn compute(nodes: &[Node], values: &[Tensor], op: &Op) -> Result<Tensor> {
    let val = |id: NodeId| &values[id.0];
    let out = match op {
        Op::Param | Op::Input => unreachable!("leaves are not computed"),
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
            if val(*a).dims() != val(*b).dims() {
                return Err(shape_err(nodes, values, op.kind(), *a, *b));
            }
            let f: fn(f64, f64) -> f64 = match op {
                Op::Add(..) => |x, y| x + y,
                Op::Sub(..) => |x, y| x - y,
                _ => |x, y| x * y,
            };
            let data = val(*a)
                .data()
                .iter()
                .zip(val(*b).data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::from_parts(val(*a).dims().to_vec(), data)
        }
        Op::Scale(a, c) => Tensor::from_parts(
            val(*a).dims().to_vec(),
            val(*a).data().iter().map(|x| x * c).collect(),
        ),
        Op::AddRow(a, b) => {
            let cols = val(*a).cols();
            if val(*b).len() != cols {
                return Err(shape_err(nodes, values, op.kind(), *a, *b));
            }
            let bias = val(*b).data();
            let mut data = val(*a).data().to_vec();
            for row in data.chunks_mut(cols) {
                for (x, &bb) in row.iter_mut().zip(bias) {
                    *x += bb;
                }
            }
            Tensor::from_parts(val(*a).dims().to_vec(), data)
        }
        Op::MatMul(a, b) | Op::MatMulNt(a, b) => {
            require_matrix(nodes, values, op.kind(), *a)?;
            require_matrix(nodes, values, op.kind(), *b)?;
            let (m, k) = (val(*a).dims()[0], val(*a).dims()[1]);
            let nt = matches!(op, Op::MatMulNt(..));
            let (bk, n) = if nt {
                (val(*b).dims()[1], val(*b).dims()[0])
            } else {
                (val(*b).dims()[0], val(*b).dims()[1])
            };
            if k != bk {
                return Err(shape_err(nodes, values, op.kind(), *a, *b));
            }
            let mut data = vec![0.0; m * n];
            let b_layout = if nt {
                Layout::Transposed
            } else {
                Layout::Normal
            };
            gemm(
                m,
                k,
                n,
                val(*a).data(),
                Layout::Normal,
                val(*b).data(),
                b_layout,
                &mut data,
                false,
            );
            Tensor::from_parts(vec![m, n], data)
        }
        Op::Gather(t, idx) => {
            let table = val(*t);
            let rows = table.rows();
            let cols = table.cols();
            if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
                return Err(Error::Shape(format!(
                    "gather: index {bad} out of range for {}",
                    describe(nodes, values, *t)
                )));
            }
            let mut data = Vec::with_capacity(idx.len() * cols);
            for &i in idx.iter() {
                data.extend_from_slice(table.row(i));
            }
            Tensor::from_parts(vec![idx.len(), cols], data)
        }
        Op::Softmax(a) => {
            let x = val(*a);
            let mut data = vec![0.0; x.len()];
            row_softmax(x.data(), x.cols(), &mut data);
            Tensor::from_parts(x.dims().to_vec(), data)
        }
        Op::LogSoftmax(a) => {
            let x = val(*a);
            let cols = x.cols();
            let mut data = Vec::with_capacity(x.len());
            for row in x.data().chunks(cols) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                data.extend(row.iter().map(|v| v - lse));
            }
            Tensor::from_parts(x.dims().to_vec(), data)
        }
        Op::LayerNorm(x, g, b) => {
            let xv = val(*x);
            let cols = xv.cols();
            if val(*g).len() != cols {
                return Err(shape_err(nodes, values, op.kind(), *x, *g));
            }
            if val(*b).len() != cols {
                return Err(shape_err(nodes, values, op.kind(), *x, *b));
            }
            let (gain, bias) = (val(*g).data(), val(*b).data());
            let mut data = Vec::with_capacity(xv.len());
            for row in xv.data().chunks(cols) {
                let (mean, inv) = layer_norm_stats(row);
                data.extend(
                    row.iter()
                        .zip(gain.iter().zip(bias))
                        .map(|(v, (gg, bb))| (v - mean) * inv * gg + bb),
                );
            }
            Tensor::from_parts(xv.dims().to_vec(), data)
        }
        Op::Gelu(a) => Tensor::from_parts(
            val(*a).dims().to_vec(),
            val(*a)
                .data()
                .iter()
                .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
                .collect(),
        ),
        Op::Log(a) => Tensor::from_parts(
            val(*a).dims().to_vec(),
            val(*a).data().iter().map(|x| x.ln()).collect(),
        ),
        Op::Exp(a) => Tensor::from_parts(
            val(*a).dims().to_vec(),
            val(*a).data().iter().map(|x| x.exp()).collect(),
        ),
        Op::Sum(a) => Tensor::from_parts(vec![1], vec![val(*a).data().iter().sum()]),
        Op::Mean(a) => {
            let x = val(*a);
            Tensor::from_parts(vec![1], vec![x.data().iter().sum::<f64>() / x.len() as f64])
        }
        Op::PrefixMean(a, segments) => {
            let x = val(*a);
            check_segments(segments, x.rows(), op.kind())?;
            let cols = x.cols();
            let mut data = vec![0.0; x.len()];
            for seg in segments.iter() {
                let mut acc = vec![0.0; cols];
                for t in 0..seg.len {
                    let r = seg.start + t;
                    for (s, v) in acc.iter_mut().zip(x.row(r)) {
                        *s += v;
                    }
                    let denom = (t + 1) as f64;
                    for (d, s) in data[r * cols..(r + 1) * cols].iter_mut().zip(&acc) {
                        *d = s / denom;
                    }
                }
            }
            Tensor::from_parts(x.dims().to_vec(), data)
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            segments,
        } => {
            require_matrix(nodes, values, op.kind(), *q)?;
            if val(*k).dims() != val(*q).dims() {
                return Err(shape_err(nodes, values, op.kind(), *q, *k));
            }
            if val(*v).dims() != val(*q).dims() {
                return Err(shape_err(nodes, values, op.kind(), *q, *v));
            }
            let (rows, d) = (val(*q).dims()[0], val(*q).dims()[1]);
            if *heads == 0 || d % heads != 0 {
                return Err(Error::Shape(format!(
                    "attention: width {d} not divisible by {heads} heads"
                )));
            }
            check_segments(segments, rows, op.kind())?;
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
            let mut data = vec![0.0; rows * d];
            let mut probs = vec![0.0; segments.iter().map(|s| s.len).max().unwrap_or(0)];
            for seg in segments.iter() {
                for h in 0..*heads {
                    let col = h * dh;
                    for i in 0..seg.len {
                        causal_probs(qd, kd, d, *seg, col, dh, i, scale, &mut probs);
                        let out = &mut data[(seg.start + i) * d + col..(seg.start + i) * d + col + dh];
                        for (j, &p) in probs[..=i].iter().enumerate() {
                            let vj = &vd[(seg.start + j) * d + col..(seg.start + j) * d + col + dh];
                            for (o, &vv) in out.iter_mut().zip(vj) {
                                *o += p * vv;
                            }
                        }
                    }
                }
            }
            Tensor::from_parts(vec![rows, d], data)
        }
        Op::Dropout(a, mask) => {
            if mask.len() != val(*a).len() {
                return Err(Error::Shape(format!(
                    "dropout: mask length {} vs {}",
                    mask.len(),
                    describe(nodes, values, *a)
                )));
            }
            Tensor::from_parts(
                val(*a).dims().to_vec(),
                val(*a).data().iter().zip(mask.iter()).map(|(x, m)| x * m).collect(),
            )
        }
    };
    out.check_finite(op.kind())?;
    Ok(out)
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, dims: &[usize], delta: &[f64]) {
    match &mut grads[id.0] {
        Some(g) => {
            for (a, d) in g.data_mut().iter_mut().zip(delta) {
                *a += d;
            }
        }
        slot @ None => *slot = Some(Tensor::from_parts(dims.to_vec(), delta.to_vec())),
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

    fn push(&mut self, op: Op, name: Option<String>, value: Tensor) -> NodeId {
        let requires_grad = match &op {
            Op::Param => true,
            Op::Input => false,
            other => other.inputs().iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            name,
            requires_grad,
        });
        self.values.push(value);
        NodeId(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) -> Result<NodeId> {
        for input in op.inputs() {
            if input.0 >= self.nodes.len() {
                return Err(Error::invalid(format!("unknown node {}", input.0)));
            }
        }
        let value = compute(&self.nodes, &self.values, &op)?;
        Ok(self.push(op, None, value))
    }

    fn check_name(&self, name: &str) -> Result<()> {
        if self.nodes.iter().any(|n| n.name.as_deref() == Some(name)) {
            Err(Error::invalid(format!("duplicate leaf name `{name}`")))
        } else {
            Ok(())
        }
    }

    /// Registers a named trainable leaf.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<NodeId> {
        self.check_name(name)?;
        Ok(self.push(Op::Param, Some(name.to_string()), value))
    }

    /// Registers an anonymous constant leaf.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, None, value)
    }

    /// Registers a named constant leaf that can be rebound in [`Graph::evaluate`].
    pub fn named_input(&mut self, name: &str, value: Tensor) -> Result<NodeId> {
        self.check_name(name)?;
        Ok(self.push(Op::Input, Some(name.to_string()), value))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn mark_output(&mut self, name: &str, id: NodeId) {
        self.outputs.retain(|(n, _)| n != name);
        self.outputs.push((name.to_string(), id));
    }

    /// Names and ids of all trainable leaves in recording order.
    pub fn params(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match (&n.op, &n.name) {
            (Op::Param, Some(name)) => Some((name.as_str(), NodeId(i))),
            _ => None,
        })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.record(Op::Scale(a, factor))
    }

    /// Adds a vector to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        self.record(Op::AddRow(a, bias))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::MatMul(a, b))
    }

    /// `a · bᵀ`, used for scoring user rows against item rows.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::MatMulNt(a, b))
    }

    /// Selects rows of `table` (embedding lookup).
    pub fn gather(&mut self, table: NodeId, rows: &[usize]) -> Result<NodeId> {
        self.record(Op::Gather(table, rows.into()))
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::LogSoftmax(a))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        self.record(Op::LayerNorm(x, gain, bias))
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Gelu(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Log(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Exp(a))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Mean(a))
    }

    /// Running mean over each segment: row `t` becomes the mean of rows
    /// `start..=t` of its segment.
    pub fn prefix_mean(&mut self, a: NodeId, segments: Segments) -> Result<NodeId> {
        self.record(Op::PrefixMean(a, segments))
    }

    /// Causally masked multi-head self-attention over packed segments.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        segments: Segments,
    ) -> Result<NodeId> {
        self.record(Op::Attention {
            q,
            k,
            v,
            heads,
            segments,
        })
    }

    /// Inverted dropout. The mask is drawn once from `rng` and stored, so
    /// replays and gradients see the same mask.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: NodeId, rate: f64, rng: &mut R) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.values[a.0].len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        self.record(Op::Dropout(a, mask.into()))
    }

    /// Replays the recorded program with the given leaf bindings and returns
    /// every marked output.
    pub fn evaluate(&self, bindings: &HashMap<String, Tensor>) -> Result<HashMap<String, Tensor>> {
        let mut overrides = Vec::with_capacity(bindings.len());
        for (name, tensor) in bindings {
            let idx = self
                .nodes
                .iter()
                .position(|n| n.name.as_deref() == Some(name.as_str()))
                .ok_or_else(|| Error::invalid(format!("no leaf named `{name}`")))?;
            if tensor.dims() != self.values[idx].dims() {
                return Err(Error::Shape(format!(
                    "binding `{name}` has dims {:?}, {} expects {:?}",
                    tensor.dims(),
                    describe(&self.nodes, &self.values, NodeId(idx)),
                    self.values[idx].dims()
                )));
            }
            overrides.push((NodeId(idx), tensor));
        }
        let values = self.replay(&overrides, self.nodes.len())?;
        Ok(self
            .outputs
            .iter()
            .map(|(name, id)| (name.clone(), values[id.0].clone()))
            .collect())
    }

    /// Recomputes nodes `0..upto` with some leaves replaced.
    pub(crate) fn replay(&self, overrides: &[(NodeId, &Tensor)], upto: usize) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(upto);
        for (i, node) in self.nodes[..upto].iter().enumerate() {
            let value = match node.op {
                Op::Param | Op::Input => overrides
                    .iter()
                    .find(|(id, _)| id.0 == i)
                    .map(|(_, t)| (*t).clone())
                    .unwrap_or_else(|| self.values[i].clone()),
                ref op => compute(&self.nodes, &values, op)?,
            };
            values.push(value);
        }
        Ok(values)
    }

    /// Reverse accumulation from a scalar node. Returns one gradient slot per
    /// node; slots stay `None` for nodes that do not influence `output` or do
    /// not depend on any parameter.
    pub fn backward(&self, output: NodeId) -> Result<Vec<Option<Tensor>>> {
        if self.values[output.0].dims() != [1] {
            return Err(Error::Shape(format!(
                "gradients need a scalar output, got {}",
                describe(&self.nodes, &self.values, output)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::from_parts(vec![1], vec![1.0]));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(&node.op, NodeId(i), &g, &mut grads);
            grads[i] = Some(g);
        }
        for (slot, node) in grads.iter().zip(&self.nodes) {
            if let Some(g) = slot {
                g.check_finite(&format!("backward of {}", node.op.kind()))?;
            }
        }
        Ok(grads)
    }

    /// Gradient of a scalar node with respect to every parameter, keyed by
    /// parameter name. Parameters that do not reach `output` get zeros.
    pub fn gradients(&self, output: NodeId) -> Result<HashMap<String, Tensor>> {
        let grads = self.backward(output)?;
        Ok(self
            .params()
            .map(|(name, id)| {
                let g = grads
                    .get(id.0)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| Tensor::zeros(self.values[id.0].dims()));
                (name.to_string(), g)
            })
            .collect())
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn backprop_node(&self, op: &Op, me: NodeId, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |id: NodeId| &self.values[id.0];
        let gd = g.data();
        match op {
            Op::Param | Op::Input => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.dims(), gd);
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.dims(), gd);
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.dims(), gd);
                }
                if self.wants(*b) {
                    let neg: Vec<f64> = gd.iter().map(|x| -x).collect();
                    accumulate(grads, *b, g.dims(), &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d: Vec<f64> = gd.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *a, g.dims(), &d);
                }
                if self.wants(*b) {
                    let d: Vec<f64> = gd.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *b, g.dims(), &d);
                }
            }
            Op::Scale(a, c) => {
                let d: Vec<f64> = gd.iter().map(|x| x * c).collect();
                accumulate(grads, *a, g.dims(), &d);
            }
            Op::AddRow(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.dims(), gd);
                }
                if self.wants(*b) {
                    let cols = val(*b).len();
                    let mut d = vec![0.0; cols];
                    for row in gd.chunks(cols) {
                        for (s, x) in d.iter_mut().zip(row) {
                            *s += x;
                        }
                    }
                    accumulate(grads, *b, val(*b).dims(), &d);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).dims()[0], val(*a).dims()[1]);
                let n = val(*b).dims()[1];
                if self.wants(*a) {
                    // dA = G · Bᵀ
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, gd, Layout::Normal, val(*b).data(), Layout::Transposed, &mut d, false);
                    accumulate(grads, *a, val(*a).dims(), &d);
                }
                if self.wants(*b) {
                    // dB = Aᵀ · G
                    let mut d = vec![0.0; k * n];
                    gemm(k, m, n, val(*a).data(), Layout::Transposed, gd, Layout::Normal, &mut d, false);
                    accumulate(grads, *b, val(*b).dims(), &d);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (val(*a).dims()[0], val(*a).dims()[1]);
                let n = val(*b).dims()[0];
                if self.wants(*a) {
                    // dA = G · B
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, gd, Layout::Normal, val(*b).data(), Layout::Normal, &mut d, false);
                    accumulate(grads, *a, val(*a).dims(), &d);
                }
                if self.wants(*b) {
                    // dB = Gᵀ · A
                    let mut d = vec![0.0; n * k];
                    gemm(n, m, k, gd, Layout::Transposed, val(*a).data(), Layout::Normal, &mut d, false);
                    accumulate(grads, *b, val(*b).dims(), &d);
                }
            }
            Op::Gather(t, idx) => {
                let table = val(*t);
                let cols = table.cols();
                let mut d = vec![0.0; table.len()];
                for (r, &i) in idx.iter().enumerate() {
                    for (s, x) in d[i * cols..(i + 1) * cols].iter_mut().zip(&gd[r * cols..(r + 1) * cols]) {
                        *s += x;
                    }
                }
                accumulate(grads, *t, table.dims(), &d);
            }
            Op::Softmax(a) => {
                let y = val(me);
                let cols = y.cols();
                let mut d = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(cols).zip(gd.chunks(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    d.extend(yr.iter().zip(gr).map(|(p, q)| p * (q - dot)));
                }
                accumulate(grads, *a, y.dims(), &d);
            }
            Op::LogSoftmax(a) => {
                let y = val(me);
                let cols = y.cols();
                let mut d = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(cols).zip(gd.chunks(cols)) {
                    let total: f64 = gr.iter().sum();
                    d.extend(yr.iter().zip(gr).map(|(l, q)| q - l.exp() * total));
                }
                accumulate(grads, *a, y.dims(), &d);
            }
            Op::LayerNorm(x, gain, bias) => {
                let xv = val(*x);
                let cols = xv.cols();
                let gv = val(*gain).data();
                let mut dx = Vec::with_capacity(xv.len());
                let mut dg = vec![0.0; cols];
                let mut db = vec![0.0; cols];
                for (row, gr) in xv.data().chunks(cols).zip(gd.chunks(cols)) {
                    let (mean, inv) = layer_norm_stats(row);
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                    let m1 = dxhat.iter().sum::<f64>() / cols as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    dx.extend(dxhat.iter().zip(&xhat).map(|(dh, xh)| inv * (dh - m1 - xh * m2)));
                    for j in 0..cols {
                        dg[j] += gr[j] * xhat[j];
                        db[j] += gr[j];
                    }
                }
                if self.wants(*x) {
                    accumulate(grads, *x, xv.dims(), &dx);
                }
                if self.wants(*gain) {
                    accumulate(grads, *gain, val(*gain).dims(), &dg);
                }
                if self.wants(*bias) {
                    accumulate(grads, *bias, val(*bias).dims(), &db);
                }
            }
            Op::Gelu(a) => {
                let d: Vec<f64> = val(*a)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&x, gg)| {
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        gg * (0.5 * (1.0 + t) + 0.5 * x * dt)
                    })
                    .collect();
                accumulate(grads, *a, g.dims(), &d);
            }
            Op::Log(a) => {
                let d: Vec<f64> = gd.iter().zip(val(*a).data()).map(|(gg, x)| gg / x).collect();
                accumulate(grads, *a, g.dims(), &d);
            }
            Op::Exp(a) => {
                let d: Vec<f64> = gd.iter().zip(val(me).data()).map(|(gg, y)| gg * y).collect();
                accumulate(grads, *a, g.dims(), &d);
            }
            Op::Sum(a) => {
                let d = vec![gd[0]; val(*a).len()];
                accumulate(grads, *a, val(*a).dims(), &d);
            }
            Op::Mean(a) => {
                let n = val(*a).len();
                let d = vec![gd[0] / n as f64; n];
                accumulate(grads, *a, val(*a).dims(), &d);
            }
            Op::PrefixMean(a, segments) => {
                let cols = val(*a).cols();
                let mut d = vec![0.0; val(*a).len()];
                for seg in segments.iter() {
                    let mut acc = vec![0.0; cols];
                    for t in (0..seg.len).rev() {
                        let r = seg.start + t;
                        let denom = (t + 1) as f64;
                        for (s, x) in acc.iter_mut().zip(&gd[r * cols..(r + 1) * cols]) {
                            *s += x / denom;
                        }
                        d[r * cols..(r + 1) * cols].copy_from_slice(&acc);
                    }
                }
                accumulate(grads, *a, val(*a).dims(), &d);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
            } => {
                let (rows, d) = (val(*q).dims()[0], val(*q).dims()[1]);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
                let mut dq = vec![0.0; rows * d];
                let mut dk = vec![0.0; rows * d];
                let mut dv = vec![0.0; rows * d];
                let max_len = segments.iter().map(|s| s.len).max().unwrap_or(0);
                let mut probs = vec![0.0; max_len];
                let mut dp = vec![0.0; max_len];
                for seg in segments.iter() {
                    for h in 0..*heads {
                        let col = h * dh;
                        for i in 0..seg.len {
                            causal_probs(qd, kd, d, *seg, col, dh, i, scale, &mut probs);
                            let ri = (seg.start + i) * d + col;
                            let go = &gd[ri..ri + dh];
                            let mut weighted = 0.0;
                            for j in 0..=i {
                                let rj = (seg.start + j) * d + col;
                                let vj = &vd[rj..rj + dh];
                                dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                                weighted += dp[j] * probs[j];
                                for (s, x) in dv[rj..rj + dh].iter_mut().zip(go) {
                                    *s += probs[j] * x;
                                }
                            }
                            for j in 0..=i {
                                let rj = (seg.start + j) * d + col;
                                let ds = probs[j] * (dp[j] - weighted) * scale;
                                for c in 0..dh {
                                    dq[ri + c] += ds * kd[rj + c];
                                    dk[rj + c] += ds * qd[ri + c];
                                }
                            }
                        }
                    }
                }
                let dims = val(*q).dims();
                if self.wants(*q) {
                    accumulate(grads, *q, dims, &dq);
                }
                if self.wants(*k) {
                    accumulate(grads, *k, dims, &dk);
                }
                if self.wants(*v) {
                    accumulate(grads, *v, dims, &dv);
                }
            }
            Op::Dropout(a, mask) => {
                let d: Vec<f64> = gd.iter().zip(mask.iter()).map(|(x, m)| x * m).collect();
                accumulate(grads, *a, g.dims(), &d);
            }
        }
    }
}
