//! Arena-allocated computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in construction order, which is also a valid
//! topological order: a node can only reference nodes created before it.

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::autodiff::params::ParamSet;
use crate::tensor::{matmul, Tensor};

use super::GraphError;

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const STATS_VARIANCE_FLOOR: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum BatchNormMode {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with fixed running statistics.
    Inference { mean: Vec<f64>, var: Vec<f64> },
}

#[derive(Clone, Debug)]
pub enum Op {
    Input(String),
    Constant(Tensor),
    Affine {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    /// Column-wise concatenation.
    Concat(Vec<NodeId>),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    /// Derivative mask of a leaky-relu, treated as a constant by `backward`.
    ActivationMask(NodeId, f64),
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: BatchNormMode,
    },
    /// Per-sequence mean and standard deviation of stacked frame rows.
    StatsPool {
        x: NodeId,
        lengths: Vec<usize>,
    },
    /// Temporal context splicing within each stacked sequence.
    Splice {
        x: NodeId,
        lengths: Vec<usize>,
        offsets: Vec<i32>,
    },
    Rows {
        x: NodeId,
        start: usize,
        end: usize,
    },
    BroadcastRows {
        x: NodeId,
        rows: usize,
    },
    Mean(NodeId),
    Sum(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    /// Row-wise Euclidean norm, `n x d -> n x 1`.
    L2Norm(NodeId),
    LogSoftmax(NodeId),
    /// Mean over rows of `-logp[i, label_i] / normalizer`.
    CrossEntropy {
        logp: NodeId,
        labels: Vec<usize>,
        normalizer: f64,
    },
    Scale(NodeId, f64),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Constant(_) => "constant",
            Op::Affine { .. } => "affine",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Concat(_) => "concat",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky-relu",
            Op::ActivationMask(..) => "input-gradient",
            Op::BatchNorm { .. } => "batch-norm",
            Op::StatsPool { .. } => "stats-pool",
            Op::Splice { .. } => "splice",
            Op::Rows { .. } => "rows",
            Op::BroadcastRows { .. } => "broadcast-rows",
            Op::Mean(_) => "mean",
            Op::Sum(_) => "sum",
            Op::Square(_) => "square",
            Op::Sqrt(_) => "sqrt",
            Op::L2Norm(_) => "l2-norm",
            Op::LogSoftmax(_) => "log-softmax",
            Op::CrossEntropy { .. } => "cross-entropy",
            Op::Scale(..) => "scale",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) | Op::Constant(_) => vec![],
            Op::Affine { x, w, b } => vec![*x, *w, *b],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Concat(parts) => parts.clone(),
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::CrossEntropy { logp, .. } => vec![*logp],
            Op::Transpose(a)
            | Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::ActivationMask(a, _)
            | Op::Mean(a)
            | Op::Sum(a)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::L2Norm(a)
            | Op::LogSoftmax(a)
            | Op::Scale(a, _) => vec![*a],
            Op::StatsPool { x, .. } | Op::Splice { x, .. } | Op::Rows { x, .. } | Op::BroadcastRows { x, .. } => {
                vec![*x]
            }
        }
    }
}

/// Forward-pass side results that the backward pass needs.
#[derive(Clone, Debug)]
enum Cache {
    None,
    BatchNorm {
        normalized: Tensor,
        inv_std: Vec<f64>,
        batch_mean: Vec<f64>,
        batch_var: Vec<f64>,
    },
    StatsPool {
        means: Tensor,
        stds: Tensor,
        floored: Vec<bool>,
    },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Option<Tensor>,
    cache: Cache,
    requires_grad: bool,
}

/// Input bindings for [`Graph::evaluate`].
///
/// Inputs bound through [`Bindings::bind_params`] from frozen parameters are
/// not differentiated.
#[derive(Default)]
pub struct Bindings<'a> {
    values: HashMap<String, &'a Tensor>,
    frozen: HashSet<String>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, name: impl Into<String>, value: &'a Tensor) -> &mut Self {
        self.values.insert(name.into(), value);
        self
    }

    pub fn bind_params(&mut self, params: &'a ParamSet) -> &mut Self {
        for (name, p) in params.iter() {
            self.values.insert(name.to_string(), &p.value);
            if !p.trainable {
                self.frozen.insert(name.to_string());
            } else {
                self.frozen.remove(name);
            }
        }
        self
    }

    fn get(&self, name: &str) -> Option<&'a Tensor> {
        self.values.get(name).copied()
    }
}

/// Gradients of a scalar root with respect to every differentiable node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    inputs: HashMap<String, NodeId>,
}

impl Gradients {
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn input(&self, name: &str) -> Option<&Tensor> {
        self.inputs.get(name).and_then(|id| self.node(*id))
    }

    /// Gradients for every trainable parameter of `params`, zero where the
    /// root does not depend on the parameter.
    pub fn for_params(&self, params: &ParamSet) -> BTreeMap<String, Tensor> {
        params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(name, p)| {
                let g = self
                    .input(name)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.value.rows(), p.value.cols()));
                (name.to_string(), g)
            })
            .collect()
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    fn push(&mut self, op: Op) -> NodeId {
        for p in op.parents() {
            assert!(p.0 < self.nodes.len(), "parent node does not exist");
        }
        self.nodes.push(Node {
            op,
            value: None,
            cache: Cache::None,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn input(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Input(name.into()))
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant(value))
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Affine { x, w, b })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Transpose(a))
    }

    pub fn concat(&mut self, parts: Vec<NodeId>) -> NodeId {
        self.push(Op::Concat(parts))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        self.push(Op::LeakyRelu(a, slope))
    }

    pub fn activation_mask(&mut self, a: NodeId, slope: f64) -> NodeId {
        self.push(Op::ActivationMask(a, slope))
    }

    pub fn batch_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, mode: BatchNormMode) -> NodeId {
        self.push(Op::BatchNorm { x, gamma, beta, mode })
    }

    pub fn stats_pool(&mut self, x: NodeId, lengths: Vec<usize>) -> NodeId {
        self.push(Op::StatsPool { x, lengths })
    }

    pub fn splice(&mut self, x: NodeId, lengths: Vec<usize>, offsets: Vec<i32>) -> NodeId {
        self.push(Op::Splice { x, lengths, offsets })
    }

    pub fn rows(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        self.push(Op::Rows { x, start, end })
    }

    pub fn broadcast_rows(&mut self, x: NodeId, rows: usize) -> NodeId {
        self.push(Op::BroadcastRows { x, rows })
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Square(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sqrt(a))
    }

    pub fn l2_norm(&mut self, a: NodeId) -> NodeId {
        self.push(Op::L2Norm(a))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::LogSoftmax(a))
    }

    pub fn cross_entropy(&mut self, logp: NodeId, labels: Vec<usize>, normalizer: f64) -> NodeId {
        self.push(Op::CrossEntropy {
            logp,
            labels,
            normalizer,
        })
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(a, factor))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    /// Cached value of a node after evaluation.
    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].value.as_ref()
    }

    /// Batch statistics (mean, biased variance) computed by a training-mode
    /// batch-norm node during the last evaluation.
    pub fn batch_stats(&self, id: NodeId) -> Option<(&[f64], &[f64])> {
        match &self.nodes[id.0].cache {
            Cache::BatchNorm {
                batch_mean, batch_var, ..
            } => Some((batch_mean, batch_var)),
            _ => None,
        }
    }

    fn reachable(&self, root: NodeId) -> Vec<bool> {
        let mut seen = vec![false; root.0 + 1];
        let mut stack = vec![root];
        while let Some(id) = stack.pop() {
            if seen[id.0] {
                continue;
            }
            seen[id.0] = true;
            stack.extend(self.nodes[id.0].op.parents());
        }
        seen
    }

    /// Evaluates every node the root depends on and returns the root value.
    pub fn evaluate(&mut self, root: NodeId, bindings: &Bindings) -> Result<&Tensor, GraphError> {
        self.run_forward(root, bindings, true)
    }

    /// Like [`Graph::evaluate`] but keeps values that are already cached,
    /// so a graph can be extended and evaluated in stages.
    pub fn evaluate_missing(&mut self, root: NodeId, bindings: &Bindings) -> Result<&Tensor, GraphError> {
        self.run_forward(root, bindings, false)
    }

    fn run_forward(&mut self, root: NodeId, bindings: &Bindings, recompute: bool) -> Result<&Tensor, GraphError> {
        let reach = self.reachable(root);
        for i in 0..=root.0 {
            if !reach[i] || (!recompute && self.nodes[i].value.is_some()) {
                continue;
            }
            let (value, cache, requires_grad) = self.forward_node(i, bindings)?;
            if !value.is_finite() {
                return Err(GraphError::NonFinite {
                    node: i,
                    op: self.nodes[i].op.kind(),
                });
            }
            let node = &mut self.nodes[i];
            node.value = Some(value);
            node.cache = cache;
            node.requires_grad = requires_grad;
        }
        Ok(self.nodes[root.0].value.as_ref().expect("root evaluated"))
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.nodes[id.0].value.as_ref().expect("parent evaluated before child")
    }

    fn forward_node(&self, i: usize, bindings: &Bindings) -> Result<(Tensor, Cache, bool), GraphError> {
        let op = &self.nodes[i].op;
        let kind = op.kind();
        let mismatch = |detail: String| GraphError::ShapeMismatch {
            node: i,
            op: kind,
            detail,
        };
        let parents_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        let mut cache = Cache::None;
        let value = match op {
            Op::Input(name) => {
                let v = bindings.get(name).ok_or_else(|| GraphError::Unbound(name.clone()))?;
                let grad = !bindings.frozen.contains(name);
                return Ok((v.clone(), Cache::None, grad));
            }
            Op::Constant(t) => return Ok((t.clone(), Cache::None, false)),
            Op::Affine { x, w, b } => {
                let (x, w, b) = (self.val(*x), self.val(*w), self.val(*b));
                if x.cols() != w.rows() || b.dims() != (1, w.cols()) {
                    return Err(mismatch(format!(
                        "x {:?}, w {:?}, b {:?}",
                        x.dims(),
                        w.dims(),
                        b.dims()
                    )));
                }
                let mut y = matmul(x, false, w, false);
                let c = y.cols();
                for row in y.data_mut().chunks_mut(c) {
                    for (v, bb) in row.iter_mut().zip(b.data()) {
                        *v += bb;
                    }
                }
                y
            }
            Op::MatMul(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                if a.cols() != b.rows() {
                    return Err(mismatch(format!("{:?} x {:?}", a.dims(), b.dims())));
                }
                matmul(a, false, b, false)
            }
            Op::Transpose(a) => self.val(*a).transpose(),
            Op::Concat(parts) => {
                let vals: Vec<&Tensor> = parts.iter().map(|p| self.val(*p)).collect();
                let rows = vals.first().map_or(0, |t| t.rows());
                if vals.iter().any(|t| t.rows() != rows) {
                    return Err(mismatch("row counts differ".into()));
                }
                let cols: usize = vals.iter().map(|t| t.cols()).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for t in &vals {
                        data.extend_from_slice(t.row_slice(r));
                    }
                }
                Tensor::matrix(rows, cols, data)
            }
            Op::Relu(a) => self.val(*a).map(|v| v.max(0.0)),
            Op::LeakyRelu(a, s) => self.val(*a).map(|v| if v > 0.0 { v } else { s * v }),
            Op::ActivationMask(a, s) => {
                let t = self.val(*a).map(|v| if v > 0.0 { 1.0 } else { *s });
                return Ok((t, Cache::None, false));
            }
            Op::BatchNorm { x, gamma, beta, mode } => {
                let (x, g, b) = (self.val(*x), self.val(*gamma), self.val(*beta));
                let (n, f) = x.dims();
                if g.dims() != (1, f) || b.dims() != (1, f) {
                    return Err(mismatch(format!("features {f}, gamma {:?}", g.dims())));
                }
                let (mean, var) = match mode {
                    BatchNormMode::Train => {
                        if n == 0 {
                            return Err(mismatch("empty batch".into()));
                        }
                        let mut mean = vec![0.0; f];
                        for r in 0..n {
                            for (m, v) in mean.iter_mut().zip(x.row_slice(r)) {
                                *m += v;
                            }
                        }
                        mean.iter_mut().for_each(|m| *m /= n as f64);
                        let mut var = vec![0.0; f];
                        for r in 0..n {
                            for ((s, v), m) in var.iter_mut().zip(x.row_slice(r)).zip(&mean) {
                                *s += (v - m) * (v - m);
                            }
                        }
                        var.iter_mut().for_each(|s| *s /= n as f64);
                        (mean, var)
                    }
                    BatchNormMode::Inference { mean, var } => {
                        if mean.len() != f || var.len() != f {
                            return Err(mismatch("running statistics width".into()));
                        }
                        (mean.clone(), var.clone())
                    }
                };
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
                let mut normalized = x.clone();
                let mut y = x.clone();
                for r in 0..n {
                    for j in 0..f {
                        let xh = (x.get(r, j) - mean[j]) * inv_std[j];
                        normalized.set(r, j, xh);
                        y.set(r, j, g.data()[j] * xh + b.data()[j]);
                    }
                }
                cache = Cache::BatchNorm {
                    normalized,
                    inv_std,
                    batch_mean: mean,
                    batch_var: var,
                };
                y
            }
            Op::StatsPool { x, lengths } => {
                let x = self.val(*x);
                let f = x.cols();
                if lengths.iter().sum::<usize>() != x.rows() || lengths.contains(&0) {
                    return Err(mismatch(format!("lengths {:?} vs {} rows", lengths, x.rows())));
                }
                let b = lengths.len();
                let mut means = Tensor::zeros(b, f);
                let mut stds = Tensor::zeros(b, f);
                let mut floored = vec![false; b * f];
                let mut start = 0;
                for (s, &len) in lengths.iter().enumerate() {
                    for j in 0..f {
                        let mut m = 0.0;
                        for t in start..start + len {
                            m += x.get(t, j);
                        }
                        m /= len as f64;
                        let mut v = 0.0;
                        for t in start..start + len {
                            let d = x.get(t, j) - m;
                            v += d * d;
                        }
                        v /= len as f64;
                        if v < STATS_VARIANCE_FLOOR {
                            floored[s * f + j] = true;
                            v = STATS_VARIANCE_FLOOR;
                        }
                        means.set(s, j, m);
                        stds.set(s, j, v.sqrt());
                    }
                    start += len;
                }
                let mut out = Vec::with_capacity(b * 2 * f);
                for s in 0..b {
                    out.extend_from_slice(means.row_slice(s));
                    out.extend_from_slice(stds.row_slice(s));
                }
                cache = Cache::StatsPool { means, stds, floored };
                Tensor::matrix(b, 2 * f, out)
            }
            Op::Splice { x, lengths, offsets } => {
                let x = self.val(*x);
                if lengths.iter().sum::<usize>() != x.rows() {
                    return Err(mismatch(format!("lengths {:?} vs {} rows", lengths, x.rows())));
                }
                let span = offsets.iter().map(|o| o.unsigned_abs() as usize).max();
                if let Some(span) = span {
                    if lengths.iter().any(|&l| l <= span) {
                        return Err(GraphError::SequenceTooShort { span });
                    }
                }
                splice_rows(x, lengths, offsets)
            }
            Op::Rows { x, start, end } => {
                let x = self.val(*x);
                if start > end || *end > x.rows() {
                    return Err(mismatch(format!("rows {start}..{end} of {}", x.rows())));
                }
                x.slice_rows(*start, *end)
            }
            Op::BroadcastRows { x, rows } => {
                let x = self.val(*x);
                if x.rows() != 1 {
                    return Err(mismatch("broadcast source must be a row".into()));
                }
                let mut data = Vec::with_capacity(rows * x.cols());
                for _ in 0..*rows {
                    data.extend_from_slice(x.data());
                }
                Tensor::matrix(*rows, x.cols(), data)
            }
            Op::Mean(a) => {
                let a = self.val(*a);
                if a.is_empty() {
                    return Err(mismatch("mean of empty tensor".into()));
                }
                Tensor::scalar(a.sum() / a.len() as f64)
            }
            Op::Sum(a) => Tensor::scalar(self.val(*a).sum()),
            Op::Square(a) => self.val(*a).map(|v| v * v),
            Op::Sqrt(a) => self.val(*a).map(f64::sqrt),
            Op::L2Norm(a) => {
                let a = self.val(*a);
                let norms = (0..a.rows())
                    .map(|r| a.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt())
                    .collect();
                Tensor::column(norms)
            }
            Op::LogSoftmax(a) => {
                let a = self.val(*a);
                let mut out = a.clone();
                let c = a.cols();
                for row in out.data_mut().chunks_mut(c) {
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                    row.iter_mut().for_each(|v| *v -= lse);
                }
                out
            }
            Op::CrossEntropy {
                logp,
                labels,
                normalizer,
            } => {
                let lp = self.val(*logp);
                if labels.len() != lp.rows() || labels.is_empty() {
                    return Err(mismatch(format!("{} labels for {} rows", labels.len(), lp.rows())));
                }
                if let Some(&bad) = labels.iter().find(|&&l| l >= lp.cols()) {
                    return Err(GraphError::LabelOutOfRange {
                        label: bad,
                        classes: lp.cols(),
                    });
                }
                let total: f64 = labels.iter().enumerate().map(|(r, &l)| -lp.get(r, l)).sum();
                Tensor::scalar(total / (labels.len() as f64 * normalizer))
            }
            Op::Scale(a, s) => self.val(*a).scaled(*s),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                if !x.same_dims(y) {
                    return Err(mismatch(format!("{:?} vs {:?}", x.dims(), y.dims())));
                }
                match op {
                    Op::Add(..) => x.zip_map(y, |p, q| p + q),
                    Op::Sub(..) => x.zip_map(y, |p, q| p - q),
                    _ => x.zip_map(y, |p, q| p * q),
                }
            }
        };
        Ok((value, cache, parents_grad))
    }

    /// Gradients of a scalar root with respect to every differentiable node.
    pub fn gradients(&self, root: NodeId) -> Result<Gradients, GraphError> {
        let root_val = self.nodes[root.0].value.as_ref().ok_or(GraphError::NotEvaluated)?;
        if root_val.len() != 1 {
            return Err(GraphError::NonScalarRoot(root_val.dims()));
        }
        let reach = self.reachable(root);
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::filled(root_val.rows(), root_val.cols(), 1.0));
        for i in (0..=root.0).rev() {
            if !reach[i] || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            if self.nodes[i].value.is_none() {
                return Err(GraphError::NotEvaluated);
            }
            for (parent, g) in self.backward_node(i, &dy) {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[i] = Some(dy);
        }
        let inputs = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::Input(name) => Some((name.clone(), NodeId(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, inputs })
    }

    /// `d root / d param` for every trainable parameter of `params`.
    /// Parameters that the root does not depend on get zero gradients.
    pub fn backward(&self, root: NodeId, params: &ParamSet) -> Result<BTreeMap<String, Tensor>, GraphError> {
        Ok(self.gradients(root)?.for_params(params))
    }

    /// Returns (parent, contribution) pairs for node `i` given its output gradient.
    fn backward_node(&self, i: usize, dy: &Tensor) -> Vec<(NodeId, Tensor)> {
        let node = &self.nodes[i];
        let out = node.value.as_ref().expect("evaluated");
        let needs = |id: &NodeId| self.nodes[id.0].requires_grad;
        match &node.op {
            Op::Input(_) | Op::Constant(_) | Op::ActivationMask(..) => vec![],
            Op::Affine { x, w, b } => {
                let mut res = Vec::with_capacity(3);
                if needs(x) {
                    res.push((*x, matmul(dy, false, self.val(*w), true)));
                }
                if needs(w) {
                    res.push((*w, matmul(self.val(*x), true, dy, false)));
                }
                if needs(b) {
                    res.push((*b, dy.col_sums()));
                }
                res
            }
            Op::MatMul(a, b) => {
                let mut res = Vec::with_capacity(2);
                if needs(a) {
                    res.push((*a, matmul(dy, false, self.val(*b), true)));
                }
                if needs(b) {
                    res.push((*b, matmul(self.val(*a), true, dy, false)));
                }
                res
            }
            Op::Transpose(a) => vec![(*a, dy.transpose())],
            Op::Concat(parts) => {
                let mut res = Vec::with_capacity(parts.len());
                let rows = dy.rows();
                let mut offset = 0;
                for p in parts {
                    let c = self.val(*p).cols();
                    if needs(p) {
                        let mut data = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            data.extend_from_slice(&dy.row_slice(r)[offset..offset + c]);
                        }
                        res.push((*p, Tensor::matrix(rows, c, data)));
                    }
                    offset += c;
                }
                res
            }
            Op::Relu(a) => {
                let x = self.val(*a);
                vec![(*a, dy.zip_map(x, |g, v| if v > 0.0 { g } else { 0.0 }))]
            }
            Op::LeakyRelu(a, s) => {
                let x = self.val(*a);
                vec![(*a, dy.zip_map(x, |g, v| if v > 0.0 { g } else { s * g }))]
            }
            Op::BatchNorm { x, gamma, beta, mode } => {
                let Cache::BatchNorm {
                    normalized, inv_std, ..
                } = &node.cache
                else {
                    unreachable!("batch-norm cache")
                };
                let g = self.val(*gamma);
                let (n, f) = dy.dims();
                let mut res = Vec::with_capacity(3);
                if needs(beta) {
                    res.push((*beta, dy.col_sums()));
                }
                if needs(gamma) {
                    res.push((*gamma, dy.zip_map(normalized, |a, b| a * b).col_sums()));
                }
                if needs(x) {
                    let mut dx = Tensor::zeros(n, f);
                    match mode {
                        BatchNormMode::Inference { .. } => {
                            for r in 0..n {
                                for j in 0..f {
                                    dx.set(r, j, dy.get(r, j) * g.data()[j] * inv_std[j]);
                                }
                            }
                        }
                        BatchNormMode::Train => {
                            let nf = n as f64;
                            for j in 0..f {
                                let mut sum_d = 0.0;
                                let mut sum_dx = 0.0;
                                for r in 0..n {
                                    let d = dy.get(r, j) * g.data()[j];
                                    sum_d += d;
                                    sum_dx += d * normalized.get(r, j);
                                }
                                for r in 0..n {
                                    let d = dy.get(r, j) * g.data()[j];
                                    let v = inv_std[j] / nf * (nf * d - sum_d - normalized.get(r, j) * sum_dx);
                                    dx.set(r, j, v);
                                }
                            }
                        }
                    }
                    res.push((*x, dx));
                }
                res
            }
            Op::StatsPool { x, lengths } => {
                let Cache::StatsPool { means, stds, floored } = &node.cache else {
                    unreachable!("stats-pool cache")
                };
                let xv = self.val(*x);
                let f = xv.cols();
                let mut dx = Tensor::zeros(xv.rows(), f);
                let mut start = 0;
                for (s, &len) in lengths.iter().enumerate() {
                    let inv_len = 1.0 / len as f64;
                    for j in 0..f {
                        let dmean = dy.get(s, j);
                        let dstd = dy.get(s, f + j);
                        let m = means.get(s, j);
                        let dvar = if floored[s * f + j] {
                            0.0
                        } else {
                            dstd / (2.0 * stds.get(s, j))
                        };
                        for t in start..start + len {
                            let v = dmean * inv_len + dvar * 2.0 * (xv.get(t, j) - m) * inv_len;
                            dx.set(t, j, v);
                        }
                    }
                    start += len;
                }
                vec![(*x, dx)]
            }
            Op::Splice { x, lengths, offsets } => {
                let xv = self.val(*x);
                let f = xv.cols();
                let k = offsets.len();
                let mut dx = Tensor::zeros(xv.rows(), f);
                let mut start = 0;
                for &len in lengths {
                    for t in 0..len {
                        let row = dy.row_slice(start + t);
                        for (b, &o) in offsets.iter().enumerate() {
                            let src = start + clamp_index(t, o, len);
                            let dst = &mut dx.data_mut()[src * f..(src + 1) * f];
                            for (d, g) in dst.iter_mut().zip(&row[b * f..(b + 1) * f]) {
                                *d += g;
                            }
                        }
                    }
                    start += len;
                }
                debug_assert_eq!(dy.cols(), f * k);
                vec![(*x, dx)]
            }
            Op::Rows { x, start, end } => {
                let xv = self.val(*x);
                let c = xv.cols();
                let mut dx = Tensor::zeros(xv.rows(), c);
                dx.data_mut()[start * c..end * c].copy_from_slice(dy.data());
                vec![(*x, dx)]
            }
            Op::BroadcastRows { x, .. } => vec![(*x, dy.col_sums())],
            Op::Mean(a) => {
                let av = self.val(*a);
                let g = dy.item() / av.len() as f64;
                vec![(*a, Tensor::filled(av.rows(), av.cols(), g))]
            }
            Op::Sum(a) => {
                let av = self.val(*a);
                vec![(*a, Tensor::filled(av.rows(), av.cols(), dy.item()))]
            }
            Op::Square(a) => vec![(*a, dy.zip_map(self.val(*a), |g, v| 2.0 * v * g))],
            Op::Sqrt(a) => vec![(*a, dy.zip_map(out, |g, s| g / (2.0 * s)))],
            Op::L2Norm(a) => {
                let av = self.val(*a);
                let mut dx = av.clone();
                let c = av.cols();
                for (r, row) in dx.data_mut().chunks_mut(c).enumerate() {
                    let n = out.get(r, 0);
                    let g = dy.get(r, 0);
                    for v in row.iter_mut() {
                        *v = if n > 0.0 { g * *v / n } else { 0.0 };
                    }
                }
                vec![(*a, dx)]
            }
            Op::LogSoftmax(a) => {
                let mut dx = dy.clone();
                let c = dy.cols();
                for (r, row) in dx.data_mut().chunks_mut(c).enumerate() {
                    let total: f64 = row.iter().sum();
                    for (j, v) in row.iter_mut().enumerate() {
                        *v -= out.get(r, j).exp() * total;
                    }
                }
                vec![(*a, dx)]
            }
            Op::CrossEntropy {
                logp,
                labels,
                normalizer,
            } => {
                let lp = self.val(*logp);
                let mut d = Tensor::zeros(lp.rows(), lp.cols());
                let g = -dy.item() / (labels.len() as f64 * normalizer);
                for (r, &l) in labels.iter().enumerate() {
                    d.set(r, l, g);
                }
                vec![(*logp, d)]
            }
            Op::Scale(a, s) => vec![(*a, dy.scaled(*s))],
            Op::Add(a, b) => vec![(*a, dy.clone()), (*b, dy.clone())],
            Op::Sub(a, b) => vec![(*a, dy.clone()), (*b, dy.scaled(-1.0))],
            Op::Mul(a, b) => {
                let mut res = Vec::with_capacity(2);
                if needs(a) {
                    res.push((*a, dy.zip_map(self.val(*b), |g, v| g * v)));
                }
                if needs(b) {
                    res.push((*b, dy.zip_map(self.val(*a), |g, v| g * v)));
                }
                res
            }
        }
    }
}

fn clamp_index(t: usize, offset: i32, len: usize) -> usize {
    (t as i64 + offset as i64).clamp(0, len as i64 - 1) as usize
}

/// Splices each stacked sequence with boundary clamping.
pub fn splice_rows(x: &Tensor, lengths: &[usize], offsets: &[i32]) -> Tensor {
    let f = x.cols();
    let k = offsets.len();
    let mut data = Vec::with_capacity(x.rows() * f * k);
    let mut start = 0;
    for &len in lengths {
        for t in 0..len {
            for &o in offsets {
                data.extend_from_slice(x.row_slice(start + clamp_index(t, o, len)));
            }
        }
        start += len;
    }
    Tensor::matrix(x.rows(), f * k, data)
}
