use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kernels::{for_each_permuted, gemm_nn, gemm_nt, gemm_tn, sigmoid, softplus, split_axis};
use super::{DiffError, ParamGrads, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node of one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    Suffix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnaryKind {
    Neg,
    Square,
    Sqrt,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Relu,
    Softplus,
    Abs,
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Variable,
    Param,
    Binary {
        kind: BinKind,
        a: NodeId,
        b: NodeId,
        bcast: Bcast,
    },
    Scale(NodeId, f64),
    Offset(NodeId, f64),
    Unary(NodeId, UnaryKind),
    MatMul {
        a: NodeId,
        b: NodeId,
        batch: usize,
        shared_rhs: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        x: NodeId,
        perm: Vec<usize>,
    },
    Reshape(NodeId),
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
        end: usize,
    },
    Concat {
        xs: Vec<NodeId>,
        axis: usize,
    },
    IndexSelect {
        x: NodeId,
        axis: usize,
        indices: Vec<usize>,
    },
    Sum {
        x: NodeId,
        axis: usize,
    },
    Mean {
        x: NodeId,
        axis: usize,
    },
    Std {
        x: NodeId,
        axis: usize,
    },
    SumAll(NodeId),
    MeanAll(NodeId),
    Softmax {
        x: NodeId,
        axis: usize,
    },
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
    LayerNorm {
        x: NodeId,
        eps: f64,
    },
    Pearson {
        x: NodeId,
        y: NodeId,
        axis: usize,
    },
    Clip {
        x: NodeId,
        lo: f64,
        hi: f64,
    },
}

/// Zero-variance guard inside the Pearson denominator.
pub(crate) const PEARSON_EPS: f64 = 1e-12;

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Variable => "variable",
            Op::Param => "param",
            Op::Binary { kind, .. } => match kind {
                BinKind::Add => "add",
                BinKind::Sub => "sub",
                BinKind::Mul => "mul",
                BinKind::Div => "div",
            },
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Unary(_, k) => match k {
                UnaryKind::Neg => "neg",
                UnaryKind::Square => "square",
                UnaryKind::Sqrt => "sqrt",
                UnaryKind::Exp => "exp",
                UnaryKind::Log => "log",
                UnaryKind::Tanh => "tanh",
                UnaryKind::Sigmoid => "sigmoid",
                UnaryKind::Relu => "relu",
                UnaryKind::Softplus => "softplus",
                UnaryKind::Abs => "abs",
            },
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::IndexSelect { .. } => "index_select",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Std { .. } => "std",
            Op::SumAll(_) => "sum_all",
            Op::MeanAll(_) => "mean_all",
            Op::Softmax { .. } => "softmax",
            Op::Dropout { .. } => "dropout",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Pearson { .. } => "pearson_corr",
            Op::Clip { .. } => "clip",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Constant | Op::Variable | Op::Param => vec![],
            Op::Binary { a, b, .. } | Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Pearson { x, y, .. } => vec![*x, *y],
            Op::Concat { xs, .. } => xs.clone(),
            Op::Scale(x, _)
            | Op::Offset(x, _)
            | Op::Unary(x, _)
            | Op::Reshape(x)
            | Op::SumAll(x)
            | Op::MeanAll(x)
            | Op::Transpose { x, .. }
            | Op::Slice { x, .. }
            | Op::IndexSelect { x, .. }
            | Op::Sum { x, .. }
            | Op::Mean { x, .. }
            | Op::Std { x, .. }
            | Op::Softmax { x, .. }
            | Op::Dropout { x, .. }
            | Op::LayerNorm { x, .. }
            | Op::Clip { x, .. } => vec![*x],
        }
    }

    fn is_leaf(&self) -> bool {
        matches!(self, Op::Constant | Op::Variable | Op::Param)
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Option<Vec<f64>>,
    requires_grad: bool,
}

/// A single-owner computation graph.
///
/// Nodes are appended in topological order, so a node's parents always have
/// smaller indices and the graph is acyclic by construction.
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
    rng: ChaCha8Rng,
    param_nodes: HashMap<String, NodeId>,
}

impl Graph {
    pub fn new(mode: Mode, dropout_seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(dropout_seed),
            param_nodes: HashMap::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Value of an evaluated node.
    pub fn value(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes.get(id.0).and_then(|n| n.value.as_deref())
    }

    pub fn tensor(&self, id: NodeId) -> Option<Tensor> {
        let node = self.nodes.get(id.0)?;
        let v = node.value.clone()?;
        Tensor::new(node.shape.clone(), v).ok()
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    fn check(&self, id: NodeId) -> Result<(), DiffError> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(DiffError::UnknownNode(id.0))
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Option<Vec<f64>>) -> NodeId {
        let requires_grad = match &op {
            Op::Constant => false,
            Op::Variable | Op::Param => true,
            other => other.parents().iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    // ----- leaves -----

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        let shape = t.shape().to_vec();
        self.push(Op::Constant, shape, Some(t.into_data()))
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// A differentiable leaf that is not a named parameter.
    pub fn variable(&mut self, t: Tensor) -> NodeId {
        let shape = t.shape().to_vec();
        self.push(Op::Variable, shape, Some(t.into_data()))
    }

    /// Leaf bound to a named parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId, DiffError> {
        if let Some(&id) = self.param_nodes.get(name) {
            return Ok(id);
        }
        let t = store
            .get(name)
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))?;
        let id = self.push(
            Op::Param,
            t.shape().to_vec(),
            Some(t.data().to_vec()),
        );
        self.param_nodes.insert(name.to_string(), id);
        Ok(id)
    }

    /// Replaces a leaf's value and invalidates every computed value.
    pub fn set_leaf(&mut self, id: NodeId, t: Tensor) -> Result<(), DiffError> {
        self.check(id)?;
        let node = &self.nodes[id.0];
        if !node.op.is_leaf() {
            return Err(DiffError::Invalid {
                op: "set_leaf",
                reason: format!("node {} is a {}", id.0, node.op.name()),
            });
        }
        if node.shape != t.shape() {
            return Err(DiffError::Shape {
                op: "set_leaf",
                lhs: node.shape.clone(),
                rhs: t.shape().to_vec(),
            });
        }
        self.nodes[id.0].value = Some(t.into_data());
        for n in &mut self.nodes {
            if !n.op.is_leaf() {
                n.value = None;
            }
        }
        Ok(())
    }

    // ----- elementwise -----

    fn binary(&mut self, kind: BinKind, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.check(a)?;
        self.check(b)?;
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        let nb: usize = sb.iter().product();
        let bcast = if sa == sb {
            Bcast::Same
        } else if nb == 1 {
            Bcast::Scalar
        } else if sb.len() < sa.len() && sa[sa.len() - sb.len()..] == sb[..] {
            Bcast::Suffix
        } else {
            let op = Op::Binary { kind, a, b, bcast: Bcast::Same }.name();
            return Err(DiffError::Shape { op, lhs: sa, rhs: sb });
        };
        Ok(self.push(Op::Binary { kind, a, b, bcast }, sa, None))
    }

    /// `a + b`; `b` may be a scalar or a trailing-suffix shape of `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary(BinKind::Div, a, b)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId, DiffError> {
        self.check(x)?;
        let s = self.nodes[x.0].shape.clone();
        Ok(self.push(Op::Scale(x, c), s, None))
    }

    pub fn offset(&mut self, x: NodeId, c: f64) -> Result<NodeId, DiffError> {
        self.check(x)?;
        let s = self.nodes[x.0].shape.clone();
        Ok(self.push(Op::Offset(x, c), s, None))
    }

    fn unary(&mut self, x: NodeId, kind: UnaryKind) -> Result<NodeId, DiffError> {
        self.check(x)?;
        let s = self.nodes[x.0].shape.clone();
        Ok(self.push(Op::Unary(x, kind), s, None))
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, UnaryKind::Neg)
    }
    pub fn square(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, UnaryKind::Square)
    }
    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, UnaryKind::Sqrt)
    }
    pub fn exp(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, UnaryKind::Exp)
    }
    pub fn log(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, UnaryKind::Log)
    }
    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, UnaryKind::Tanh)
    }
    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, UnaryKind::Sigmoid)
    }
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, UnaryKind::Relu)
    }
    /// ln(1 + eˣ), evaluated stably.
    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, UnaryKind::Softplus)
    }
    pub fn abs(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, UnaryKind::Abs)
    }

    /// Clamp to `[lo, hi]`; the adjoint is zero outside the bounds.
    pub fn clip(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId, DiffError> {
        self.check(x)?;
        if lo > hi {
            return Err(DiffError::Invalid {
                op: "clip",
                reason: format!("lower bound {lo} above upper bound {hi}"),
            });
        }
        let s = self.nodes[x.0].shape.clone();
        Ok(self.push(Op::Clip { x, lo, hi }, s, None))
    }

    /// Inverted dropout with a Bernoulli mask drawn from the graph RNG.
    /// Identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, x: NodeId, p: f64) -> Result<NodeId, DiffError> {
        self.check(x)?;
        if !(0.0..1.0).contains(&p) {
            return Err(DiffError::Invalid {
                op: "dropout",
                reason: format!("probability {p} outside [0, 1)"),
            });
        }
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let s = self.nodes[x.0].shape.clone();
        let n: usize = s.iter().product();
        let keep = 1.0 / (1.0 - p);
        let mask = (0..n)
            .map(|_| if self.rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        Ok(self.push(Op::Dropout { x, mask }, s, None))
    }

    // ----- structural -----

    /// `a[..., m, k] · b[k, n]` (shared right operand) or a batched product
    /// when both operands carry identical leading dimensions.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.check(a)?;
        self.check(b)?;
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        let err = || DiffError::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(err());
        }
        let lead = &sa[..sa.len() - 2];
        let batch: usize = lead.iter().product();
        let shared_rhs = if sb.len() == 2 {
            true
        } else if sb.len() == sa.len() && sb[..sb.len() - 2] == *lead {
            false
        } else {
            return Err(err());
        };
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        Ok(self.push(
            Op::MatMul {
                a,
                b,
                batch,
                shared_rhs,
                m,
                k,
                n,
            },
            shape,
            None,
        ))
    }

    /// Permutes axes: output axis `d` is input axis `perm[d]`.
    pub fn transpose(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId, DiffError> {
        self.check(x)?;
        let s = self.nodes[x.0].shape.clone();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(DiffError::Shape {
                op: "transpose",
                lhs: s,
                rhs: perm.to_vec(),
            });
        }
        let shape = perm.iter().map(|&p| s[p]).collect();
        Ok(self.push(
            Op::Transpose {
                x,
                perm: perm.to_vec(),
            },
            shape,
            None,
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, DiffError> {
        self.check(x)?;
        let s = &self.nodes[x.0].shape;
        if s.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(DiffError::Shape {
                op: "reshape",
                lhs: s.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(self.push(Op::Reshape(x), shape.to_vec(), None))
    }

    fn check_axis(&self, op: &'static str, x: NodeId, axis: usize) -> Result<Vec<usize>, DiffError> {
        self.check(x)?;
        let s = self.nodes[x.0].shape.clone();
        if axis >= s.len() {
            return Err(DiffError::Axis { op, axis, shape: s });
        }
        Ok(s)
    }

    /// Half-open range `[start, end)` along `axis`.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId, DiffError> {
        let mut s = self.check_axis("slice", x, axis)?;
        if start >= end || end > s[axis] {
            return Err(DiffError::Invalid {
                op: "slice",
                reason: format!("range {start}..{end} invalid for axis {axis} of shape {s:?}"),
            });
        }
        s[axis] = end - start;
        Ok(self.push(Op::Slice { x, axis, start, end }, s, None))
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId, DiffError> {
        let first = *xs.first().ok_or(DiffError::Invalid {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        let mut shape = self.check_axis("concat", first, axis)?;
        for &x in &xs[1..] {
            let s = self.check_axis("concat", x, axis)?;
            let compatible = s.len() == shape.len()
                && s.iter().zip(&shape).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(DiffError::Shape {
                    op: "concat",
                    lhs: shape,
                    rhs: s,
                });
            }
            shape[axis] += s[axis];
        }
        Ok(self.push(
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            shape,
            None,
        ))
    }

    /// Gathers entries along `axis`; indices may repeat.
    pub fn index_select(&mut self, x: NodeId, axis: usize, indices: &[usize]) -> Result<NodeId, DiffError> {
        let mut s = self.check_axis("index_select", x, axis)?;
        if indices.is_empty() || indices.iter().any(|&i| i >= s[axis]) {
            return Err(DiffError::Invalid {
                op: "index_select",
                reason: format!("indices out of range for axis {axis} of shape {s:?}"),
            });
        }
        s[axis] = indices.len();
        Ok(self.push(
            Op::IndexSelect {
                x,
                axis,
                indices: indices.to_vec(),
            },
            s,
            None,
        ))
    }

    // ----- reductions -----

    fn reduced(&self, op: &'static str, x: NodeId, axis: usize) -> Result<Vec<usize>, DiffError> {
        let mut s = self.check_axis(op, x, axis)?;
        s.remove(axis);
        Ok(s)
    }

    pub fn sum(&mut self, x: NodeId, axis: usize) -> Result<NodeId, DiffError> {
        let s = self.reduced("sum", x, axis)?;
        Ok(self.push(Op::Sum { x, axis }, s, None))
    }

    pub fn mean(&mut self, x: NodeId, axis: usize) -> Result<NodeId, DiffError> {
        let s = self.reduced("mean", x, axis)?;
        Ok(self.push(Op::Mean { x, axis }, s, None))
    }

    /// Sample standard deviation (n − 1 denominator) along `axis`.
    pub fn std(&mut self, x: NodeId, axis: usize) -> Result<NodeId, DiffError> {
        let len = self.check_axis("std", x, axis)?[axis];
        if len < 2 {
            return Err(DiffError::Invalid {
                op: "std",
                reason: format!("needs at least 2 entries along axis {axis}, got {len}"),
            });
        }
        let s = self.reduced("std", x, axis)?;
        Ok(self.push(Op::Std { x, axis }, s, None))
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.check(x)?;
        Ok(self.push(Op::SumAll(x), vec![], None))
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.check(x)?;
        Ok(self.push(Op::MeanAll(x), vec![], None))
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId, DiffError> {
        let s = self.check_axis("softmax", x, axis)?;
        Ok(self.push(Op::Softmax { x, axis }, s, None))
    }

    /// Normalizes over the last axis to zero mean and unit (population) variance.
    pub fn layer_norm(&mut self, x: NodeId, eps: f64) -> Result<NodeId, DiffError> {
        self.check(x)?;
        let s = self.nodes[x.0].shape.clone();
        if s.is_empty() {
            return Err(DiffError::Axis {
                op: "layer_norm",
                axis: 0,
                shape: s,
            });
        }
        Ok(self.push(Op::LayerNorm { x, eps }, s, None))
    }

    /// Pearson correlation of `x` and `y` along `axis`, ε-guarded for constant inputs.
    pub fn pearson_corr(&mut self, x: NodeId, y: NodeId, axis: usize) -> Result<NodeId, DiffError> {
        let sx = self.check_axis("pearson_corr", x, axis)?;
        let sy = self.check_axis("pearson_corr", y, axis)?;
        if sx != sy {
            return Err(DiffError::Shape {
                op: "pearson_corr",
                lhs: sx,
                rhs: sy,
            });
        }
        let s = self.reduced("pearson_corr", x, axis)?;
        Ok(self.push(Op::Pearson { x, y, axis }, s, None))
    }

    // ----- evaluation -----

    fn ancestors(&self, root: NodeId) -> Vec<bool> {
        let mut mark = vec![false; root.0 + 1];
        mark[root.0] = true;
        for i in (0..=root.0).rev() {
            if mark[i] {
                for p in self.nodes[i].op.parents() {
                    mark[p.0] = true;
                }
            }
        }
        mark
    }

    /// Evaluates `root` and every ancestor not yet computed.
    pub fn forward(&mut self, root: NodeId) -> Result<&[f64], DiffError> {
        self.check(root)?;
        let mark = self.ancestors(root);
        for i in 0..=root.0 {
            if !mark[i] || self.nodes[i].value.is_some() {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            let v = eval_node(&node.op, &node.shape, before);
            if v.iter().any(|x| !x.is_finite()) {
                return Err(DiffError::NonFinite {
                    node: i,
                    op: node.op.name(),
                });
            }
            node.value = Some(v);
        }
        Ok(self.nodes[root.0].value.as_deref().expect("root evaluated"))
    }

    /// Evaluates a scalar root and returns it.
    pub fn forward_scalar(&mut self, root: NodeId) -> Result<f64, DiffError> {
        let v = self.forward(root)?;
        if v.len() != 1 {
            return Err(DiffError::NonScalarLoss(self.nodes[root.0].shape.clone()));
        }
        Ok(v[0])
    }

    /// Propagates adjoints from a scalar, already-evaluated `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Backward, DiffError> {
        self.check(loss)?;
        let root = &self.nodes[loss.0];
        if root.shape.iter().product::<usize>() != 1 {
            return Err(DiffError::NonScalarLoss(root.shape.clone()));
        }
        if root.value.is_none() {
            return Err(DiffError::NotEvaluated);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad && !node.op.is_leaf() {
                self.adjoint(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Backward { grads })
    }

    /// Gradient of `loss` with respect to every parameter in `params`;
    /// parameters the loss does not reach get zeros.
    pub fn grad_backward(&self, loss: NodeId, params: &ParamStore) -> Result<ParamGrads, DiffError> {
        let bw = self.backward(loss)?;
        let mut out = BTreeMap::new();
        for (name, t) in params.iter() {
            let g = match self.param_nodes.get(name) {
                Some(&id) => match bw.node(id) {
                    Some(g) => Tensor::new(t.shape().to_vec(), g.to_vec())?,
                    None => Tensor::zeros(t.shape()),
                },
                None => Tensor::zeros(t.shape()),
            };
            out.insert(name.clone(), g);
        }
        Ok(ParamGrads(out))
    }

    fn val(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.as_deref().expect("ancestor evaluated before backward")
    }

    fn adjoint(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.as_deref().expect("node evaluated");
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;
        match &node.op {
            Op::Constant | Op::Variable | Op::Param => {}
            Op::Binary { kind, a, b, bcast } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let nb = bv.len();
                let bidx = |j: usize| match bcast {
                    Bcast::Same => j,
                    Bcast::Scalar => 0,
                    Bcast::Suffix => j % nb,
                };
                if wants(*a) {
                    let ga = slot(grads, *a, av.len());
                    for (j, gj) in g.iter().enumerate() {
                        ga[j] += match kind {
                            BinKind::Add | BinKind::Sub => *gj,
                            BinKind::Mul => gj * bv[bidx(j)],
                            BinKind::Div => gj / bv[bidx(j)],
                        };
                    }
                }
                if wants(*b) {
                    let gb = slot(grads, *b, nb);
                    for (j, gj) in g.iter().enumerate() {
                        let k = bidx(j);
                        gb[k] += match kind {
                            BinKind::Add => *gj,
                            BinKind::Sub => -gj,
                            BinKind::Mul => gj * av[j],
                            BinKind::Div => -gj * av[j] / (bv[k] * bv[k]),
                        };
                    }
                }
            }
            Op::Scale(x, c) => {
                let gx = slot(grads, *x, g.len());
                for (o, gj) in gx.iter_mut().zip(g) {
                    *o += c * gj;
                }
            }
            Op::Offset(x, _) | Op::Reshape(x) => {
                let gx = slot(grads, *x, g.len());
                for (o, gj) in gx.iter_mut().zip(g) {
                    *o += gj;
                }
            }
            Op::Unary(x, kind) => {
                let xv = self.val(*x);
                let gx = slot(grads, *x, g.len());
                for j in 0..g.len() {
                    let (xj, yj) = (xv[j], out[j]);
                    let d = match kind {
                        UnaryKind::Neg => -1.0,
                        UnaryKind::Square => 2.0 * xj,
                        UnaryKind::Sqrt => {
                            if yj > 0.0 {
                                0.5 / yj
                            } else {
                                0.0
                            }
                        }
                        UnaryKind::Exp => yj,
                        UnaryKind::Log => 1.0 / xj,
                        UnaryKind::Tanh => 1.0 - yj * yj,
                        UnaryKind::Sigmoid => yj * (1.0 - yj),
                        UnaryKind::Relu => {
                            if xj > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        UnaryKind::Softplus => sigmoid(xj),
                        UnaryKind::Abs => {
                            if xj > 0.0 {
                                1.0
                            } else if xj < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                    };
                    gx[j] += g[j] * d;
                }
            }
            Op::Clip { x, lo, hi } => {
                let xv = self.val(*x);
                let gx = slot(grads, *x, g.len());
                for j in 0..g.len() {
                    if xv[j] >= *lo && xv[j] <= *hi {
                        gx[j] += g[j];
                    }
                }
            }
            Op::Dropout { x, mask } => {
                let gx = slot(grads, *x, g.len());
                for j in 0..g.len() {
                    gx[j] += g[j] * mask[j];
                }
            }
            Op::MatMul {
                a,
                b,
                batch,
                shared_rhs,
                m,
                k,
                n,
            } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k, n) = (*m, *k, *n);
                if *shared_rhs {
                    let rows = batch * m;
                    if wants(*a) {
                        gemm_nt(g, bv, slot(grads, *a, av.len()), rows, k, n);
                    }
                    if wants(*b) {
                        gemm_tn(av, g, slot(grads, *b, bv.len()), rows, k, n);
                    }
                } else {
                    if wants(*a) {
                        let ga = slot(grads, *a, av.len());
                        for t in 0..*batch {
                            gemm_nt(
                                &g[t * m * n..(t + 1) * m * n],
                                &bv[t * k * n..(t + 1) * k * n],
                                &mut ga[t * m * k..(t + 1) * m * k],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                    if wants(*b) {
                        let gb = slot(grads, *b, bv.len());
                        for t in 0..*batch {
                            gemm_tn(
                                &av[t * m * k..(t + 1) * m * k],
                                &g[t * m * n..(t + 1) * m * n],
                                &mut gb[t * k * n..(t + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                }
            }
            Op::Transpose { x, perm } => {
                let shape = self.nodes[x.0].shape.clone();
                let gx = slot(grads, *x, g.len());
                for_each_permuted(&shape, perm, |src, dst| gx[src] += g[dst]);
            }
            Op::Slice { x, axis, start, end } => {
                let shape = &self.nodes[x.0].shape;
                let (outer, len, inner) = split_axis(shape, *axis);
                let w = end - start;
                let gx = slot(grads, *x, outer * len * inner);
                for o in 0..outer {
                    let src = &g[o * w * inner..(o + 1) * w * inner];
                    let dst = &mut gx[(o * len + start) * inner..(o * len + end) * inner];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut off = 0;
                for x in xs {
                    let len = self.nodes[x.0].shape[*axis];
                    if wants(*x) {
                        let gx = slot(grads, *x, outer * len * inner);
                        for o in 0..outer {
                            let src = &g[(o * total + off) * inner..(o * total + off + len) * inner];
                            let dst = &mut gx[o * len * inner..(o + 1) * len * inner];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    off += len;
                }
            }
            Op::IndexSelect { x, axis, indices } => {
                let shape = &self.nodes[x.0].shape;
                let (outer, len, inner) = split_axis(shape, *axis);
                let r = indices.len();
                let gx = slot(grads, *x, outer * len * inner);
                for o in 0..outer {
                    for (q, &ix) in indices.iter().enumerate() {
                        for j in 0..inner {
                            gx[(o * len + ix) * inner + j] += g[(o * r + q) * inner + j];
                        }
                    }
                }
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let shape = &self.nodes[x.0].shape;
                let (outer, len, inner) = split_axis(shape, *axis);
                let c = if matches!(node.op, Op::Mean { .. }) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                let gx = slot(grads, *x, outer * len * inner);
                for o in 0..outer {
                    for l in 0..len {
                        for j in 0..inner {
                            gx[(o * len + l) * inner + j] += c * g[o * inner + j];
                        }
                    }
                }
            }
            Op::Std { x, axis } => {
                let xv = self.val(*x);
                let (outer, len, inner) = split_axis(&self.nodes[x.0].shape, *axis);
                let gx = slot(grads, *x, xv.len());
                for o in 0..outer {
                    for j in 0..inner {
                        let sd = out[o * inner + j];
                        if sd == 0.0 {
                            continue;
                        }
                        let at = |l: usize| (o * len + l) * inner + j;
                        let mean = (0..len).map(|l| xv[at(l)]).sum::<f64>() / len as f64;
                        let c = g[o * inner + j] / ((len - 1) as f64 * sd);
                        for l in 0..len {
                            gx[at(l)] += c * (xv[at(l)] - mean);
                        }
                    }
                }
            }
            Op::SumAll(x) | Op::MeanAll(x) => {
                let n = self.nodes[x.0].shape.iter().product::<usize>();
                let c = if matches!(node.op, Op::MeanAll(_)) {
                    g[0] / n as f64
                } else {
                    g[0]
                };
                for o in slot(grads, *x, n).iter_mut() {
                    *o += c;
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(&node.shape, *axis);
                let gx = slot(grads, *x, out.len());
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + j;
                        let dot: f64 = (0..len).map(|l| g[at(l)] * out[at(l)]).sum();
                        for l in 0..len {
                            gx[at(l)] += out[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, eps } => {
                let xv = self.val(*x);
                let d = *node.shape.last().expect("rank checked");
                let gx = slot(grads, *x, xv.len());
                for r in 0..xv.len() / d {
                    let row = &xv[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let rstd = 1.0 / (var + eps).sqrt();
                    let y = &out[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let gmean = gr.iter().sum::<f64>() / d as f64;
                    let gy = gr.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for c in 0..d {
                        gx[r * d + c] += rstd * (gr[c] - gmean - y[c] * gy);
                    }
                }
            }
            Op::Pearson { x, y, axis } => {
                let (xv, yv) = (self.val(*x), self.val(*y));
                let (outer, len, inner) = split_axis(&self.nodes[x.0].shape, *axis);
                let mut gxs = vec![0.0; xv.len()];
                let mut gys = vec![0.0; yv.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + j;
                        let s = PearsonStats::new(len, |l| xv[at(l)], |l| yv[at(l)]);
                        let gg = g[o * inner + j];
                        let d3 = s.denom * s.denom * s.denom;
                        for l in 0..len {
                            let xc = xv[at(l)] - s.mx;
                            let yc = yv[at(l)] - s.my;
                            gxs[at(l)] += gg * (yc / s.denom - s.cov * s.vy * xc / d3);
                            gys[at(l)] += gg * (xc / s.denom - s.cov * s.vx * yc / d3);
                        }
                    }
                }
                if wants(*x) {
                    for (o, v) in slot(grads, *x, xv.len()).iter_mut().zip(&gxs) {
                        *o += v;
                    }
                }
                if wants(*y) {
                    for (o, v) in slot(grads, *y, yv.len()).iter_mut().zip(&gys) {
                        *o += v;
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

struct PearsonStats {
    mx: f64,
    my: f64,
    cov: f64,
    vx: f64,
    vy: f64,
    denom: f64,
}

impl PearsonStats {
    fn new(len: usize, x: impl Fn(usize) -> f64, y: impl Fn(usize) -> f64) -> Self {
        let mx = (0..len).map(&x).sum::<f64>() / len as f64;
        let my = (0..len).map(&y).sum::<f64>() / len as f64;
        let (mut cov, mut vx, mut vy) = (0.0, 0.0, 0.0);
        for l in 0..len {
            let (a, b) = (x(l) - mx, y(l) - my);
            cov += a * b;
            vx += a * a;
            vy += b * b;
        }
        let denom = (vx * vy + PEARSON_EPS).sqrt();
        Self {
            mx,
            my,
            cov,
            vx,
            vy,
            denom,
        }
    }
}

fn eval_node(op: &Op, shape: &[usize], nodes: &[Node]) -> Vec<f64> {
    let val = |id: &NodeId| nodes[id.0].value.as_deref().expect("parent evaluated");
    let numel: usize = shape.iter().product();
    match op {
        Op::Constant | Op::Variable | Op::Param => unreachable!("leaves carry values"),
        Op::Binary { kind, a, b, bcast } => {
            let (av, bv) = (val(a), val(b));
            let nb = bv.len();
            (0..av.len())
                .map(|j| {
                    let bj = match bcast {
                        Bcast::Same => bv[j],
                        Bcast::Scalar => bv[0],
                        Bcast::Suffix => bv[j % nb],
                    };
                    match kind {
                        BinKind::Add => av[j] + bj,
                        BinKind::Sub => av[j] - bj,
                        BinKind::Mul => av[j] * bj,
                        BinKind::Div => av[j] / bj,
                    }
                })
                .collect()
        }
        Op::Scale(x, c) => val(x).iter().map(|v| c * v).collect(),
        Op::Offset(x, c) => val(x).iter().map(|v| v + c).collect(),
        Op::Unary(x, kind) => val(x)
            .iter()
            .map(|&v| match kind {
                UnaryKind::Neg => -v,
                UnaryKind::Square => v * v,
                UnaryKind::Sqrt => v.sqrt(),
                UnaryKind::Exp => v.exp(),
                UnaryKind::Log => v.ln(),
                UnaryKind::Tanh => v.tanh(),
                UnaryKind::Sigmoid => sigmoid(v),
                UnaryKind::Relu => v.max(0.0),
                UnaryKind::Softplus => softplus(v),
                UnaryKind::Abs => v.abs(),
            })
            .collect(),
        Op::Clip { x, lo, hi } => val(x).iter().map(|v| v.clamp(*lo, *hi)).collect(),
        Op::Dropout { x, mask } => val(x).iter().zip(mask).map(|(v, m)| v * m).collect(),
        Op::MatMul {
            a,
            b,
            batch,
            shared_rhs,
            m,
            k,
            n,
        } => {
            let (av, bv) = (val(a), val(b));
            let mut out = vec![0.0; numel];
            if *shared_rhs {
                gemm_nn(av, bv, &mut out, batch * m, *k, *n);
            } else {
                let (m, k, n) = (*m, *k, *n);
                for t in 0..*batch {
                    gemm_nn(
                        &av[t * m * k..(t + 1) * m * k],
                        &bv[t * k * n..(t + 1) * k * n],
                        &mut out[t * m * n..(t + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
            out
        }
        Op::Transpose { x, perm } => {
            let xv = val(x);
            let mut out = vec![0.0; numel];
            for_each_permuted(&nodes[x.0].shape, perm, |src, dst| out[dst] = xv[src]);
            out
        }
        Op::Reshape(x) => val(x).to_vec(),
        Op::Slice { x, axis, start, end } => {
            let xv = val(x);
            let (outer, len, inner) = split_axis(&nodes[x.0].shape, *axis);
            let mut out = Vec::with_capacity(numel);
            for o in 0..outer {
                out.extend_from_slice(&xv[(o * len + start) * inner..(o * len + end) * inner]);
            }
            out
        }
        Op::Concat { xs, axis } => {
            let (outer, _, inner) = split_axis(shape, *axis);
            let mut out = Vec::with_capacity(numel);
            for o in 0..outer {
                for x in xs {
                    let len = nodes[x.0].shape[*axis];
                    out.extend_from_slice(&val(x)[o * len * inner..(o + 1) * len * inner]);
                }
            }
            out
        }
        Op::IndexSelect { x, axis, indices } => {
            let xv = val(x);
            let (outer, len, inner) = split_axis(&nodes[x.0].shape, *axis);
            let mut out = Vec::with_capacity(numel);
            for o in 0..outer {
                for &ix in indices {
                    out.extend_from_slice(&xv[(o * len + ix) * inner..(o * len + ix + 1) * inner]);
                }
            }
            out
        }
        Op::Sum { x, axis } | Op::Mean { x, axis } | Op::Std { x, axis } => {
            let xv = val(x);
            let (outer, len, inner) = split_axis(&nodes[x.0].shape, *axis);
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for j in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + j;
                    let s: f64 = (0..len).map(|l| xv[at(l)]).sum();
                    out[o * inner + j] = match op {
                        Op::Sum { .. } => s,
                        Op::Mean { .. } => s / len as f64,
                        _ => {
                            let m = s / len as f64;
                            let ss: f64 = (0..len).map(|l| (xv[at(l)] - m).powi(2)).sum();
                            (ss / (len - 1) as f64).sqrt()
                        }
                    };
                }
            }
            out
        }
        Op::SumAll(x) => vec![val(x).iter().sum()],
        Op::MeanAll(x) => {
            let xv = val(x);
            vec![xv.iter().sum::<f64>() / xv.len() as f64]
        }
        Op::Softmax { x, axis } => {
            let xv = val(x);
            let (outer, len, inner) = split_axis(shape, *axis);
            let mut out = vec![0.0; numel];
            for o in 0..outer {
                for j in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + j;
                    let mx = (0..len).map(|l| xv[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for l in 0..len {
                        let e = (xv[at(l)] - mx).exp();
                        out[at(l)] = e;
                        z += e;
                    }
                    for l in 0..len {
                        out[at(l)] /= z;
                    }
                }
            }
            out
        }
        Op::LayerNorm { x, eps } => {
            let xv = val(x);
            let d = *shape.last().expect("rank checked");
            let mut out = vec![0.0; numel];
            for r in 0..numel / d {
                let row = &xv[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let rstd = 1.0 / (var + eps).sqrt();
                for c in 0..d {
                    out[r * d + c] = (row[c] - mean) * rstd;
                }
            }
            out
        }
        Op::Pearson { x, y, axis } => {
            let (xv, yv) = (val(x), val(y));
            let (outer, len, inner) = split_axis(&nodes[x.0].shape, *axis);
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for j in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + j;
                    let s = PearsonStats::new(len, |l| xv[at(l)], |l| yv[at(l)]);
                    out[o * inner + j] = s.cov / s.denom;
                }
            }
            out
        }
    }
}

/// Adjoints of one backward pass, indexed by node.
#[derive(Debug, Clone)]
pub struct Backward {
    grads: Vec<Option<Vec<f64>>>,
}

impl Backward {
    /// Adjoint of `id`, or `None` when the loss does not depend on it.
    pub fn node(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}
