//! A minimal reverse-mode differentiable computation graph.
//!
//! Nodes live in an append-only arena, so node ids are already a
//! topological order: parents always precede children. `differentiate`
//! builds the gradient of a scalar as *new nodes in the same graph*, which
//! means gradients can be differentiated again — the gradient-penalty term
//! of the critic loss relies on exactly that.
//!
//! Evaluation is deterministic: the same graph and bindings produce
//! bit-identical values on every call, for any thread count.

use crate::tensor::{self, Element, Tensor};
use std::collections::{HashMap, HashSet};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub u32);

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "#{}", self.0)
    }
}

impl NodeId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("shape mismatch in {op}: node {a} has shape {a_shape:?}, node {b} has shape {b_shape:?}")]
    ShapeMismatch {
        op: &'static str,
        a: NodeId,
        b: NodeId,
        a_shape: Vec<usize>,
        b_shape: Vec<usize>,
    },
    #[error("invalid shape for {op} on node {node}: {detail}")]
    BadShape {
        op: &'static str,
        node: NodeId,
        detail: String,
    },
    #[error("leaf '{0}' is not bound")]
    MissingInput(String),
    #[error("leaf '{name}' bound with shape {bound:?} but declared {declared:?}")]
    BoundShape {
        name: String,
        bound: Vec<usize>,
        declared: Vec<usize>,
    },
    #[error("parameter '{0}' not present in the parameter store")]
    MissingParameter(String),
    #[error("differentiate requires a scalar (shape []), node {0} has shape {1:?}")]
    NonScalarLoss(NodeId, Vec<usize>),
    #[error("operation {0} has no gradient rule")]
    NotDifferentiable(&'static str),
    #[error("second-order differentiation through batch-norm is not defined per-sample")]
    SecondOrderThroughBatchNorm,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("parameter '{0}' already exists")]
    DuplicateParameter(String),
}

pub type Result<T> = std::result::Result<T, GraphError>;

#[derive(Debug, Clone)]
pub enum Op<T> {
    Leaf { name: String },
    Parameter { name: String },
    Const(Tensor<T>),
    Add,
    Sub,
    Mul,
    ScalarMul(T),
    ScalarAdd(T),
    MatMul,
    Conv2d { stride: usize, pad: usize },
    ConvTranspose2d { stride: usize, pad: usize, out_hw: (usize, usize) },
    Conv2dWGrad { stride: usize, pad: usize, kernel_hw: (usize, usize) },
    Relu,
    LeakyRelu { slope: T },
    /// Pointwise derivative of leaky-relu; at the kink the non-negative
    /// branch wins. Its own derivative is zero.
    LeakyReluGrad { slope: T },
    Tanh,
    Exp,
    Log,
    /// Elementwise reciprocal with a zero guard: 1/0 evaluates to 0. The
    /// guard is what makes the L2-norm gradient well-defined at the origin.
    Recip,
    Square,
    Sqrt,
    L2Norm,
    Sum { axes: Option<Vec<usize>>, keep: bool },
    Mean { axes: Option<Vec<usize>>, keep: bool },
    MaxAxes { axes: Vec<usize>, keep: bool },
    Broadcast,
    Reshape,
    Transpose2,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    /// Parents: x, gain[C], bias[C]. Normalizes over batch (+ spatial) per
    /// channel with the batch statistics of the evaluation call.
    BatchNorm { eps: T },
    /// Parents: x, gain[C], bias[C]. Normalizes each sample over its own
    /// feature axes.
    LayerNorm { eps: T },
    StopGradient,
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Parameter { .. } => "parameter",
            Op::Const(_) => "const",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::ScalarMul(_) => "scalar-mul",
            Op::ScalarAdd(_) => "scalar-add",
            Op::MatMul => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv-transpose2d",
            Op::Conv2dWGrad { .. } => "conv2d-wgrad",
            Op::Relu => "relu",
            Op::LeakyRelu { .. } => "leaky-relu",
            Op::LeakyReluGrad { .. } => "leaky-relu-grad",
            Op::Tanh => "tanh",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Recip => "recip",
            Op::Square => "square",
            Op::Sqrt => "sqrt",
            Op::L2Norm => "l2-norm",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::MaxAxes { .. } => "max",
            Op::Broadcast => "broadcast",
            Op::Reshape => "reshape",
            Op::Transpose2 => "transpose",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::BatchNorm { .. } => "batch-norm",
            Op::LayerNorm { .. } => "layer-norm",
            Op::StopGradient => "stop-gradient",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    parents: Vec<NodeId>,
    shape: Vec<usize>,
    /// Set on nodes emitted while expanding a batch-norm gradient; a later
    /// differentiate that reaches such a node is rejected.
    bn_grad: bool,
}

/// Map from a node to the node holding its gradient.
pub type GradientMap = HashMap<NodeId, NodeId>;

#[derive(Debug, Default, Clone)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    leaf_ids: HashMap<String, NodeId>,
    param_ids: HashMap<String, NodeId>,
}

/// Values for leaves (owned) and parameters (borrowed from one or more
/// stores, searched in order).
pub struct Bindings<'a, T: Element> {
    leaves: HashMap<String, Tensor<T>>,
    stores: Vec<&'a ParamStore<T>>,
}

impl<'a, T: Element> Bindings<'a, T> {
    pub fn new() -> Self {
        Bindings {
            leaves: HashMap::new(),
            stores: Vec::new(),
        }
    }

    pub fn leaf(mut self, name: &str, value: Tensor<T>) -> Self {
        self.leaves.insert(name.to_string(), value);
        self
    }

    pub fn set_leaf(&mut self, name: &str, value: Tensor<T>) {
        self.leaves.insert(name.to_string(), value);
    }

    pub fn params(mut self, store: &'a ParamStore<T>) -> Self {
        self.stores.push(store);
        self
    }

    fn lookup_param(&self, name: &str) -> Option<&'a Tensor<T>> {
        self.stores.iter().find_map(|s| s.get(name))
    }
}

impl<'a, T: Element> Default for Bindings<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            leaf_ids: HashMap::new(),
            param_ids: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.idx()].shape
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.idx()].op.name()
    }

    fn push(&mut self, op: Op<T>, parents: Vec<NodeId>, shape: Vec<usize>) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node {
            op,
            parents,
            shape,
            bn_grad: false,
        });
        id
    }

    // ---- construction -------------------------------------------------

    /// Named input placeholder. Repeated declarations with the same name
    /// return the same node, so shared inputs accumulate gradients
    /// correctly.
    pub fn leaf(&mut self, name: &str, shape: &[usize]) -> NodeId {
        if let Some(&id) = self.leaf_ids.get(name) {
            assert_eq!(self.shape(id), shape, "leaf '{name}' redeclared with a different shape");
            return id;
        }
        let id = self.push(
            Op::Leaf {
                name: name.to_string(),
            },
            vec![],
            shape.to_vec(),
        );
        self.leaf_ids.insert(name.to_string(), id);
        id
    }

    /// Named parameter. Deduplicated by name: a network replayed several
    /// times in one graph (the critic appears three times in the
    /// gradient-penalty loss) shares one node per parameter.
    pub fn parameter(&mut self, name: &str, shape: &[usize]) -> NodeId {
        if let Some(&id) = self.param_ids.get(name) {
            assert_eq!(
                self.shape(id),
                shape,
                "parameter '{name}' redeclared with a different shape"
            );
            return id;
        }
        let id = self.push(
            Op::Parameter {
                name: name.to_string(),
            },
            vec![],
            shape.to_vec(),
        );
        self.param_ids.insert(name.to_string(), id);
        id
    }

    /// Parameter nodes whose name starts with `prefix`, sorted by name.
    pub fn parameters_with_prefix(&self, prefix: &str) -> Vec<(String, NodeId)> {
        let mut out: Vec<(String, NodeId)> = self
            .param_ids
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, &v)| (k.clone(), v))
            .collect();
        out.sort();
        out
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Const(value), vec![], shape)
    }

    pub fn const_scalar(&mut self, value: T) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        if self.shape(a) != self.shape(b) {
            return Err(GraphError::ShapeMismatch {
                op,
                a,
                b,
                a_shape: self.shape(a).to_vec(),
                b_shape: self.shape(b).to_vec(),
            });
        }
        Ok(self.shape(a).to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add, vec![a, b], shape))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("sub", a, b)?;
        Ok(self.push(Op::Sub, vec![a, b], shape))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul, vec![a, b], shape))
    }

    pub fn scalar_mul(&mut self, c: T, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::ScalarMul(c), vec![a], shape)
    }

    pub fn scalar_add(&mut self, c: T, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::ScalarAdd(c), vec![a], shape)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scalar_mul(T::fromf(-1.0), a)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(GraphError::ShapeMismatch {
                op: "matmul",
                a,
                b,
                a_shape: sa,
                b_shape: sb,
            });
        }
        Ok(self.push(Op::MatMul, vec![a, b], vec![sa[0], sb[1]]))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(GraphError::ShapeMismatch {
                op: "conv2d",
                a: x,
                b: w,
                a_shape: sx,
                b_shape: sw,
            });
        }
        let ho = tensor::conv_out_dim(sx[2], sw[2], stride, pad);
        let wo = tensor::conv_out_dim(sx[3], sw[3], stride, pad);
        match (ho, wo) {
            (Some(ho), Some(wo)) if ho > 0 && wo > 0 => {
                Ok(self.push(Op::Conv2d { stride, pad }, vec![x, w], vec![sx[0], sw[0], ho, wo]))
            }
            _ => Err(GraphError::BadShape {
                op: "conv2d",
                node: x,
                detail: format!(
                    "input {}x{} too small for kernel {}x{} stride {stride} pad {pad}",
                    sx[2], sx[3], sw[2], sw[3]
                ),
            }),
        }
    }

    /// Transposed convolution sized by the usual formula
    /// `(in-1)*stride + kernel - 2*pad`.
    pub fn conv_transpose2d(
        &mut self,
        t: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let s = self.shape(t).to_vec();
        let sw = self.shape(w).to_vec();
        let out_h = tensor::conv_transpose_out_dim(s[2], sw[2], stride, pad);
        let out_w = tensor::conv_transpose_out_dim(s[3], sw[3], stride, pad);
        self.conv_transpose2d_sized(t, w, stride, pad, (out_h, out_w))
    }

    /// Transposed convolution with an explicit output extent; used by the
    /// gradient rules where the original input may be larger than the
    /// formula minimum.
    pub fn conv_transpose2d_sized(
        &mut self,
        t: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
        out_hw: (usize, usize),
    ) -> Result<NodeId> {
        let (st, sw) = (self.shape(t).to_vec(), self.shape(w).to_vec());
        if st.len() != 4 || sw.len() != 4 || st[1] != sw[0] {
            return Err(GraphError::ShapeMismatch {
                op: "conv-transpose2d",
                a: t,
                b: w,
                a_shape: st,
                b_shape: sw,
            });
        }
        // The sweep over out_hw must reproduce t's extent exactly.
        let ho = tensor::conv_out_dim(out_hw.0, sw[2], stride, pad);
        let wo = tensor::conv_out_dim(out_hw.1, sw[3], stride, pad);
        if ho != Some(st[2]) || wo != Some(st[3]) {
            return Err(GraphError::BadShape {
                op: "conv-transpose2d",
                node: t,
                detail: format!(
                    "output extent {}x{} is not consistent with input {}x{} kernel {}x{} stride {stride} pad {pad}",
                    out_hw.0, out_hw.1, st[2], st[3], sw[2], sw[3]
                ),
            });
        }
        Ok(self.push(
            Op::ConvTranspose2d { stride, pad, out_hw },
            vec![t, w],
            vec![st[0], sw[1], out_hw.0, out_hw.1],
        ))
    }

    fn conv2d_wgrad(
        &mut self,
        x: NodeId,
        g: NodeId,
        stride: usize,
        pad: usize,
        kernel_hw: (usize, usize),
    ) -> Result<NodeId> {
        let (sx, sg) = (self.shape(x).to_vec(), self.shape(g).to_vec());
        Ok(self.push(
            Op::Conv2dWGrad {
                stride,
                pad,
                kernel_hw,
            },
            vec![x, g],
            vec![sg[1], sx[1], kernel_hw.0, kernel_hw.1],
        ))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Relu, vec![a], shape)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: T) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::LeakyRelu { slope }, vec![a], shape)
    }

    fn leaky_relu_grad(&mut self, a: NodeId, slope: T) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::LeakyReluGrad { slope }, vec![a], shape)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Tanh, vec![a], shape)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Exp, vec![a], shape)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Log, vec![a], shape)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Recip, vec![a], shape)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Square, vec![a], shape)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Sqrt, vec![a], shape)
    }

    pub fn l2_norm(&mut self, a: NodeId) -> NodeId {
        self.push(Op::L2Norm, vec![a], vec![])
    }

    fn check_axes(&self, op: &'static str, a: NodeId, axes: &[usize]) -> Result<()> {
        let rank = self.shape(a).len();
        let mut seen = HashSet::new();
        for &ax in axes {
            if ax >= rank || !seen.insert(ax) {
                return Err(GraphError::BadShape {
                    op,
                    node: a,
                    detail: format!("bad axes {axes:?} for rank {rank}"),
                });
            }
        }
        Ok(())
    }

    fn reduced_shape(&self, a: NodeId, axes: Option<&[usize]>, keep: bool) -> Vec<usize> {
        match axes {
            None => vec![],
            Some(axes) => {
                let mut shape = self.shape(a).to_vec();
                if keep {
                    for &ax in axes {
                        shape[ax] = 1;
                    }
                    shape
                } else {
                    shape
                        .into_iter()
                        .enumerate()
                        .filter(|(i, _)| !axes.contains(i))
                        .map(|(_, d)| d)
                        .collect()
                }
            }
        }
    }

    /// Sum over all elements (`axes = None`, scalar result) or given axes.
    pub fn sum(&mut self, a: NodeId, axes: Option<&[usize]>, keep: bool) -> Result<NodeId> {
        if let Some(axes) = axes {
            self.check_axes("sum", a, axes)?;
        }
        let shape = self.reduced_shape(a, axes, keep);
        Ok(self.push(
            Op::Sum {
                axes: axes.map(|a| a.to_vec()),
                keep,
            },
            vec![a],
            shape,
        ))
    }

    pub fn mean(&mut self, a: NodeId, axes: Option<&[usize]>, keep: bool) -> Result<NodeId> {
        if let Some(axes) = axes {
            self.check_axes("mean", a, axes)?;
        }
        let shape = self.reduced_shape(a, axes, keep);
        Ok(self.push(
            Op::Mean {
                axes: axes.map(|a| a.to_vec()),
                keep,
            },
            vec![a],
            shape,
        ))
    }

    pub fn max_axes(&mut self, a: NodeId, axes: &[usize], keep: bool) -> Result<NodeId> {
        self.check_axes("max", a, axes)?;
        let shape = self.reduced_shape(a, Some(axes), keep);
        Ok(self.push(
            Op::MaxAxes {
                axes: axes.to_vec(),
                keep,
            },
            vec![a],
            shape,
        ))
    }

    pub fn broadcast(&mut self, a: NodeId, target: &[usize]) -> Result<NodeId> {
        let sa = self.shape(a);
        let ok = sa.is_empty()
            || (sa.len() == target.len()
                && sa.iter().zip(target).all(|(&d, &t)| d == t || d == 1));
        if !ok {
            return Err(GraphError::BadShape {
                op: "broadcast",
                node: a,
                detail: format!("cannot broadcast {sa:?} to {target:?}"),
            });
        }
        Ok(self.push(Op::Broadcast, vec![a], target.to_vec()))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        if tensor::numel(self.shape(a)) != tensor::numel(shape) {
            return Err(GraphError::BadShape {
                op: "reshape",
                node: a,
                detail: format!("cannot reshape {:?} to {shape:?}", self.shape(a)),
            });
        }
        Ok(self.push(Op::Reshape, vec![a], shape.to_vec()))
    }

    pub fn transpose2(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(GraphError::BadShape {
                op: "transpose",
                node: a,
                detail: format!("rank-2 required, got {sa:?}"),
            });
        }
        Ok(self.push(Op::Transpose2, vec![a], vec![sa[1], sa[0]]))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = self.shape(parts[0]).to_vec();
        let mut total = 0;
        for &p in parts {
            let sp = self.shape(p);
            let compatible = sp.len() == first.len()
                && sp
                    .iter()
                    .enumerate()
                    .all(|(i, &d)| i == axis || d == first[i]);
            if !compatible {
                return Err(GraphError::ShapeMismatch {
                    op: "concat",
                    a: parts[0],
                    b: p,
                    a_shape: first,
                    b_shape: sp.to_vec(),
                });
            }
            total += sp[axis];
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(Op::Concat { axis }, parts.to_vec(), shape))
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || start + len > sa[axis] || len == 0 {
            return Err(GraphError::BadShape {
                op: "slice",
                node: a,
                detail: format!("slice {axis}:{start}+{len} out of {sa:?}"),
            });
        }
        let mut shape = sa;
        shape[axis] = len;
        Ok(self.push(Op::Slice { axis, start, len }, vec![a], shape))
    }

    fn norm_channels(&self, op: &'static str, x: NodeId) -> Result<usize> {
        match self.shape(x) {
            s if s.len() == 4 => Ok(s[1]),
            s if s.len() == 2 => Ok(s[1]),
            s => Err(GraphError::BadShape {
                op,
                node: x,
                detail: format!("rank 2 or 4 required, got {s:?}"),
            }),
        }
    }

    fn check_affine(&self, op: &'static str, x: NodeId, gain: NodeId, bias: NodeId) -> Result<()> {
        let c = self.norm_channels(op, x)?;
        for &p in &[gain, bias] {
            if self.shape(p) != [c] {
                return Err(GraphError::ShapeMismatch {
                    op,
                    a: x,
                    b: p,
                    a_shape: self.shape(x).to_vec(),
                    b_shape: self.shape(p).to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn batch_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: T) -> Result<NodeId> {
        self.check_affine("batch-norm", x, gain, bias)?;
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::BatchNorm { eps }, vec![x, gain, bias], shape))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: T) -> Result<NodeId> {
        self.check_affine("layer-norm", x, gain, bias)?;
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::LayerNorm { eps }, vec![x, gain, bias], shape))
    }

    pub fn stop_gradient(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::StopGradient, vec![a], shape)
    }

    // ---- evaluation ----------------------------------------------------

    /// All ancestors of `roots` (inclusive), ascending — a topological order.
    fn ancestors(&self, roots: &[NodeId]) -> Vec<NodeId> {
        let mut mark = vec![false; self.nodes.len()];
        let mut stack: Vec<NodeId> = roots.to_vec();
        while let Some(id) = stack.pop() {
            if mark[id.idx()] {
                continue;
            }
            mark[id.idx()] = true;
            stack.extend(&self.nodes[id.idx()].parents);
        }
        (0..self.nodes.len() as u32)
            .map(NodeId)
            .filter(|id| mark[id.idx()])
            .collect()
    }

    /// Precompute the evaluation schedule for a fixed output set.
    pub fn plan(&self, outputs: &[NodeId]) -> Plan {
        let order = self.ancestors(outputs);
        let mut uses = vec![0u32; self.nodes.len()];
        for &id in &order {
            for &p in &self.nodes[id.idx()].parents {
                uses[p.idx()] += 1;
            }
        }
        for &o in outputs {
            uses[o.idx()] += 1; // keep outputs alive
        }
        Plan {
            order,
            uses,
            outputs: outputs.to_vec(),
        }
    }

    pub fn evaluate(&self, outputs: &[NodeId], bindings: &Bindings<T>) -> Result<Vec<Tensor<T>>> {
        self.plan(outputs).execute(self, bindings)
    }

    fn eval_node(
        &self,
        id: NodeId,
        values: &[Option<Tensor<T>>],
        bindings: &Bindings<T>,
    ) -> Result<Tensor<T>> {
        let node = &self.nodes[id.idx()];
        let val = |p: NodeId| values[p.idx()].as_ref().expect("parent scheduled first");
        let out = match &node.op {
            Op::Leaf { name } => {
                let t = bindings
                    .leaves
                    .get(name)
                    .ok_or_else(|| GraphError::MissingInput(name.clone()))?;
                if t.shape() != node.shape {
                    return Err(GraphError::BoundShape {
                        name: name.clone(),
                        bound: t.shape().to_vec(),
                        declared: node.shape.clone(),
                    });
                }
                t.clone()
            }
            Op::Parameter { name } => {
                let p = bindings
                    .lookup_param(name)
                    .ok_or_else(|| GraphError::MissingParameter(name.clone()))?;
                if p.shape() != node.shape {
                    return Err(GraphError::BoundShape {
                        name: name.clone(),
                        bound: p.shape().to_vec(),
                        declared: node.shape.clone(),
                    });
                }
                p.clone()
            }
            Op::Const(t) => t.clone(),
            Op::Add => val(node.parents[0]).zip(val(node.parents[1]), |a, b| a + b),
            Op::Sub => val(node.parents[0]).zip(val(node.parents[1]), |a, b| a - b),
            Op::Mul => val(node.parents[0]).zip(val(node.parents[1]), |a, b| a * b),
            Op::ScalarMul(c) => {
                let c = *c;
                val(node.parents[0]).map(|x| x * c)
            }
            Op::ScalarAdd(c) => {
                let c = *c;
                val(node.parents[0]).map(|x| x + c)
            }
            Op::MatMul => tensor::matmul(val(node.parents[0]), val(node.parents[1])),
            Op::Conv2d { stride, pad } => {
                tensor::conv2d(val(node.parents[0]), val(node.parents[1]), *stride, *pad)
            }
            Op::ConvTranspose2d {
                stride,
                pad,
                out_hw,
            } => tensor::conv_transpose2d(
                val(node.parents[0]),
                val(node.parents[1]),
                *stride,
                *pad,
                out_hw.0,
                out_hw.1,
            ),
            Op::Conv2dWGrad {
                stride,
                pad,
                kernel_hw,
            } => tensor::conv2d_wgrad(
                val(node.parents[0]),
                val(node.parents[1]),
                *stride,
                *pad,
                kernel_hw.0,
                kernel_hw.1,
            ),
            Op::Relu => val(node.parents[0]).map(|x| if x > T::zero() { x } else { T::zero() }),
            Op::LeakyRelu { slope } => {
                let s = *slope;
                val(node.parents[0]).map(|x| if x >= T::zero() { x } else { x * s })
            }
            Op::LeakyReluGrad { slope } => {
                let s = *slope;
                val(node.parents[0]).map(|x| if x >= T::zero() { T::one() } else { s })
            }
            Op::Tanh => val(node.parents[0]).map(|x| x.tanh()),
            Op::Exp => val(node.parents[0]).map(|x| x.exp()),
            Op::Log => val(node.parents[0]).map(|x| x.ln()),
            Op::Recip => val(node.parents[0]).map(|x| {
                if x == T::zero() {
                    T::zero()
                } else {
                    T::one() / x
                }
            }),
            Op::Square => val(node.parents[0]).map(|x| x * x),
            Op::Sqrt => val(node.parents[0]).map(|x| x.sqrt()),
            Op::L2Norm => {
                let x = val(node.parents[0]);
                let mut acc = T::zero();
                for &v in x.data() {
                    acc = v.mul_add(v, acc);
                }
                Tensor::scalar(acc.sqrt())
            }
            Op::Sum { axes, keep } => self.reduce(val(node.parents[0]), axes, *keep, false),
            Op::Mean { axes, keep } => self.reduce(val(node.parents[0]), axes, *keep, true),
            Op::MaxAxes { axes, keep } => {
                let r = tensor::max_axes_keep(val(node.parents[0]), axes);
                if *keep {
                    r
                } else {
                    r.reshaped(node.shape.clone())
                }
            }
            Op::Broadcast => tensor::broadcast_to(val(node.parents[0]), &node.shape),
            Op::Reshape => val(node.parents[0]).reshaped(node.shape.clone()),
            Op::Transpose2 => tensor::transpose2(val(node.parents[0])),
            Op::Concat { axis } => {
                let parts: Vec<&Tensor<T>> = node.parents.iter().map(|&p| val(p)).collect();
                tensor::concat(&parts, *axis)
            }
            Op::Slice { axis, start, len } => {
                tensor::slice_axis(val(node.parents[0]), *axis, *start, *len)
            }
            Op::BatchNorm { eps } | Op::LayerNorm { eps } => {
                let x = val(node.parents[0]);
                let gain = val(node.parents[1]);
                let bias = val(node.parents[2]);
                let axes = norm_axes(&node.op, x.shape());
                normalize_forward(x, gain, bias, &axes, *eps)
            }
            Op::StopGradient => val(node.parents[0]).clone(),
        };
        Ok(out)
    }

    fn reduce(&self, x: &Tensor<T>, axes: &Option<Vec<usize>>, keep: bool, mean: bool) -> Tensor<T> {
        match axes {
            None => {
                let mut acc = T::zero();
                for &v in x.data() {
                    acc = acc + v;
                }
                if mean {
                    acc = acc / T::fromf(x.len() as f64);
                }
                Tensor::scalar(acc)
            }
            Some(axes) => {
                let mut r = tensor::sum_axes_keep(x, axes);
                if mean {
                    let count: usize = axes.iter().map(|&a| x.shape()[a]).product();
                    let inv = T::one() / T::fromf(count as f64);
                    r = r.map(|v| v * inv);
                }
                if keep {
                    r
                } else {
                    let shape: Vec<usize> = x
                        .shape()
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| !axes.contains(i))
                        .map(|(_, &d)| d)
                        .collect();
                    r.reshaped(shape)
                }
            }
        }
    }

    // ---- differentiation ----------------------------------------------

    /// Build gradient nodes of a scalar with respect to `wrt`. Nodes
    /// unreachable from the scalar get a constant zero gradient of their
    /// own shape.
    pub fn differentiate(&mut self, scalar: NodeId, wrt: &[NodeId]) -> Result<GradientMap> {
        if !self.shape(scalar).is_empty() {
            return Err(GraphError::NonScalarLoss(scalar, self.shape(scalar).to_vec()));
        }
        let order = self.ancestors(&[scalar]);
        if order.iter().any(|&id| self.nodes[id.idx()].bn_grad) {
            return Err(GraphError::SecondOrderThroughBatchNorm);
        }
        let mut adjoint: HashMap<NodeId, NodeId> = HashMap::new();
        let one = self.const_scalar(T::one());
        adjoint.insert(scalar, one);

        for &id in order.iter().rev() {
            let g = match adjoint.get(&id) {
                Some(&g) => g,
                None => continue,
            };
            let node = self.nodes[id.idx()].clone();
            let before = self.nodes.len();
            let contribs = self.vjp(id, &node, g)?;
            if matches!(node.op, Op::BatchNorm { .. }) {
                for n in &mut self.nodes[before..] {
                    n.bn_grad = true;
                }
            }
            for (parent, contrib) in contribs {
                match adjoint.get(&parent) {
                    Some(&prev) => {
                        let sum = self.add(prev, contrib)?;
                        adjoint.insert(parent, sum);
                    }
                    None => {
                        adjoint.insert(parent, contrib);
                    }
                }
            }
        }

        let mut map = GradientMap::new();
        for &w in wrt {
            let g = match adjoint.get(&w) {
                Some(&g) => g,
                None => {
                    let zero = Tensor::zeros(self.shape(w));
                    self.constant(zero)
                }
            };
            map.insert(w, g);
        }
        Ok(map)
    }

    /// Gradient contributions of `node`'s output gradient `g` to each parent.
    fn vjp(&mut self, id: NodeId, node: &Node<T>, g: NodeId) -> Result<Vec<(NodeId, NodeId)>> {
        let p = &node.parents;
        let out = match &node.op {
            Op::Leaf { .. } | Op::Parameter { .. } | Op::Const(_) => vec![],
            Op::StopGradient | Op::LeakyReluGrad { .. } | Op::MaxAxes { .. } => vec![],
            Op::Add => vec![(p[0], g), (p[1], g)],
            Op::Sub => {
                let ng = self.neg(g);
                vec![(p[0], g), (p[1], ng)]
            }
            Op::Mul => {
                let ga = self.mul(g, p[1])?;
                let gb = self.mul(g, p[0])?;
                vec![(p[0], ga), (p[1], gb)]
            }
            Op::ScalarMul(c) => {
                let c = *c;
                vec![(p[0], self.scalar_mul(c, g))]
            }
            Op::ScalarAdd(_) => vec![(p[0], g)],
            Op::MatMul => {
                let bt = self.transpose2(p[1])?;
                let ga = self.matmul(g, bt)?;
                let at = self.transpose2(p[0])?;
                let gb = self.matmul(at, g)?;
                vec![(p[0], ga), (p[1], gb)]
            }
            Op::Conv2d { stride, pad } => {
                let (stride, pad) = (*stride, *pad);
                let (xs, ws) = (self.shape(p[0]).to_vec(), self.shape(p[1]).to_vec());
                let gx = self.conv_transpose2d_sized(g, p[1], stride, pad, (xs[2], xs[3]))?;
                let gw = self.conv2d_wgrad(p[0], g, stride, pad, (ws[2], ws[3]))?;
                vec![(p[0], gx), (p[1], gw)]
            }
            Op::ConvTranspose2d { stride, pad, .. } => {
                let (stride, pad) = (*stride, *pad);
                let ws = self.shape(p[1]).to_vec();
                let gt = self.conv2d(g, p[1], stride, pad)?;
                let gw = self.conv2d_wgrad(g, p[0], stride, pad, (ws[2], ws[3]))?;
                vec![(p[0], gt), (p[1], gw)]
            }
            Op::Conv2dWGrad {
                stride,
                pad,
                kernel_hw: _,
            } => {
                let (stride, pad) = (*stride, *pad);
                let xs = self.shape(p[0]).to_vec();
                // Trilinear form <conv2d(x, w), y>: the kernel-shaped
                // gradient g plays the weight role for both sides.
                let gx = self.conv_transpose2d_sized(p[1], g, stride, pad, (xs[2], xs[3]))?;
                let gy = self.conv2d(p[0], g, stride, pad)?;
                vec![(p[0], gx), (p[1], gy)]
            }
            Op::Relu => {
                let mask = self.leaky_relu_grad(p[0], T::zero());
                vec![(p[0], self.mul(g, mask)?)]
            }
            Op::LeakyRelu { slope } => {
                let s = *slope;
                let mask = self.leaky_relu_grad(p[0], s);
                vec![(p[0], self.mul(g, mask)?)]
            }
            Op::Tanh => {
                let sq = self.square(id);
                let neg = self.scalar_mul(T::fromf(-1.0), sq);
                let one_minus = self.scalar_add(T::one(), neg);
                vec![(p[0], self.mul(g, one_minus)?)]
            }
            Op::Exp => vec![(p[0], self.mul(g, id)?)],
            Op::Log => {
                let r = self.recip(p[0]);
                vec![(p[0], self.mul(g, r)?)]
            }
            Op::Recip => {
                let sq = self.square(id);
                let m = self.mul(g, sq)?;
                vec![(p[0], self.scalar_mul(T::fromf(-1.0), m))]
            }
            Op::Square => {
                let m = self.mul(g, p[0])?;
                vec![(p[0], self.scalar_mul(T::fromf(2.0), m))]
            }
            Op::Sqrt => {
                let r = self.recip(id);
                let m = self.mul(g, r)?;
                vec![(p[0], self.scalar_mul(T::fromf(0.5), m))]
            }
            Op::L2Norm => {
                // d||x||/dx = x / ||x||, defined as 0 at the origin.
                let r = self.recip(id);
                let s = self.mul(g, r)?;
                let b = self.broadcast(s, &self.shape(p[0]).to_vec())?;
                vec![(p[0], self.mul(b, p[0])?)]
            }
            Op::Sum { axes, keep } => {
                let back = self.reduction_backward(p[0], g, axes, *keep)?;
                vec![(p[0], back)]
            }
            Op::Mean { axes, keep } => {
                let back = self.reduction_backward(p[0], g, axes, *keep)?;
                let count: usize = match axes {
                    None => tensor::numel(self.shape(p[0])),
                    Some(axes) => axes.iter().map(|&a| self.shape(p[0])[a]).product(),
                };
                let inv = T::one() / T::fromf(count as f64);
                vec![(p[0], self.scalar_mul(inv, back))]
            }
            Op::Broadcast => {
                let in_shape = self.shape(p[0]).to_vec();
                let back = if in_shape.is_empty() {
                    self.sum(g, None, false)?
                } else {
                    let axes: Vec<usize> = in_shape
                        .iter()
                        .enumerate()
                        .filter(|&(i, &d)| d == 1 && node.shape[i] != 1)
                        .map(|(i, _)| i)
                        .collect();
                    if axes.is_empty() {
                        g
                    } else {
                        self.sum(g, Some(&axes), true)?
                    }
                };
                vec![(p[0], back)]
            }
            Op::Reshape => {
                let shape = self.shape(p[0]).to_vec();
                vec![(p[0], self.reshape(g, &shape)?)]
            }
            Op::Transpose2 => vec![(p[0], self.transpose2(g)?)],
            Op::Concat { axis } => {
                let axis = *axis;
                let mut offset = 0;
                let mut out = Vec::new();
                for &part in p {
                    let len = self.shape(part)[axis];
                    let sl = self.slice(g, axis, offset, len)?;
                    out.push((part, sl));
                    offset += len;
                }
                out
            }
            Op::Slice { axis, start, len } => {
                let (axis, start, len) = (*axis, *start, *len);
                let in_shape = self.shape(p[0]).to_vec();
                let mut parts = Vec::new();
                if start > 0 {
                    let mut s = in_shape.clone();
                    s[axis] = start;
                    parts.push(self.constant(Tensor::zeros(&s)));
                }
                parts.push(g);
                let after = in_shape[axis] - start - len;
                if after > 0 {
                    let mut s = in_shape.clone();
                    s[axis] = after;
                    parts.push(self.constant(Tensor::zeros(&s)));
                }
                let padded = self.concat(&parts, axis)?;
                vec![(p[0], padded)]
            }
            Op::BatchNorm { eps } | Op::LayerNorm { eps } => {
                let eps = *eps;
                self.normalization_vjp(&node.op, p[0], p[1], p[2], g, eps)?
            }
        };
        Ok(out)
    }

    fn reduction_backward(
        &mut self,
        input: NodeId,
        g: NodeId,
        axes: &Option<Vec<usize>>,
        keep: bool,
    ) -> Result<NodeId> {
        let in_shape = self.shape(input).to_vec();
        match axes {
            None => self.broadcast(g, &in_shape),
            Some(axes) => {
                let g_keep = if keep {
                    g
                } else {
                    let mut kept = in_shape.clone();
                    for &a in axes {
                        kept[a] = 1;
                    }
                    self.reshape(g, &kept)?
                };
                self.broadcast(g_keep, &in_shape)
            }
        }
    }

    /// Shared batch-norm / layer-norm input-and-affine gradient, expressed
    /// with primitive ops so it stays differentiable (layer-norm sits on
    /// the gradient-penalty path).
    fn normalization_vjp(
        &mut self,
        op: &Op<T>,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        g: NodeId,
        eps: T,
    ) -> Result<Vec<(NodeId, NodeId)>> {
        let x_shape = self.shape(x).to_vec();
        let axes = norm_axes(op, &x_shape);
        let bshape = affine_broadcast_shape(&x_shape);
        let affine_axes = affine_reduce_axes(&x_shape);

        // Recompute the normalized activation from x.
        let mu = self.mean(x, Some(&axes), true)?;
        let mu_b = self.broadcast(mu, &x_shape)?;
        let xc = self.sub(x, mu_b)?;
        let xc2 = self.square(xc);
        let var = self.mean(xc2, Some(&axes), true)?;
        let var_eps = self.scalar_add(eps, var);
        let std = self.sqrt(var_eps);
        let sinv = self.recip(std);
        let sinv_b = self.broadcast(sinv, &x_shape)?;
        let xhat = self.mul(xc, sinv_b)?;

        let gain_r = self.reshape(gain, &bshape)?;
        let gain_b = self.broadcast(gain_r, &x_shape)?;
        let gy = self.mul(g, gain_b)?; // dL/d(xhat)

        let m1 = self.mean(gy, Some(&axes), true)?;
        let m1_b = self.broadcast(m1, &x_shape)?;
        let gx_h = self.mul(gy, xhat)?;
        let m2 = self.mean(gx_h, Some(&axes), true)?;
        let m2_b = self.broadcast(m2, &x_shape)?;
        let centered = self.sub(gy, m1_b)?;
        let proj = self.mul(xhat, m2_b)?;
        let inner = self.sub(centered, proj)?;
        let dx = self.mul(inner, sinv_b)?;

        let g_xhat = self.mul(g, xhat)?;
        let dgain_k = self.sum(g_xhat, Some(&affine_axes), true)?;
        let c = self.shape(gain)[0];
        let dgain = self.reshape(dgain_k, &[c])?;
        let dbias_k = self.sum(g, Some(&affine_axes), true)?;
        let dbias = self.reshape(dbias_k, &[c])?;

        Ok(vec![(x, dx), (gain, dgain), (bias, dbias)])
    }
}

fn norm_axes<T>(op: &Op<T>, shape: &[usize]) -> Vec<usize> {
    match (op, shape.len()) {
        (Op::BatchNorm { .. }, 4) => vec![0, 2, 3],
        (Op::BatchNorm { .. }, _) => vec![0],
        (Op::LayerNorm { .. }, 4) => vec![1, 2, 3],
        _ => vec![1],
    }
}

fn affine_broadcast_shape(x_shape: &[usize]) -> Vec<usize> {
    if x_shape.len() == 4 {
        vec![1, x_shape[1], 1, 1]
    } else {
        vec![1, x_shape[1]]
    }
}

fn affine_reduce_axes(x_shape: &[usize]) -> Vec<usize> {
    if x_shape.len() == 4 {
        vec![0, 2, 3]
    } else {
        vec![0]
    }
}

fn normalize_forward<T: Element>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    axes: &[usize],
    eps: T,
) -> Tensor<T> {
    let count: usize = axes.iter().map(|&a| x.shape()[a]).product();
    let inv = T::one() / T::fromf(count as f64);
    let mu = tensor::sum_axes_keep(x, axes).map(|v| v * inv);
    let mu_b = tensor::broadcast_to(&mu, x.shape());
    let xc = x.zip(&mu_b, |a, b| a - b);
    let var = tensor::sum_axes_keep(&xc.map(|v| v * v), axes).map(|v| v * inv);
    let sinv = var.map(|v| T::one() / (v + eps).sqrt());
    let sinv_b = tensor::broadcast_to(&sinv, x.shape());
    let bshape = affine_broadcast_shape(x.shape());
    let gain_b = tensor::broadcast_to(&gain.reshaped(bshape.clone()), x.shape());
    let bias_b = tensor::broadcast_to(&bias.reshaped(bshape), x.shape());
    let mut out = xc;
    for (((o, s), g), b) in out
        .data_mut()
        .iter_mut()
        .zip(sinv_b.data())
        .zip(gain_b.data())
        .zip(bias_b.data())
    {
        *o = (*o * *s).mul_add(*g, *b);
    }
    out
}

/// A compiled evaluation schedule with liveness-based freeing.
pub struct Plan {
    order: Vec<NodeId>,
    uses: Vec<u32>,
    outputs: Vec<NodeId>,
}

impl Plan {
    pub fn execute<T: Element>(
        &self,
        graph: &Graph<T>,
        bindings: &Bindings<T>,
    ) -> Result<Vec<Tensor<T>>> {
        let mut values: Vec<Option<Tensor<T>>> = vec![None; graph.nodes.len()];
        let mut remaining = self.uses.clone();
        for &id in &self.order {
            let v = graph.eval_node(id, &values, bindings)?;
            values[id.idx()] = Some(v);
            // release parents that are no longer needed
            for &p in &graph.nodes[id.idx()].parents {
                remaining[p.idx()] -= 1;
                if remaining[p.idx()] == 0 {
                    values[p.idx()] = None;
                }
            }
        }
        Ok(self
            .outputs
            .iter()
            .map(|o| values[o.idx()].clone().expect("output computed"))
            .collect())
    }
}

// ---- parameters and Adam -------------------------------------------------

#[derive(Debug, Clone)]
struct AdamState<T> {
    m: Vec<T>,
    v: Vec<T>,
    step: u64,
}

/// Named parameter buffers with per-parameter Adam state.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: std::collections::BTreeMap<String, (Tensor<T>, AdamState<T>)>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: std::collections::BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(GraphError::DuplicateParameter(name.to_string()));
        }
        let n = value.len();
        self.params.insert(
            name.to_string(),
            (
                value,
                AdamState {
                    m: vec![T::zero(); n],
                    v: vec![T::zero(); n],
                    step: 0,
                },
            ),
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).map(|(t, _)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name).map(|(t, _)| t)
    }

    pub fn step_count(&self, name: &str) -> Option<u64> {
        self.params.get(name).map(|(_, s)| s.step)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Merge another store under a name prefix (used to assemble the three
    /// GIRM networks into one checkpointable store).
    pub fn adopt(&mut self, prefix: &str, other: ParamStore<T>) -> Result<()> {
        for (name, entry) in other.params {
            let full = format!("{prefix}{name}");
            if self.params.contains_key(&full) {
                return Err(GraphError::DuplicateParameter(full));
            }
            self.params.insert(full, entry);
        }
        Ok(())
    }

    /// Remove and return all parameters under `prefix`, stripping it.
    pub fn take_prefix(&mut self, prefix: &str) -> ParamStore<T> {
        let keys: Vec<String> = self
            .params
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect();
        let mut out = ParamStore::new();
        for k in keys {
            let entry = self.params.remove(&k).unwrap();
            out.params.insert(k[prefix.len()..].to_string(), entry);
        }
        out
    }

    /// Full entry view including optimizer state, for persistence.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor<T>, &[T], &[T], u64)> {
        self.params
            .iter()
            .map(|(k, (t, s))| (k.as_str(), t, s.m.as_slice(), s.v.as_slice(), s.step))
    }

    /// Insert a parameter together with its optimizer state (checkpoint
    /// restore path).
    pub fn insert_with_adam(
        &mut self,
        name: &str,
        value: Tensor<T>,
        m: Vec<T>,
        v: Vec<T>,
        step: u64,
    ) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(GraphError::DuplicateParameter(name.to_string()));
        }
        if m.len() != value.len() || v.len() != value.len() {
            return Err(GraphError::NonFinite(format!(
                "adam state size mismatch for '{name}'"
            )));
        }
        self.params
            .insert(name.to_string(), (value, AdamState { m, v, step }));
        Ok(())
    }

    /// Standard Adam with bias correction. Parameters absent from `grads`
    /// are untouched.
    pub fn adam_update(
        &mut self,
        grads: &HashMap<String, Tensor<T>>,
        lr: T,
        beta1: T,
        beta2: T,
        eps: T,
    ) -> Result<()> {
        for (name, grad) in sorted(grads) {
            let (value, state) = self
                .params
                .get_mut(name)
                .ok_or_else(|| GraphError::MissingParameter(name.clone()))?;
            if !grad.all_finite() {
                return Err(GraphError::NonFinite(format!("gradient of '{name}'")));
            }
            state.step += 1;
            let t = state.step;
            let bc1 = T::one() - beta1.powi(t as i32);
            let bc2 = T::one() - beta2.powi(t as i32);
            for ((th, g), (m, v)) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(state.m.iter_mut().zip(state.v.iter_mut()))
            {
                *m = beta1 * *m + (T::one() - beta1) * *g;
                *v = beta2 * *v + (T::one() - beta2) * *g * *g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *th = *th - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

fn sorted<T>(grads: &HashMap<String, Tensor<T>>) -> Vec<(&String, &Tensor<T>)> {
    let mut v: Vec<_> = grads.iter().collect();
    v.sort_by(|a, b| a.0.cmp(b.0));
    v
}

/// Max relative error between the analytic gradient of `scalar` w.r.t.
/// `wrt` and central finite differences with step `h`.
pub fn finite_difference_check<T: Element>(
    graph: &mut Graph<T>,
    scalar: NodeId,
    wrt: NodeId,
    bindings: &Bindings<T>,
    h: T,
) -> Result<f64> {
    let grads = graph.differentiate(scalar, &[wrt])?;
    let gnode = grads[&wrt];
    let analytic = graph.evaluate(&[gnode], bindings)?.remove(0);
    if !analytic.all_finite() {
        return Err(GraphError::NonFinite("analytic gradient".into()));
    }

    let eval_scalar = |graph: &Graph<T>, b: &Bindings<T>| -> Result<f64> {
        let v = graph.evaluate(&[scalar], b)?.remove(0).item();
        if !v.is_finite() {
            return Err(GraphError::NonFinite("perturbed evaluation".into()));
        }
        Ok(v.tof())
    };

    enum Target {
        Leaf(String),
        Param(String),
    }
    let target = match &graph.nodes[wrt.idx()].op {
        Op::Leaf { name } => Target::Leaf(name.clone()),
        Op::Parameter { name } => Target::Param(name.clone()),
        op => return Err(GraphError::NotDifferentiable(op.name())),
    };

    let n = analytic.len();
    let mut max_rel = 0.0f64;
    let hh = h.tof();
    for i in 0..n {
        let numeric = match &target {
            Target::Leaf(name) => {
                let base = bindings
                    .leaves
                    .get(name)
                    .ok_or_else(|| GraphError::MissingInput(name.clone()))?;
                let mut plus = Bindings::new();
                for (k, v) in &bindings.leaves {
                    plus.set_leaf(k, v.clone());
                }
                for s in &bindings.stores {
                    plus = plus.params(s);
                }
                let mut t = base.clone();
                t.data_mut()[i] = t.data()[i] + h;
                plus.set_leaf(name, t);
                let f_plus = eval_scalar(graph, &plus)?;
                let mut t = base.clone();
                t.data_mut()[i] = t.data()[i] - h;
                plus.set_leaf(name, t);
                let f_minus = eval_scalar(graph, &plus)?;
                (f_plus - f_minus) / (2.0 * hh)
            }
            Target::Param(name) => {
                let store = bindings
                    .stores
                    .iter()
                    .find(|s| s.get(name).is_some())
                    .ok_or_else(|| GraphError::MissingParameter(name.clone()))?;
                let mut perturbed = (*store).clone();
                let orig = perturbed.get(name).unwrap().data()[i];
                let mut eval_at = |v: T| -> Result<f64> {
                    perturbed.get_mut(name).unwrap().data_mut()[i] = v;
                    let mut b = Bindings::new();
                    for (k, t) in &bindings.leaves {
                        b.set_leaf(k, t.clone());
                    }
                    b = b.params(&perturbed);
                    for s in &bindings.stores {
                        b.stores.push(s);
                    }
                    eval_scalar(graph, &b)
                };
                let f_plus = eval_at(orig + h)?;
                let f_minus = eval_at(orig - h)?;
                (f_plus - f_minus) / (2.0 * hh)
            }
        };
        let a = analytic.data()[i].tof();
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rng_tensor(rng: &mut StdRng, shape: &[usize]) -> Tensor<f64> {
        let data = (0..tensor::numel(shape))
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        Tensor::new(shape.to_vec(), data)
    }

    #[test]
    fn evaluate_square() {
        // y = x*x at x = 3 -> 9
        let mut g = Graph::<f64>::new();
        let x = g.leaf("x", &[]);
        let y = g.mul(x, x).unwrap();
        let b = Bindings::new().leaf("x", Tensor::scalar(3.0));
        assert_eq!(g.evaluate(&[y], &b).unwrap()[0].item(), 9.0);
    }

    #[test]
    fn evaluate_unbound_leaf_is_error() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf("x", &[]);
        let y = g.mul(x, x).unwrap();
        let err = g.evaluate(&[y], &Bindings::new()).unwrap_err();
        assert!(matches!(err, GraphError::MissingInput(_)));
    }

    #[test]
    fn evaluate_is_referentially_transparent() {
        let mut g = Graph::<f64>::new();
        let mut rng = StdRng::seed_from_u64(7);
        let x = g.leaf("x", &[2, 3, 6, 6]);
        let w = g.leaf("w", &[4, 3, 3, 3]);
        let c = g.conv2d(x, w, 2, 1).unwrap();
        let t = g.tanh(c);
        let s = g.sum(t, None, false).unwrap();
        let b = Bindings::new()
            .leaf("x", rng_tensor(&mut rng, &[2, 3, 6, 6]))
            .leaf("w", rng_tensor(&mut rng, &[4, 3, 3, 3]));
        let v1 = g.evaluate(&[s], &b).unwrap()[0].clone();
        let v2 = g.evaluate(&[s], &b).unwrap()[0].clone();
        assert_eq!(v1.data(), v2.data(), "bit-identical repeated evaluation");
    }

    #[test]
    fn gradient_of_square_is_two_x() {
        // d(x*x)/dx at x=3 -> 6
        let mut g = Graph::<f64>::new();
        let x = g.leaf("x", &[]);
        let y = g.mul(x, x).unwrap();
        let grads = g.differentiate(y, &[x]).unwrap();
        let b = Bindings::new().leaf("x", Tensor::scalar(3.0));
        assert_eq!(g.evaluate(&[grads[&x]], &b).unwrap()[0].item(), 6.0);
    }

    #[test]
    fn second_derivative_of_square_is_two() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf("x", &[]);
        let y = g.mul(x, x).unwrap();
        let first = g.differentiate(y, &[x]).unwrap()[&x];
        let second = g.differentiate(first, &[x]).unwrap()[&x];
        for v in [-2.0, 0.3, 5.0] {
            let b = Bindings::new().leaf("x", Tensor::scalar(v));
            assert_eq!(g.evaluate(&[second], &b).unwrap()[0].item(), 2.0);
        }
    }

    #[test]
    fn double_differentiate_cube_is_six_x() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf("x", &[]);
        let x2 = g.mul(x, x).unwrap();
        let x3 = g.mul(x2, x).unwrap();
        let first = g.differentiate(x3, &[x]).unwrap()[&x];
        let second = g.differentiate(first, &[x]).unwrap()[&x];
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..5 {
            let v: f64 = rng.gen_range(-3.0..3.0);
            let b = Bindings::new().leaf("x", Tensor::scalar(v));
            let got = g.evaluate(&[second], &b).unwrap()[0].item();
            assert!((got - 6.0 * v).abs() < 1e-12, "{got} vs {}", 6.0 * v);
        }
    }

    #[test]
    fn differentiate_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf("x", &[3]);
        let y = g.square(x);
        assert!(matches!(
            g.differentiate(y, &[x]),
            Err(GraphError::NonScalarLoss(..))
        ));
    }

    #[test]
    fn unreachable_wrt_gets_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf("x", &[]);
        let z = g.leaf("z", &[2, 2]);
        let y = g.mul(x, x).unwrap();
        let grads = g.differentiate(y, &[z]).unwrap();
        let b = Bindings::new()
            .leaf("x", Tensor::scalar(1.0))
            .leaf("z", Tensor::zeros(&[2, 2]));
        let gz = g.evaluate(&[grads[&z]], &b).unwrap().remove(0);
        assert_eq!(gz.shape(), &[2, 2]);
        assert!(gz.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn l2_norm_gradient_matches_hand_formula() {
        // d||v|| / dv = v / ||v||
        let mut g = Graph::<f64>::new();
        let v = g.leaf("v", &[4]);
        let n = g.l2_norm(v);
        let grads = g.differentiate(n, &[v]).unwrap();
        let val = Tensor::new(vec![4], vec![3.0, -4.0, 12.0, 0.0]);
        let norm = (9.0f64 + 16.0 + 144.0).sqrt();
        let b = Bindings::new().leaf("v", val.clone());
        let got = g.evaluate(&[grads[&v]], &b).unwrap().remove(0);
        for (a, e) in got.data().iter().zip(val.data()) {
            assert!((a - e / norm).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_norm_gradient_zero_at_origin() {
        let mut g = Graph::<f64>::new();
        let v = g.leaf("v", &[3]);
        let n = g.l2_norm(v);
        let grads = g.differentiate(n, &[v]).unwrap();
        let b = Bindings::new().leaf("v", Tensor::zeros(&[3]));
        let got = g.evaluate(&[grads[&v]], &b).unwrap().remove(0);
        assert!(got.data().iter().all(|&v| v == 0.0));
    }

    /// Linear critic D(x) = w^T x: the gradient penalty (||grad_x D|| - 1)^2
    /// equals (||w|| - 1)^2 for every input, and its parameter gradient is
    /// 2(||w|| - 1) * w / ||w||. Both hand-derived.
    #[test]
    fn linear_critic_gradient_penalty_oracle() {
        let mut g = Graph::<f64>::new();
        let w = g.parameter("w", &[5]);
        let x = g.leaf("x", &[5]);
        let m = g.mul(w, x).unwrap();
        let d = g.sum(m, None, false).unwrap(); // scalar w^T x
        let gx = g.differentiate(d, &[x]).unwrap()[&x];
        let norm = g.l2_norm(gx);
        let shifted = g.scalar_add(-1.0, norm);
        let penalty = g.square(shifted);
        let grads = g.differentiate(penalty, &[w]).unwrap();

        let mut store = ParamStore::new();
        let wv = vec![0.6, -1.2, 0.3, 2.0, -0.5];
        store
            .insert("w", Tensor::new(vec![5], wv.clone()))
            .unwrap();
        let wnorm = wv.iter().map(|v| v * v).sum::<f64>().sqrt();

        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..3 {
            let b = Bindings::new()
                .leaf("x", rng_tensor(&mut rng, &[5]))
                .params(&store);
            let p = g.evaluate(&[penalty], &b).unwrap()[0].item();
            assert!(
                (p - (wnorm - 1.0).powi(2)).abs() < 1e-12,
                "penalty is (||w||-1)^2 regardless of x"
            );
            let gw = g.evaluate(&[grads[&w]], &b).unwrap().remove(0);
            for (got, wi) in gw.data().iter().zip(&wv) {
                let expect = 2.0 * (wnorm - 1.0) * wi / wnorm;
                assert!(
                    (got - expect).abs() < 1e-9,
                    "grad {got} vs hand formula {expect}"
                );
            }
        }
    }

    fn fd_all_leaves(g: &mut Graph<f64>, scalar: NodeId, leaves: &[NodeId], b: &Bindings<f64>) {
        for &leaf in leaves {
            let err = finite_difference_check(g, scalar, leaf, b, 1e-4).unwrap();
            assert!(
                err < 1e-5,
                "op {} rel err {err}",
                g.op_name(scalar)
            );
        }
    }

    #[test]
    fn finite_difference_quadratic_and_tanh() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf("x", &[]);
        let y = g.mul(x, x).unwrap();
        let b = Bindings::new().leaf("x", Tensor::scalar(3.0));
        assert!(finite_difference_check(&mut g, y, x, &b, 1e-4).unwrap() < 1e-6);

        let mut g = Graph::<f64>::new();
        let x = g.leaf("x", &[]);
        let y = g.tanh(x);
        let b = Bindings::new().leaf("x", Tensor::scalar(0.5));
        assert!(finite_difference_check(&mut g, y, x, &b, 1e-4).unwrap() < 1e-5);
    }

    #[test]
    fn finite_difference_constant_graph_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf("x", &[]);
        let c = g.const_scalar(4.0);
        let y = g.mul(c, c).unwrap();
        let _ = x;
        // analytic gradient of a constant graph w.r.t. x is 0; difference 0
        let b = Bindings::new().leaf("x", Tensor::scalar(1.0));
        assert_eq!(finite_difference_check(&mut g, y, x, &b, 1e-4).unwrap(), 0.0);
    }

    /// Every differentiable op checked against central differences.
    #[test]
    fn finite_difference_every_op() {
        let mut rng = StdRng::seed_from_u64(42);

        // elementwise / reductions on a 2x3 input, away from kinks
        type Build = fn(&mut Graph<f64>, NodeId) -> NodeId;
        let unary: Vec<(&str, Build)> = vec![
            ("relu", |g, x| g.relu(x)),
            ("leaky-relu", |g, x| g.leaky_relu(x, 0.01)),
            ("tanh", |g, x| g.tanh(x)),
            ("exp", |g, x| g.exp(x)),
            ("square", |g, x| g.square(x)),
            ("l2-norm", |g, x| g.l2_norm(x)),
            ("scalar-mul", |g, x| g.scalar_mul(1.7, x)),
            ("scalar-add", |g, x| g.scalar_add(-0.4, x)),
            ("mean-all", |g, x| g.mean(x, None, false).unwrap()),
            ("sum-axis", |g, x| g.sum(x, Some(&[0]), true).unwrap()),
            ("mean-axis", |g, x| g.mean(x, Some(&[1]), false).unwrap()),
            ("reshape", |g, x| g.reshape(x, &[3, 2]).unwrap()),
            ("transpose", |g, x| g.transpose2(x).unwrap()),
            ("slice", |g, x| g.slice(x, 1, 1, 2).unwrap()),
            ("broadcast-src", |g, x| {
                let s = g.sum(x, Some(&[0]), true).unwrap();
                g.broadcast(s, &[2, 3]).unwrap()
            }),
        ];
        for (name, build) in unary {
            let mut g = Graph::<f64>::new();
            let x = g.leaf("x", &[2, 3]);
            let y = build(&mut g, x);
            let s = if g.shape(y).is_empty() {
                y
            } else {
                // weights make the reduction non-degenerate
                let w = g.constant(rng_tensor(&mut rng, &g.shape(y).to_vec()));
                let m = g.mul(y, w).unwrap();
                g.sum(m, None, false).unwrap()
            };
            // offset input away from 0 so relu kinks are avoided
            let data = rng_tensor(&mut rng, &[2, 3]).map(|v| v + 2.0_f64.copysign(v));
            let b = Bindings::new().leaf("x", data);
            let err = finite_difference_check(&mut g, s, x, &b, 1e-5).unwrap();
            assert!(err < 1e-5, "{name}: rel err {err}");
        }

        // sqrt / log / recip need positive input
        let positive: Vec<(&str, Build)> = vec![
            ("sqrt", |g, x| g.sqrt(x)),
            ("log", |g, x| g.log(x)),
            ("recip", |g, x| g.recip(x)),
        ];
        for (name, build) in positive {
            let mut g = Graph::<f64>::new();
            let x = g.leaf("x", &[4]);
            let y = build(&mut g, x);
            let w = g.constant(rng_tensor(&mut rng, &[4]));
            let m = g.mul(y, w).unwrap();
            let s = g.sum(m, None, false).unwrap();
            let data = rng_tensor(&mut rng, &[4]).map(|v| v.abs() + 0.5);
            let b = Bindings::new().leaf("x", data);
            let err = finite_difference_check(&mut g, s, x, &b, 1e-5).unwrap();
            assert!(err < 1e-5, "{name}: rel err {err}");
        }

        // binary ops
        {
            let mut g = Graph::<f64>::new();
            let a = g.leaf("a", &[2, 3]);
            let c = g.leaf("c", &[2, 3]);
            let s1 = g.add(a, c).unwrap();
            let s2 = g.sub(s1, c).unwrap();
            let s3 = g.mul(s2, c).unwrap();
            let s = g.sum(s3, None, false).unwrap();
            let b = Bindings::new()
                .leaf("a", rng_tensor(&mut rng, &[2, 3]))
                .leaf("c", rng_tensor(&mut rng, &[2, 3]));
            fd_all_leaves(&mut g, s, &[a, c], &b);
        }
        // matmul
        {
            let mut g = Graph::<f64>::new();
            let a = g.leaf("a", &[3, 4]);
            let c = g.leaf("c", &[4, 2]);
            let m = g.matmul(a, c).unwrap();
            let w = g.constant(rng_tensor(&mut rng, &[3, 2]));
            let mw = g.mul(m, w).unwrap();
            let s = g.sum(mw, None, false).unwrap();
            let b = Bindings::new()
                .leaf("a", rng_tensor(&mut rng, &[3, 4]))
                .leaf("c", rng_tensor(&mut rng, &[4, 2]));
            fd_all_leaves(&mut g, s, &[a, c], &b);
        }
        // conv2d (with a floor-mode remainder), conv-transpose2d, concat
        {
            let mut g = Graph::<f64>::new();
            let x = g.leaf("x", &[2, 2, 6, 6]);
            let w = g.leaf("w", &[3, 2, 3, 3]);
            let y = g.conv2d(x, w, 2, 1).unwrap();
            let k = g.constant(rng_tensor(&mut rng, &g.shape(y).to_vec()));
            let m = g.mul(y, k).unwrap();
            let s = g.sum(m, None, false).unwrap();
            let b = Bindings::new()
                .leaf("x", rng_tensor(&mut rng, &[2, 2, 6, 6]))
                .leaf("w", rng_tensor(&mut rng, &[3, 2, 3, 3]));
            fd_all_leaves(&mut g, s, &[x, w], &b);
        }
        {
            let mut g = Graph::<f64>::new();
            let t = g.leaf("t", &[2, 3, 3, 3]);
            let w = g.leaf("w", &[3, 2, 4, 4]);
            let y = g.conv_transpose2d(t, w, 2, 1).unwrap();
            assert_eq!(g.shape(y), &[2, 2, 6, 6]);
            let k = g.constant(rng_tensor(&mut rng, &[2, 2, 6, 6]));
            let m = g.mul(y, k).unwrap();
            let s = g.sum(m, None, false).unwrap();
            let b = Bindings::new()
                .leaf("t", rng_tensor(&mut rng, &[2, 3, 3, 3]))
                .leaf("w", rng_tensor(&mut rng, &[3, 2, 4, 4]));
            fd_all_leaves(&mut g, s, &[t, w], &b);
        }
        {
            let mut g = Graph::<f64>::new();
            let a = g.leaf("a", &[2, 2]);
            let c = g.leaf("c", &[2, 3]);
            let cat = g.concat(&[a, c], 1).unwrap();
            let k = g.constant(rng_tensor(&mut rng, &[2, 5]));
            let m = g.mul(cat, k).unwrap();
            let s = g.sum(m, None, false).unwrap();
            let b = Bindings::new()
                .leaf("a", rng_tensor(&mut rng, &[2, 2]))
                .leaf("c", rng_tensor(&mut rng, &[2, 3]));
            fd_all_leaves(&mut g, s, &[a, c], &b);
        }
        // batch-norm and layer-norm, x and affine params
        for ln in [false, true] {
            let mut g = Graph::<f64>::new();
            let x = g.leaf("x", &[3, 2, 4, 4]);
            let gain = g.leaf("gain", &[2]);
            let bias = g.leaf("bias", &[2]);
            let y = if ln {
                g.layer_norm(x, gain, bias, 1e-5).unwrap()
            } else {
                g.batch_norm(x, gain, bias, 1e-5).unwrap()
            };
            let k = g.constant(rng_tensor(&mut rng, &[3, 2, 4, 4]));
            let m = g.mul(y, k).unwrap();
            let s = g.sum(m, None, false).unwrap();
            let b = Bindings::new()
                .leaf("x", rng_tensor(&mut rng, &[3, 2, 4, 4]))
                .leaf("gain", rng_tensor(&mut rng, &[2]).map(|v| v + 1.5))
                .leaf("bias", rng_tensor(&mut rng, &[2]));
            fd_all_leaves(&mut g, s, &[x, gain, bias], &b);
        }
    }

    #[test]
    fn second_order_through_batch_norm_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf("x", &[2, 2, 4, 4]);
        let gain = g.leaf("gain", &[2]);
        let bias = g.leaf("bias", &[2]);
        let y = g.batch_norm(x, gain, bias, 1e-5).unwrap();
        let s = g.sum(y, None, false).unwrap();
        let gx = g.differentiate(s, &[x]).unwrap()[&x];
        let n = g.l2_norm(gx);
        assert!(matches!(
            g.differentiate(n, &[x]),
            Err(GraphError::SecondOrderThroughBatchNorm)
        ));
    }

    #[test]
    fn layer_norm_supports_second_order() {
        // the critic's gradient penalty differentiates twice through
        // layer-norm; verify against finite differences
        let mut g = Graph::<f64>::new();
        let x = g.leaf("x", &[2, 2, 3, 3]);
        let gain = g.leaf("gain", &[2]);
        let bias = g.leaf("bias", &[2]);
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        let k = g.constant(Tensor::full(&[2, 2, 3, 3], 0.3));
        let m = g.mul(y, k).unwrap();
        let s = g.sum(m, None, false).unwrap();
        let gx = g.differentiate(s, &[x]).unwrap()[&x];
        let sq = g.square(gx);
        let p = g.sum(sq, None, false).unwrap();
        let mut rng = StdRng::seed_from_u64(5);
        let b = Bindings::new()
            .leaf("x", rng_tensor(&mut rng, &[2, 2, 3, 3]))
            .leaf("gain", rng_tensor(&mut rng, &[2]).map(|v| v + 1.5))
            .leaf("bias", rng_tensor(&mut rng, &[2]));
        let err = finite_difference_check(&mut g, p, x, &b, 1e-5).unwrap();
        assert!(err < 1e-5, "second-order layer-norm rel err {err}");
    }

    #[test]
    fn adam_first_step_moves_by_lr_sign() {
        // bias-corrected first step: m^=g, v^=g^2 -> step = -lr * sign(g)
        let mut store = ParamStore::<f64>::new();
        store
            .insert("p", Tensor::new(vec![2], vec![1.0, -2.0]))
            .unwrap();
        let mut grads = HashMap::new();
        grads.insert("p".to_string(), Tensor::new(vec![2], vec![0.3, -4.0]));
        store.adam_update(&grads, 0.01, 0.9, 0.999, 1e-12).unwrap();
        let p = store.get("p").unwrap();
        assert!((p.data()[0] - (1.0 - 0.01)).abs() < 1e-9);
        assert!((p.data()[1] - (-2.0 + 0.01)).abs() < 1e-9);
        assert_eq!(store.step_count("p"), Some(1));
    }

    #[test]
    fn adam_zero_gradient_keeps_parameter() {
        let mut store = ParamStore::<f64>::new();
        store
            .insert("p", Tensor::new(vec![1], vec![5.0]))
            .unwrap();
        let mut grads = HashMap::new();
        grads.insert("p".to_string(), Tensor::new(vec![1], vec![0.0]));
        store.adam_update(&grads, 0.1, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(store.get("p").unwrap().data()[0], 5.0);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut store = ParamStore::<f64>::new();
        store
            .insert("p", Tensor::new(vec![1], vec![1.0]))
            .unwrap();
        let mut grads = HashMap::new();
        grads.insert("p".to_string(), Tensor::new(vec![1], vec![f64::NAN]));
        let err = store.adam_update(&grads, 0.1, 0.9, 0.999, 1e-8).unwrap_err();
        assert!(err.to_string().contains("'p'"));
    }

    #[test]
    fn adam_untouched_parameters_unchanged() {
        let mut store = ParamStore::<f64>::new();
        store.insert("a", Tensor::new(vec![1], vec![1.0])).unwrap();
        store.insert("b", Tensor::new(vec![1], vec![2.0])).unwrap();
        let mut grads = HashMap::new();
        grads.insert("a".to_string(), Tensor::new(vec![1], vec![1.0]));
        store.adam_update(&grads, 0.1, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(store.get("b").unwrap().data()[0], 2.0);
        assert_eq!(store.step_count("b"), Some(0));
    }

    /// A small 3-layer network (conv -> layer-norm -> leaky-relu -> dense
    /// -> tanh -> dense) checked end to end against finite differences,
    /// w.r.t. every parameter, in double precision.
    #[test]
    fn three_layer_network_finite_difference() {
        let mut rng = StdRng::seed_from_u64(1234);
        let mut g = Graph::<f64>::new();
        let x = g.leaf("x", &[2, 1, 6, 6]);
        let w1 = g.parameter("w1", &[3, 1, 3, 3]);
        let gain = g.parameter("gain", &[3]);
        let bias = g.parameter("bias", &[3]);
        let w2 = g.parameter("w2", &[27, 5]);
        let b2 = g.parameter("b2", &[5]);
        let w3 = g.parameter("w3", &[5, 1]);

        let c = g.conv2d(x, w1, 2, 1).unwrap(); // 2x3x3x3
        let n = g.layer_norm(c, gain, bias, 1e-5).unwrap();
        let a = g.leaky_relu(n, 0.01);
        let flat = g.reshape(a, &[2, 27]).unwrap();
        let h = g.matmul(flat, w2).unwrap();
        let b2r = g.reshape(b2, &[1, 5]).unwrap();
        let b2b = g.broadcast(b2r, &[2, 5]).unwrap();
        let hb = g.add(h, b2b).unwrap();
        let t = g.tanh(hb);
        let o = g.matmul(t, w3).unwrap();
        let loss = g.mean(o, None, false).unwrap();

        let mut store = ParamStore::new();
        store.insert("w1", rng_tensor(&mut rng, &[3, 1, 3, 3])).unwrap();
        store.insert("gain", rng_tensor(&mut rng, &[3]).map(|v| v + 1.5)).unwrap();
        store.insert("bias", rng_tensor(&mut rng, &[3])).unwrap();
        // scaled down so tanh stays in its active region; saturated units
        // have gradients at finite-difference noise level
        store.insert("w2", rng_tensor(&mut rng, &[27, 5]).map(|v| v * 0.2)).unwrap();
        store.insert("b2", rng_tensor(&mut rng, &[5])).unwrap();
        store.insert("w3", rng_tensor(&mut rng, &[5, 1])).unwrap();

        let b = Bindings::new()
            .leaf("x", rng_tensor(&mut rng, &[2, 1, 6, 6]))
            .params(&store);
        for p in [w1, gain, bias, w2, b2, w3, x] {
            let err = finite_difference_check(&mut g, loss, p, &b, 1e-5).unwrap();
            assert!(err < 1e-5, "param node {p}: rel err {err}");
        }
    }
}
