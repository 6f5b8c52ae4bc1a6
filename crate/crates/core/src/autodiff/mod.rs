//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! Every primitive's backward rule is written in terms of other tape
//! primitives and recorded onto the same [`Graph`], so a gradient is itself a
//! node that can be differentiated again. That is what makes the gradient
//! penalty trainable: `‖∇ₓ f‖` is an ordinary node whose parameter gradient
//! comes from a second call to [`Graph::grad`].

pub mod kernels;

use std::fmt;

use rand::Rng;

use crate::error::{Result, WinnError};
use crate::tensor::{numel, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Smallest probability the clamped log-sigmoid will report, so that
/// `ln σ(x) ≥ ln(1e-12)`.
pub const LOG_SIGMOID_FLOOR_PROB: f64 = 1e-12;

#[derive(Debug, Clone)]
pub enum Op {
    /// A differentiable input (model parameter or data that gradients are
    /// requested for).
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    PowScalar(NodeId, f64),
    Exp(NodeId),
    Log(NodeId),
    Sigmoid(NodeId),
    Swish(NodeId),
    /// `max(ln σ(x), ln 1e-12)`. Its backward uses a frozen derivative, so it
    /// cannot sit on a double-backprop path.
    LogSigmoid(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Conv2d { x: NodeId, w: NodeId },
    Conv2dBackInput { g: NodeId, w: NodeId },
    Conv2dBackWeight { x: NodeId, g: NodeId, k: usize },
    AvgPool2(NodeId),
    Upsample2(NodeId),
    /// `[n, c, ...] → [c]`
    ChannelSum(NodeId),
    /// `[c] → [n, c, ...]`
    ChannelBroadcast(NodeId, Vec<usize>),
    /// `[n, ...] → [n]`
    SampleSum(NodeId),
    /// `[n] → [n, ...]`
    SampleBroadcast(NodeId, Vec<usize>),
    /// `[...] → [1]`
    SumAll(NodeId),
    /// `[1] → [...]`
    BroadcastScalar(NodeId, Vec<usize>),
    Reshape(NodeId, Vec<usize>),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::PowScalar(..) => "pow_scalar",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sigmoid(..) => "sigmoid",
            Op::Swish(..) => "swish",
            Op::LogSigmoid(..) => "log_sigmoid",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Conv2d { .. } => "conv2d",
            Op::Conv2dBackInput { .. } => "conv2d_back_input",
            Op::Conv2dBackWeight { .. } => "conv2d_back_weight",
            Op::AvgPool2(..) => "avg_pool2",
            Op::Upsample2(..) => "upsample2",
            Op::ChannelSum(..) => "channel_sum",
            Op::ChannelBroadcast(..) => "channel_broadcast",
            Op::SampleSum(..) => "sample_sum",
            Op::SampleBroadcast(..) => "sample_broadcast",
            Op::SumAll(..) => "sum_all",
            Op::BroadcastScalar(..) => "broadcast_scalar",
            Op::Reshape(..) => "reshape",
        }
    }

    pub fn parents(&self) -> Vec<NodeId> {
        match *self {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![a, b],
            Op::Conv2d { x, w } => vec![x, w],
            Op::Conv2dBackInput { g, w } => vec![g, w],
            Op::Conv2dBackWeight { x, g, .. } => vec![x, g],
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::PowScalar(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sigmoid(a)
            | Op::Swish(a)
            | Op::LogSigmoid(a)
            | Op::Transpose(a)
            | Op::AvgPool2(a)
            | Op::Upsample2(a)
            | Op::ChannelSum(a)
            | Op::ChannelBroadcast(a, _)
            | Op::SampleSum(a)
            | Op::SampleBroadcast(a, _)
            | Op::SumAll(a)
            | Op::BroadcastScalar(a, _)
            | Op::Reshape(a, _) => vec![a],
        }
    }

    /// Whether the recorded backward of this primitive is itself exact under
    /// a second differentiation.
    pub fn supports_double_backward(&self) -> bool {
        !matches!(self, Op::LogSigmoid(_))
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// The tape: nodes in creation order, which is a topological order because a
/// node can only reference nodes that already exist.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(v: f64) -> f64 {
    v.min(0.0) - (-v.abs()).exp().ln_1p()
}

fn shape_err(id: usize, op: &Op, msg: impl fmt::Display) -> WinnError {
    WinnError::config(format!("node #{id} ({}): {msg}", op.name()))
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

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    /// A differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push_raw(Op::Leaf, value)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_raw(Op::Constant, value)
    }

    fn push_raw(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        let id = self.nodes.len();
        let value = self.compute(&op, id)?;
        if !value.is_finite() {
            return Err(WinnError::numeric(
                format!("node #{id} ({})", op.name()),
                "non-finite value",
            ));
        }
        Ok(self.push_raw(op, value))
    }

    /// Evaluates `op` from its parents' stored values.
    fn compute(&self, op: &Op, id: usize) -> Result<Tensor> {
        let v = |id: NodeId| &self.nodes[id.0].value;
        let same = |a: NodeId, b: NodeId| -> Result<()> {
            if v(a).shape() != v(b).shape() {
                return Err(shape_err(id, op, format!("{:?} vs {:?}", v(a).shape(), v(b).shape())));
            }
            Ok(())
        };
        let out = match op {
            Op::Leaf | Op::Constant => unreachable!("leaves are not computed"),
            Op::Add(a, b) => {
                same(*a, *b)?;
                v(*a).zip_map(v(*b), |x, y| x + y)
            }
            Op::Sub(a, b) => {
                same(*a, *b)?;
                v(*a).zip_map(v(*b), |x, y| x - y)
            }
            Op::Mul(a, b) => {
                same(*a, *b)?;
                v(*a).zip_map(v(*b), |x, y| x * y)
            }
            Op::Scale(a, c) => v(*a).map(|x| x * c),
            Op::AddScalar(a, c) => v(*a).map(|x| x + c),
            Op::PowScalar(a, p) => {
                let p = *p;
                if p == 2.0 {
                    v(*a).map(|x| x * x)
                } else if p == 1.0 {
                    v(*a).clone()
                } else if p == 0.0 {
                    v(*a).map(|_| 1.0)
                } else {
                    v(*a).map(|x| x.powf(p))
                }
            }
            Op::Exp(a) => v(*a).map(f64::exp),
            Op::Log(a) => v(*a).map(f64::ln),
            Op::Sigmoid(a) => v(*a).map(sigmoid),
            Op::Swish(a) => v(*a).map(|x| x * sigmoid(x)),
            Op::LogSigmoid(a) => {
                let floor = LOG_SIGMOID_FLOOR_PROB.ln();
                v(*a).map(|x| log_sigmoid(x).max(floor))
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (v(*a).shape(), v(*b).shape());
                if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                    return Err(shape_err(id, op, format!("{sa:?} x {sb:?}")));
                }
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let mut out = vec![0.0; m * n];
                kernels::gemm(m, k, n, v(*a).data(), false, v(*b).data(), false, &mut out, false);
                Tensor::new(vec![m, n], out)?
            }
            Op::Transpose(a) => {
                let s = v(*a).shape();
                if s.len() != 2 {
                    return Err(shape_err(id, op, format!("needs 2-D, got {s:?}")));
                }
                Tensor::new(vec![s[1], s[0]], kernels::transpose2(v(*a).data(), s[0], s[1]))?
            }
            Op::Conv2d { x, w } => {
                let (sx, sw) = (v(*x).shape(), v(*w).shape());
                check_conv(id, op, sx, sw)?;
                let out = kernels::conv2d(v(*x).data(), sx, v(*w).data(), sw);
                Tensor::new(vec![sx[0], sw[0], sx[2], sx[3]], out)?
            }
            Op::Conv2dBackInput { g, w } => {
                let (sg, sw) = (v(*g).shape(), v(*w).shape());
                if sg.len() != 4 || sw.len() != 4 || sg[1] != sw[0] {
                    return Err(shape_err(id, op, format!("grad {sg:?} vs weight {sw:?}")));
                }
                let out = kernels::conv2d_back_input(v(*g).data(), sg, v(*w).data(), sw);
                Tensor::new(vec![sg[0], sw[1], sg[2], sg[3]], out)?
            }
            Op::Conv2dBackWeight { x, g, k } => {
                let (sx, sg) = (v(*x).shape(), v(*g).shape());
                if sx.len() != 4 || sg.len() != 4 || sx[0] != sg[0] || sx[2..] != sg[2..] {
                    return Err(shape_err(id, op, format!("input {sx:?} vs grad {sg:?}")));
                }
                let out = kernels::conv2d_back_weight(v(*x).data(), sx, v(*g).data(), sg, *k);
                Tensor::new(vec![sg[1], sx[1], *k, *k], out)?
            }
            Op::AvgPool2(a) => {
                let s = v(*a).shape();
                let n = s.len();
                if n < 2 || s[n - 1] % 2 != 0 || s[n - 2] % 2 != 0 {
                    return Err(shape_err(id, op, format!("needs even spatial dims, got {s:?}")));
                }
                let mut shape = s.to_vec();
                shape[n - 1] /= 2;
                shape[n - 2] /= 2;
                Tensor::new(shape, kernels::avg_pool2(v(*a).data(), s))?
            }
            Op::Upsample2(a) => {
                let s = v(*a).shape();
                let n = s.len();
                if n < 2 {
                    return Err(shape_err(id, op, format!("needs spatial dims, got {s:?}")));
                }
                let mut shape = s.to_vec();
                shape[n - 1] *= 2;
                shape[n - 2] *= 2;
                Tensor::new(shape, kernels::upsample2(v(*a).data(), s))?
            }
            Op::ChannelSum(a) => {
                let s = v(*a).shape();
                if s.len() < 2 {
                    return Err(shape_err(id, op, format!("needs [n, c, ...], got {s:?}")));
                }
                let c = s[1];
                let inner = numel(&s[2..]);
                let mut out = vec![0.0; c];
                for chunk in v(*a).data().chunks(c * inner) {
                    for (ch, o) in out.iter_mut().enumerate() {
                        *o += chunk[ch * inner..(ch + 1) * inner].iter().sum::<f64>();
                    }
                }
                Tensor::new(vec![c], out)?
            }
            Op::ChannelBroadcast(a, shape) => {
                let s = v(*a).shape();
                if s.len() != 1 || shape.len() < 2 || shape[1] != s[0] {
                    return Err(shape_err(id, op, format!("{s:?} onto {shape:?}")));
                }
                let inner = numel(&shape[2..]);
                let src = v(*a).data();
                Tensor::from_fn(shape, |i| src[(i / inner) % s[0]])
            }
            Op::SampleSum(a) => {
                let s = v(*a).shape();
                if s.is_empty() {
                    return Err(shape_err(id, op, "needs a batch axis"));
                }
                let len = numel(&s[1..]);
                let out: Vec<f64> = if len == 0 {
                    vec![0.0; s[0]]
                } else {
                    v(*a).data().chunks(len).map(|c| c.iter().sum()).collect()
                };
                Tensor::new(vec![s[0]], out)?
            }
            Op::SampleBroadcast(a, shape) => {
                let s = v(*a).shape();
                if s.len() != 1 || shape.is_empty() || shape[0] != s[0] {
                    return Err(shape_err(id, op, format!("{s:?} onto {shape:?}")));
                }
                let len = numel(&shape[1..]);
                let src = v(*a).data();
                Tensor::from_fn(shape, |i| src[i / len])
            }
            Op::SumAll(a) => Tensor::scalar(v(*a).sum()),
            Op::BroadcastScalar(a, shape) => {
                if v(*a).numel() != 1 {
                    return Err(shape_err(id, op, format!("needs one element, got {:?}", v(*a).shape())));
                }
                Tensor::full(shape, v(*a).item())
            }
            Op::Reshape(a, shape) => v(*a).clone().reshape(shape).map_err(|e| shape_err(id, op, e))?,
        };
        Ok(out)
    }

    // ---- builders -------------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.push(Op::Scale(a, c))
    }
    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.push(Op::AddScalar(a, c))
    }
    pub fn pow_scalar(&mut self, a: NodeId, p: f64) -> Result<NodeId> {
        self.push(Op::PowScalar(a, p))
    }
    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::PowScalar(a, 2.0))
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Exp(a))
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Log(a))
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sigmoid(a))
    }
    pub fn swish(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Swish(a))
    }
    pub fn log_sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::LogSigmoid(a))
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul(a, b))
    }
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Transpose(a))
    }
    pub fn conv2d(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        self.push(Op::Conv2d { x, w })
    }
    /// Adjoint of [`Graph::conv2d`] in its input.
    pub fn conv2d_back_input(&mut self, g: NodeId, w: NodeId) -> Result<NodeId> {
        self.push(Op::Conv2dBackInput { g, w })
    }
    /// Adjoint of [`Graph::conv2d`] in its weight, for a `k`×`k` kernel.
    pub fn conv2d_back_weight(&mut self, x: NodeId, g: NodeId, k: usize) -> Result<NodeId> {
        self.push(Op::Conv2dBackWeight { x, g, k })
    }
    pub fn avg_pool2(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::AvgPool2(a))
    }
    pub fn upsample2(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Upsample2(a))
    }
    pub fn channel_sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::ChannelSum(a))
    }
    pub fn channel_broadcast(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.push(Op::ChannelBroadcast(a, shape.to_vec()))
    }
    pub fn sample_sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SampleSum(a))
    }
    pub fn sample_broadcast(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.push(Op::SampleBroadcast(a, shape.to_vec()))
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SumAll(a))
    }
    pub fn broadcast_scalar(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.push(Op::BroadcastScalar(a, shape.to_vec()))
    }
    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.push(Op::Reshape(a, shape.to_vec()))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(WinnError::usage("mean of an empty tensor"));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn sample_mean(&mut self, a: NodeId) -> Result<NodeId> {
        let len = self.value(a).sample_len();
        let s = self.sample_sum(a)?;
        self.scale(s, 1.0 / len as f64)
    }

    /// Per-sample Euclidean norm: `[n, ...] → [n]`.
    pub fn sample_l2_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let sq = self.square(a)?;
        let s = self.sample_sum(sq)?;
        self.pow_scalar(s, 0.5)
    }

    /// Euclidean norm of the whole tensor: `[...] → [1]`.
    pub fn l2_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let sq = self.square(a)?;
        let s = self.sum(sq)?;
        self.pow_scalar(s, 0.5)
    }

    /// Adds a per-channel bias `b: [c]` to `x: [n, c, ...]`.
    pub fn bias_add(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let bb = self.channel_broadcast(b, &shape)?;
        self.add(x, bb)
    }

    /// `x · w + b` for `x: [n, d]`, `w: [d, o]`, `b: [o]`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        self.bias_add(y, b)
    }

    /// Per-sample normalization over every non-batch feature followed by a
    /// per-channel gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let mean = self.sample_mean(x)?;
        let mean_b = self.sample_broadcast(mean, &shape)?;
        let centered = self.sub(x, mean_b)?;
        let sq = self.square(centered)?;
        let var = self.sample_mean(sq)?;
        let var_eps = self.add_scalar(var, eps)?;
        let inv = self.pow_scalar(var_eps, -0.5)?;
        let inv_b = self.sample_broadcast(inv, &shape)?;
        let normed = self.mul(centered, inv_b)?;
        let g = self.channel_broadcast(gain, &shape)?;
        let scaled = self.mul(normed, g)?;
        self.bias_add(scaled, bias)
    }

    /// Inverted dropout with a recorded mask; the identity in eval mode.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: NodeId, p: f64, mode: Mode, rng: &mut R) -> Result<NodeId> {
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        if !(0.0..1.0).contains(&p) {
            return Err(WinnError::config(format!("dropout probability {p} outside [0, 1)")));
        }
        let keep = 1.0 - p;
        let shape = self.shape(x).to_vec();
        let mask = Tensor::from_fn(&shape, |_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
        let m = self.constant(mask);
        self.mul(x, m)
    }

    // ---- differentiation ------------------------------------------------

    /// Gradients of the one-element node `root` with respect to each node in
    /// `wrt`. The gradients are recorded as new nodes, so they can be
    /// differentiated again.
    pub fn grad(&mut self, root: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        if self.value(root).numel() != 1 {
            return Err(WinnError::usage(format!(
                "gradient requested of non-scalar node {root} with shape {:?}; reduce it first",
                self.shape(root)
            )));
        }
        let reach = self.reach(root, wrt);
        let mut adj: Vec<Option<NodeId>> = vec![None; root.0 + 1];
        let seed_shape = self.shape(root).to_vec();
        adj[root.0] = Some(self.constant(Tensor::ones(&seed_shape)));

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i] else { continue };
            if !reach[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            for (parent, contrib) in self.backward_rule(NodeId(i), &op, g, &reach)? {
                adj[parent.0] = Some(match adj[parent.0] {
                    Some(prev) => self.add(prev, contrib)?,
                    None => contrib,
                });
            }
        }

        Ok(wrt
            .iter()
            .map(|&w| match adj.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let shape = self.shape(w).to_vec();
                    self.constant(Tensor::zeros(&shape))
                }
            })
            .collect())
    }

    /// Like [`Graph::grad`] but returns the gradient values.
    pub fn grad_values(&mut self, root: NodeId, wrt: &[NodeId]) -> Result<Vec<Tensor>> {
        let ids = self.grad(root, wrt)?;
        Ok(ids.into_iter().map(|id| self.value(id).clone()).collect())
    }

    /// Differentiates a scalar function of an input gradient with respect to
    /// `params`: computes `g = ∇_input root`, builds `penalty(g)` with the
    /// supplied closure, and returns `(penalty, ∇_params penalty)`.
    pub fn grad_of_input_grad(
        &mut self,
        root: NodeId,
        input: NodeId,
        params: &[NodeId],
        penalty: impl FnOnce(&mut Graph, NodeId) -> Result<NodeId>,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        self.check_double_backward(root, input)?;
        let g = self.grad(root, &[input])?[0];
        let p = penalty(self, g)?;
        let grads = self.grad(p, params)?;
        Ok((p, grads))
    }

    fn check_double_backward(&self, root: NodeId, input: NodeId) -> Result<()> {
        let reach = self.reach(root, &[input]);
        let mut ancestor = vec![false; root.0 + 1];
        ancestor[root.0] = true;
        let mut bad: Vec<String> = Vec::new();
        for i in (0..=root.0).rev() {
            if !ancestor[i] {
                continue;
            }
            let op = &self.nodes[i].op;
            for p in op.parents() {
                ancestor[p.0] = true;
            }
            if reach[i] && !op.supports_double_backward() {
                bad.push(format!("{} (node #{i})", op.name()));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            bad.reverse();
            Err(WinnError::Capability(bad.join(", ")))
        }
    }

    /// `reach[i]`: node `i` depends on at least one node of `wrt`.
    fn reach(&self, root: NodeId, wrt: &[NodeId]) -> Vec<bool> {
        let mut reach = vec![false; root.0 + 1];
        for w in wrt {
            if w.0 <= root.0 {
                reach[w.0] = true;
            }
        }
        for i in 0..=root.0 {
            if !reach[i] && self.nodes[i].op.parents().iter().any(|p| reach[p.0]) {
                reach[i] = true;
            }
        }
        reach
    }

    /// Contributions of node `id`'s adjoint `g` to its reachable parents.
    fn backward_rule(&mut self, id: NodeId, op: &Op, g: NodeId, reach: &[bool]) -> Result<Vec<(NodeId, NodeId)>> {
        let r = |n: NodeId| reach[n.0];
        let mut out = Vec::with_capacity(2);
        match *op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                if r(a) {
                    out.push((a, g));
                }
                if r(b) {
                    out.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if r(a) {
                    out.push((a, g));
                }
                if r(b) {
                    out.push((b, self.scale(g, -1.0)?));
                }
            }
            Op::Mul(a, b) => {
                if r(a) {
                    out.push((a, self.mul(g, b)?));
                }
                if r(b) {
                    out.push((b, self.mul(g, a)?));
                }
            }
            Op::Scale(a, c) => out.push((a, self.scale(g, c)?)),
            Op::AddScalar(a, _) => out.push((a, g)),
            Op::PowScalar(a, p) => {
                if p == 0.0 {
                    let shape = self.shape(a).to_vec();
                    out.push((a, self.constant(Tensor::zeros(&shape))));
                } else if p == 1.0 {
                    out.push((a, g));
                } else {
                    let d = if p == 2.0 {
                        self.scale(a, 2.0)?
                    } else {
                        let pm = self.pow_scalar(a, p - 1.0)?;
                        self.scale(pm, p)?
                    };
                    out.push((a, self.mul(g, d)?));
                }
            }
            Op::Exp(a) => out.push((a, self.mul(g, id)?)),
            Op::Log(a) => {
                let inv = self.pow_scalar(a, -1.0)?;
                out.push((a, self.mul(g, inv)?));
            }
            Op::Sigmoid(a) => {
                // σ' = σ − σ²
                let s2 = self.square(id)?;
                let d = self.sub(id, s2)?;
                out.push((a, self.mul(g, d)?));
            }
            Op::Swish(a) => {
                // d/dx xσ(x) = σ + x(σ − σ²)
                let s = self.sigmoid(a)?;
                let s2 = self.square(s)?;
                let ds = self.sub(s, s2)?;
                let xds = self.mul(a, ds)?;
                let d = self.add(s, xds)?;
                out.push((a, self.mul(g, d)?));
            }
            Op::LogSigmoid(a) => {
                let floor = LOG_SIGMOID_FLOOR_PROB.ln();
                let d = self
                    .value(a)
                    .map(|x| if log_sigmoid(x) > floor { sigmoid(-x) } else { 0.0 });
                let dc = self.constant(d);
                out.push((a, self.mul(g, dc)?));
            }
            Op::MatMul(a, b) => {
                if r(a) {
                    let bt = self.transpose(b)?;
                    out.push((a, self.matmul(g, bt)?));
                }
                if r(b) {
                    let at = self.transpose(a)?;
                    out.push((b, self.matmul(at, g)?));
                }
            }
            Op::Transpose(a) => out.push((a, self.transpose(g)?)),
            Op::Conv2d { x, w } => {
                if r(x) {
                    out.push((x, self.push(Op::Conv2dBackInput { g, w })?));
                }
                if r(w) {
                    let k = self.shape(w)[2];
                    out.push((w, self.push(Op::Conv2dBackWeight { x, g, k })?));
                }
            }
            Op::Conv2dBackInput { g: inner, w } => {
                // z = convᵀ(inner, w): ∂/∂inner = conv(g, w), ∂/∂w = conv_bw(g, inner)
                if r(inner) {
                    out.push((inner, self.push(Op::Conv2d { x: g, w })?));
                }
                if r(w) {
                    let k = self.shape(w)[2];
                    out.push((w, self.push(Op::Conv2dBackWeight { x: g, g: inner, k })?));
                }
            }
            Op::Conv2dBackWeight { x, g: inner, .. } => {
                // z = conv_bw(x, inner): ∂/∂x = convᵀ(inner, g), ∂/∂inner = conv(x, g)
                if r(x) {
                    out.push((x, self.push(Op::Conv2dBackInput { g: inner, w: g })?));
                }
                if r(inner) {
                    out.push((inner, self.push(Op::Conv2d { x, w: g })?));
                }
            }
            Op::AvgPool2(a) => {
                let up = self.upsample2(g)?;
                out.push((a, self.scale(up, 0.25)?));
            }
            Op::Upsample2(a) => {
                let down = self.avg_pool2(g)?;
                out.push((a, self.scale(down, 4.0)?));
            }
            Op::ChannelSum(a) => {
                let shape = self.shape(a).to_vec();
                out.push((a, self.channel_broadcast(g, &shape)?));
            }
            Op::ChannelBroadcast(a, _) => out.push((a, self.channel_sum(g)?)),
            Op::SampleSum(a) => {
                let shape = self.shape(a).to_vec();
                out.push((a, self.sample_broadcast(g, &shape)?));
            }
            Op::SampleBroadcast(a, _) => out.push((a, self.sample_sum(g)?)),
            Op::SumAll(a) => {
                let shape = self.shape(a).to_vec();
                out.push((a, self.broadcast_scalar(g, &shape)?));
            }
            Op::BroadcastScalar(a, _) => {
                let s = self.sum(g)?;
                let shape = self.shape(a).to_vec();
                out.push((a, self.reshape(s, &shape)?));
            }
            Op::Reshape(a, _) => {
                let shape = self.shape(a).to_vec();
                out.push((a, self.reshape(g, &shape)?));
            }
        }
        Ok(out)
    }

    /// Recomputes every non-leaf node from its parents and reports the first
    /// node whose stored value differs bit-for-bit.
    pub fn verify_replay(&self) -> Result<Option<NodeId>> {
        for (i, node) in self.nodes.iter().enumerate() {
            for p in node.op.parents() {
                if p.0 >= i {
                    return Err(WinnError::config(format!("node #{i} references later node {p}")));
                }
            }
            if matches!(node.op, Op::Leaf | Op::Constant) {
                continue;
            }
            let again = self.compute(&node.op, i)?;
            let same = again.shape() == node.value.shape()
                && again
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Ok(Some(NodeId(i)));
            }
        }
        Ok(None)
    }
}

fn check_conv(id: usize, op: &Op, sx: &[usize], sw: &[usize]) -> Result<()> {
    if sx.len() != 4 || sw.len() != 4 {
        return Err(shape_err(id, op, format!("input {sx:?}, weight {sw:?}: both must be 4-D")));
    }
    if sx[1] != sw[1] {
        return Err(shape_err(
            id,
            op,
            format!("input has {} channels but weight expects {}", sx[1], sw[1]),
        ));
    }
    if sw[2] != sw[3] || sw[2] % 2 == 0 {
        return Err(shape_err(id, op, format!("kernel must be square and odd, got {sw:?}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.square(x).unwrap();
        let d = g.grad_values(y, &[x]).unwrap();
        assert_eq!(d[0].item(), 6.0);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn(&[2, 3], |i| i as f64));
        let c = g.constant(Tensor::scalar(4.0));
        let y = g.scale(c, 2.0).unwrap();
        let d = g.grad_values(y, &[x]).unwrap();
        assert_eq!(d[0], Tensor::zeros(&[2, 3]));
    }

    #[test]
    fn swish_at_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.0));
        let y = g.swish(x).unwrap();
        assert_eq!(g.value(y).item(), 0.0);
    }

    #[test]
    fn non_scalar_root_is_usage_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[3]));
        let y = g.scale(x, 2.0).unwrap();
        assert!(matches!(g.grad(y, &[x]), Err(WinnError::Usage(_))));
    }

    #[test]
    fn shape_mismatch_names_node() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[3]));
        let b = g.leaf(Tensor::zeros(&[4]));
        let err = g.add(a, b).unwrap_err();
        assert!(err.to_string().contains("#2 (add)"), "{err}");
        assert!(matches!(err, WinnError::Config(_)));
    }

    #[test]
    fn non_finite_is_numeric_error() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::scalar(0.0));
        let err = g.log(a).unwrap_err();
        assert!(matches!(err, WinnError::Numeric { .. }));
        assert!(err.to_string().contains("#1"));
    }

    #[test]
    fn dropout_eval_is_identity_and_train_mask_is_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn(&[4, 8], |i| i as f64 * 0.1 - 1.0));
        let y = g.dropout(x, 0.5, Mode::Eval, &mut rng).unwrap();
        assert_eq!(y, x);
        let y = g.dropout(x, 0.5, Mode::Train, &mut rng).unwrap();
        let s = g.sum(y).unwrap();
        let d = g.grad_values(s, &[x]).unwrap();
        // gradient equals the mask, and the forward output is x * mask
        for ((dv, xv), yv) in d[0].data().iter().zip(g.value(x).data()).zip(g.value(y).data()) {
            assert!(*dv == 0.0 || *dv == 2.0);
            assert_eq!(*yv, xv * dv);
        }
    }

    #[test]
    fn linear_penalty_closed_form() {
        // f(x) = w·x, penalty (‖w‖ − 1)², d/dw = 2(‖w‖ − 1) w / ‖w‖
        let wv = [0.3, -1.2, 0.7];
        let mut g = Graph::new();
        let w = g.leaf(Tensor::new(vec![3, 1], wv.to_vec()).unwrap());
        let x = g.leaf(Tensor::new(vec![1, 3], vec![0.5, 0.1, -0.4]).unwrap());
        let y = g.matmul(x, w).unwrap();
        let f = g.sum(y).unwrap();
        let (p, grads) = g
            .grad_of_input_grad(f, x, &[w], |g, gx| {
                let n = g.l2_norm(gx)?;
                let m = g.add_scalar(n, -1.0)?;
                g.square(m)
            })
            .unwrap();
        let norm = wv.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((g.value(p).item() - (norm - 1.0).powi(2)).abs() < 1e-14);
        for (i, v) in g.value(grads[0]).data().iter().enumerate() {
            let want = 2.0 * (norm - 1.0) * wv[i] / norm;
            assert!((v - want).abs() < 1e-14, "{v} vs {want}");
        }
    }

    #[test]
    fn unit_norm_linear_penalty_gradient_is_zero() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::new(vec![2, 1], vec![0.6, 0.8]).unwrap());
        let x = g.leaf(Tensor::new(vec![1, 2], vec![0.5, 0.1]).unwrap());
        let y = g.matmul(x, w).unwrap();
        let f = g.sum(y).unwrap();
        let (_, grads) = g
            .grad_of_input_grad(f, x, &[w], |g, gx| {
                let n = g.l2_norm(gx)?;
                let m = g.add_scalar(n, -1.0)?;
                g.square(m)
            })
            .unwrap();
        assert!(g.value(grads[0]).max_abs() < 1e-15);
    }

    #[test]
    fn log_sigmoid_blocks_double_backward() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 2], vec![0.5, 0.1]).unwrap());
        let w = g.leaf(Tensor::new(vec![2, 1], vec![0.6, 0.8]).unwrap());
        let y = g.matmul(x, w).unwrap();
        let l = g.log_sigmoid(y).unwrap();
        let f = g.sum(l).unwrap();
        let err = g
            .grad_of_input_grad(f, x, &[w], |g, gx| g.l2_norm(gx))
            .unwrap_err();
        match err {
            WinnError::Capability(msg) => assert!(msg.contains("log_sigmoid")),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn replay_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut rng));
        let w = g.leaf(Tensor::uniform(&[2, 3, 3, 3], -1.0, 1.0, &mut rng));
        let y = g.conv2d(x, w).unwrap();
        let y = g.swish(y).unwrap();
        let y = g.avg_pool2(y).unwrap();
        let s = g.sum(y).unwrap();
        g.grad(s, &[x, w]).unwrap();
        assert_eq!(g.verify_replay().unwrap(), None);
    }
}
