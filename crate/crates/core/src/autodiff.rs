//! Tape-based reverse-mode differentiation, named parameters, Adam and checkpoints.
//!
//! A [`Graph`] is built fresh for every batch: each op appends a node holding its
//! output, so node ids are topologically ordered by construction. Parameters live
//! outside the graph in a [`ParamStore`]; the graph copies their values in and
//! [`Graph::backward`] accumulates gradients back into the store.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::error::{Error, Result};
use crate::kernels::{self, Dims4};
use crate::tensor::{atomic_write, gemm, rng_from_seed, ByteReader, Layout, Rng64, Scalar, Tensor};

pub type NodeId = usize;

/// Named input tensors fed to a model's forward pass.
pub type NamedTensors<T> = BTreeMap<String, Tensor<T>>;

/// Looks up a bound input by name.
pub fn bound<'a, T: Scalar>(inputs: &'a NamedTensors<T>, name: &str) -> Result<&'a Tensor<T>> {
    inputs.get(name).ok_or_else(|| Error::UnboundInput(name.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Parameter<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

/// Parameters in registration order, addressable by id or by unique name.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Graph(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.dims());
        self.params.push(Parameter { name: name.to_string(), value, grad, trainable });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
        }
    }

    /// Number of trainable scalars whose name starts with `prefix`.
    pub fn trainable_count(&self, prefix: &str) -> usize {
        self.params.iter().filter(|p| p.trainable && p.name.starts_with(prefix)).map(|p| p.value.len()).sum()
    }

    /// `(name, dims)` for every parameter, in registration order.
    pub fn signature(&self) -> Vec<(String, Vec<usize>)> {
        self.params.iter().map(|p| (p.name.clone(), p.value.dims().to_vec())).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Input,
    Param(ParamId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    ScaleSum(Vec<(NodeId, T)>),
    Sum(NodeId),
    Mean(NodeId),
    Relu(NodeId),
    Reshape(NodeId),
    Concat(Vec<NodeId>),
    SliceChannels { x: NodeId, start: usize },
    Conv2d { x: NodeId, kernel: NodeId, bias: Option<NodeId>, k: usize },
    Depthwise { x: NodeId, kernel: NodeId, k: usize },
    MaxPool { x: NodeId, argmax: Vec<usize> },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Dropout { x: NodeId, mask: Vec<T> },
    Linear { x: NodeId, weight: NodeId, bias: NodeId },
    WeightedSum { inputs: Vec<NodeId>, weights: NodeId },
    Softmax(NodeId),
    SoftmaxCrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Vec<T> },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::ScaleSum(_) => "scale_sum",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Relu(_) => "relu",
            Op::Reshape(_) => "reshape",
            Op::Concat(_) => "concat",
            Op::SliceChannels { .. } => "slice_channels",
            Op::Conv2d { .. } => "conv2d",
            Op::Depthwise { .. } => "depthwise_conv2d",
            Op::MaxPool { .. } => "max_pool",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Dropout { .. } => "dropout",
            Op::Linear { .. } => "linear",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Softmax(_) => "softmax",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node<T: Scalar> {
    op: Op<T>,
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
}

/// One batch worth of computation, recorded in execution order.
#[derive(Debug)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    mode: Mode,
    rng: Rng64,
    stat_updates: Vec<(ParamId, Tensor<T>)>,
    backward_done: bool,
}

fn dims4(t: &Tensor<impl Scalar>, op: &str, id: NodeId) -> Result<Dims4> {
    Dims4::from_slice(t.dims()).ok_or_else(|| Error::Graph(format!("{op} (node {id}) expects N,C,H,W input, got {}", t.shape())))
}

impl<T: Scalar> Graph<T> {
    /// `dropout_seed` drives every dropout mask drawn on this graph.
    pub fn new(mode: Mode, dropout_seed: u64) -> Self {
        Graph { nodes: Vec::new(), mode, rng: rng_from_seed(dropout_seed), stat_updates: Vec::new(), backward_done: false }
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

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id].grad.as_ref()
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id].op.name()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> NodeId {
        let requires_grad = match &op {
            Op::Input => false,
            Op::Param(_) => unreachable!("params are pushed through Graph::param"),
            other => self.inputs_of(other).iter().any(|&i| self.nodes[i].requires_grad),
        };
        if cfg!(debug_assertions) && !value.all_finite() {
            log::warn!("non-finite output from {} (node {})", op.name(), self.nodes.len());
        }
        self.nodes.push(Node { op, value, grad: None, requires_grad });
        self.nodes.len() - 1
    }

    fn inputs_of(&self, op: &Op<T>) -> Vec<NodeId> {
        match op {
            Op::Input | Op::Param(_) => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::ScaleSum(terms) => terms.iter().map(|t| t.0).collect(),
            Op::Sum(a) | Op::Mean(a) | Op::Relu(a) | Op::Reshape(a) | Op::Softmax(a) => vec![*a],
            Op::Concat(xs) => xs.clone(),
            Op::SliceChannels { x, .. } | Op::MaxPool { x, .. } | Op::Dropout { x, .. } => vec![*x],
            Op::Conv2d { x, kernel, bias, .. } => {
                let mut v = vec![*x, *kernel];
                v.extend(bias);
                v
            }
            Op::Depthwise { x, kernel, .. } => vec![*x, *kernel],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Linear { x, weight, bias } => vec![*x, *weight, *bias],
            Op::WeightedSum { inputs, weights } => {
                let mut v = inputs.clone();
                v.push(*weights);
                v
            }
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }

    fn mismatch(&self, op: &str, a: NodeId, b: NodeId) -> Error {
        Error::mismatch(&format!("{op} (node {})", self.nodes.len()), self.nodes[a].value.dims(), self.nodes[b].value.dims())
    }

    /// Constant input; no gradient is tracked for it.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Input, value)
    }

    /// Input whose gradient is kept after backward (used by gradient checks).
    pub fn input_with_grad(&mut self, value: Tensor<T>) -> NodeId {
        let id = self.push(Op::Input, value);
        self.nodes[id].requires_grad = true;
        id
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        let p = store.get(id);
        self.nodes.push(Node { op: Op::Param(id), value: p.value.clone(), grad: None, requires_grad: p.trainable });
        self.nodes.len() - 1
    }

    /// `a + b`, where `b` may also be a trailing-dimension broadcast (e.g. a bias).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a]
            .value
            .map_binary(&self.nodes[b].value, crate::tensor::BinaryOp::Add)
            .map_err(|_| self.mismatch("add", a, b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a].value.dims() != self.nodes[b].value.dims() {
            return Err(self.mismatch("sub", a, b));
        }
        let v = self.nodes[a].value.map_binary(&self.nodes[b].value, crate::tensor::BinaryOp::Sub)?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a].value.dims() != self.nodes[b].value.dims() {
            return Err(self.mismatch("mul", a, b));
        }
        let v = self.nodes[a].value.map_binary(&self.nodes[b].value, crate::tensor::BinaryOp::Mul)?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    /// `sum_i c_i * x_i` over equally shaped nodes.
    pub fn scale_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let first = terms.first().ok_or_else(|| Error::Graph("scale_sum of no terms".into()))?.0;
        let dims = self.nodes[first].value.dims().to_vec();
        let mut out = Tensor::zeros(&dims);
        let mut kept = Vec::with_capacity(terms.len());
        for &(id, c) in terms {
            if self.nodes[id].value.dims() != dims.as_slice() {
                return Err(self.mismatch("scale_sum", first, id));
            }
            let c = T::from_f64(c);
            for (o, &x) in out.data_mut().iter_mut().zip(self.nodes[id].value.data()) {
                *o = *o + c * x;
            }
            kept.push((id, c));
        }
        Ok(self.push(Op::ScaleSum(kept), out))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a].value.data().iter().copied().sum::<T>();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a].value;
        let s = v.data().iter().copied().sum::<T>() / T::from_f64(v.len() as f64);
        self.push(Op::Mean(a), Tensor::scalar(s))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(Op::Relu(a), v)
    }

    pub fn reshape(&mut self, a: NodeId, dims: &[usize]) -> Result<NodeId> {
        let v = self.nodes[a].value.clone().reshape(dims)?;
        Ok(self.push(Op::Reshape(a), v))
    }

    /// `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, a: NodeId) -> Result<NodeId> {
        let d = self.nodes[a].value.dims();
        let n = d[0];
        let rest = self.nodes[a].value.len() / n;
        self.reshape(a, &[n, rest])
    }

    /// Concatenates `N, C_i, H, W` tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let first = *xs.first().ok_or_else(|| Error::Graph("concat of no inputs".into()))?;
        let d0 = dims4(&self.nodes[first].value, "concat", self.nodes.len())?;
        let mut total_c = 0;
        for &x in xs {
            let d = dims4(&self.nodes[x].value, "concat", self.nodes.len())?;
            if (d.n, d.h, d.w) != (d0.n, d0.h, d0.w) {
                return Err(self.mismatch("concat", first, x));
            }
            total_c += d.c;
        }
        let plane = d0.plane();
        let mut out = Vec::with_capacity(d0.n * total_c * plane);
        for s in 0..d0.n {
            for &x in xs {
                let v = &self.nodes[x].value;
                let per = v.dims()[1] * plane;
                out.extend_from_slice(&v.data()[s * per..(s + 1) * per]);
            }
        }
        let t = Tensor::new(&[d0.n, total_c, d0.h, d0.w], out)?;
        Ok(self.push(Op::Concat(xs.to_vec()), t))
    }

    /// Channels `start..start+len` of an `N, C, H, W` tensor.
    pub fn slice_channels(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let d = dims4(&self.nodes[x].value, "slice_channels", self.nodes.len())?;
        if len == 0 || start + len > d.c {
            return Err(Error::Graph(format!(
                "slice_channels (node {}): channels {start}..{} out of range for {}",
                self.nodes.len(),
                start + len,
                d.c
            )));
        }
        let plane = d.plane();
        let src = self.nodes[x].value.data();
        let mut out = Vec::with_capacity(d.n * len * plane);
        for s in 0..d.n {
            let base = (s * d.c + start) * plane;
            out.extend_from_slice(&src[base..base + len * plane]);
        }
        let t = Tensor::new(&[d.n, len, d.h, d.w], out)?;
        Ok(self.push(Op::SliceChannels { x, start }, t))
    }

    /// SAME-padded stride-1 convolution; `kernel` is `[K, C, k, k]` with odd `k`.
    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let here = self.nodes.len();
        let d = dims4(&self.nodes[x].value, "conv2d", here)?;
        let kd = self.nodes[kernel].value.dims().to_vec();
        if kd.len() != 4 || kd[1] != d.c || kd[2] != kd[3] || kd[2].is_multiple_of(2) {
            return Err(self.mismatch("conv2d", x, kernel));
        }
        if let Some(b) = bias {
            if self.nodes[b].value.dims() != [kd[0]] {
                return Err(self.mismatch("conv2d bias", kernel, b));
            }
        }
        let out = kernels::conv2d_forward(
            self.nodes[x].value.data(),
            d,
            self.nodes[kernel].value.data(),
            kd[0],
            kd[2],
            bias.map(|b| self.nodes[b].value.data()),
        );
        let t = Tensor::new(&[d.n, kd[0], d.h, d.w], out)?;
        Ok(self.push(Op::Conv2d { x, kernel, bias, k: kd[2] }, t))
    }

    /// Depthwise (multiplier 1) SAME convolution; `kernel` is `[C, k, k]`.
    pub fn depthwise_conv2d(&mut self, x: NodeId, kernel: NodeId) -> Result<NodeId> {
        let d = dims4(&self.nodes[x].value, "depthwise_conv2d", self.nodes.len())?;
        let kd = self.nodes[kernel].value.dims().to_vec();
        if kd.len() != 3 || kd[0] != d.c || kd[1] != kd[2] || kd[1].is_multiple_of(2) {
            return Err(self.mismatch("depthwise_conv2d", x, kernel));
        }
        let out = kernels::depthwise_forward(self.nodes[x].value.data(), d, self.nodes[kernel].value.data(), kd[1]);
        let t = Tensor::new(self.nodes[x].value.dims(), out)?;
        Ok(self.push(Op::Depthwise { x, kernel, k: kd[1] }, t))
    }

    /// 2x2 stride-2 max pooling (floor).
    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let d = dims4(&self.nodes[x].value, "max_pool", self.nodes.len())?;
        if d.h < 2 || d.w < 2 {
            return Err(Error::Graph(format!("max_pool (node {}) needs H, W >= 2, got {}x{}", self.nodes.len(), d.h, d.w)));
        }
        let (out, argmax, od) = kernels::max_pool2_forward(self.nodes[x].value.data(), d);
        let t = Tensor::new(&[od.n, od.c, od.h, od.w], out)?;
        Ok(self.push(Op::MaxPool { x, argmax }, t))
    }

    /// Batch normalization over `(N, H, W)` per channel. Accepts `[N, C]` or `[N, C, H, W]`.
    ///
    /// With `running == None` batch statistics are used (training); the returned
    /// `(mean, biased var)` let the caller update running averages. With
    /// `running == Some((mean, var))` those statistics are used instead.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: Option<(&Tensor<T>, &Tensor<T>)>,
        eps: f64,
    ) -> Result<(NodeId, Vec<T>, Vec<T>)> {
        let here = self.nodes.len();
        let xd = self.nodes[x].value.dims().to_vec();
        let d = match xd.len() {
            2 => Dims4 { n: xd[0], c: xd[1], h: 1, w: 1 },
            4 => Dims4 { n: xd[0], c: xd[1], h: xd[2], w: xd[3] },
            _ => return Err(Error::Graph(format!("batch_norm (node {here}) expects rank 2 or 4 input"))),
        };
        if self.nodes[gamma].value.dims() != [d.c] || self.nodes[beta].value.dims() != [d.c] {
            return Err(self.mismatch("batch_norm", x, gamma));
        }
        let train = running.is_none();
        if train && d.n * d.plane() < 2 {
            return Err(Error::Graph(format!("batch_norm (node {here}) in training mode needs a batch of at least 2")));
        }
        let (mean, var) = match running {
            None => kernels::channel_stats(self.nodes[x].value.data(), d),
            Some((m, v)) => {
                if m.dims() != [d.c] || v.dims() != [d.c] {
                    return Err(Error::mismatch("batch_norm running stats", &[d.c], m.dims()));
                }
                (m.data().to_vec(), v.data().to_vec())
            }
        };
        let eps = T::from_f64(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xs = self.nodes[x].value.data();
        let g = self.nodes[gamma].value.data();
        let b = self.nodes[beta].value.data();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        let plane = d.plane();
        for s in 0..d.n {
            for ch in 0..d.c {
                let base = (s * d.c + ch) * plane;
                for i in base..base + plane {
                    let xh = (xs[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + b[ch];
                }
            }
        }
        let t = Tensor::new(&xd, out)?;
        let id = self.push(Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }, t);
        Ok((id, mean, var))
    }

    /// Inverted dropout with drop probability `p`; identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, x: NodeId, p: f64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let n = self.nodes[x].value.len();
        let mask: Vec<T> = (0..n).map(|_| if crate::tensor::unit(&mut self.rng) < p { T::zero() } else { keep }).collect();
        let v = self.nodes[x].value.data();
        let out: Vec<T> = v.iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let t = Tensor::new(self.nodes[x].value.dims(), out)?;
        Ok(self.push(Op::Dropout { x, mask }, t))
    }

    /// `x[N, D] * W^T + b` with `W` stored as `[D', D]`.
    pub fn linear(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let xd = self.nodes[x].value.dims().to_vec();
        let wd = self.nodes[weight].value.dims().to_vec();
        if xd.len() != 2 || wd.len() != 2 || wd[1] != xd[1] {
            return Err(self.mismatch("linear", x, weight));
        }
        if self.nodes[bias].value.dims() != [wd[0]] {
            return Err(self.mismatch("linear bias", weight, bias));
        }
        let (n, din, dout) = (xd[0], xd[1], wd[0]);
        let b = self.nodes[bias].value.data();
        let mut out = Vec::with_capacity(n * dout);
        for _ in 0..n {
            out.extend_from_slice(b);
        }
        gemm(
            n,
            din,
            dout,
            T::one(),
            self.nodes[x].value.data(),
            Layout::row_major(din),
            self.nodes[weight].value.data(),
            Layout::transposed(din),
            T::one(),
            &mut out,
            Layout::row_major(dout),
        );
        let t = Tensor::new(&[n, dout], out)?;
        Ok(self.push(Op::Linear { x, weight, bias }, t))
    }

    /// `sum_i w[i] * v_i` over equally shaped `v_i`, with trainable `w`.
    pub fn weighted_sum(&mut self, inputs: &[NodeId], weights: NodeId) -> Result<NodeId> {
        let first = *inputs.first().ok_or_else(|| Error::Graph("weighted_sum of no inputs".into()))?;
        if self.nodes[weights].value.dims() != [inputs.len()] {
            return Err(self.mismatch("weighted_sum weights", first, weights));
        }
        let dims = self.nodes[first].value.dims().to_vec();
        let mut out = Tensor::zeros(&dims);
        for (i, &v) in inputs.iter().enumerate() {
            if self.nodes[v].value.dims() != dims.as_slice() {
                return Err(self.mismatch("weighted_sum", first, v));
            }
            let w = self.nodes[weights].value.data()[i];
            for (o, &x) in out.data_mut().iter_mut().zip(self.nodes[v].value.data()) {
                *o = *o + w * x;
            }
        }
        Ok(self.push(Op::WeightedSum { inputs: inputs.to_vec(), weights }, out))
    }

    /// Row-wise softmax of `[N, c]` logits.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let xd = self.nodes[x].value.dims().to_vec();
        if xd.len() != 2 {
            return Err(Error::Graph(format!("softmax (node {}) expects [N, c]", self.nodes.len())));
        }
        let probs = softmax_rows(self.nodes[x].value.data(), xd[1]);
        let t = Tensor::new(&xd, probs)?;
        Ok(self.push(Op::Softmax(x), t))
    }

    /// Mean categorical cross-entropy of `softmax(logits)` against 0-based `labels`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let xd = self.nodes[logits].value.dims().to_vec();
        if xd.len() != 2 || xd[0] != labels.len() {
            return Err(Error::mismatch(&format!("softmax_cross_entropy (node {})", self.nodes.len()), &xd, &[labels.len()]));
        }
        let c = xd[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(format!("label index {bad} out of range for {c} classes")));
        }
        let probs = softmax_rows(self.nodes[logits].value.data(), c);
        let logits_v = self.nodes[logits].value.data();
        let mut loss = 0.0f64;
        for (i, &l) in labels.iter().enumerate() {
            // log-softmax computed directly from logits for accuracy at p -> 0
            let row = &logits_v[i * c..(i + 1) * c];
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = m.as_f64() + row.iter().map(|&z| (z - m).as_f64().exp()).sum::<f64>().ln();
            loss += lse - row[l].as_f64();
        }
        let loss = T::from_f64(loss / labels.len() as f64);
        Ok(self.push(Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs }, Tensor::scalar(loss)))
    }

    /// Running-statistic updates recorded during a training forward pass.
    pub fn record_stat_update(&mut self, id: ParamId, value: Tensor<T>) {
        self.stat_updates.push((id, value));
    }

    /// Writes recorded running statistics into `store`.
    pub fn commit_stat_updates(&mut self, store: &mut ParamStore<T>) {
        for (id, v) in self.stat_updates.drain(..) {
            store.get_mut(id).value = v;
        }
    }

    /// Reverse pass from the scalar `loss` node. Gradients of trainable parameters
    /// are accumulated into `store`; gradients of inputs created with
    /// [`Graph::input_with_grad`] stay readable through [`Graph::grad`].
    pub fn backward(&mut self, loss: NodeId, store: &mut ParamStore<T>) -> Result<()> {
        if self.nodes.is_empty() || loss >= self.nodes.len() {
            return Err(Error::Graph("backward called before forward".into()));
        }
        if self.backward_done {
            return Err(Error::Graph("backward already ran on this graph".into()));
        }
        if self.nodes[loss].value.len() != 1 {
            return Err(Error::Graph(format!("loss node {loss} is not scalar: {}", self.nodes[loss].value.shape())));
        }
        self.backward_done = true;
        self.nodes[loss].grad = Some(Tensor::full(self.nodes[loss].value.dims(), T::one()));
        for id in (0..=loss).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[id].grad.take() else { continue };
            let contributions = self.local_grads(id, &g)?;
            self.nodes[id].grad = Some(g);
            for (target, grad) in contributions {
                if !self.nodes[target].requires_grad {
                    continue;
                }
                match &mut self.nodes[target].grad {
                    Some(existing) => existing.add_assign(&grad)?,
                    slot @ None => *slot = Some(grad),
                }
            }
            if let Op::Param(pid) = self.nodes[id].op {
                let g = self.nodes[id].grad.as_ref().unwrap();
                let p = store.get_mut(pid);
                if p.trainable {
                    p.grad.add_assign(g)?;
                }
            }
        }
        Ok(())
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    /// Gradients flowing from node `id` (with upstream gradient `g`) to its inputs.
    fn local_grads(&self, id: NodeId, g: &Tensor<T>) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let node = &self.nodes[id];
        let gd = g.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                if self.wants(*b) {
                    let bd = self.nodes[*b].value.dims().to_vec();
                    let bl = self.nodes[*b].value.len();
                    let mut gb = vec![T::zero(); bl];
                    for (i, &x) in gd.iter().enumerate() {
                        gb[i % bl] = gb[i % bl] + x;
                    }
                    out.push((*b, Tensor::new(&bd, gb)?));
                }
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.map(|x| -x)));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.wants(*a) {
                    out.push((*a, Tensor::new(av.dims(), gd.iter().zip(bv.data()).map(|(&x, &y)| x * y).collect())?));
                }
                if self.wants(*b) {
                    out.push((*b, Tensor::new(bv.dims(), gd.iter().zip(av.data()).map(|(&x, &y)| x * y).collect())?));
                }
            }
            Op::ScaleSum(terms) => {
                for &(t, c) in terms {
                    if self.wants(t) {
                        out.push((t, g.map(|x| x * c)));
                    }
                }
            }
            Op::Sum(a) => {
                out.push((*a, Tensor::full(self.nodes[*a].value.dims(), gd[0])));
            }
            Op::Mean(a) => {
                let v = &self.nodes[*a].value;
                out.push((*a, Tensor::full(v.dims(), gd[0] / T::from_f64(v.len() as f64))));
            }
            Op::Relu(a) => {
                let xv = self.nodes[*a].value.data();
                let data = gd.iter().zip(xv).map(|(&gi, &x)| if x > T::zero() { gi } else { T::zero() }).collect();
                out.push((*a, Tensor::new(self.nodes[*a].value.dims(), data)?));
            }
            Op::Reshape(a) => {
                out.push((*a, g.clone().reshape(self.nodes[*a].value.dims())?));
            }
            Op::Concat(xs) => {
                let d = Dims4::from_slice(node.value.dims()).unwrap();
                let plane = d.plane();
                let mut offset = 0;
                for &x in xs {
                    let c = self.nodes[x].value.dims()[1];
                    if self.wants(x) {
                        let mut gx = Vec::with_capacity(d.n * c * plane);
                        for s in 0..d.n {
                            let base = (s * d.c + offset) * plane;
                            gx.extend_from_slice(&gd[base..base + c * plane]);
                        }
                        out.push((x, Tensor::new(self.nodes[x].value.dims(), gx)?));
                    }
                    offset += c;
                }
            }
            Op::SliceChannels { x, start } => {
                let xd = Dims4::from_slice(self.nodes[*x].value.dims()).unwrap();
                let len = node.value.dims()[1];
                let plane = xd.plane();
                let mut gx = vec![T::zero(); xd.numel()];
                for s in 0..xd.n {
                    let dst = (s * xd.c + start) * plane;
                    let src = s * len * plane;
                    gx[dst..dst + len * plane].copy_from_slice(&gd[src..src + len * plane]);
                }
                out.push((*x, Tensor::new(self.nodes[*x].value.dims(), gx)?));
            }
            Op::Conv2d { x, kernel, bias, k } => {
                let xv = &self.nodes[*x].value;
                let kv = &self.nodes[*kernel].value;
                let d = Dims4::from_slice(xv.dims()).unwrap();
                let out_ch = kv.dims()[0];
                let mut dx = self.wants(*x).then(|| vec![T::zero(); xv.len()]);
                let mut dk = self.wants(*kernel).then(|| vec![T::zero(); kv.len()]);
                let mut db = bias.filter(|b| self.wants(*b)).map(|_| vec![T::zero(); out_ch]);
                kernels::conv2d_backward(
                    xv.data(),
                    d,
                    kv.data(),
                    out_ch,
                    *k,
                    gd,
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(v) = dx {
                    out.push((*x, Tensor::new(xv.dims(), v)?));
                }
                if let Some(v) = dk {
                    out.push((*kernel, Tensor::new(kv.dims(), v)?));
                }
                if let (Some(b), Some(v)) = (bias, db) {
                    out.push((*b, Tensor::new(&[out_ch], v)?));
                }
            }
            Op::Depthwise { x, kernel, k } => {
                let xv = &self.nodes[*x].value;
                let kv = &self.nodes[*kernel].value;
                let d = Dims4::from_slice(xv.dims()).unwrap();
                let mut dx = self.wants(*x).then(|| vec![T::zero(); xv.len()]);
                let mut dk = self.wants(*kernel).then(|| vec![T::zero(); kv.len()]);
                kernels::depthwise_backward(xv.data(), d, kv.data(), *k, gd, dx.as_deref_mut(), dk.as_deref_mut());
                if let Some(v) = dx {
                    out.push((*x, Tensor::new(xv.dims(), v)?));
                }
                if let Some(v) = dk {
                    out.push((*kernel, Tensor::new(kv.dims(), v)?));
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = vec![T::zero(); self.nodes[*x].value.len()];
                for (&src, &gi) in argmax.iter().zip(gd) {
                    gx[src] = gx[src] + gi;
                }
                out.push((*x, Tensor::new(self.nodes[*x].value.dims(), gx)?));
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let xd = self.nodes[*x].value.dims();
                let (n, c) = (xd[0], xd[1]);
                let plane: usize = xd[2..].iter().product();
                let gamma_v = self.nodes[*gamma].value.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * plane;
                        for i in base..base + plane {
                            dgamma[ch] = dgamma[ch] + gd[i] * xhat[i];
                            dbeta[ch] = dbeta[ch] + gd[i];
                        }
                    }
                }
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); gd.len()];
                    let m = T::from_f64((n * plane) as f64);
                    for ch in 0..c {
                        let scale = gamma_v[ch] * inv_std[ch];
                        for s in 0..n {
                            let base = (s * c + ch) * plane;
                            for i in base..base + plane {
                                gx[i] = if *train {
                                    // dx = g*inv_std/M * (M*dy - sum(dy) - xhat*sum(dy*xhat))
                                    scale / m * (m * gd[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                                } else {
                                    scale * gd[i]
                                };
                            }
                        }
                    }
                    out.push((*x, Tensor::new(xd, gx)?));
                }
                out.push((*gamma, Tensor::new(&[c], dgamma)?));
                out.push((*beta, Tensor::new(&[c], dbeta)?));
            }
            Op::Dropout { x, mask } => {
                let data = gd.iter().zip(mask).map(|(&gi, &m)| gi * m).collect();
                out.push((*x, Tensor::new(self.nodes[*x].value.dims(), data)?));
            }
            Op::Linear { x, weight, bias } => {
                let xv = &self.nodes[*x].value;
                let wv = &self.nodes[*weight].value;
                let (n, din) = (xv.dims()[0], xv.dims()[1]);
                let dout = wv.dims()[0];
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); n * din];
                    gemm(
                        n,
                        dout,
                        din,
                        T::one(),
                        gd,
                        Layout::row_major(dout),
                        wv.data(),
                        Layout::row_major(din),
                        T::zero(),
                        &mut gx,
                        Layout::row_major(din),
                    );
                    out.push((*x, Tensor::new(xv.dims(), gx)?));
                }
                if self.wants(*weight) {
                    let mut gw = vec![T::zero(); dout * din];
                    gemm(
                        dout,
                        n,
                        din,
                        T::one(),
                        gd,
                        Layout::transposed(dout),
                        xv.data(),
                        Layout::row_major(din),
                        T::zero(),
                        &mut gw,
                        Layout::row_major(din),
                    );
                    out.push((*weight, Tensor::new(wv.dims(), gw)?));
                }
                if self.wants(*bias) {
                    let mut gb = vec![T::zero(); dout];
                    for row in gd.chunks_exact(dout) {
                        for (b, &x) in gb.iter_mut().zip(row) {
                            *b = *b + x;
                        }
                    }
                    out.push((*bias, Tensor::new(&[dout], gb)?));
                }
            }
            Op::WeightedSum { inputs, weights } => {
                let w = self.nodes[*weights].value.data();
                let mut gw = vec![T::zero(); inputs.len()];
                for (i, &v) in inputs.iter().enumerate() {
                    gw[i] = gd.iter().zip(self.nodes[v].value.data()).map(|(&a, &b)| a * b).sum();
                    if self.wants(v) {
                        out.push((v, g.map(|x| x * w[i])));
                    }
                }
                out.push((*weights, Tensor::new(&[inputs.len()], gw)?));
            }
            Op::Softmax(x) => {
                let c = node.value.dims()[1];
                let p = node.value.data();
                let mut gx = vec![T::zero(); p.len()];
                for (r, (prow, grow)) in p.chunks_exact(c).zip(gd.chunks_exact(c)).enumerate() {
                    let dot: T = prow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        gx[r * c + j] = prow[j] * (grow[j] - dot);
                    }
                }
                out.push((*x, Tensor::new(node.value.dims(), gx)?));
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let c = self.nodes[*logits].value.dims()[1];
                let scale = gd[0] / T::from_f64(labels.len() as f64);
                let mut gx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    gx[i * c + l] = gx[i * c + l] - scale;
                }
                out.push((*logits, Tensor::new(self.nodes[*logits].value.dims(), gx)?));
            }
        }
        Ok(out)
    }
}

/// Numerically stable row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(x: &[T], c: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(c) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let start = out.len();
        let mut s = T::zero();
        for &z in row {
            let e = (z - m).exp();
            s = s + e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v = *v / s;
        }
    }
    out
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub t: u64,
    first: Vec<Option<Tensor<T>>>,
    second: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(lr: f64) -> Self {
        Self::with_hyper(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        AdamState { lr, beta1, beta2, epsilon, t: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn first_moment(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.first.get(id.0).and_then(|m| m.as_ref())
    }

    pub fn second_moment(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.second.get(id.0).and_then(|m| m.as_ref())
    }

    /// One update of every trainable parameter, then zeroes all gradients.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        self.t += 1;
        let n = store.len();
        self.first.resize(n, None);
        self.second.resize(n, None);
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let bc1 = T::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = T::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.epsilon);
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let dims = p.value.dims().to_vec();
            let m = self.first[i].get_or_insert_with(|| Tensor::zeros(&dims));
            let v = self.second[i].get_or_insert_with(|| Tensor::zeros(&dims));
            if m.dims() != dims.as_slice() || v.dims() != dims.as_slice() {
                return Err(Error::mismatch(&format!("adam moments of `{}`", p.name), &dims, m.dims()));
            }
            let (md, vd) = (m.data_mut(), v.data_mut());
            let gd = p.grad.data();
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = gd[j];
                md[j] = b1 * md[j] + (one - b1) * g;
                vd[j] = b2 * vd[j] + (one - b2) * g * g;
                let mhat = md[j] / bc1;
                let vhat = vd[j] / bc2;
                *w = *w - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        store.zero_grads();
        Ok(())
    }
}

const CKPT_MAGIC: &[u8] = b"PCKPT1";
const ADAM_HYPER: &str = "adam/hyper";

/// Serializes every parameter (and optionally Adam moments) as `PCKPT1`:
/// magic, then records of `u16 name length, utf-8 name, PTNSR1 tensor` until EOF.
pub fn checkpoint_bytes<T: Scalar>(store: &ParamStore<T>, adam: Option<&AdamState<T>>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    let mut record = |name: &str, t: &Tensor<T>| {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        t.write_to(&mut out);
    };
    for (_, p) in store.iter() {
        record(&p.name, &p.value);
    }
    if let Some(a) = adam {
        let hyper =
            Tensor::new(&[5], [a.t as f64, a.lr, a.beta1, a.beta2, a.epsilon].iter().map(|&x| T::from_f64(x)).collect()).unwrap();
        record(ADAM_HYPER, &hyper);
        for (id, p) in store.iter() {
            if let Some(m) = a.first_moment(id) {
                record(&format!("adam/m/{}", p.name), m);
            }
            if let Some(v) = a.second_moment(id) {
                record(&format!("adam/v/{}", p.name), v);
            }
        }
    }
    out
}

pub fn save_checkpoint<T: Scalar>(path: &Path, store: &ParamStore<T>, adam: Option<&AdamState<T>>) -> Result<()> {
    atomic_write(path, &checkpoint_bytes(store, adam))
}

/// Decodes `PCKPT1` bytes into `(name, tensor)` records in file order.
pub fn parse_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(CKPT_MAGIC)?;
    let mut records = Vec::new();
    while !r.is_at_end() {
        let len = r.u16()? as usize;
        let name = r.utf8(len)?.to_string();
        let t = Tensor::read_from(&mut r)?;
        records.push((name, t));
    }
    Ok(records)
}

/// Loads parameter values (and Adam state, when present) into an existing store whose
/// names and shapes must match the checkpoint.
pub fn load_checkpoint<T: Scalar>(bytes: &[u8], store: &mut ParamStore<T>) -> Result<Option<AdamState<T>>> {
    let records = parse_checkpoint::<T>(bytes)?;
    let mut seen = vec![false; store.len()];
    let mut adam: Option<AdamState<T>> = None;
    let mut moments = Vec::new();
    for (name, t) in records {
        if name == ADAM_HYPER {
            let h: Vec<f64> = t.data().iter().map(|x| x.as_f64()).collect();
            if h.len() != 5 {
                return Err(Error::Data("malformed adam hyperparameter record".into()));
            }
            let mut a = AdamState::with_hyper(h[1], h[2], h[3], h[4]);
            a.t = h[0].round() as u64;
            adam = Some(a);
        } else if let Some(rest) = name.strip_prefix("adam/") {
            moments.push((rest.to_string(), t));
        } else {
            let id = store.id(&name).ok_or_else(|| Error::Data(format!("checkpoint parameter `{name}` not in model")))?;
            let p = store.get_mut(id);
            if p.value.dims() != t.dims() {
                return Err(Error::mismatch(&format!("checkpoint parameter `{name}`"), p.value.dims(), t.dims()));
            }
            p.value = t;
            seen[id.0] = true;
        }
    }
    if let Some(missing) = store.iter().find(|(id, _)| !seen[id.0]) {
        return Err(Error::Data(format!("checkpoint lacks parameter `{}`", missing.1.name)));
    }
    if let Some(a) = adam.as_mut() {
        a.first.resize(store.len(), None);
        a.second.resize(store.len(), None);
        for (rest, t) in moments {
            let (kind, pname) =
                rest.split_once('/').ok_or_else(|| Error::Data(format!("malformed adam record `adam/{rest}`")))?;
            let id = store.id(pname).ok_or_else(|| Error::Data(format!("adam moment for unknown parameter `{pname}`")))?;
            match kind {
                "m" => a.first[id.0] = Some(t),
                "v" => a.second[id.0] = Some(t),
                _ => return Err(Error::Data(format!("unknown adam record kind `{kind}`"))),
            }
        }
    }
    Ok(adam)
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Elements checked per input/parameter.
    pub samples: usize,
    pub seed: u64,
    pub mode: Mode,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-5, tolerance: 1e-4, samples: 5, seed: 0x5eed, mode: Mode::Train }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_error < self.tolerance)
    }
}

/// Relative error with a floor on the denominator so near-zero gradients compare absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares analytic gradients against central finite differences.
///
/// `build` receives fresh input node ids and returns an output node of any shape;
/// the harness contracts it with a fixed random tensor to obtain a scalar loss.
/// Every evaluation uses the same dropout seed, so masks stay fixed.
pub fn gradient_check<F>(
    build: F,
    inputs: &[Tensor<f64>],
    store: &mut ParamStore<f64>,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut projection: Option<Tensor<f64>> = None;
    let mut eval = |inputs: &[Tensor<f64>], store: &mut ParamStore<f64>, grads: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut g = Graph::new(opts.mode, opts.seed);
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.input_with_grad(t.clone())).collect();
        let out = build(&mut g, store, &ids)?;
        let proj = projection.get_or_insert_with(|| {
            Tensor::create(g.value(out).dims(), crate::tensor::FillSpec::Uniform { lo: -1.0, hi: 1.0, seed: opts.seed ^ 0xa5a5 })
                .unwrap()
        });
        let r = g.input(proj.clone());
        let prod = g.mul(out, r)?;
        let loss = g.sum(prod);
        let value = g.value(loss).data()[0];
        let mut input_grads = Vec::new();
        if grads {
            store.zero_grads();
            g.backward(loss, store)?;
            for (&id, t) in ids.iter().zip(inputs) {
                input_grads.push(g.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(t.dims())));
            }
        }
        Ok((value, input_grads))
    };

    let (_, input_grads) = eval(inputs, store, true)?;
    let param_grads: Vec<Tensor<f64>> = store.iter().map(|(_, p)| p.grad.clone()).collect();
    let mut rng = rng_from_seed(opts.seed.wrapping_add(17));
    let mut entries = Vec::new();
    let h = opts.step;

    let pick = |len: usize, rng: &mut Rng64| -> Vec<usize> {
        if len <= opts.samples {
            (0..len).collect()
        } else {
            rand::seq::index::sample(rng, len, opts.samples).into_vec()
        }
    };

    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut worst = 0.0f64;
        let idxs = pick(inputs[i].len(), &mut rng);
        for &j in &idxs {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let (fp, _) = eval(&work, store, false)?;
            work[i].data_mut()[j] = orig - h;
            let (fm, _) = eval(&work, store, false)?;
            work[i].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(relative_error(input_grads[i].data()[j], numeric));
        }
        entries.push(GradCheckEntry { name: format!("input{i}"), max_rel_error: worst, checked: idxs.len() });
    }

    let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let mut worst = 0.0f64;
        let idxs = pick(store.get(id).value.len(), &mut rng);
        for &j in &idxs {
            let orig = store.get(id).value.data()[j];
            store.get_mut(id).value.data_mut()[j] = orig + h;
            let (fp, _) = eval(&work, store, false)?;
            store.get_mut(id).value.data_mut()[j] = orig - h;
            let (fm, _) = eval(&work, store, false)?;
            store.get_mut(id).value.data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(relative_error(param_grads[id.0].data()[j], numeric));
        }
        entries.push(GradCheckEntry { name: store.get(id).name.clone(), max_rel_error: worst, checked: idxs.len() });
    }
    store.zero_grads();
    Ok(GradCheckReport { entries, tolerance: opts.tolerance })
}
