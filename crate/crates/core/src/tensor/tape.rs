use super::kernels::{
    self, channel_moments, conv2d_backward, conv2d_forward, gemm_into, ChannelGeom, ConvGeom, MatRef,
    PoolGeom,
};
use super::Tensor;
use crate::error::{size_err, Error, Result};

/// Handle to a node on a [`Tape`]. Ids grow monotonically, so every node
/// only refers to nodes with smaller ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Normalization behaviour of layers that keep running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Log(Var),
    Exp(Var),
    Abs(Var),
    Softplus(Var),
    Sigmoid(Var),
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    Conv2d { input: Var, kernel: Var, stride: usize, padding: usize },
    Norm { input: Var, gamma: Var, beta: Var, eps: f64, running: Option<(Vec<f64>, Vec<f64>)> },
    MaxPool { input: Var, window: usize, stride: usize },
    AvgPool { input: Var, window: usize, stride: usize },
    Reshape(Var, Vec<usize>),
    Concat(Vec<Var>),
    SliceRows { input: Var, start: usize, end: usize },
    Reduce { input: Var, kind: Reduce, axis: Option<usize> },
    LogSoftmax { input: Var, tau: f64 },
    Softmax { input: Var, tau: f64 },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::AddRowBias(a, b) | Op::AddChannelBias(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Abs(a)
            | Op::Softplus(a)
            | Op::Sigmoid(a)
            | Op::Reshape(a, _) => vec![*a],
            Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
            Op::Norm { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
            Op::MaxPool { input, .. }
            | Op::AvgPool { input, .. }
            | Op::SliceRows { input, .. }
            | Op::Reduce { input, .. }
            | Op::LogSoftmax { input, .. }
            | Op::Softmax { input, .. } => vec![*input],
            Op::Concat(parts) => parts.clone(),
        }
    }
}

/// Intermediate results a node keeps for its backward rule.
#[derive(Clone, Debug)]
enum Saved {
    Nothing,
    Cols(Vec<f64>, ConvGeom),
    Argmax(Vec<usize>),
    Norm { xhat: Vec<f64>, inv_std: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    saved: Saved,
    requires_grad: bool,
}

/// Append-only record of a differentiable computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node id.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Ids of every node holding a gradient, ascending.
    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.grads.iter().enumerate().filter(|(_, g)| g.is_some()).map(|(i, _)| i)
    }
}

fn binary(a: &Tensor, b: &Tensor, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    if b.rank() == 0 {
        let y = b.item();
        return Ok(a.map(|x| f(x, y)));
    }
    if a.rank() == 0 {
        let x = a.item();
        return Ok(b.map(|y| f(x, y)));
    }
    Err(size_err!("{what}: shape {:?} vs {:?}", a.shape(), b.shape()))
}

/// Gradient of a broadcast operand: sums back down when the operand was a scalar.
fn unbroadcast(grad: Vec<f64>, target: &Tensor) -> Tensor {
    if target.rank() == 0 && grad.len() != 1 {
        Tensor::scalar(grad.iter().sum())
    } else {
        Tensor::from_parts(target.shape().to_vec(), grad)
    }
}

fn conv_geom(x: &Tensor, k: &Tensor, stride: usize, padding: usize) -> Result<ConvGeom> {
    if x.rank() != 4 || k.rank() != 4 {
        return Err(size_err!("conv2d needs NCHW input and OIHW kernel, got {:?} and {:?}", x.shape(), k.shape()));
    }
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, i, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    if c != i {
        return Err(size_err!("conv2d input has {c} channels, kernel expects {i}"));
    }
    let oh = kernels::conv_output_dim(h, kh, stride, padding);
    let ow = kernels::conv_output_dim(w, kw, stride, padding);
    match (oh, ow) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => {
            Ok(ConvGeom { n, c, h, w, o, kh, kw, stride, pad: padding, oh, ow })
        }
        _ => Err(size_err!("conv2d output is empty for input {h}x{w}, kernel {kh}x{kw}, pad {padding}")),
    }
}

fn pool_geom(x: &Tensor, window: usize, stride: usize) -> Result<PoolGeom> {
    if x.rank() != 4 {
        return Err(size_err!("pooling needs NCHW input, got {:?}", x.shape()));
    }
    let (h, w) = (x.shape()[2], x.shape()[3]);
    if window == 0 || stride == 0 || window > h || window > w {
        return Err(size_err!("pool window {window} (stride {stride}) does not fit {h}x{w}"));
    }
    Ok(PoolGeom {
        planes: x.shape()[0] * x.shape()[1],
        h,
        w,
        window,
        stride,
        oh: (h - window) / stride + 1,
        ow: (w - window) / stride + 1,
    })
}

fn channel_geom(x: &Tensor) -> Result<ChannelGeom> {
    if x.rank() < 2 {
        return Err(size_err!("normalization needs [N,C,...] input, got {:?}", x.shape()));
    }
    let n = x.shape()[0];
    if n == 0 {
        return Err(Error::Data("normalization over an empty batch".into()));
    }
    Ok(ChannelGeom { n, c: x.shape()[1], spatial: x.shape()[2..].iter().product() })
}

/// `[outer, len, inner]` decomposition of a reduction axis.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn rows_of(x: &Tensor, what: &str) -> Result<(usize, usize)> {
    if x.rank() != 2 {
        return Err(size_err!("{what} needs a rank-2 input, got {:?}", x.shape()));
    }
    Ok((x.shape()[0], x.shape()[1]))
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// Computes the value of `op` given a lookup for its inputs' values.
fn evaluate<'a>(op: &Op, val: &dyn Fn(Var) -> &'a Tensor) -> Result<(Tensor, Saved)> {
    let plain = |t: Tensor| Ok((t, Saved::Nothing));
    match op {
        Op::Leaf => unreachable!("leaves are never re-evaluated"),
        Op::Add(a, b) => plain(binary(val(*a), val(*b), "add", |x, y| x + y)?),
        Op::Sub(a, b) => plain(binary(val(*a), val(*b), "sub", |x, y| x - y)?),
        Op::Mul(a, b) => plain(binary(val(*a), val(*b), "mul", |x, y| x * y)?),
        Op::Scale(a, s) => plain(val(*a).map(|x| x * s)),
        Op::Relu(a) => plain(val(*a).map(|x| if x > 0.0 { x } else { 0.0 })),
        Op::Log(a) => {
            let x = val(*a);
            if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0) {
                return Err(Error::Domain(format!("log of non-positive value {bad}")));
            }
            plain(x.map(f64::ln))
        }
        Op::Exp(a) => plain(val(*a).map(f64::exp)),
        Op::Abs(a) => plain(val(*a).map(f64::abs)),
        Op::Softplus(a) => plain(val(*a).map(kernels::softplus)),
        Op::Sigmoid(a) => plain(val(*a).map(kernels::sigmoid)),
        Op::MatMul(a, b) => {
            let (x, y) = (val(*a), val(*b));
            let (m, k) = rows_of(x, "matmul")?;
            let (k2, n) = rows_of(y, "matmul")?;
            if k != k2 {
                return Err(size_err!("matmul inner dimensions {k} and {k2} differ"));
            }
            plain(Tensor::from_parts(vec![m, n], kernels::gemm(x.data(), y.data(), m, k, n)))
        }
        Op::AddRowBias(a, b) => {
            let (x, bias) = (val(*a), val(*b));
            let (_, u) = rows_of(x, "row bias")?;
            if bias.shape() != [u] {
                return Err(size_err!("bias {:?} does not match width {u}", bias.shape()));
            }
            let mut data = x.data().to_vec();
            for row in data.chunks_exact_mut(u) {
                row.iter_mut().zip(bias.data()).for_each(|(v, b)| *v += b);
            }
            plain(Tensor::from_parts(x.shape().to_vec(), data))
        }
        Op::AddChannelBias(a, b) => {
            let (x, bias) = (val(*a), val(*b));
            let g = channel_geom(x)?;
            if bias.shape() != [g.c] {
                return Err(size_err!("bias {:?} does not match {} channels", bias.shape(), g.c));
            }
            let mut data = x.data().to_vec();
            for (i, block) in data.chunks_exact_mut(g.spatial).enumerate() {
                let b = bias.data()[i % g.c];
                block.iter_mut().for_each(|v| *v += b);
            }
            plain(Tensor::from_parts(x.shape().to_vec(), data))
        }
        Op::Conv2d { input, kernel, stride, padding } => {
            let (x, k) = (val(*input), val(*kernel));
            let g = conv_geom(x, k, *stride, *padding)?;
            let (out, cols) = conv2d_forward(x.data(), k.data(), &g);
            Ok((Tensor::from_parts(vec![g.n, g.o, g.oh, g.ow], out), Saved::Cols(cols, g)))
        }
        Op::Norm { input, gamma, beta, eps, running } => {
            let x = val(*input);
            let g = channel_geom(x)?;
            let (gm, bt) = (val(*gamma), val(*beta));
            if gm.shape() != [g.c] || bt.shape() != [g.c] {
                return Err(size_err!(
                    "scale/shift shapes {:?}/{:?} do not match {} channels",
                    gm.shape(),
                    bt.shape(),
                    g.c
                ));
            }
            let (mean, var) = match running {
                Some((m, v)) => (m.clone(), v.clone()),
                None => channel_moments(x.data(), &g),
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let mut xhat = vec![0.0; x.len()];
            let mut out = vec![0.0; x.len()];
            for ch in 0..g.c {
                let (mu, is, gc, bc) = (mean[ch], inv_std[ch], gm.data()[ch], bt.data()[ch]);
                g.for_each_channel_block(ch, |r| {
                    for i in r {
                        let h = (x.data()[i] - mu) * is;
                        xhat[i] = h;
                        out[i] = gc * h + bc;
                    }
                });
            }
            Ok((Tensor::from_parts(x.shape().to_vec(), out), Saved::Norm { xhat, inv_std }))
        }
        Op::MaxPool { input, window, stride } => {
            let x = val(*input);
            let g = pool_geom(x, *window, *stride)?;
            let (out, arg) = kernels::max_pool_forward(x.data(), &g);
            let shape = vec![x.shape()[0], x.shape()[1], g.oh, g.ow];
            Ok((Tensor::from_parts(shape, out), Saved::Argmax(arg)))
        }
        Op::AvgPool { input, window, stride } => {
            let x = val(*input);
            let g = pool_geom(x, *window, *stride)?;
            let shape = vec![x.shape()[0], x.shape()[1], g.oh, g.ow];
            plain(Tensor::from_parts(shape, kernels::avg_pool_forward(x.data(), &g)))
        }
        Op::Reshape(a, shape) => plain(val(*a).reshape(shape)?),
        Op::Concat(parts) => {
            let vals: Vec<&Tensor> = parts.iter().map(|p| val(*p)).collect();
            plain(Tensor::concat_rows(&vals)?)
        }
        Op::SliceRows { input, start, end } => plain(val(*input).slice_rows(*start, *end)?),
        Op::Reduce { input, kind, axis } => {
            let x = val(*input);
            match axis {
                None => {
                    if x.is_empty() {
                        return Err(Error::Data("reduction over an empty tensor".into()));
                    }
                    match kind {
                        Reduce::Sum => plain(Tensor::scalar(x.sum())),
                        Reduce::Mean => plain(Tensor::scalar(x.sum() / x.len() as f64)),
                        Reduce::Max => {
                            let (i, m) = first_max(x.data());
                            Ok((Tensor::scalar(m), Saved::Argmax(vec![i])))
                        }
                    }
                }
                Some(axis) => {
                    if *axis >= x.rank() {
                        return Err(size_err!("axis {axis} out of range for rank {}", x.rank()));
                    }
                    let (outer, len, inner) = axis_split(x.shape(), *axis);
                    if len == 0 {
                        return Err(Error::Data("reduction over an empty axis".into()));
                    }
                    let mut out = vec![0.0; outer * inner];
                    let mut arg = Vec::new();
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| x.data()[(o * len + j) * inner + i];
                            out[o * inner + i] = match kind {
                                Reduce::Sum => (0..len).map(at).sum(),
                                Reduce::Mean => (0..len).map(at).sum::<f64>() / len as f64,
                                Reduce::Max => {
                                    let mut best = 0;
                                    for j in 1..len {
                                        if at(j) > at(best) {
                                            best = j;
                                        }
                                    }
                                    arg.push((o * len + best) * inner + i);
                                    at(best)
                                }
                            };
                        }
                    }
                    let mut shape = x.shape().to_vec();
                    shape.remove(*axis);
                    let saved = if *kind == Reduce::Max { Saved::Argmax(arg) } else { Saved::Nothing };
                    Ok((Tensor::from_parts(shape, out), saved))
                }
            }
        }
        Op::LogSoftmax { input, tau } => {
            check_tau(*tau)?;
            let x = val(*input);
            let (_, k) = rows_of(x, "log_softmax")?;
            plain(Tensor::from_parts(x.shape().to_vec(), kernels::log_softmax_rows(x.data(), k, *tau)))
        }
        Op::Softmax { input, tau } => {
            check_tau(*tau)?;
            let x = val(*input);
            let (_, k) = rows_of(x, "softmax")?;
            let data = kernels::log_softmax_rows(x.data(), k, *tau).into_iter().map(f64::exp).collect();
            plain(Tensor::from_parts(x.shape().to_vec(), data))
        }
    }
}

/// Index and value of the first maximal element.
fn first_max(xs: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    (best, xs[best])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an existing tensor as a leaf node.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value, saved: Saved::Nothing, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Validating constructor: builds the tensor and registers it as a leaf.
    pub fn create(&mut self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape.to_vec(), data)?, requires_grad))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let nodes = &self.nodes;
        let (value, saved) = evaluate(&op, &|v: Var| &nodes[v.0].value)?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { op, value, saved, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.push(Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Relu(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Exp(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Abs(a))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Softplus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sigmoid(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    /// Adds a `[U]` bias to every row of an `[N,U]` tensor.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.push(Op::AddRowBias(x, bias))
    }

    /// Adds a `[C]` bias to every channel of an `[N,C,...]` tensor.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.push(Op::AddChannelBias(x, bias))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        self.push(Op::Conv2d { input, kernel, stride, padding })
    }

    /// Per-channel normalization followed by scale and shift. With
    /// `running = None` the batch moments are used (training); otherwise the
    /// supplied `(mean, var)` are treated as constants.
    pub fn normalize(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        running: Option<(Vec<f64>, Vec<f64>)>,
    ) -> Result<Var> {
        self.push(Op::Norm { input, gamma, beta, eps, running })
    }

    pub fn max_pool(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        self.push(Op::MaxPool { input, window, stride })
    }

    pub fn avg_pool(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        self.push(Op::AvgPool { input, window, stride })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.push(Op::Reshape(a, shape.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::Concat(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, input: Var, start: usize, end: usize) -> Result<Var> {
        self.push(Op::SliceRows { input, start, end })
    }

    pub fn reduce(&mut self, kind: Reduce, input: Var, axis: Option<usize>) -> Result<Var> {
        self.push(Op::Reduce { input, kind, axis })
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        self.reduce(Reduce::Sum, input, None)
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        self.reduce(Reduce::Mean, input, None)
    }

    /// Row-wise `log softmax(x / tau)` of an `[N,K]` tensor.
    pub fn log_softmax(&mut self, input: Var, tau: f64) -> Result<Var> {
        self.push(Op::LogSoftmax { input, tau })
    }

    /// Row-wise `softmax(x / tau)` of an `[N,K]` tensor.
    pub fn softmax(&mut self, input: Var, tau: f64) -> Result<Var> {
        self.push(Op::Softmax { input, tau })
    }

    /// Recomputes every non-leaf node from its inputs in id order.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => evaluate(op, &|v: Var| &values[v.0])?.0,
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar loss, got {:?}", root.value.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::from_parts(root.value.shape().to_vec(), vec![1.0]));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (input, contribution) in self.input_grads(node, &g) {
                match &mut grads[input.0] {
                    Some(acc) => acc.data_mut().iter_mut().zip(contribution.data()).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[id] = Some(g);
        }
        for (id, g) in grads.iter_mut().enumerate() {
            if !self.nodes[id].requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    /// Vector-Jacobian products of one node for each input that needs them.
    fn input_grads(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let y = &node.value;
        let gd = g.data();
        let mut out = Vec::new();
        let unary = |a: Var, f: &dyn Fn(usize) -> f64| {
            wants(a).then(|| (a, Tensor::from_parts(val(a).shape().to_vec(), (0..gd.len()).map(f).collect())))
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if wants(*a) {
                    out.push((*a, unbroadcast(gd.to_vec(), val(*a))));
                }
                if wants(*b) {
                    out.push((*b, unbroadcast(gd.iter().map(|v| sign * v).collect(), val(*b))));
                }
            }
            Op::Mul(a, b) => {
                let (x, z) = (val(*a), val(*b));
                let at = |t: &Tensor, i: usize| if t.rank() == 0 { t.item() } else { t.data()[i] };
                if wants(*a) {
                    out.push((*a, unbroadcast((0..gd.len()).map(|i| gd[i] * at(z, i)).collect(), x)));
                }
                if wants(*b) {
                    out.push((*b, unbroadcast((0..gd.len()).map(|i| gd[i] * at(x, i)).collect(), z)));
                }
            }
            Op::Scale(a, s) => out.extend(unary(*a, &|i| gd[i] * s)),
            Op::Relu(a) => {
                let x = val(*a).data();
                out.extend(unary(*a, &|i| if x[i] > 0.0 { gd[i] } else { 0.0 }));
            }
            Op::Log(a) => {
                let x = val(*a).data();
                out.extend(unary(*a, &|i| gd[i] / x[i]));
            }
            Op::Exp(a) => out.extend(unary(*a, &|i| gd[i] * y.data()[i])),
            Op::Abs(a) => {
                let x = val(*a).data();
                out.extend(unary(*a, &|i| gd[i] * sign(x[i])));
            }
            Op::Softplus(a) => {
                let x = val(*a).data();
                out.extend(unary(*a, &|i| gd[i] * kernels::sigmoid(x[i])));
            }
            Op::Sigmoid(a) => out.extend(unary(*a, &|i| {
                let s = y.data()[i];
                gd[i] * s * (1.0 - s)
            })),
            Op::MatMul(a, b) => {
                let (x, z) = (val(*a), val(*b));
                let (m, k, n) = (x.shape()[0], x.shape()[1], z.shape()[1]);
                let gm = MatRef::row_major(gd, m, n);
                if wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_into(gm, MatRef::row_major(z.data(), k, n).t(), &mut ga, 1.0, 0.0);
                    out.push((*a, Tensor::from_parts(vec![m, k], ga)));
                }
                if wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm_into(MatRef::row_major(x.data(), m, k).t(), gm, &mut gb, 1.0, 0.0);
                    out.push((*b, Tensor::from_parts(vec![k, n], gb)));
                }
            }
            Op::AddRowBias(a, b) => {
                if wants(*a) {
                    out.push((*a, g.clone()));
                }
                if wants(*b) {
                    let u = val(*b).len();
                    let mut gb = vec![0.0; u];
                    for row in gd.chunks_exact(u) {
                        gb.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                    }
                    out.push((*b, Tensor::from_parts(vec![u], gb)));
                }
            }
            Op::AddChannelBias(a, b) => {
                if wants(*a) {
                    out.push((*a, g.clone()));
                }
                if wants(*b) {
                    let c = val(*b).len();
                    let spatial = val(*a).shape()[2..].iter().product::<usize>();
                    let mut gb = vec![0.0; c];
                    for (i, block) in gd.chunks_exact(spatial).enumerate() {
                        gb[i % c] += block.iter().sum::<f64>();
                    }
                    out.push((*b, Tensor::from_parts(vec![c], gb)));
                }
            }
            Op::Conv2d { input, kernel, .. } => {
                let Saved::Cols(cols, geom) = &node.saved else { unreachable!() };
                let k = val(*kernel);
                let (dx, dk) = conv2d_backward(gd, k.data(), cols, geom, wants(*input), wants(*kernel));
                if let Some(dx) = dx {
                    out.push((*input, Tensor::from_parts(val(*input).shape().to_vec(), dx)));
                }
                if let Some(dk) = dk {
                    out.push((*kernel, Tensor::from_parts(k.shape().to_vec(), dk)));
                }
            }
            Op::Norm { input, gamma, beta, running, .. } => {
                let Saved::Norm { xhat, inv_std } = &node.saved else { unreachable!() };
                let x = val(*input);
                let geom = ChannelGeom { n: x.shape()[0], c: x.shape()[1], spatial: x.shape()[2..].iter().product() };
                let gm = val(*gamma).data();
                let mut dgamma = vec![0.0; geom.c];
                let mut dbeta = vec![0.0; geom.c];
                let mut dx = wants(*input).then(|| vec![0.0; x.len()]);
                let m = geom.count() as f64;
                for ch in 0..geom.c {
                    let (mut sg, mut sgx) = (0.0, 0.0);
                    geom.for_each_channel_block(ch, |r| {
                        for i in r {
                            sg += gd[i];
                            sgx += gd[i] * xhat[i];
                        }
                    });
                    dgamma[ch] = sgx;
                    dbeta[ch] = sg;
                    if let Some(dx) = dx.as_mut() {
                        let scale = gm[ch] * inv_std[ch];
                        geom.for_each_channel_block(ch, |r| {
                            for i in r {
                                dx[i] = if running.is_some() {
                                    scale * gd[i]
                                } else {
                                    scale * (gd[i] - sg / m - xhat[i] * sgx / m)
                                };
                            }
                        });
                    }
                }
                if let Some(dx) = dx {
                    out.push((*input, Tensor::from_parts(x.shape().to_vec(), dx)));
                }
                if wants(*gamma) {
                    out.push((*gamma, Tensor::from_parts(vec![geom.c], dgamma)));
                }
                if wants(*beta) {
                    out.push((*beta, Tensor::from_parts(vec![geom.c], dbeta)));
                }
            }
            Op::MaxPool { input, .. } => {
                let Saved::Argmax(arg) = &node.saved else { unreachable!() };
                if wants(*input) {
                    let mut dx = vec![0.0; val(*input).len()];
                    for (o, &i) in arg.iter().enumerate() {
                        dx[i] += gd[o];
                    }
                    out.push((*input, Tensor::from_parts(val(*input).shape().to_vec(), dx)));
                }
            }
            Op::AvgPool { input, window, stride } => {
                if wants(*input) {
                    let x = val(*input);
                    let geom = pool_geom(x, *window, *stride).expect("validated in forward");
                    out.push((*input, Tensor::from_parts(x.shape().to_vec(), kernels::avg_pool_backward(gd, &geom))));
                }
            }
            Op::Reshape(a, _) => out.extend(unary(*a, &|i| gd[i])),
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = val(*p).len();
                    if wants(*p) {
                        out.push((*p, Tensor::from_parts(val(*p).shape().to_vec(), gd[offset..offset + len].to_vec())));
                    }
                    offset += len;
                }
            }
            Op::SliceRows { input, start, .. } => {
                if wants(*input) {
                    let x = val(*input);
                    let stride = x.len() / x.shape()[0].max(1);
                    let mut dx = vec![0.0; x.len()];
                    dx[start * stride..start * stride + gd.len()].copy_from_slice(gd);
                    out.push((*input, Tensor::from_parts(x.shape().to_vec(), dx)));
                }
            }
            Op::Reduce { input, kind, axis } => {
                if wants(*input) {
                    let x = val(*input);
                    let mut dx = vec![0.0; x.len()];
                    match (kind, axis) {
                        (Reduce::Max, _) => {
                            let Saved::Argmax(arg) = &node.saved else { unreachable!() };
                            for (o, &i) in arg.iter().enumerate() {
                                dx[i] += gd[o];
                            }
                        }
                        (_, None) => {
                            let s = if *kind == Reduce::Mean { gd[0] / x.len() as f64 } else { gd[0] };
                            dx.fill(s);
                        }
                        (_, Some(axis)) => {
                            let (outer, len, inner) = axis_split(x.shape(), *axis);
                            let norm = if *kind == Reduce::Mean { 1.0 / len as f64 } else { 1.0 };
                            for o in 0..outer {
                                for j in 0..len {
                                    for i in 0..inner {
                                        dx[(o * len + j) * inner + i] = gd[o * inner + i] * norm;
                                    }
                                }
                            }
                        }
                    }
                    out.push((*input, Tensor::from_parts(x.shape().to_vec(), dx)));
                }
            }
            Op::LogSoftmax { input, tau } => {
                if wants(*input) {
                    let k = y.shape()[1];
                    let mut dx = vec![0.0; y.len()];
                    for ((dxr, yr), gr) in dx.chunks_exact_mut(k).zip(y.data().chunks_exact(k)).zip(gd.chunks_exact(k)) {
                        let total: f64 = gr.iter().sum();
                        for j in 0..k {
                            dxr[j] = (gr[j] - yr[j].exp() * total) / tau;
                        }
                    }
                    out.push((*input, Tensor::from_parts(y.shape().to_vec(), dx)));
                }
            }
            Op::Softmax { input, tau } => {
                if wants(*input) {
                    let k = y.shape()[1];
                    let mut dx = vec![0.0; y.len()];
                    for ((dxr, yr), gr) in dx.chunks_exact_mut(k).zip(y.data().chunks_exact(k)).zip(gd.chunks_exact(k)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            dxr[j] = yr[j] * (gr[j] - dot) / tau;
                        }
                    }
                    out.push((*input, Tensor::from_parts(y.shape().to_vec(), dx)));
                }
            }
        }
        out
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
