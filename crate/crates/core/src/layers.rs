//! Layer primitives. Parameters live in plain [`Tensor`]s owned by the layer;
//! a forward pass first binds them onto a [`Tape`] and then records the
//! layer's computation there.

use rand::Rng;

use crate::error::{size_err, Error, Result};
use crate::tensor::{channel_moments, log_softmax_rows, ChannelGeom, Mode, Tape, Tensor, Var};

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_GAMMA: f64 = 0.5;

/// Architecture description of one layer.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv { out_channels: usize, kernel: usize, stride: usize, padding: usize },
    Dense { units: usize },
    ScaledNorm,
    Relu,
    MaxPool { window: usize, stride: usize },
    AvgPool { window: usize, stride: usize },
    Flatten,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    /// `[out, in, k, k]`
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `[in, out]`, applied as `x * W + b`.
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Per-channel normalization whose scale `gamma` doubles as the channel
/// importance score used for pruning. A channel whose `gamma` is zero
/// outputs the constant `beta` regardless of its input.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaledNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    Dense(Dense),
    ScaledNorm(ScaledNorm),
    Relu,
    MaxPool { window: usize, stride: usize },
    AvgPool { window: usize, stride: usize },
    Flatten,
}

/// Batch statistics a training-mode normalization pass wants folded into
/// its running averages.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// He-uniform initialization over `fan_in` inputs.
fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
}

impl Conv2d {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize, rng: &mut impl Rng) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            weight: he_uniform(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
            bias: Tensor::zeros(&[out_channels]),
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }
}

impl Dense {
    pub fn new(inputs: usize, units: usize, rng: &mut impl Rng) -> Self {
        Self { weight: he_uniform(&[inputs, units], inputs, rng), bias: Tensor::zeros(&[units]) }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn units(&self) -> usize {
        self.weight.shape()[1]
    }
}

impl ScaledNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], DEFAULT_GAMMA),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Exponential moving average update of the running statistics.
    pub fn absorb(&mut self, update: &StatUpdate) {
        let m = self.momentum;
        for (r, b) in self.running_mean.data_mut().iter_mut().zip(&update.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.data_mut().iter_mut().zip(&update.var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

impl Layer {
    /// Instantiates a spec given the per-example input shape.
    pub fn from_spec(spec: &LayerSpec, input: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let layer = match *spec {
            LayerSpec::Conv { out_channels, kernel, stride, padding } => {
                if input.len() != 3 {
                    return Err(Error::Spec(format!("conv needs a [C,H,W] input, got {input:?}")));
                }
                Layer::Conv2d(Conv2d::new(input[0], out_channels, kernel, stride, padding, rng))
            }
            LayerSpec::Dense { units } => {
                if input.len() != 1 {
                    return Err(Error::Spec(format!("dense needs a flat input, got {input:?}")));
                }
                Layer::Dense(Dense::new(input[0], units, rng))
            }
            LayerSpec::ScaledNorm => {
                let c = *input.first().ok_or_else(|| Error::Spec("scaled norm on a scalar".into()))?;
                Layer::ScaledNorm(ScaledNorm::new(c))
            }
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::MaxPool { window, stride } => Layer::MaxPool { window, stride },
            LayerSpec::AvgPool { window, stride } => Layer::AvgPool { window, stride },
            LayerSpec::Flatten => Layer::Flatten,
        };
        layer.output_shape(input).map_err(|e| Error::Spec(e.to_string()))?;
        Ok(layer)
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv2d(c) => LayerSpec::Conv {
                out_channels: c.out_channels(),
                kernel: c.kernel(),
                stride: c.stride,
                padding: c.padding,
            },
            Layer::Dense(d) => LayerSpec::Dense { units: d.units() },
            Layer::ScaledNorm(_) => LayerSpec::ScaledNorm,
            Layer::Relu => LayerSpec::Relu,
            Layer::MaxPool { window, stride } => LayerSpec::MaxPool { window: *window, stride: *stride },
            Layer::AvgPool { window, stride } => LayerSpec::AvgPool { window: *window, stride: *stride },
            Layer::Flatten => LayerSpec::Flatten,
        }
    }

    /// Per-example output shape for a per-example input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Conv2d(c) => {
                let [ch, h, w] = input else {
                    return Err(size_err!("conv input must be [C,H,W], got {input:?}"));
                };
                if *ch != c.in_channels() {
                    return Err(size_err!("conv expects {} channels, got {ch}", c.in_channels()));
                }
                let k = c.kernel();
                let oh = crate::tensor::conv_output_dim(*h, k, c.stride, c.padding);
                let ow = crate::tensor::conv_output_dim(*w, k, c.stride, c.padding);
                match (oh, ow) {
                    (Some(oh), Some(ow)) => Ok(vec![c.out_channels(), oh, ow]),
                    _ => Err(size_err!("conv kernel {k} does not fit {h}x{w}")),
                }
            }
            Layer::Dense(d) => {
                if input != [d.inputs()] {
                    return Err(size_err!("dense expects width {}, got {input:?}", d.inputs()));
                }
                Ok(vec![d.units()])
            }
            Layer::ScaledNorm(n) => {
                if input.first() != Some(&n.channels()) {
                    return Err(size_err!("scaled norm expects {} channels, got {input:?}", n.channels()));
                }
                Ok(input.to_vec())
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::MaxPool { window, stride } | Layer::AvgPool { window, stride } => {
                let [ch, h, w] = input else {
                    return Err(size_err!("pool input must be [C,H,W], got {input:?}"));
                };
                if *window == 0 || *stride == 0 || window > h || window > w {
                    return Err(size_err!("pool window {window} does not fit {h}x{w}"));
                }
                Ok(vec![*ch, (h - window) / stride + 1, (w - window) / stride + 1])
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    pub fn params(&self) -> Vec<(ParamKind, &Tensor)> {
        match self {
            Layer::Conv2d(c) => vec![(ParamKind::Weight, &c.weight), (ParamKind::Bias, &c.bias)],
            Layer::Dense(d) => vec![(ParamKind::Weight, &d.weight), (ParamKind::Bias, &d.bias)],
            Layer::ScaledNorm(n) => vec![(ParamKind::Gamma, &n.gamma), (ParamKind::Beta, &n.beta)],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<(ParamKind, &mut Tensor)> {
        match self {
            Layer::Conv2d(c) => vec![(ParamKind::Weight, &mut c.weight), (ParamKind::Bias, &mut c.bias)],
            Layer::Dense(d) => vec![(ParamKind::Weight, &mut d.weight), (ParamKind::Bias, &mut d.bias)],
            Layer::ScaledNorm(n) => vec![(ParamKind::Gamma, &mut n.gamma), (ParamKind::Beta, &mut n.beta)],
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Multiply-accumulate count of one example's forward pass.
    pub fn macs(&self, input: &[usize]) -> usize {
        match self {
            Layer::Conv2d(c) => {
                let out = self.output_shape(input).unwrap_or_default();
                out.iter().product::<usize>() * c.in_channels() * c.kernel() * c.kernel()
            }
            Layer::Dense(d) => d.inputs() * d.units(),
            _ => 0,
        }
    }

    /// Registers this layer's parameters on the tape, in [`Layer::params`] order.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.params().into_iter().map(|(_, t)| tape.leaf(t.clone(), requires_grad)).collect()
    }

    /// Records the layer on `tape`. `params` must come from [`Layer::bind`].
    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var, mode: Mode) -> Result<(Var, Option<StatUpdate>)> {
        let out = match self {
            Layer::Conv2d(c) => {
                let y = tape.conv2d(x, params[0], c.stride, c.padding)?;
                tape.add_channel_bias(y, params[1])?
            }
            Layer::Dense(_) => dense_forward(tape, params[0], params[1], x)?,
            Layer::ScaledNorm(n) => return scalednorm_forward(tape, n, params[0], params[1], x, mode),
            Layer::Relu => tape.relu(x)?,
            Layer::MaxPool { window, stride } => tape.max_pool(x, *window, *stride)?,
            Layer::AvgPool { window, stride } => tape.avg_pool(x, *window, *stride)?,
            Layer::Flatten => {
                let shape = tape.value(x).shape();
                let n = *shape.first().ok_or_else(|| size_err!("flatten of a scalar"))?;
                let rest = shape[1..].iter().product();
                tape.reshape(x, &[n, rest])?
            }
        };
        Ok((out, None))
    }
}

/// `x * W + b` for an `[N,F]` input.
pub fn dense_forward(tape: &mut Tape, weight: Var, bias: Var, x: Var) -> Result<Var> {
    let y = tape.matmul(x, weight)?;
    tape.add_row_bias(y, bias)
}

/// Scaled normalization of an `[N,C,...]` input. In training mode the batch
/// moments normalize the input and are returned for the running averages
/// (variance with Bessel's correction); evaluation mode uses the running
/// statistics.
pub fn scalednorm_forward(
    tape: &mut Tape,
    layer: &ScaledNorm,
    gamma: Var,
    beta: Var,
    x: Var,
    mode: Mode,
) -> Result<(Var, Option<StatUpdate>)> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() < 2 || shape[1] != layer.channels() {
        return Err(size_err!("scaled norm expects {} channels, got input {:?}", layer.channels(), shape));
    }
    if shape[0] == 0 {
        return Err(Error::Data("scaled norm over an empty batch".into()));
    }
    match mode {
        Mode::Eval => {
            let running = Some((layer.running_mean.data().to_vec(), layer.running_var.data().to_vec()));
            Ok((tape.normalize(x, gamma, beta, layer.eps, running)?, None))
        }
        Mode::Train => {
            let geom = ChannelGeom { n: shape[0], c: shape[1], spatial: shape[2..].iter().product() };
            let (mean, var) = channel_moments(tape.value(x).data(), &geom);
            let m = geom.count() as f64;
            let correction = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            let update = StatUpdate { mean, var: var.iter().map(|v| v * correction).collect() };
            Ok((tape.normalize(x, gamma, beta, layer.eps, None)?, Some(update)))
        }
    }
}

/// Max or average pooling over square windows.
pub fn pool_forward(tape: &mut Tape, kind: PoolKind, x: Var, window: usize, stride: usize) -> Result<Var> {
    match kind {
        PoolKind::Max => tape.max_pool(x, window, stride),
        PoolKind::Avg => tape.avg_pool(x, window, stride),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Temperature-softened softmax over the rows of `[N,K]` logits.
pub fn softmax_temperature(tape: &mut Tape, logits: Var, tau: f64) -> Result<Var> {
    tape.softmax(logits, tau)
}

/// Value-only counterpart of [`softmax_temperature`].
pub fn softmax_rows(logits: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if logits.rank() != 2 {
        return Err(size_err!("softmax needs [N,K] logits, got {:?}", logits.shape()));
    }
    let k = logits.shape()[1];
    let data = log_softmax_rows(logits.data(), k, tau).into_iter().map(f64::exp).collect();
    Tensor::new(logits.shape().to_vec(), data)
}
