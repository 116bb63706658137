//! Sequential networks: construction, forward passes over a split point,
//! scaling-factor collection, global-threshold pruning and checkpoints.

mod checkpoint;
mod prune;

pub use checkpoint::{load, save, Checkpoint, RngState, CHECKPOINT_VERSION};
pub use prune::{global_threshold, prune, LayerPrune, PruneReport, Threshold};

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{Layer, LayerSpec, ParamKind, StatUpdate};
use crate::tensor::{Mode, Tape, Tensor, Var};

/// Examples per tape when running inference over a whole dataset.
const PREDICT_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    /// Per-example input shape `[C,H,W]`.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    /// Layers `[0, split)` form the aligner.
    pub split: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    input: [usize; 3],
    layers: Vec<Layer>,
    split: usize,
}

/// Parameter handles of a model bound onto one tape, one list per layer.
#[derive(Clone, Debug)]
pub struct Bound {
    pub params: Vec<Vec<Var>>,
}

/// `(layer, channel, gamma)` for every scaled-norm channel.
#[derive(Clone, Debug, PartialEq)]
pub struct GammaIndex {
    pub entries: Vec<(usize, usize, f64)>,
}

impl GammaIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn l1_norm(&self) -> f64 {
        self.entries.iter().map(|e| e.2.abs()).sum()
    }
}

/// Blocks of conv 3x3, scaled norm, relu and 2x2 max pooling, one per
/// entry of `widths`, then a dense classifier. The aligner ends after the
/// second block (after the first when there is only one).
pub fn conv_stack_spec(input: [usize; 3], widths: &[usize], classes: usize) -> ModelSpec {
    let mut layers = Vec::new();
    for &w in widths {
        layers.push(LayerSpec::Conv { out_channels: w, kernel: 3, stride: 1, padding: 1 });
        layers.push(LayerSpec::ScaledNorm);
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::MaxPool { window: 2, stride: 2 });
    }
    layers.push(LayerSpec::Flatten);
    layers.push(LayerSpec::Dense { units: classes });
    let split = 4 * widths.len().clamp(1, 2);
    ModelSpec { input, layers, split }
}

pub fn build(spec: &ModelSpec, seed: u64) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shape = spec.input.to_vec();
    let mut layers = Vec::with_capacity(spec.layers.len());
    for s in &spec.layers {
        let layer = Layer::from_spec(s, &shape, &mut rng)?;
        shape = layer.output_shape(&shape)?;
        layers.push(layer);
    }
    Model::from_layers(spec.input, layers, spec.split)
}

impl Model {
    /// Assembles already-initialized layers, checking the topology.
    pub fn from_layers(input: [usize; 3], layers: Vec<Layer>, split: usize) -> Result<Self> {
        if input.iter().any(|&d| d == 0) {
            return Err(Error::Spec(format!("input shape {input:?} has a zero dimension")));
        }
        if split == 0 || split >= layers.len() {
            return Err(Error::Spec(format!("split {split} outside 1..{}", layers.len())));
        }
        let mut shape = input.to_vec();
        for (i, layer) in layers.iter().enumerate() {
            if let Layer::ScaledNorm(_) = layer {
                if !matches!(i.checked_sub(1).map(|p| &layers[p]), Some(Layer::Conv2d(_))) {
                    return Err(Error::Spec(format!("scaled norm at layer {i} must follow a conv")));
                }
                if consumer_of(&layers, i).is_none() {
                    return Err(Error::Spec(format!("scaled norm at layer {i} has no downstream conv or dense layer")));
                }
            }
            shape = layer.output_shape(&shape).map_err(|e| Error::Spec(format!("layer {i}: {e}")))?;
        }
        if shape.len() != 1 || !matches!(layers.last(), Some(Layer::Dense(_))) {
            return Err(Error::Spec(format!("network must end in a dense layer, output shape {shape:?}")));
        }
        Ok(Self { input, layers, split })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn split(&self) -> usize {
        self.split
    }

    pub fn class_count(&self) -> usize {
        match self.layers.last() {
            Some(Layer::Dense(d)) => d.units(),
            _ => unreachable!("checked at construction"),
        }
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec { input: self.input, layers: self.layers.iter().map(Layer::spec).collect(), split: self.split }
    }

    /// Per-example shapes before each layer, plus the final output shape.
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        let mut out = vec![self.input.to_vec()];
        for layer in &self.layers {
            let next = layer.output_shape(out.last().unwrap()).expect("checked at construction");
            out.push(next);
        }
        out
    }

    /// Per-example shape of the aligner output.
    pub fn feature_shape(&self) -> Vec<usize> {
        self.shapes().swap_remove(self.split)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Multiply-accumulates of one example's forward pass.
    pub fn macs(&self) -> usize {
        let shapes = self.shapes();
        self.layers.iter().zip(&shapes).map(|(l, s)| l.macs(s)).sum()
    }

    /// Every parameter tensor with its owning layer and kind.
    pub fn params(&self) -> Vec<(usize, ParamKind, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            out.extend(layer.params().into_iter().map(|(k, t)| (i, k, t)));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(usize, ParamKind, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.extend(layer.params_mut().into_iter().map(|(k, t)| (i, k, t)));
        }
        out
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Bound {
        Bound { params: self.layers.iter().map(|l| l.bind(tape, requires_grad)).collect() }
    }

    /// Records layers `range` on the tape, returning the output and the
    /// running-statistic updates produced in training mode.
    pub fn forward_range(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        range: Range<usize>,
        mode: Mode,
    ) -> Result<(Var, Vec<(usize, StatUpdate)>)> {
        let mut h = x;
        let mut updates = Vec::new();
        for i in range {
            let (y, upd) = self.layers[i].forward(tape, &bound.params[i], h, mode)?;
            if let Some(u) = upd {
                updates.push((i, u));
            }
            h = y;
        }
        Ok((h, updates))
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, mode: Mode) -> Result<(Var, Vec<(usize, StatUpdate)>)> {
        self.forward_range(tape, bound, x, 0..self.layers.len(), mode)
    }

    /// Folds training-mode batch statistics into the running averages.
    pub fn absorb(&mut self, updates: &[(usize, StatUpdate)]) {
        for (i, u) in updates {
            if let Layer::ScaledNorm(n) = &mut self.layers[*i] {
                n.absorb(u);
            }
        }
    }

    /// Evaluation-mode output of layers `range` over a batch, in chunks.
    pub fn run(&self, x: &Tensor, range: Range<usize>) -> Result<Tensor> {
        let n = *x.shape().first().ok_or_else(|| Error::Size("model input must be batched".into()))?;
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + PREDICT_CHUNK).min(n);
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape, false);
            let xv = tape.constant(x.slice_rows(start, end)?);
            let (y, _) = self.forward_range(&mut tape, &bound, xv, range.clone(), Mode::Eval)?;
            parts.push(tape.value(y).clone());
            start = end;
        }
        if parts.is_empty() {
            let mut shape = self.shapes()[range.end].clone();
            shape.insert(0, 0);
            return Ok(Tensor::zeros(&shape));
        }
        Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
    }

    /// Evaluation-mode logits `[N,K]`.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.run(x, 0..self.layers.len())
    }

    /// Aligner output `f1(x)`.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.run(x, 0..self.split)
    }

    /// `f2` applied to aligner features.
    pub fn head(&self, features: &Tensor) -> Result<Tensor> {
        self.run(features, self.split..self.layers.len())
    }

    pub fn collect_gamma(&self) -> Result<GammaIndex> {
        let mut entries = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Layer::ScaledNorm(n) = layer {
                entries.extend(n.gamma.data().iter().enumerate().map(|(c, &g)| (i, c, g)));
            }
        }
        if entries.is_empty() {
            return Err(Error::Spec("model has no scaling layers".into()));
        }
        Ok(GammaIndex { entries })
    }

    /// Argmax class per row of the evaluation-mode logits.
    pub fn classify(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.predict(x)?))
    }
}

/// Index of the largest entry in each row, lowest index on ties.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape().get(1).copied().unwrap_or(1).max(1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Next conv or dense layer after `i`, provided only shape-preserving
/// channel-wise layers sit in between.
fn consumer_of(layers: &[Layer], i: usize) -> Option<usize> {
    for (j, layer) in layers.iter().enumerate().skip(i + 1) {
        match layer {
            Layer::Conv2d(_) | Layer::Dense(_) => return Some(j),
            Layer::Relu | Layer::MaxPool { .. } | Layer::AvgPool { .. } | Layer::Flatten => {}
            Layer::ScaledNorm(_) => return None,
        }
    }
    None
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn toy_spec() -> ModelSpec {
        ModelSpec {
            input: [3, 8, 8],
            layers: vec![
                LayerSpec::Conv { out_channels: 4, kernel: 3, stride: 1, padding: 1 },
                LayerSpec::ScaledNorm,
                LayerSpec::Relu,
                LayerSpec::MaxPool { window: 2, stride: 2 },
                LayerSpec::Conv { out_channels: 6, kernel: 3, stride: 1, padding: 0 },
                LayerSpec::ScaledNorm,
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 3 },
            ],
            split: 4,
        }
    }

    pub(crate) fn random_input(n: usize, shape: [usize; 3], seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = n * shape.iter().product::<usize>();
        Tensor::new(vec![n, shape[0], shape[1], shape[2]], (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn deterministic_build() {
        let a = build(&toy_spec(), 7).unwrap();
        let b = build(&toy_spec(), 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, build(&toy_spec(), 8).unwrap());
        assert_eq!(a.class_count(), 3);
    }

    #[test]
    fn width_mismatch_is_spec_error() {
        let mut spec = toy_spec();
        spec.layers.insert(8, LayerSpec::Dense { units: 5 });
        spec.layers.insert(9, LayerSpec::Flatten);
        spec.layers.push(LayerSpec::Conv { out_channels: 2, kernel: 1, stride: 1, padding: 0 });
        assert!(matches!(build(&spec, 0), Err(Error::Spec(_))));
        let mut spec = toy_spec();
        spec.split = 0;
        assert!(matches!(build(&spec, 0), Err(Error::Spec(_))));
    }

    #[test]
    fn gamma_defaults_and_count() {
        let m = build(&toy_spec(), 1).unwrap();
        let g = m.collect_gamma().unwrap();
        assert_eq!(g.len(), 10);
        assert!(g.entries.iter().all(|e| e.2 == 0.5));
    }

    #[test]
    fn gamma_read_through() {
        let mut m = build(&toy_spec(), 1).unwrap();
        if let Layer::ScaledNorm(n) = &mut m.layers_mut()[5] {
            n.gamma.data_mut()[2] = 0.01;
        }
        let g = m.collect_gamma().unwrap();
        assert!(g.entries.contains(&(5, 2, 0.01)));
    }

    #[test]
    fn split_composes_bitwise() {
        let m = build(&toy_spec(), 3).unwrap();
        let x = random_input(5, [3, 8, 8], 11);
        let whole = m.predict(&x).unwrap();
        let parts = m.head(&m.features(&x).unwrap()).unwrap();
        assert_eq!(whole, parts);
        assert_eq!(m.feature_shape(), vec![4, 4, 4]);
    }

    #[test]
    fn counts_params_and_macs() {
        let m = build(&toy_spec(), 0).unwrap();
        let params = (4 * 3 * 9 + 4) + 8 + (6 * 4 * 9 + 6) + 12 + (6 * 2 * 2 * 3 + 3);
        assert_eq!(m.param_count(), params);
        let macs = 4 * 8 * 8 * 27 + 6 * 2 * 2 * 36 + 24 * 3;
        assert_eq!(m.macs(), macs);
    }
}
