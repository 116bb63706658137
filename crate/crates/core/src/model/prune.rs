use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::{consumer_of, GammaIndex, Model};
use crate::error::{Error, Result};
use crate::layers::Layer;
use crate::tensor::Tensor;

/// Global pruning cutoff: up to `quota` channels with `|gamma| <= value`
/// are selected, smallest first, ties broken by (layer, channel).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Threshold {
    pub value: f64,
    pub quota: usize,
}

impl Threshold {
    /// Every channel at or below `value`, without a count limit.
    pub fn at(value: f64) -> Self {
        Self { value, quota: usize::MAX }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerPrune {
    pub layer: usize,
    pub kept: Vec<usize>,
    pub pruned: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneReport {
    pub threshold: f64,
    /// Channels selected before the keep-one guard.
    pub selected: usize,
    /// Channels the guard put back.
    pub rescued: usize,
    pub layers: Vec<LayerPrune>,
    pub params_before: usize,
    pub params_after: usize,
    pub flops_before: usize,
    pub flops_after: usize,
}

/// `ceil(p * m)`, treating products within rounding noise of an integer as
/// that integer.
fn quota(p: f64, m: usize) -> usize {
    let x = p * m as f64;
    let r = x.round();
    if (x - r).abs() <= 1e-9 * (m as f64).max(1.0) {
        r as usize
    } else {
        x.ceil() as usize
    }
}

fn by_magnitude(a: &(usize, usize, f64), b: &(usize, usize, f64)) -> Ordering {
    a.2.abs().total_cmp(&b.2.abs()).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1))
}

pub fn global_threshold(index: &GammaIndex, prune_fraction: f64) -> Result<Threshold> {
    if !(0.0..1.0).contains(&prune_fraction) {
        return Err(Error::Config(format!("prune fraction must lie in [0,1), got {prune_fraction}")));
    }
    let q = quota(prune_fraction, index.len());
    if q == 0 {
        return Ok(Threshold { value: f64::NEG_INFINITY, quota: 0 });
    }
    let mut sorted = index.entries.clone();
    sorted.sort_by(by_magnitude);
    Ok(Threshold { value: sorted[q - 1].2.abs(), quota: q })
}

/// Structurally removes the selected channels. With `guard` a layer that
/// would lose every channel keeps its largest-magnitude one; without it
/// that case is a [`Error::Prune`].
pub fn prune(model: &Model, threshold: &Threshold, guard: bool) -> Result<(Model, PruneReport)> {
    let index = model.collect_gamma()?;
    let mut sorted = index.entries.clone();
    sorted.sort_by(by_magnitude);
    let chosen: Vec<_> = sorted.iter().filter(|e| e.2.abs() <= threshold.value).take(threshold.quota).collect();

    let mut per_layer: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, layer) in model.layers().iter().enumerate() {
        if matches!(layer, Layer::ScaledNorm(_)) {
            per_layer.insert(i, Vec::new());
        }
    }
    for &&(l, c, _) in &chosen {
        per_layer.get_mut(&l).expect("indexed layer").push(c);
    }

    let mut rescued = 0;
    let mut plan = Vec::new();
    for (&l, pruned) in per_layer.iter_mut() {
        let Layer::ScaledNorm(n) = &model.layers()[l] else { unreachable!() };
        let width = n.channels();
        if pruned.len() == width {
            if !guard {
                return Err(Error::Prune(format!("layer {l} would lose all {width} channels")));
            }
            let g = n.gamma.data();
            let mut keep = 0;
            for c in 1..width {
                if g[c].abs() > g[keep].abs() {
                    keep = c;
                }
            }
            pruned.retain(|&c| c != keep);
            rescued += 1;
        }
        pruned.sort_unstable();
        let kept = (0..width).filter(|c| pruned.binary_search(c).is_err()).collect();
        plan.push(LayerPrune { layer: l, kept, pruned: pruned.clone() });
    }

    let shapes = model.shapes();
    let mut layers = model.layers().to_vec();
    for lp in plan.iter().filter(|lp| !lp.pruned.is_empty()) {
        remove_channels(&mut layers, &shapes, lp)?;
    }
    let pruned_model = Model::from_layers(model.input_shape(), layers, model.split())?;
    let report = PruneReport {
        threshold: threshold.value,
        selected: chosen.len(),
        rescued,
        layers: plan,
        params_before: model.param_count(),
        params_after: pruned_model.param_count(),
        flops_before: model.macs(),
        flops_after: pruned_model.macs(),
    };
    Ok((pruned_model, report))
}

/// Drops channels `lp.pruned` of the norm at `lp.layer` from the producing
/// conv, the norm itself and the consuming layer. Each removed channel's
/// constant output (its `beta` pushed through the intervening layers) is
/// folded into the consumer's bias.
fn remove_channels(layers: &mut [Layer], shapes: &[Vec<usize>], lp: &LayerPrune) -> Result<()> {
    let l = lp.layer;
    let j = consumer_of(layers, l).ok_or_else(|| Error::Prune(format!("no consumer for layer {l}")))?;
    let Layer::ScaledNorm(norm) = &layers[l] else { unreachable!() };
    let width = norm.channels();
    let constants: Vec<f64> = lp
        .pruned
        .iter()
        .map(|&c| {
            let mut v = norm.beta.data()[c];
            for layer in &layers[l + 1..j] {
                if let Layer::Relu = layer {
                    v = v.max(0.0);
                }
            }
            v
        })
        .collect();

    match &mut layers[j] {
        Layer::Conv2d(conv) => {
            let [o, i, kh, kw] = conv.weight.shape() else { unreachable!() };
            let (o, i, area) = (*o, *i, kh * kw);
            let w = conv.weight.data();
            for f in 0..o {
                let fold: f64 = lp
                    .pruned
                    .iter()
                    .zip(&constants)
                    .map(|(&c, &v)| v * w[(f * i + c) * area..(f * i + c + 1) * area].iter().sum::<f64>())
                    .sum();
                conv.bias.data_mut()[f] += fold;
            }
            let mut data = Vec::with_capacity(o * lp.kept.len() * area);
            for f in 0..o {
                for &c in &lp.kept {
                    data.extend_from_slice(&w[(f * i + c) * area..(f * i + c + 1) * area]);
                }
            }
            conv.weight = Tensor::new(vec![o, lp.kept.len(), *kh, *kw], data)?;
        }
        Layer::Dense(dense) => {
            let spatial = shapes[j][0] / width;
            let units = dense.units();
            let w = dense.weight.data();
            for (&c, &v) in lp.pruned.iter().zip(&constants) {
                for s in 0..spatial {
                    let row = &w[(c * spatial + s) * units..(c * spatial + s + 1) * units];
                    for (b, wv) in dense.bias.data_mut().iter_mut().zip(row) {
                        *b += v * wv;
                    }
                }
            }
            let rows: Vec<usize> = lp.kept.iter().flat_map(|&c| c * spatial..(c + 1) * spatial).collect();
            dense.weight = dense.weight.select_rows(&rows)?;
        }
        _ => unreachable!("consumer is conv or dense"),
    }

    let Layer::ScaledNorm(norm) = &mut layers[l] else { unreachable!() };
    for t in [&mut norm.gamma, &mut norm.beta, &mut norm.running_mean, &mut norm.running_var] {
        *t = t.select_rows(&lp.kept)?;
    }
    let Layer::Conv2d(conv) = &mut layers[l - 1] else { unreachable!("norm follows a conv") };
    conv.weight = conv.weight.select_rows(&lp.kept)?;
    conv.bias = conv.bias.select_rows(&lp.kept)?;
    Ok(())
}

impl PruneReport {
    pub fn pruned_count(&self) -> usize {
        self.layers.iter().map(|l| l.pruned.len()).sum()
    }

    pub fn channel_count(&self) -> usize {
        self.layers.iter().map(|l| l.kept.len() + l.pruned.len()).sum()
    }

    pub fn pruned_fraction(&self) -> f64 {
        self.pruned_count() as f64 / self.channel_count().max(1) as f64
    }

    /// Human-readable per-layer summary.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>6} {:>8} {:>8} {:>8}", "layer", "before", "kept", "pruned%");
        for l in &self.layers {
            let total = l.kept.len() + l.pruned.len();
            let pct = 100.0 * l.pruned.len() as f64 / total as f64;
            let _ = writeln!(s, "{:>6} {:>8} {:>8} {:>8.2}", l.layer, total, l.kept.len(), pct);
        }
        let _ = writeln!(s, "threshold {:.6e}, pruned {} of {} channels", self.threshold, self.pruned_count(), self.channel_count());
        let _ = writeln!(s, "params {} -> {}, flops {} -> {}", self.params_before, self.params_after, self.flops_before, self.flops_after);
        s
    }

    /// `key=value` lines for scripts.
    pub fn key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "threshold={}", self.threshold);
        let _ = writeln!(s, "channels_total={}", self.channel_count());
        let _ = writeln!(s, "channels_pruned={}", self.pruned_count());
        let _ = writeln!(s, "guard_rescues={}", self.rescued);
        let _ = writeln!(s, "params_before={}", self.params_before);
        let _ = writeln!(s, "params_after={}", self.params_after);
        let _ = writeln!(s, "flops_before={}", self.flops_before);
        let _ = writeln!(s, "flops_after={}", self.flops_after);
        for l in &self.layers {
            let join = |v: &[usize]| v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
            let _ = writeln!(s, "layer{}_kept={}", l.layer, join(&l.kept));
            let _ = writeln!(s, "layer{}_pruned={}", l.layer, join(&l.pruned));
        }
        s
    }
}
