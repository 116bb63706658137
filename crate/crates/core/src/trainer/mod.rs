//! Sparse retraining, pruning and fine-tuning.
//!
//! Each iteration draws one mixed minibatch, takes one discriminator step
//! on detached aligner features, then one student step on the combined
//! objective with the freshly updated discriminator held fixed.

mod config;
mod metrics;
mod pipeline;

pub use config::{lr_at, PipelineConfig, Schedule, Toggles};
pub use metrics::{MetricsRecord, MetricsSink};
pub use pipeline::{
    finetune, run_ablation, run_pipeline, sparse_retrain, train_teacher, AblationCell, PipelineOutcome, TrainData,
};

use crate::data::{LabeledDataset, Normalization};
use crate::error::{Error, Result};
use crate::layers::{Layer, LayerSpec, ParamKind};
use crate::losses::{self, LossParts, LossWeights};
use crate::model::{argmax_rows, build, Model, ModelSpec};
use crate::tensor::{Mode, Tape, Tensor, Var};

/// SGD with heavy-ball momentum:
/// `v = mu*v + g + wd*w; w -= lr*v`, decay applied to weights only.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(model: &Model, momentum: f64, weight_decay: f64) -> Self {
        let velocity = model.params().iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self { momentum, weight_decay, velocity }
    }

    /// `grads` must follow [`Model::params`] order.
    pub fn step(&mut self, model: &mut Model, grads: &[Tensor], lr: f64) {
        let (mu, wd) = (self.momentum, self.weight_decay);
        for (((_, kind, w), g), v) in model.params_mut().into_iter().zip(grads).zip(&mut self.velocity) {
            let decay = if kind == ParamKind::Weight { wd } else { 0.0 };
            for ((wi, gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = mu * *vi + gi + decay * *wi;
                *wi -= lr * *vi;
            }
        }
    }
}

/// Collects per-parameter gradients in [`Model::params`] order, with zeros
/// for parameters the loss does not reach.
fn gradients(model: &Model, bound: &crate::model::Bound, grads: &crate::tensor::Gradients) -> Vec<Tensor> {
    model
        .params()
        .iter()
        .zip(bound.params.iter().flatten())
        .map(|((_, _, t), v)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect()
}

/// Binary classifier over aligner features: two 3x3 convs (same width,
/// then double) with relu, global average pooling and a one-unit dense
/// head producing a pre-sigmoid score.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub net: Model,
    opt: Sgd,
}

impl Discriminator {
    pub fn new(feature_shape: &[usize], seed: u64, momentum: f64) -> Result<Self> {
        let [c, h, w] = feature_shape else {
            return Err(Error::Spec(format!("discriminator needs [C,H,W] features, got {feature_shape:?}")));
        };
        if h != w {
            return Err(Error::Spec(format!("global pooling needs square features, got {h}x{w}")));
        }
        let spec = ModelSpec {
            input: [*c, *h, *w],
            layers: vec![
                LayerSpec::Conv { out_channels: *c, kernel: 3, stride: 1, padding: 1 },
                LayerSpec::Relu,
                LayerSpec::Conv { out_channels: 2 * c, kernel: 3, stride: 1, padding: 1 },
                LayerSpec::Relu,
                LayerSpec::AvgPool { window: *h, stride: 1 },
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 1 },
            ],
            split: 1,
        };
        let net = build(&spec, seed)?;
        let opt = Sgd::new(&net, momentum, 0.0);
        Ok(Self { net, opt })
    }

    /// `sigmoid(score)` for each row of `features`.
    pub fn probabilities(&self, features: &Tensor) -> Result<Vec<f64>> {
        Ok(self.net.predict(features)?.data().iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect())
    }
}

/// One SGD step of the discriminator on detached features. Returns the
/// loss before the update.
pub fn discriminator_step(
    d: &mut Discriminator,
    labeled: &Tensor,
    unlabeled: &Tensor,
    balance: f64,
    lr: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = d.net.bind(&mut tape, true);
    let xl = tape.constant(labeled.clone());
    let xu = tape.constant(unlabeled.clone());
    let (zl, _) = d.net.forward(&mut tape, &bound, xl, Mode::Train)?;
    let (zu, _) = d.net.forward(&mut tape, &bound, xu, Mode::Train)?;
    let loss = losses::discriminator_loss_from_scores(&mut tape, zl, zu, balance)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numeric { term: "discriminator".into(), detail: format!("value {value}") });
    }
    let grads = tape.backward(loss)?;
    let g = gradients(&d.net, &bound, &grads);
    d.opt.step(&mut d.net, &g, lr);
    Ok(value)
}

/// Effective objective for one training stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    /// Weights with disabled terms already set to zero.
    pub weights: LossWeights,
    pub confidence_weighting: bool,
    pub distill_on_labeled: bool,
    pub literal_aligner: bool,
    pub balance: f64,
}

impl Objective {
    pub fn new(config: &PipelineConfig, lambda: f64, balance: f64) -> Self {
        let t = config.toggles;
        let w = config.weights;
        let on = |flag: bool, v: f64| if flag { v } else { 0.0 };
        Self {
            weights: LossWeights {
                lambda,
                alpha: on(t.distillation, w.alpha),
                beta: on(t.adversarial, w.beta),
                eta: on(t.rademacher, w.eta),
                tau: w.tau,
            },
            confidence_weighting: t.confidence_weighting,
            distill_on_labeled: config.distill_on_labeled,
            literal_aligner: config.literal_eq10_aligner,
            balance,
        }
    }

    /// Plain cross-entropy training.
    pub fn supervised() -> Self {
        Self {
            weights: LossWeights { lambda: 0.0, alpha: 0.0, beta: 0.0, eta: 0.0, tau: 1.0 },
            confidence_weighting: false,
            distill_on_labeled: false,
            literal_aligner: false,
            balance: 1.0,
        }
    }

    pub fn uses_unlabeled(&self) -> bool {
        let w = &self.weights;
        w.alpha > 0.0 || w.beta > 0.0 || w.eta > 0.0
    }

    pub fn needs_teacher(&self) -> bool {
        self.weights.alpha > 0.0
    }

    pub fn adversarial(&self) -> bool {
        self.weights.beta > 0.0
    }
}

/// Loss values observed during one student step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub parts: LossParts,
    pub total: f64,
    pub discriminator: Option<f64>,
}

/// One iteration on a prepared batch: a discriminator step when the
/// adversarial term is active, then one SGD step of the student on the
/// combined objective with `lambda * sign(gamma)` added to the scaling
/// factor gradients.
pub fn student_step(
    model: &mut Model,
    opt: &mut Sgd,
    batch: &crate::data::Batch,
    objective: &Objective,
    mut discriminator: Option<&mut Discriminator>,
    lr: f64,
    lr_discriminator: f64,
) -> Result<StepOutcome> {
    let w = objective.weights;
    let nl = batch.labeled_len();
    let x = match &batch.unlabeled {
        Some(u) if objective.uses_unlabeled() => Tensor::concat_rows(&[&batch.labeled, u])?,
        _ => batch.labeled.clone(),
    };
    let n = x.shape()[0];
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let xv = tape.constant(x);
    let (feats, mut updates) = model.forward_range(&mut tape, &bound, xv, 0..model.split(), Mode::Train)?;

    let mut d_loss = None;
    if objective.adversarial() && n > nl {
        let d = discriminator.as_deref_mut().ok_or_else(|| Error::Config("adversarial term without a discriminator".into()))?;
        let f = tape.value(feats);
        d_loss = Some(discriminator_step(d, &f.slice_rows(0, nl)?, &f.slice_rows(nl, n)?, objective.balance, lr_discriminator)?);
    }

    let (logits, more) = model.forward_range(&mut tape, &bound, feats, model.split()..model.layers().len(), Mode::Train)?;
    updates.extend(more);

    let labeled_logits = tape.slice_rows(logits, 0, nl)?;
    let sup = losses::supervision_loss(&mut tape, labeled_logits, &batch.labels)?;
    let mut parts = LossParts { supervision: tape.value(sup).item(), ..LossParts::default() };
    let mut weighted: Vec<(Var, f64)> = Vec::new();

    if w.alpha > 0.0 {
        let teacher = batch.teacher.as_ref().ok_or_else(|| Error::Config("distillation without teacher outputs".into()))?;
        let start = if objective.distill_on_labeled { 0 } else { nl };
        if n > start {
            let rows: Vec<usize> = (start..n).collect();
            let t = teacher.select(&rows)?;
            let student = tape.slice_rows(logits, start, n)?;
            let weights = if objective.confidence_weighting { t.confidence.clone() } else { vec![1.0; rows.len()] };
            let term = losses::weighted_distillation(&mut tape, student, &t.softened, &weights, w.tau)?;
            parts.distillation = tape.value(term).item();
            weighted.push((term, w.alpha));
        }
    }
    if w.beta > 0.0 && n > nl {
        let d = discriminator.as_deref().expect("checked above");
        let dbound = d.net.bind(&mut tape, false);
        let fu = tape.slice_rows(feats, nl, n)?;
        let (zu, _) = d.net.forward(&mut tape, &dbound, fu, Mode::Train)?;
        let term = if objective.literal_aligner {
            let fl = tape.slice_rows(feats, 0, nl)?;
            let (zl, _) = d.net.forward(&mut tape, &dbound, fl, Mode::Train)?;
            losses::value_function_from_scores(&mut tape, zl, zu)?
        } else {
            losses::aligner_loss_from_scores(&mut tape, zu)?
        };
        parts.aligner = tape.value(term).item();
        weighted.push((term, w.beta));
    }
    if w.eta > 0.0 {
        let term = losses::rademacher_loss(&mut tape, logits)?;
        parts.rademacher = tape.value(term).item();
        weighted.push((term, w.eta));
    }

    let gammas: Vec<f64> = gamma_values(model);
    let (l1, sign) = losses::l1_sparsity(&gammas);
    parts.l1 = l1;
    let total = losses::total_loss(&parts, &w)?;

    let mut loss = sup;
    for (term, weight) in weighted {
        let scaled = tape.scale(term, weight)?;
        loss = tape.add(loss, scaled)?;
    }
    let grads = tape.backward(loss)?;
    let mut g = gradients(model, &bound, &grads);
    if w.lambda > 0.0 {
        let mut signs = sign.into_iter();
        for ((_, kind, _), gi) in model.params().iter().zip(g.iter_mut()) {
            if *kind == ParamKind::Gamma {
                for v in gi.data_mut() {
                    *v += w.lambda * signs.next().expect("one sign per gamma");
                }
            }
        }
    }
    if let Some(i) = g.iter().position(|t| t.data().iter().any(|v| !v.is_finite())) {
        return Err(Error::Numeric { term: "gradient".into(), detail: format!("parameter tensor {i} has a non-finite gradient; parts {parts:?}") });
    }
    opt.step(model, &g, lr);
    model.absorb(&updates);
    Ok(StepOutcome { parts, total, discriminator: d_loss })
}

fn gamma_values(model: &Model) -> Vec<f64> {
    model
        .layers()
        .iter()
        .filter_map(|l| match l {
            Layer::ScaledNorm(n) => Some(n.gamma.data().to_vec()),
            _ => None,
        })
        .flatten()
        .collect()
}

/// `|Gamma|_1` of a model, 0 when it has no scaling layers.
pub fn gamma_l1(model: &Model) -> f64 {
    gamma_values(model).iter().map(|g| g.abs()).sum()
}

/// Top-1 accuracy with ties broken to the lowest class index.
pub fn evaluate(model: &Model, dataset: &LabeledDataset, normalization: &Normalization) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Data("evaluation on an empty dataset".into()));
    }
    let logits = model.predict(&normalization.apply(&dataset.images)?)?;
    let hits = argmax_rows(&logits).iter().zip(&dataset.labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / dataset.len() as f64)
}

#[cfg(test)]
mod tests;
