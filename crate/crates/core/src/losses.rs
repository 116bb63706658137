//! Objective terms of the pruning-with-unlabeled-data loss:
//!
//! ```text
//! L_all = L_sup + lambda*|Gamma|_1 + alpha*L_distill + beta*L_align + eta*R_c
//! ```
//!
//! Differentiable terms are recorded on a [`Tape`]; the L1 term is applied as
//! a subgradient directly to the scaling factors by the trainer.

use crate::error::{size_err, Error, Result};
use crate::layers::softmax_rows;
use crate::tensor::{Reduce, Tape, Tensor, Var};

/// Weights of the combined objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
    pub tau: f64,
}

impl LossWeights {
    pub fn new(lambda: f64, alpha: f64, beta: f64, eta: f64, tau: f64) -> Result<Self> {
        let w = Self { lambda, alpha, beta, eta, tau };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("alpha", self.alpha), ("beta", self.beta), ("eta", self.eta)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: 1e-3, alpha: 0.7, beta: 1e-6, eta: 1e-3, tau: 3.0 }
    }
}

/// Frozen teacher predictions for a set of examples.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherOutput {
    /// Temperature-softened probabilities, one row per example.
    pub softened: Tensor,
    /// Largest softened probability per example, computed at the
    /// confidence temperature.
    pub confidence: Vec<f64>,
    pub raw_logits: Tensor,
}

impl TeacherOutput {
    pub fn from_logits(logits: Tensor, tau: f64) -> Result<Self> {
        Self::with_confidence_tau(logits, tau, tau)
    }

    /// Separate temperatures for the distillation target and the confidence.
    pub fn with_confidence_tau(logits: Tensor, tau: f64, confidence_tau: f64) -> Result<Self> {
        let softened = softmax_rows(&logits, tau)?;
        let confidence = confidence(&logits, confidence_tau)?;
        Ok(Self { softened, confidence, raw_logits: logits })
    }

    pub fn rows(&self) -> usize {
        self.softened.shape()[0]
    }

    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        Ok(Self {
            softened: self.softened.select_rows(rows)?,
            confidence: rows.iter().map(|&r| self.confidence[r]).collect(),
            raw_logits: self.raw_logits.select_rows(rows)?,
        })
    }
}

/// Mean cross-entropy (natural log) of `[N,K]` logits against class labels.
pub fn supervision_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(size_err!("logits {:?} do not match {} labels", shape, labels.len()));
    }
    let k = shape[1];
    let mut onehot = vec![0.0; labels.len() * k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Data(format!("label {y} outside 0..{k}")));
        }
        onehot[i * k + y] = 1.0;
    }
    let logp = tape.log_softmax(logits, 1.0)?;
    let mask = tape.constant(Tensor::new(shape, onehot)?);
    let picked = tape.mul(logp, mask)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / labels.len() as f64)
}

/// Largest entry of each temperature-softened teacher row.
pub fn confidence(teacher_logits: &Tensor, tau: f64) -> Result<Vec<f64>> {
    let p = softmax_rows(teacher_logits, tau)?;
    let k = p.shape()[1];
    Ok(p.data().chunks_exact(k).map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect())
}

/// `(1/M) * sum_i w_i * H(p_i, q_i)` where `p_i` is the softened student row
/// and `q_i` the constant teacher row. Pass the teacher confidences as
/// `weights` for the confidence-weighted form, or all ones to disable it.
pub fn weighted_distillation(tape: &mut Tape, student_logits: Var, teacher_soft: &Tensor, weights: &[f64], tau: f64) -> Result<Var> {
    let shape = tape.value(student_logits).shape().to_vec();
    if shape != teacher_soft.shape() {
        return Err(size_err!("student logits {:?} vs teacher rows {:?}", shape, teacher_soft.shape()));
    }
    if weights.len() != shape[0] {
        return Err(size_err!("{} weights for {} rows", weights.len(), shape[0]));
    }
    if shape[0] == 0 {
        return Err(Error::Data("distillation over an empty batch".into()));
    }
    let k = shape[1];
    let target: Vec<f64> = teacher_soft
        .data()
        .chunks_exact(k)
        .zip(weights)
        .flat_map(|(row, &w)| row.iter().map(move |q| q * w))
        .collect();
    let logp = tape.log_softmax(student_logits, tau)?;
    let target = tape.constant(Tensor::new(shape.clone(), target)?);
    let prod = tape.mul(logp, target)?;
    let total = tape.sum(prod)?;
    tape.scale(total, -1.0 / shape[0] as f64)
}

/// Confidence-weighted distillation against a frozen teacher.
pub fn distillation_loss(tape: &mut Tape, student_logits: Var, teacher: &TeacherOutput, tau: f64) -> Result<Var> {
    weighted_distillation(tape, student_logits, &teacher.softened, &teacher.confidence, tau)
}

/// Value and subgradient of `|Gamma|_1`, with `sign(0) = 0`.
pub fn l1_sparsity(gammas: &[f64]) -> (f64, Vec<f64>) {
    let value = gammas.iter().map(|g| g.abs()).sum();
    let sub = gammas
        .iter()
        .map(|&g| {
            if g > 0.0 {
                1.0
            } else if g < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
        .collect();
    (value, sub)
}

fn check_probabilities(tape: &Tape, d: Var) -> Result<()> {
    if let Some(bad) = tape.value(d).data().iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
        return Err(Error::Domain(format!("discriminator output {bad} outside (0,1)")));
    }
    Ok(())
}

fn mean_log_one_minus(tape: &mut Tape, d: Var) -> Result<Var> {
    let one = tape.constant(Tensor::scalar(1.0));
    let comp = tape.sub(one, d)?;
    let logs = tape.log(comp)?;
    tape.mean(logs)
}

/// `-[balance * mean(log d_l) + mean(log(1 - d_u))]` on sigmoid outputs.
pub fn discriminator_loss(tape: &mut Tape, d_labeled: Var, d_unlabeled: Var, balance: f64) -> Result<Var> {
    if !(balance > 0.0) {
        return Err(Error::Config(format!("balance must be positive, got {balance}")));
    }
    check_probabilities(tape, d_labeled)?;
    check_probabilities(tape, d_unlabeled)?;
    let logs = tape.log(d_labeled)?;
    let lab = tape.mean(logs)?;
    let lab = tape.scale(lab, balance)?;
    let unl = mean_log_one_minus(tape, d_unlabeled)?;
    let v = tape.add(lab, unl)?;
    tape.scale(v, -1.0)
}

/// `mean(log(1 - d_u))`: minimized by the aligner to make unlabeled
/// features look labeled.
pub fn aligner_loss(tape: &mut Tape, d_unlabeled: Var) -> Result<Var> {
    check_probabilities(tape, d_unlabeled)?;
    mean_log_one_minus(tape, d_unlabeled)
}

/// [`discriminator_loss`] expressed on pre-sigmoid scores. Uses
/// `log(sigmoid(z)) = -softplus(-z)` so saturated scores stay finite.
pub fn discriminator_loss_from_scores(tape: &mut Tape, z_labeled: Var, z_unlabeled: Var, balance: f64) -> Result<Var> {
    if !(balance > 0.0) {
        return Err(Error::Config(format!("balance must be positive, got {balance}")));
    }
    let neg = tape.scale(z_labeled, -1.0)?;
    let sp = tape.softplus(neg)?;
    let lab = tape.mean(sp)?;
    let lab = tape.scale(lab, balance)?;
    let sp_u = tape.softplus(z_unlabeled)?;
    let unl = tape.mean(sp_u)?;
    tape.add(lab, unl)
}

/// [`aligner_loss`] on pre-sigmoid scores.
pub fn aligner_loss_from_scores(tape: &mut Tape, z_unlabeled: Var) -> Result<Var> {
    let sp = tape.softplus(z_unlabeled)?;
    let m = tape.mean(sp)?;
    tape.scale(m, -1.0)
}

/// Both terms of the empirical value function on pre-sigmoid scores,
/// `mean(log D(l)) + mean(log(1 - D(u)))`; the literal aligner objective.
pub fn value_function_from_scores(tape: &mut Tape, z_labeled: Var, z_unlabeled: Var) -> Result<Var> {
    let neg = tape.scale(z_labeled, -1.0)?;
    let sp = tape.softplus(neg)?;
    let lab = tape.mean(sp)?;
    let sp_u = tape.softplus(z_unlabeled)?;
    let unl = tape.mean(sp_u)?;
    let s = tape.add(lab, unl)?;
    tape.scale(s, -1.0)
}

/// `(1/N') * max_k sum_i |f_k(x_i)|` over raw `[N',K]` outputs.
pub fn rademacher_loss(tape: &mut Tape, outputs: Var) -> Result<Var> {
    let shape = tape.value(outputs).shape().to_vec();
    if shape.len() != 2 {
        return Err(size_err!("rademacher loss needs [N,K] outputs, got {:?}", shape));
    }
    if shape[0] == 0 || shape[1] == 0 {
        return Err(Error::Data("rademacher loss over an empty batch".into()));
    }
    let a = tape.abs(outputs)?;
    let cols = tape.reduce(Reduce::Sum, a, Some(0))?;
    let m = tape.reduce(Reduce::Max, cols, None)?;
    tape.scale(m, 1.0 / shape[0] as f64)
}

/// Values of the individual objective terms for one minibatch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub supervision: f64,
    /// `|Gamma|_1`, before weighting by lambda.
    pub l1: f64,
    pub distillation: f64,
    pub aligner: f64,
    pub rademacher: f64,
}

impl LossParts {
    fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("supervision", self.supervision),
            ("l1", self.l1),
            ("distillation", self.distillation),
            ("aligner", self.aligner),
            ("rademacher", self.rademacher),
        ]
    }
}

/// `L_sup + lambda*l1 + alpha*L_distill + beta*L_align + eta*R_c`.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<f64> {
    for (name, v) in parts.named() {
        if !v.is_finite() {
            return Err(Error::Numeric { term: name.into(), detail: format!("value {v}") });
        }
    }
    Ok(parts.supervision
        + w.lambda * parts.l1
        + w.alpha * parts.distillation
        + w.beta * parts.aligner
        + w.eta * parts.rademacher)
}
