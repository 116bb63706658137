//! Independent reference computations used by the test and acceptance
//! suites. The references here use plain loops and scalar arithmetic only;
//! they never call into the kernels they are meant to check.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Worst-case disagreement between backward gradients and central
/// differences for one parameter tensor.
#[derive(Clone, Debug, Default)]
pub struct ParamDiff {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the coordinate with the largest error once both
    /// tolerances are taken into account.
    pub worst_index: usize,
    coords: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, Default)]
pub struct FiniteDiffReport {
    pub params: Vec<ParamDiff>,
}

impl FiniteDiffReport {
    /// True when every coordinate is within `rel_tol` relative error or
    /// `abs_tol` absolute error.
    pub fn passes(&self, rel_tol: f64, abs_tol: f64) -> bool {
        self.params.iter().all(|p| p.coords.iter().all(|&(abs, rel)| abs <= abs_tol || rel <= rel_tol))
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn max_abs_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_abs_error).fold(0.0, f64::max)
    }

    /// Largest relative error among coordinates whose absolute error
    /// exceeds `abs_tol`.
    pub fn max_rel_error_above(&self, abs_tol: f64) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.coords.iter())
            .filter(|(abs, _)| *abs > abs_tol)
            .map(|&(_, rel)| rel)
            .fold(0.0, f64::max)
    }
}

/// Compares `analytic` gradients against central differences of `loss_fn`
/// around `params`.
pub fn finite_diff<F>(mut loss_fn: F, params: &[Tensor], analytic: &[Tensor], epsilon: f64) -> Result<FiniteDiffReport>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if !(epsilon > 0.0) {
        return Err(Error::Oracle(format!("epsilon must be positive, got {epsilon}")));
    }
    if params.len() != analytic.len() {
        return Err(Error::Oracle(format!("{} params but {} gradients", params.len(), analytic.len())));
    }
    let base = loss_fn(params)?;
    let again = loss_fn(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Oracle(format!("loss function is not deterministic: {base} vs {again}")));
    }
    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = FiniteDiffReport::default();
    for (p, grad) in analytic.iter().enumerate() {
        if grad.shape() != params[p].shape() {
            return Err(Error::Oracle(format!("gradient {p} has shape {:?}, param {:?}", grad.shape(), params[p].shape())));
        }
        let mut diff = ParamDiff::default();
        let mut worst_score = -1.0;
        for i in 0..params[p].len() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + epsilon;
            let plus = loss_fn(&work)?;
            work[p].data_mut()[i] = orig - epsilon;
            let minus = loss_fn(&work)?;
            work[p].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = grad.data()[i];
            let abs = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            let rel = if scale > 0.0 { abs / scale } else { 0.0 };
            diff.max_abs_error = diff.max_abs_error.max(abs);
            diff.max_rel_error = diff.max_rel_error.max(rel);
            let score = abs.min(rel);
            if score > worst_score {
                worst_score = score;
                diff.worst_index = i;
            }
            diff.coords.push((abs, rel));
        }
        report.params.push(diff);
    }
    Ok(report)
}

/// Runs `build` on a fresh tape with `params` as gradient-tracking leaves
/// and returns the loss value and the backward gradients.
pub fn tape_gradients<F>(build: &F, params: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let value = tape.value(loss).item();
    let out = vars
        .iter()
        .zip(params)
        .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((value, out))
}

/// Finite-difference check of a tape-built scalar function.
pub fn check_tape_gradients<F>(build: F, params: &[Tensor], epsilon: f64) -> Result<FiniteDiffReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (_, analytic) = tape_gradients(&build, params)?;
    finite_diff(
        |ps| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ps.iter().map(|t| tape.leaf(t.clone(), false)).collect();
            let loss = build(&mut tape, &vars)?;
            Ok(tape.value(loss).item())
        },
        params,
        &analytic,
        epsilon,
    )
}

/// Triple-loop matrix product of row-major `[m,k]` and `[k,n]` tensors.
pub fn naive_matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::Size(format!("matmul shapes {:?} x {:?}", a.shape(), b.shape())));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for t in 0..k {
                acc += a.data()[i * k + t] * b.data()[t * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Seven-loop cross-correlation with zero padding.
pub fn naive_conv_forward(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    if input.rank() != 4 || kernel.rank() != 4 {
        return Err(Error::Size("naive conv needs rank-4 operands".into()));
    }
    let (n, c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]);
    let (o, ci, kh, kw) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2], kernel.shape()[3]);
    if c != ci {
        return Err(Error::Size(format!("input has {c} channels, kernel {ci}")));
    }
    if stride == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::Size("naive conv output would be empty".into()));
    }
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for f in 0..o {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - padding as isize;
                                let ix = (x * stride + j) as isize - padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += input.get(&[b, ch, iy as usize, ix as usize]) * kernel.get(&[f, ch, i, j]);
                                }
                            }
                        }
                    }
                    out[((b * o + f) * oh + y) * ow + x] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, o, oh, ow], out)
}

/// Loop reference for max (`max = true`) or average pooling.
pub fn naive_pool(input: &Tensor, window: usize, stride: usize, max: bool) -> Result<Tensor> {
    let (n, c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]);
    if window > h || window > w {
        return Err(Error::Size("pool window larger than input".into()));
    }
    let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let vals = (0..window).flat_map(|i| (0..window).map(move |j| (i, j)));
                    let vals: Vec<f64> = vals.map(|(i, j)| input.get(&[b, ch, y * stride + i, x * stride + j])).collect();
                    out.push(if max {
                        vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                    } else {
                        vals.iter().sum::<f64>() / vals.len() as f64
                    });
                }
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

/// Optimal discriminator over a finite support:
/// `D*(x) = p_l(x) / (p_l(x) + p_u(x))`, `None` where both masses vanish.
pub fn discriminator_optimum(p_labeled: &[f64], p_unlabeled: &[f64]) -> Result<Vec<Option<f64>>> {
    if p_labeled.len() != p_unlabeled.len() {
        return Err(Error::Oracle(format!(
            "histograms over different supports ({} vs {} bins)",
            p_labeled.len(),
            p_unlabeled.len()
        )));
    }
    for (name, h) in [("labeled", p_labeled), ("unlabeled", p_unlabeled)] {
        let total: f64 = h.iter().sum();
        if h.iter().any(|&v| v < 0.0 || !v.is_finite()) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Oracle(format!("{name} histogram is not a distribution (sum {total})")));
        }
    }
    Ok(p_labeled
        .iter()
        .zip(p_unlabeled)
        .map(|(&l, &u)| match l + u {
            s if s <= 0.0 => None,
            // Dividing by the larger mass keeps `D*(l,u) = 1 - D*(u,l)` exact.
            s if l >= u => Some(l / s),
            s => Some(1.0 - u / s),
        })
        .collect())
}

/// Trains one logit per bin by gradient descent on the expected
/// discriminator loss under the two histograms and returns the resulting
/// `sigmoid(logit)` per bin.
pub fn fit_tabular_discriminator(p_labeled: &[f64], p_unlabeled: &[f64], steps: usize, lr: f64) -> Result<Vec<f64>> {
    if p_labeled.len() != p_unlabeled.len() {
        return Err(Error::Oracle("histograms over different supports".into()));
    }
    let bins = p_labeled.len();
    let pl = Tensor::new(vec![bins], p_labeled.to_vec())?;
    let pu = Tensor::new(vec![bins], p_unlabeled.to_vec())?;
    let mut logits = Tensor::zeros(&[bins]);
    for _ in 0..steps {
        let mut tape = Tape::new();
        let z = tape.leaf(logits.clone(), true);
        // Expected loss: sum_b pl_b * softplus(-z_b) + pu_b * softplus(z_b).
        let wl = tape.constant(pl.clone());
        let wu = tape.constant(pu.clone());
        let neg = tape.scale(z, -1.0)?;
        let a = tape.softplus(neg)?;
        let b = tape.softplus(z)?;
        let a = tape.mul(a, wl)?;
        let b = tape.mul(b, wu)?;
        let s = tape.add(a, b)?;
        let loss = tape.sum(s)?;
        let grads = tape.backward(loss)?;
        let g = grads.get(z).expect("logit gradient");
        for (v, d) in logits.data_mut().iter_mut().zip(g.data()) {
            *v -= lr * d;
        }
    }
    Ok(logits.data().iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect())
}
