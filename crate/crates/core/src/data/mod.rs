//! Datasets, file formats, augmentation and minibatch assembly.

mod formats;
mod synth;

pub use formats::{
    decode_tensor, encode_cifar10, encode_tensor, load_cifar10, load_tensor_file, parse_cifar10, read_tensor_file,
    unlabeled_from_tensor, write_cifar10, write_tensor_file, CIFAR_RECORD, TENSOR_FILE_VERSION,
};
pub use synth::{synth_generate, SynthData, SynthParams, MAX_CLASSES};

use rand::Rng;

use crate::error::{Error, Result};
use crate::losses::TeacherOutput;
use crate::model::Model;
use crate::tensor::Tensor;

/// Zero padding added on each side before a random crop.
pub const AUGMENT_PAD: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    /// `[N,C,H,W]` with values in `[0,1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledDataset {
    pub images: Tensor,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::Data(format!("{} labels for images of shape {:?}", labels.len(), images.shape())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {bad} outside 0..{classes}")));
        }
        Ok(Self { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// The first `n` examples.
    pub fn take(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        Self::new(self.images.slice_rows(0, n)?, self.labels[..n].to_vec(), self.classes)
    }
}

impl UnlabeledDataset {
    pub fn len(&self) -> usize {
        self.images.shape().first().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn take(&self, n: usize) -> Result<Self> {
        Ok(Self { images: self.images.slice_rows(0, n.min(self.len()))? })
    }
}

/// Per-channel affine normalization `(x - mean) / std`.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() || std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Config(format!("bad normalization mean {mean:?} std {std:?}")));
        }
        Ok(Self { mean, std })
    }

    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    /// Channel moments over an `[N,C,H,W]` tensor.
    pub fn compute(images: &Tensor) -> Result<Self> {
        let [n, c, h, w] = images.shape() else {
            return Err(Error::Data(format!("expected [N,C,H,W], got {:?}", images.shape())));
        };
        let area = h * w;
        let count = (n * area) as f64;
        if count == 0.0 {
            return Err(Error::Data("normalization over an empty dataset".into()));
        }
        let mut mean = vec![0.0; *c];
        let mut sq = vec![0.0; *c];
        for (i, chunk) in images.data().chunks(area).enumerate() {
            let ch = i % c;
            for &v in chunk {
                mean[ch] += v;
                sq[ch] += v * v;
            }
        }
        let mean: Vec<f64> = mean.iter().map(|m| m / count).collect();
        let std = sq.iter().zip(&mean).map(|(s, m)| (s / count - m * m).max(1e-12).sqrt()).collect();
        Self::new(mean, std)
    }

    pub fn apply(&self, images: &Tensor) -> Result<Tensor> {
        let s = images.shape();
        if s.len() != 4 || s[1] != self.mean.len() {
            return Err(Error::Size(format!("normalization for {} channels applied to {s:?}", self.mean.len())));
        }
        let (c, area) = (s[1], s[2] * s[3]);
        let mut data = images.data().to_vec();
        for (i, chunk) in data.chunks_mut(area).enumerate() {
            let (m, sd) = (self.mean[i % c], self.std[i % c]);
            for v in chunk {
                *v = (*v - m) / sd;
            }
        }
        Tensor::new(s.to_vec(), data)
    }
}

/// Corner-aligned bilinear resize of an `[N,C,H,W]` batch. A target
/// dimension of 1 samples the source center.
pub fn resize_bilinear(images: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [n, c, h, w] = images.shape() else {
        return Err(Error::Size(format!("resize expects [N,C,H,W], got {:?}", images.shape())));
    };
    let (n, c, h, w) = (*n, *c, *h, *w);
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::Size(format!("cannot resize {h}x{w} to {out_h}x{out_w}")));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(images.clone());
    }
    let coords = |out: usize, src: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|i| {
                let pos = if out == 1 { (src - 1) as f64 / 2.0 } else { i as f64 * (src - 1) as f64 / (out - 1) as f64 };
                let lo = (pos.floor() as usize).min(src - 1);
                let hi = (lo + 1).min(src - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let ys = coords(out_h, h);
    let xs = coords(out_w, w);
    let src = images.data();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in src.chunks(h * w) {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(vec![n, c, out_h, out_w], out)
}

/// Crop offsets into the padded image plus a horizontal flip flag.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentDraw {
    pub dx: usize,
    pub dy: usize,
    pub flip: bool,
}

impl AugmentDraw {
    /// The crop that reproduces the unpadded image.
    pub const IDENTITY: Self = Self { dx: AUGMENT_PAD, dy: AUGMENT_PAD, flip: false };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let dx = rng.gen_range(0..=2 * AUGMENT_PAD);
        let dy = rng.gen_range(0..=2 * AUGMENT_PAD);
        let flip = rng.gen_bool(0.5);
        Self { dx, dy, flip }
    }
}

/// Zero-pads one `[C,H,W]` image by [`AUGMENT_PAD`], crops back to `HxW`
/// at the drawn offset, then optionally mirrors it horizontally.
pub fn augment_with(image: &[f64], shape: [usize; 3], draw: AugmentDraw) -> Vec<f64> {
    let [c, h, w] = shape;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + draw.dy) as isize - AUGMENT_PAD as isize;
            if sy < 0 || sy as usize >= h {
                continue;
            }
            for x in 0..w {
                let sx = (x + draw.dx) as isize - AUGMENT_PAD as isize;
                if sx < 0 || sx as usize >= w {
                    continue;
                }
                let tx = if draw.flip { w - 1 - x } else { x };
                out[(ch * h + y) * w + tx] = image[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}

pub fn augment<R: Rng + ?Sized>(image: &[f64], shape: [usize; 3], rng: &mut R) -> Vec<f64> {
    augment_with(image, shape, AugmentDraw::sample(rng))
}

/// Gathers `rows` of an image batch, augmenting each one when `rng` is set.
fn gather<R: Rng + ?Sized>(images: &Tensor, rows: &[usize], rng: Option<&mut R>) -> Result<Tensor> {
    let picked = images.select_rows(rows)?;
    let Some(rng) = rng else { return Ok(picked) };
    let s = picked.shape();
    let shape = [s[1], s[2], s[3]];
    let per = shape.iter().product::<usize>();
    let mut data = Vec::with_capacity(picked.len());
    for img in picked.data().chunks(per.max(1)) {
        data.extend(augment(img, shape, rng));
    }
    Tensor::new(s.to_vec(), data)
}

/// A mixed minibatch. Images are already normalized; teacher rows cover
/// the labeled examples followed by the unlabeled ones.
#[derive(Clone, Debug)]
pub struct Batch {
    pub labeled: Tensor,
    pub labels: Vec<usize>,
    pub unlabeled: Option<Tensor>,
    pub teacher: Option<TeacherOutput>,
}

impl Batch {
    pub fn labeled_len(&self) -> usize {
        self.labels.len()
    }

    pub fn unlabeled_len(&self) -> usize {
        self.unlabeled.as_ref().map_or(0, |t| t.shape()[0])
    }

    /// `N'`, the total example count.
    pub fn len(&self) -> usize {
        self.labeled_len() + self.unlabeled_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// How a minibatch is drawn and which teacher annotates it.
pub struct BatchRequest<'a> {
    pub labeled_size: usize,
    pub unlabeled_size: usize,
    pub augment: bool,
    pub normalization: &'a Normalization,
    /// Teacher network with its softening temperature and the temperature
    /// used for confidences.
    pub teacher: Option<(&'a Model, f64, f64)>,
}

/// Samples indices uniformly with replacement (labeled first, then
/// unlabeled), augments in that order, normalizes, then runs the teacher
/// in evaluation mode.
pub fn sample_minibatch(
    labeled: &LabeledDataset,
    unlabeled: Option<&UnlabeledDataset>,
    req: &BatchRequest<'_>,
    rng: &mut impl Rng,
) -> Result<Batch> {
    if req.labeled_size == 0 && req.unlabeled_size == 0 {
        return Err(Error::Data("minibatch of size zero".into()));
    }
    if req.labeled_size > 0 && labeled.is_empty() {
        return Err(Error::Data("labeled pool is empty".into()));
    }
    let pool = match (req.unlabeled_size, unlabeled) {
        (0, _) => None,
        (_, Some(u)) if !u.is_empty() => Some(u),
        _ => return Err(Error::Data("unlabeled examples requested from an empty pool".into())),
    };
    let li: Vec<usize> = (0..req.labeled_size).map(|_| rng.gen_range(0..labeled.len())).collect();
    let ui: Vec<usize> = match pool {
        Some(u) => (0..req.unlabeled_size).map(|_| rng.gen_range(0..u.len())).collect(),
        None => Vec::new(),
    };
    let mut aug = |t: &Tensor, rows: &[usize]| -> Result<Tensor> {
        let raw = gather(t, rows, req.augment.then_some(&mut *rng))?;
        req.normalization.apply(&raw)
    };
    let x_l = aug(&labeled.images, &li)?;
    let x_u = match pool {
        Some(u) => Some(aug(&u.images, &ui)?),
        None => None,
    };
    let teacher = match req.teacher {
        Some((model, tau, conf_tau)) => {
            let all = match &x_u {
                Some(u) => Tensor::concat_rows(&[&x_l, u])?,
                None => x_l.clone(),
            };
            Some(TeacherOutput::with_confidence_tau(model.predict(&all)?, tau, conf_tau)?)
        }
        None => None,
    };
    Ok(Batch { labels: li.iter().map(|&i| labeled.labels[i]).collect(), labeled: x_l, unlabeled: x_u, teacher })
}
