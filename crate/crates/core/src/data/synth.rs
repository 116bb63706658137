//! Procedural image classification task: colored geometric patterns on a
//! noisy background. The unlabeled pool can be shifted in brightness and
//! object position to mimic a differently collected dataset.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{LabeledDataset, UnlabeledDataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAX_CLASSES: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub classes: usize,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_test: usize,
    /// 0 leaves the unlabeled pool exchangeable with the labeled one.
    pub bias_shift: f64,
    pub size: usize,
    /// Standard deviation of the per-pixel Gaussian noise.
    pub noise: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self { classes: 8, n_labeled: 100, n_unlabeled: 5000, n_test: 2000, bias_shift: 0.3, size: 32, noise: 0.08 }
    }
}

pub struct SynthData {
    pub labeled: LabeledDataset,
    pub unlabeled: UnlabeledDataset,
    pub test: LabeledDataset,
}

/// Draws the three pools from independent streams of `seed`, so changing
/// one pool's size leaves the others untouched.
pub fn synth_generate(seed: u64, p: &SynthParams) -> Result<SynthData> {
    if !(2..=MAX_CLASSES).contains(&p.classes) {
        return Err(Error::Config(format!("synthetic classes must be in 2..={MAX_CLASSES}, got {}", p.classes)));
    }
    if p.size < 8 {
        return Err(Error::Config(format!("synthetic image size must be at least 8, got {}", p.size)));
    }
    if !(0.0..=1.0).contains(&p.bias_shift) || !(p.noise >= 0.0) {
        return Err(Error::Config("bias_shift must lie in [0,1] and noise must be nonnegative".into()));
    }
    let stream = |s| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(s);
        r
    };
    let (images, labels) = pool(&mut stream(1), p, p.n_labeled, 0.0)?;
    let labeled = LabeledDataset::new(images, labels, p.classes)?;
    let (images, _) = pool(&mut stream(2), p, p.n_unlabeled, p.bias_shift)?;
    let unlabeled = UnlabeledDataset { images };
    let (images, labels) = pool(&mut stream(3), p, p.n_test, 0.0)?;
    let test = LabeledDataset::new(images, labels, p.classes)?;
    Ok(SynthData { labeled, unlabeled, test })
}

fn pool(rng: &mut ChaCha8Rng, p: &SynthParams, n: usize, shift: f64) -> Result<(Tensor, Vec<usize>)> {
    let s = p.size;
    let mut data = Vec::with_capacity(n * 3 * s * s);
    let mut labels = Vec::with_capacity(n);
    let noise = Normal::new(0.0, p.noise).expect("validated noise");
    let mut round: Vec<usize> = (0..p.classes).collect();
    for i in 0..n {
        // Balanced classes, shuffled within each round of K.
        if i % p.classes == 0 {
            round.shuffle(rng);
        }
        let class = round[i % p.classes];
        labels.push(class);
        render(rng, class, s, shift, &noise, &mut data);
    }
    Ok((Tensor::new(vec![n, 3, s, s], data)?, labels))
}

fn render(rng: &mut ChaCha8Rng, class: usize, s: usize, shift: f64, noise: &Normal<f64>, out: &mut Vec<f64>) {
    let sf = s as f64;
    let bg: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..0.45));
    let fg: [f64; 3] = loop {
        let c: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
        let dist: f64 = c.iter().zip(&bg).map(|(a, b)| (a - b).abs()).sum();
        if dist > 0.6 {
            break c;
        }
    };
    let radius = rng.gen_range(0.16..0.34) * sf;
    let offset = shift * 0.25 * sf;
    let brightness = shift * 0.5;
    let cx = rng.gen_range(0.35..0.65) * sf + offset;
    let cy = rng.gen_range(0.35..0.65) * sf + offset;
    let angle = rng.gen_range(-0.3..0.3f64);
    let (sin, cos) = angle.sin_cos();
    let start = out.len();
    out.resize(start + 3 * s * s, 0.0);
    for y in 0..s {
        for x in 0..s {
            let dx = (x as f64 + 0.5 - cx) / radius;
            let dy = (y as f64 + 0.5 - cy) / radius;
            let u = cos * dx + sin * dy;
            let v = -sin * dx + cos * dy;
            let on = inside(class, u, v);
            for c in 0..3 {
                let base = if on { fg[c] } else { bg[c] };
                let v = base + brightness + noise.sample(rng);
                // Byte-quantized so datasets survive the CIFAR encoding.
                out[start + (c * s + y) * s + x] = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
            }
        }
    }
}

fn inside(class: usize, u: f64, v: f64) -> bool {
    let r = (u * u + v * v).sqrt();
    let box_ = u.abs().max(v.abs());
    match class {
        0 => r <= 1.0,
        1 => (0.6..=1.0).contains(&r),
        2 => box_ <= 0.8,
        3 => (0.5..=0.85).contains(&box_),
        4 => box_ <= 1.0 && (u.abs() <= 0.28 || v.abs() <= 0.28),
        5 => box_ <= 0.9 && ((u - v).abs() <= 0.35 || (u + v).abs() <= 0.35),
        6 => box_ <= 1.0 && ((v + 1.0) * 2.5).floor() as i64 % 2 == 0,
        7 => box_ <= 1.0 && ((u + 1.0) * 2.5).floor() as i64 % 2 == 0,
        8 => (-1.0..=0.8).contains(&v) && u.abs() <= (v + 1.0) * 0.55,
        _ => box_ <= 1.0 && ((u + v + 2.0) * 1.8).floor() as i64 % 2 == 0,
    }
}
