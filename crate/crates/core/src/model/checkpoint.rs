//! Binary checkpoint files.
//!
//! Layout (little-endian): magic `CFCK`, `u32` version, `u32` C/H/W,
//! `u32` split, `u32` layer count, `u64` iteration, `u8` RNG flag followed
//! by the 32-byte seed, `u64` stream and `u128` word position when set,
//! then one record per layer: `u64` byte length, `u32` kind, kind-specific
//! `u32` sizes, and raw `f64` payloads.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Model;
use crate::error::{Error, Result};
use crate::io::Reader;
use crate::layers::{Conv2d, Dense, Layer, ScaledNorm};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"CFCK";

/// Position of a ChaCha8 stream, enough to resume it exactly.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub iteration: u64,
    pub rng: Option<RngState>,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Self { model, iteration: 0, rng: None }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        put_u32(&mut w, CHECKPOINT_VERSION);
        for d in self.model.input_shape() {
            put_u32(&mut w, d as u32);
        }
        put_u32(&mut w, self.model.split() as u32);
        put_u32(&mut w, self.model.layers().len() as u32);
        w.extend_from_slice(&self.iteration.to_le_bytes());
        match &self.rng {
            None => w.push(0),
            Some(s) => {
                w.push(1);
                w.extend_from_slice(&s.seed);
                w.extend_from_slice(&s.stream.to_le_bytes());
                w.extend_from_slice(&s.word_pos.to_le_bytes());
            }
        }
        for layer in self.model.layers() {
            let rec = layer_record(layer);
            w.extend_from_slice(&(rec.len() as u64).to_le_bytes());
            w.extend_from_slice(&rec);
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let input = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let split = r.u32()? as usize;
        let count = r.u32()? as usize;
        let iteration = r.u64()?;
        let rng = match r.take(1)?[0] {
            0 => None,
            1 => {
                let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
                let stream = r.u64()?;
                let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
                Some(RngState { seed, stream, word_pos })
            }
            f => return Err(Error::Format(format!("bad rng flag {f}"))),
        };
        let mut layers = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let len = r.u64()? as usize;
            let body = r.take(len)?;
            let mut lr = Reader::new(body);
            layers.push(read_layer(&mut lr).map_err(|e| Error::Format(format!("layer {i}: {e}")))?);
            if lr.remaining() != 0 {
                return Err(Error::Format(format!("layer {i} record has trailing bytes")));
            }
        }
        if r.remaining() != 0 {
            return Err(Error::Format("trailing bytes after last layer".into()));
        }
        let model = Model::from_layers(input, layers, split).map_err(|e| Error::Format(format!("invalid topology: {e}")))?;
        Ok(Self { model, iteration, rng })
    }
}

pub fn save(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint.to_bytes())?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

const KIND_CONV: u32 = 1;
const KIND_DENSE: u32 = 2;
const KIND_NORM: u32 = 3;
const KIND_RELU: u32 = 4;
const KIND_MAXPOOL: u32 = 5;
const KIND_AVGPOOL: u32 = 6;
const KIND_FLATTEN: u32 = 7;

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(w: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        w.extend_from_slice(&v.to_le_bytes());
    }
}

fn layer_record(layer: &Layer) -> Vec<u8> {
    let mut w = Vec::new();
    match layer {
        Layer::Conv2d(c) => {
            put_u32(&mut w, KIND_CONV);
            for d in [c.out_channels(), c.in_channels(), c.kernel(), c.stride, c.padding] {
                put_u32(&mut w, d as u32);
            }
            put_f64s(&mut w, &c.weight);
            put_f64s(&mut w, &c.bias);
        }
        Layer::Dense(d) => {
            put_u32(&mut w, KIND_DENSE);
            put_u32(&mut w, d.inputs() as u32);
            put_u32(&mut w, d.units() as u32);
            put_f64s(&mut w, &d.weight);
            put_f64s(&mut w, &d.bias);
        }
        Layer::ScaledNorm(n) => {
            put_u32(&mut w, KIND_NORM);
            put_u32(&mut w, n.channels() as u32);
            w.extend_from_slice(&n.momentum.to_le_bytes());
            w.extend_from_slice(&n.eps.to_le_bytes());
            for t in [&n.gamma, &n.beta, &n.running_mean, &n.running_var] {
                put_f64s(&mut w, t);
            }
        }
        Layer::Relu => put_u32(&mut w, KIND_RELU),
        Layer::MaxPool { window, stride } | Layer::AvgPool { window, stride } => {
            let kind = if matches!(layer, Layer::MaxPool { .. }) { KIND_MAXPOOL } else { KIND_AVGPOOL };
            put_u32(&mut w, kind);
            put_u32(&mut w, *window as u32);
            put_u32(&mut w, *stride as u32);
        }
        Layer::Flatten => put_u32(&mut w, KIND_FLATTEN),
    }
    w
}

fn read_layer(r: &mut Reader<'_>) -> Result<Layer> {
    Ok(match r.u32()? {
        KIND_CONV => {
            let [o, i, k, stride, padding] = [r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|v| v as usize);
            let weight = r.tensor(vec![o, i, k, k])?;
            let bias = r.tensor(vec![o])?;
            Layer::Conv2d(Conv2d { weight, bias, stride, padding })
        }
        KIND_DENSE => {
            let (i, o) = (r.u32()? as usize, r.u32()? as usize);
            let weight = r.tensor(vec![i, o])?;
            let bias = r.tensor(vec![o])?;
            Layer::Dense(Dense { weight, bias })
        }
        KIND_NORM => {
            let c = r.u32()? as usize;
            let momentum = r.f64()?;
            let eps = r.f64()?;
            let gamma = r.tensor(vec![c])?;
            let beta = r.tensor(vec![c])?;
            let running_mean = r.tensor(vec![c])?;
            let running_var = r.tensor(vec![c])?;
            Layer::ScaledNorm(ScaledNorm { gamma, beta, running_mean, running_var, momentum, eps })
        }
        KIND_RELU => Layer::Relu,
        KIND_MAXPOOL => Layer::MaxPool { window: r.u32()? as usize, stride: r.u32()? as usize },
        KIND_AVGPOOL => Layer::AvgPool { window: r.u32()? as usize, stride: r.u32()? as usize },
        KIND_FLATTEN => Layer::Flatten,
        k => return Err(Error::Format(format!("unknown layer kind {k}"))),
    })
}
