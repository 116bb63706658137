use std::path::Path;

use super::{resize_bilinear, LabeledDataset, UnlabeledDataset};
use crate::error::{Error, Result};
use crate::io::Reader;
use crate::tensor::Tensor;

pub const CIFAR_RECORD: usize = 1 + CIFAR_PIXELS;
const CIFAR_PIXELS: usize = 3 * 32 * 32;
const CIFAR_CLASSES: usize = 10;

pub const TENSOR_FILE_VERSION: u32 = 1;
const TENSOR_MAGIC: &[u8; 4] = b"CFTD";

/// Parses CIFAR-10 binary records: a label byte followed by 3072
/// channel-major pixel bytes. Pixels are scaled to `[0,1]`.
pub fn parse_cifar10(bytes: &[u8]) -> Result<LabeledDataset> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format(format!("{} bytes is not a whole number of {CIFAR_RECORD}-byte records", bytes.len())));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] as usize >= CIFAR_CLASSES {
            return Err(Error::Format(format!("record {i} has label {} > 9", rec[0])));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    let images = Tensor::new(vec![n, 3, 32, 32], pixels)?;
    LabeledDataset::new(images, labels, CIFAR_CLASSES)
}

pub fn load_cifar10(path: &Path) -> Result<LabeledDataset> {
    parse_cifar10(&std::fs::read(path)?)
}

/// Encodes a `3x32x32` dataset as CIFAR-10 records, rounding pixels to the
/// nearest byte.
pub fn encode_cifar10(data: &LabeledDataset) -> Result<Vec<u8>> {
    if data.image_shape() != [3, 32, 32] || data.classes > CIFAR_CLASSES {
        return Err(Error::Format(format!(
            "CIFAR records hold 3x32x32 images and at most 10 classes, got {:?} and {}",
            data.image_shape(),
            data.classes
        )));
    }
    let mut out = Vec::with_capacity(data.len() * CIFAR_RECORD);
    for (i, &label) in data.labels.iter().enumerate() {
        out.push(label as u8);
        let img = &data.images.data()[i * CIFAR_PIXELS..(i + 1) * CIFAR_PIXELS];
        out.extend(img.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    Ok(out)
}

pub fn write_cifar10(path: &Path, data: &LabeledDataset) -> Result<()> {
    std::fs::write(path, encode_cifar10(data)?)?;
    Ok(())
}

/// Raw tensor file: magic `CFTD`, `u32` version, `u32` rank, `u32` dims,
/// then the `f64` payload, all little-endian.
pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * t.rank() + 8 * t.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_FILE_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != TENSOR_MAGIC {
        return Err(Error::Format("not a tensor file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != TENSOR_FILE_VERSION {
        return Err(Error::Format(format!("unsupported tensor file version {version}")));
    }
    let rank = r.u32()? as usize;
    if rank > 8 {
        return Err(Error::Format(format!("implausible rank {rank}")));
    }
    let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let t = r.tensor(shape)?;
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes", r.remaining())));
    }
    Ok(t)
}

pub fn write_tensor_file(path: &Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn read_tensor_file(path: &Path) -> Result<Tensor> {
    decode_tensor(&std::fs::read(path)?)
}

/// Reads an `[N,C,H,W]` image tensor, resizing to `target` `(H,W)` when the
/// stored resolution differs.
pub fn load_tensor_file(path: &Path, target: Option<(usize, usize)>) -> Result<UnlabeledDataset> {
    unlabeled_from_tensor(read_tensor_file(path)?, target)
}

pub fn unlabeled_from_tensor(t: Tensor, target: Option<(usize, usize)>) -> Result<UnlabeledDataset> {
    if t.rank() != 4 {
        return Err(Error::Format(format!("image tensor must have rank 4, got shape {:?}", t.shape())));
    }
    let images = match target {
        Some((h, w)) if (h, w) != (t.shape()[2], t.shape()[3]) => resize_bilinear(&t, h, w)?,
        _ => t,
    };
    Ok(UnlabeledDataset { images })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..CIFAR_PIXELS).map(fill));
        r
    }

    #[test]
    fn two_record_fixture() {
        let mut bytes = record(3, |i| (i % 256) as u8);
        bytes.extend(record(9, |_| 255));
        let d = parse_cifar10(&bytes).unwrap();
        assert_eq!(d.labels, vec![3, 9]);
        assert_eq!(d.images.shape(), &[2, 3, 32, 32]);
        assert_eq!(d.images.get(&[0, 0, 0, 5]), 5.0 / 255.0);
        // channel-major: pixel 1024 is the first green value
        assert_eq!(d.images.get(&[0, 1, 0, 0]), (1024 % 256) as f64 / 255.0);
        assert_eq!(d.images.get(&[1, 2, 31, 31]), 1.0);
        assert_eq!(encode_cifar10(&d).unwrap(), bytes);
    }

    #[test]
    fn cifar_errors() {
        let bytes = record(1, |_| 0);
        assert!(matches!(parse_cifar10(&bytes[..3000]), Err(Error::Format(_))));
        assert!(matches!(parse_cifar10(&record(10, |_| 0)), Err(Error::Format(_))));
    }

    #[test]
    fn tensor_round_trip_and_errors() {
        let t = Tensor::new(vec![2, 1, 2, 3], (0..12).map(|i| i as f64 * 0.1 - 0.3).collect()).unwrap();
        let bytes = encode_tensor(&t);
        let back = decode_tensor(&bytes).unwrap();
        assert_eq!(encode_tensor(&back), bytes);
        assert_eq!(back, t);
        let mut bad = bytes.clone();
        bad[1] = 0;
        assert!(matches!(decode_tensor(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode_tensor(&bad), Err(Error::Format(_))));
        assert!(matches!(decode_tensor(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        let flat = Tensor::from_vec(vec![1.0, 2.0]);
        assert!(matches!(unlabeled_from_tensor(flat, None), Err(Error::Format(_))));
    }

    #[test]
    fn large_images_resized() {
        let t = Tensor::new(vec![1, 3, 96, 96], (0..3 * 96 * 96).map(|i| (i % 97) as f64 / 97.0).collect()).unwrap();
        let d = unlabeled_from_tensor(t.clone(), Some((32, 32))).unwrap();
        assert_eq!(d.images, resize_bilinear(&t, 32, 32).unwrap());
    }
}
