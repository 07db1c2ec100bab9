//! Readers and writers for the CIFAR-10 binary and IDX image formats.

use std::fs;
use std::path::Path;

use crate::dataset::LabeledImages;
use crate::diffgraph::Tensor;
use crate::error::{Error, Result};

pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_CLASSES: usize = 10;
const CIFAR_PIXELS: usize = 3 * 32 * 32;

fn format_err(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.into(),
    }
}

/// Parse CIFAR-10 binary records (1 label byte, then R, G, B planes).
pub fn parse_cifar_binary(bytes: &[u8], path: &Path) -> Result<LabeledImages<f32>> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let offset = bytes.len() - bytes.len() % CIFAR_RECORD;
        return Err(format_err(
            path,
            offset,
            format!("{} bytes is not a whole number of {CIFAR_RECORD}-byte records", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(format_err(path, i * CIFAR_RECORD, format!("label byte {label} >= 10")));
        }
        labels.push(label);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    LabeledImages::new(Tensor::new(vec![n, 3, 32, 32], pixels)?, labels)
}

pub fn load_cifar_binary(path: impl AsRef<Path>) -> Result<LabeledImages<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar_binary(&bytes, path)
}

/// Concatenate several CIFAR batch files.
pub fn load_cifar_files<P: AsRef<Path>>(paths: &[P]) -> Result<LabeledImages<f32>> {
    let parts = paths.iter().map(load_cifar_binary).collect::<Result<Vec<_>>>()?;
    concat(parts)
}

fn concat(parts: Vec<LabeledImages<f32>>) -> Result<LabeledImages<f32>> {
    if parts.is_empty() {
        return Err(Error::Config("no data files given".into()));
    }
    let images: Vec<&Tensor<f32>> = parts.iter().map(|p| &p.images).collect();
    let images = Tensor::concat(&images)?;
    let labels = parts.iter().flat_map(|p| p.labels.iter().copied()).collect();
    LabeledImages::new(images, labels)
}

fn to_byte(v: f32) -> Result<u8> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Range(format!("pixel {v} outside [0, 1]")));
    }
    Ok((v * 255.0).round() as u8)
}

/// Serialize `[N, 3, 32, 32]` images with labels < 10.
pub fn encode_cifar_binary(data: &LabeledImages<f32>) -> Result<Vec<u8>> {
    if data.images.shape()[1..] != [3, 32, 32] {
        return Err(Error::Shape(format!("CIFAR images must be [N, 3, 32, 32], got {:?}", data.images.shape())));
    }
    let mut out = Vec::with_capacity(data.len() * CIFAR_RECORD);
    for (i, &l) in data.labels.iter().enumerate() {
        if l >= CIFAR_CLASSES {
            return Err(Error::LabelOutOfRange { label: l, classes: CIFAR_CLASSES });
        }
        out.push(l as u8);
        for &v in data.images.item(i) {
            out.push(to_byte(v)?);
        }
    }
    Ok(out)
}

fn read_be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| format_err(path, offset, "truncated header"))
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Parse an IDX image file into `[N, 1, H, W]` pixels in `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let magic = read_be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_err(path, 0, format!("magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let dims: Vec<usize> = (0..3)
        .map(|i| read_be_u32(bytes, 4 + 4 * i, path).map(|d| d as usize))
        .collect::<Result<_>>()?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    let need = 16 + n * h * w;
    if bytes.len() != need {
        return Err(format_err(
            path,
            bytes.len().min(need),
            format!("expected {need} bytes, found {}", bytes.len()),
        ));
    }
    if n == 0 || h == 0 || w == 0 {
        return Err(format_err(path, 4, "zero dimension"));
    }
    Tensor::new(vec![n, 1, h, w], bytes[16..].iter().map(|&b| b as f32 / 255.0).collect())
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let magic = read_be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(format_err(path, 0, format!("magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let n = read_be_u32(bytes, 4, path)? as usize;
    if bytes.len() != 8 + n {
        return Err(format_err(
            path,
            bytes.len().min(8 + n),
            format!("expected {} bytes, found {}", 8 + n, bytes.len()),
        ));
    }
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

/// Load an IDX image/label file pair.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<LabeledImages<f32>> {
    let (ip, lp) = (images.as_ref(), labels.as_ref());
    let img = parse_idx_images(&fs::read(ip).map_err(|e| Error::io(ip, e))?, ip)?;
    let lab = parse_idx_labels(&fs::read(lp).map_err(|e| Error::io(lp, e))?, lp)?;
    if img.batch() != lab.len() {
        return Err(format_err(lp, 4, format!("{} labels for {} images", lab.len(), img.batch())));
    }
    LabeledImages::new(img, lab)
}

/// Serialize single-channel images and labels (< 256) as IDX bytes.
pub fn encode_idx(data: &LabeledImages<f32>) -> Result<(Vec<u8>, Vec<u8>)> {
    let [n, c, h, w] = *data.images.shape() else {
        return Err(Error::Shape("images must be [N, 1, H, W]".into()));
    };
    if c != 1 {
        return Err(Error::Shape(format!("IDX images are single-channel, got {c} channels")));
    }
    let mut img = Vec::with_capacity(16 + n * h * w);
    for v in [IDX_IMAGES_MAGIC, n as u32, h as u32, w as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    for &v in data.images.data() {
        img.push(to_byte(v)?);
    }
    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    for &l in &data.labels {
        lab.push(u8::try_from(l).map_err(|_| Error::LabelOutOfRange { label: l, classes: 256 })?);
    }
    Ok((img, lab))
}
