use std::path::Path;

use rand::Rng as _;

use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;

/// Preprocessing applied by [`load_mnist_idx`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MnistOptions {
    /// Add `U(0, 1/256)` noise and map through [`logit_transform`]. When off,
    /// pixels are only scaled to `[0, 1]`.
    pub dequantize_logit: bool,
    /// Keep at most this many images after filtering.
    pub limit: Option<usize>,
    /// Seed of the dequantization noise.
    pub seed: u64,
}

impl Default for MnistOptions {
    fn default() -> Self {
        MnistOptions { dequantize_logit: true, limit: None, seed: 0 }
    }
}

/// `ln(p / (1 − p))` with `p = 0.05 + 0.9·x`.
pub fn logit_transform(x: f64) -> f64 {
    let p = 0.05 + 0.9 * x;
    (p / (1.0 - p)).ln()
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), reason: reason.into() }
}

/// Raw `u8` images of an IDX3 file, with `(count, rows, cols)`.
pub fn read_idx_images(path: &Path) -> Result<(Vec<u8>, usize, usize, usize)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 {
        return Err(format_err(path, "truncated header"));
    }
    let magic = read_u32(&bytes, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_err(path, format!("magic {magic}, expected {IDX_IMAGES_MAGIC}")));
    }
    let (n, rows, cols) = (read_u32(&bytes, 4) as usize, read_u32(&bytes, 8) as usize, read_u32(&bytes, 12) as usize);
    if (rows, cols) != (28, 28) {
        return Err(format_err(path, format!("images are {rows}x{cols}, expected 28x28")));
    }
    let payload = &bytes[16..];
    if payload.len() != n * rows * cols {
        return Err(format_err(path, format!("{} payload bytes for {n} images", payload.len())));
    }
    Ok((payload.to_vec(), n, rows, cols))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(format_err(path, "truncated header"));
    }
    let magic = read_u32(&bytes, 0);
    if magic != IDX_LABELS_MAGIC {
        return Err(format_err(path, format!("magic {magic}, expected {IDX_LABELS_MAGIC}")));
    }
    let n = read_u32(&bytes, 4) as usize;
    if bytes.len() - 8 != n {
        return Err(format_err(path, format!("{} label bytes, header says {n}", bytes.len() - 8)));
    }
    Ok(bytes[8..].to_vec())
}

/// Loads MNIST images whose digit is in `digits`, flattened to 784 columns.
/// Labels are remapped to `0..digits.len()` in ascending digit order.
pub fn load_mnist_idx(images: &Path, labels: &Path, digits: &[u8], options: &MnistOptions) -> Result<LabeledDataset> {
    let (pixels, n, rows, cols) = read_idx_images(images)?;
    let raw_labels = read_idx_labels(labels)?;
    if raw_labels.len() != n {
        return Err(format_err(labels, format!("{} labels for {n} images", raw_labels.len())));
    }
    let mut sorted = digits.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let d = rows * cols;
    let mut rng = rng::seeded(options.seed);
    let mut data = Vec::new();
    let mut out_labels = Vec::new();
    for (i, &digit) in raw_labels.iter().enumerate() {
        if options.limit.is_some_and(|l| out_labels.len() >= l) {
            break;
        }
        let Some(class) = sorted.iter().position(|&s| s == digit) else { continue };
        for &px in &pixels[i * d..(i + 1) * d] {
            let x = px as f64 / 255.0;
            data.push(if options.dequantize_logit {
                logit_transform(x + rng.random_range(0.0..1.0 / 256.0))
            } else {
                x
            });
        }
        out_labels.push(class);
    }
    let n_out = out_labels.len();
    LabeledDataset::new("mnist", Tensor::new(vec![n_out, d], data)?, Some(out_labels), sorted.len())
}
