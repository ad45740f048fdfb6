//! IDX (MNIST) parsing and standardization.

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::Scalar;

const IMAGE_MAGIC: u32 = 2051;
const LABEL_MAGIC: u32 = 2049;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

/// Mean and standard deviation of `[0, 1]`-scaled training pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Standardization {
    pub mean: f64,
    pub std: f64,
}

impl Standardization {
    /// Global statistics over every pixel of every image.
    pub fn from_pixels(pixels: &[u8]) -> Self {
        let n = pixels.len().max(1) as f64;
        let mean = pixels.iter().map(|&p| p as f64 / 255.0).sum::<f64>() / n;
        let var = pixels.iter().map(|&p| (p as f64 / 255.0 - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt().max(1e-12) }
    }
}

/// Images (`N × pixels`, standardized) with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub images: Array2<T>,
    pub labels: Vec<u8>,
    pub split: Split,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(images: Array2<T>, labels: Vec<u8>, split: Split) -> Result<Self> {
        if images.nrows() != labels.len() {
            return Err(Error::Consistency(format!(
                "{} images but {} labels",
                images.nrows(),
                labels.len()
            )));
        }
        Ok(Self { images, labels, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The first `n` samples.
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            images: self.images.slice(ndarray::s![..n, ..]).to_owned(),
            labels: self.labels[..n].to_vec(),
            split: self.split,
        }
    }

    /// Samples at the given row indices, in order.
    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            images: self.images.select(ndarray::Axis(0), rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            split: self.split,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset { images: self.images.mapv(|v| U::of(v.f64())), labels: self.labels.clone(), split: self.split }
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format("IDX header truncated".into()))
}

/// Parses an IDX image file into `(rows, cols, pixels)`.
pub fn load_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Format(format!("IDX image file: expected magic {IMAGE_MAGIC}, found {magic}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let want = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::Format("IDX image dimensions overflow".into()))?;
    let body = &bytes[16..];
    if body.len() != want {
        return Err(Error::Format(format!(
            "IDX image file: header declares {n}x{rows}x{cols} = {want} bytes, body has {}",
            body.len()
        )));
    }
    Ok((n, rows * cols, body.to_vec()))
}

/// Parses an IDX label file.
pub fn load_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABEL_MAGIC {
        return Err(Error::Format(format!("IDX label file: expected magic {LABEL_MAGIC}, found {magic}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Format(format!(
            "IDX label file: header declares {n} labels, body has {}",
            body.len()
        )));
    }
    Ok(body.to_vec())
}

/// Loads an image/label file pair, scales pixels to `[0, 1]` and standardizes
/// them. With `stats = None` the statistics are computed from these images
/// (use this for the training split) and returned for reuse on the test split.
pub fn load_mnist<T: Scalar>(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    split: Split,
    stats: Option<Standardization>,
) -> Result<(Dataset<T>, Standardization)> {
    let (n, dim, pixels) = load_idx_images(&std::fs::read(images_path)?)?;
    let labels = load_idx_labels(&std::fs::read(labels_path)?)?;
    if labels.len() != n {
        return Err(Error::Consistency(format!("{n} images but {} labels", labels.len())));
    }
    let stats = stats.unwrap_or_else(|| Standardization::from_pixels(&pixels));
    let (mean, inv) = (stats.mean, 1.0 / stats.std);
    let data: Vec<T> = pixels.iter().map(|&p| T::of((p as f64 / 255.0 - mean) * inv)).collect();
    let images = Array2::from_shape_vec((n, dim), data).map_err(|e| Error::Shape(e.to_string()))?;
    Ok((Dataset::new(images, labels, split)?, stats))
}

/// Loads the canonical four MNIST files from `dir`, standardizing both splits
/// with the training statistics.
pub fn load_mnist_dir<T: Scalar>(dir: impl AsRef<Path>) -> Result<(Dataset<T>, Dataset<T>, Standardization)> {
    let d = dir.as_ref();
    let (train, stats) =
        load_mnist(d.join("train-images-idx3-ubyte"), d.join("train-labels-idx1-ubyte"), Split::Train, None)?;
    let (test, _) =
        load_mnist(d.join("t10k-images-idx3-ubyte"), d.join("t10k-labels-idx1-ubyte"), Split::Test, Some(stats))?;
    Ok((train, test, stats))
}
