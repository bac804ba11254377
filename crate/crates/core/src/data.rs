//! MNIST-format (IDX) datasets, deterministic batching and the Gaussian
//! start point used by every attack.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Standard deviation of the Gaussian augmentation applied to `x` before the
/// first attack step.
pub const GAUSSIAN_INIT_STD: f64 = 0.001;

/// Images in `[0, 1]` with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

/// A mini-batch drawn from a [`Dataset`].
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    pub y: Vec<usize>,
    /// Dataset indices of the rows, in batch order.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

impl Dataset {
    /// `images` must be `[N, C, H, W]` with pixels in `[0, 1]`.
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::Shape(format!(
                "dataset images must be [N, C, H, W], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::CountMismatch {
                images: images.shape()[0],
                labels: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `[C, H, W]`
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn select(&self, indices: &[usize]) -> Batch {
        Batch {
            x: self.images.select_rows(indices),
            y: indices.iter().map(|&i| self.labels[i]).collect(),
            indices: indices.to_vec(),
        }
    }

    /// The first `n` samples in storage order.
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// The first `n` samples after a seeded shuffle.
    pub fn shuffled_subset(&self, n: usize, seed: u64) -> Dataset {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut seed::rng(seed));
        idx.truncate(n);
        self.subset(&idx)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let b = self.select(indices);
        Dataset {
            images: b.x,
            labels: b.y,
            num_classes: self.num_classes,
        }
    }

    /// Writes the dataset as (uncompressed) IDX image and label files.
    /// Pixels are stored as `round(255 * v)`.
    pub fn write_idx(&self, images_path: &Path, labels_path: &Path) -> Result<()> {
        let [c, h, w] = self.sample_shape();
        if c != 1 {
            return Err(Error::Shape(format!(
                "IDX image files hold single-channel images, dataset has {c} channels"
            )));
        }
        if h > u32::MAX as usize || w > u32::MAX as usize || self.len() > u32::MAX as usize {
            return Err(Error::Shape("dataset too large for IDX".into()));
        }
        if self.num_classes > 256 {
            return Err(Error::Config("IDX labels are single bytes".into()));
        }
        let mut img = Vec::with_capacity(16 + self.images.len());
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        for d in [self.len(), h, w] {
            img.extend_from_slice(&(d as u32).to_be_bytes());
        }
        img.extend(self.images.data().iter().map(|v| (v * 255.0).round() as u8));
        let mut lab = Vec::with_capacity(8 + self.len());
        lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lab.extend_from_slice(&(self.len() as u32).to_be_bytes());
        lab.extend(self.labels.iter().map(|&l| l as u8));
        fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;
        fs::write(labels_path, lab).map_err(|e| Error::io(labels_path, e))?;
        Ok(())
    }
}

/// Reads a file, transparently inflating gzip content.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated(path.to_path_buf()))
}

fn parse_images<'a>(bytes: &'a [u8], path: &Path) -> Result<(usize, usize, usize, &'a [u8])> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let h = be_u32(bytes, 8, path)? as usize;
    let w = be_u32(bytes, 12, path)? as usize;
    let body = &bytes[16..];
    if body.len() < n * h * w {
        return Err(Error::Truncated(path.to_path_buf()));
    }
    Ok((n, h, w, &body[..n * h * w]))
}

fn parse_labels<'a>(bytes: &'a [u8], path: &Path) -> Result<&'a [u8]> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Truncated(path.to_path_buf()));
    }
    Ok(&body[..n])
}

/// Loads an IDX image/label pair (plain or gzip-compressed) as a 10-class
/// dataset with pixels scaled to `[0, 1]`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let img_bytes = read_maybe_gz(ip)?;
    let lab_bytes = read_maybe_gz(lp)?;
    let (n, h, w, pixels) = parse_images(&img_bytes, ip)?;
    let labels = parse_labels(&lab_bytes, lp)?;
    if labels.len() != n {
        return Err(Error::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    let num_classes = 10.max(labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0));
    let images = Tensor::raw(
        vec![n, 1, h, w],
        pixels.iter().map(|&b| f64::from(b) / 255.0).collect(),
    );
    Dataset::new(images, labels.iter().map(|&l| l as usize).collect(), num_classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

fn find_idx_file(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [stem.to_string(), format!("{stem}.gz")] {
        let p = dir.join(name);
        if p.exists() {
            return Ok(p);
        }
    }
    Err(Error::io(
        dir.join(stem),
        std::io::Error::new(std::io::ErrorKind::NotFound, "IDX file not found"),
    ))
}

/// Loads `train-*` or `t10k-*` IDX files from a directory in the canonical
/// MNIST layout, with or without a `.gz` suffix.
pub fn load_mnist_dir(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let dir = dir.as_ref();
    load_idx(
        find_idx_file(dir, &format!("{prefix}-images-idx3-ubyte"))?,
        find_idx_file(dir, &format!("{prefix}-labels-idx1-ubyte"))?,
    )
}

/// Partitions a seeded permutation of the dataset into batches of
/// `batch_size`; the last partial batch is kept.
pub fn batches(dataset: &Dataset, batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    idx.shuffle(&mut seed::rng(seed));
    Ok(idx.chunks(batch_size).map(|c| dataset.select(c)).collect())
}

/// Batches in storage order (evaluation).
pub fn sequential_batches(dataset: &Dataset, batch_size: usize) -> Result<Vec<Batch>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let idx: Vec<usize> = (0..dataset.len()).collect();
    Ok(idx.chunks(batch_size).map(|c| dataset.select(c)).collect())
}

/// `x + 0.001 * z` with `z ~ N(0, I)` drawn from `seed`. The result is not
/// clamped or projected.
pub fn gaussian_perturb(x: &Tensor, seed: u64) -> Tensor {
    let mut rng = seed::rng(seed);
    let data = x
        .data()
        .iter()
        .map(|&v| {
            let z: f64 = rng.sample(StandardNormal);
            v + GAUSSIAN_INIT_STD * z
        })
        .collect();
    Tensor::raw(x.shape().to_vec(), data)
}
