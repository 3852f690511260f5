//! MNIST (IDX) and CIFAR-10 (binary) loaders, deterministic subsets and
//! minibatch streams.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MNIST_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const MNIST_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

/// Labeled images scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        split: Split,
        images: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::InvalidShape {
                shape: images.shape().to_vec(),
                reason: "dataset images must be (N, C, H, W)".into(),
            });
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::CountMismatch {
                images: images.shape()[0],
                labels: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Format("image values must lie in [0, 1]".into()));
        }
        Ok(Self {
            name: name.into(),
            split,
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

    /// Per-example shape `(C, H, W)`.
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Examples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::NotEnoughSamples {
                requested: bad + 1,
                available: self.len(),
            });
        }
        Ok(Dataset {
            name: self.name.clone(),
            split: self.split,
            images: self.images.gather_axis0(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        })
    }

    /// Images and labels for a contiguous range, used for chunked evaluation.
    pub fn slice(&self, start: usize, end: usize) -> (Tensor, &[usize]) {
        let idx: Vec<usize> = (start..end).collect();
        (self.images.gather_axis0(&idx), &self.labels[start..end])
    }

    /// Minibatch stream for `plan`.
    pub fn batches(&self, plan: &BatchPlan) -> Batches<'_> {
        Batches::new(self, *plan)
    }
}

/// `n` examples drawn without replacement; the selection and its order depend
/// only on `seed`.
pub fn subset(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    ds.select(&subset_indices(ds.len(), n, seed)?)
}

pub fn subset_indices(total: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > total {
        return Err(Error::NotEnoughSamples {
            requested: n,
            available: total,
        });
    }
    let mut idx: Vec<usize> = (0..total).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(n);
    Ok(idx)
}

/// How a dataset is cut into minibatches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
    pub epochs: usize,
}

/// One minibatch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub epoch: usize,
    pub indices: Vec<usize>,
    pub x: Tensor,
    pub labels: Vec<usize>,
}

/// Iterator over minibatches; epoch `e` is shuffled with seed `seed + e`.
/// The final short batch of each epoch is kept.
pub struct Batches<'a> {
    ds: &'a Dataset,
    plan: BatchPlan,
    epoch: usize,
    order: Vec<usize>,
    pos: usize,
}

impl<'a> Batches<'a> {
    fn new(ds: &'a Dataset, plan: BatchPlan) -> Self {
        let mut b = Self {
            ds,
            plan,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        b.reset_order();
        b
    }

    fn reset_order(&mut self) {
        self.order = (0..self.ds.len()).collect();
        if self.plan.shuffle {
            let seed = self.plan.seed.wrapping_add(self.epoch as u64);
            self.order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        self.pos = 0;
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.ds.len().div_ceil(self.plan.batch_size.max(1))
    }
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.plan.batch_size == 0 || self.ds.is_empty() {
            return None;
        }
        if self.pos >= self.order.len() {
            self.epoch += 1;
            if self.epoch >= self.plan.epochs {
                return None;
            }
            self.reset_order();
        }
        if self.epoch >= self.plan.epochs {
            return None;
        }
        let end = (self.pos + self.plan.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(Batch {
            epoch: self.epoch,
            x: self.ds.images.gather_axis0(&indices),
            labels: indices.iter().map(|&i| self.ds.labels[i]).collect(),
            indices,
        })
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn need(path: &Path, bytes: &[u8], expected: u64) -> Result<()> {
    if (bytes.len() as u64) < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len() as u64,
        });
    }
    Ok(())
}

fn check_magic(path: &Path, bytes: &[u8], expected: u32) -> Result<()> {
    need(path, bytes, 4)?;
    let found = be_u32(bytes, 0);
    if found != expected {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

/// Parses an MNIST image/label file pair in big-endian IDX format.
pub fn load_mnist(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (images_path, labels_path) = (images_path.as_ref(), labels_path.as_ref());
    let img = read_file(images_path)?;
    check_magic(images_path, &img, MNIST_IMAGES_MAGIC)?;
    need(images_path, &img, 16)?;
    let (n, rows, cols) = (
        be_u32(&img, 4) as usize,
        be_u32(&img, 8) as usize,
        be_u32(&img, 12) as usize,
    );
    need(images_path, &img, 16 + (n * rows * cols) as u64)?;

    let lab = read_file(labels_path)?;
    check_magic(labels_path, &lab, MNIST_LABELS_MAGIC)?;
    need(labels_path, &lab, 8)?;
    let n_labels = be_u32(&lab, 4) as usize;
    need(labels_path, &lab, 8 + n_labels as u64)?;
    if n_labels != n {
        return Err(Error::CountMismatch {
            images: n,
            labels: n_labels,
        });
    }

    let pixels = img[16..16 + n * rows * cols]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    let labels = lab[8..8 + n].iter().map(|&b| b as usize).collect();
    let split = if n >= 60_000 || file_name_has(images_path, "train") {
        Split::Train
    } else {
        Split::Val
    };
    Dataset::new(
        "mnist",
        split,
        Tensor::from_vec(vec![n, 1, rows, cols], pixels)?,
        labels,
        10,
    )
}

fn file_name_has(path: &Path, needle: &str) -> bool {
    path.file_name()
        .and_then(|f| f.to_str())
        .is_some_and(|f| f.contains(needle))
}

/// MNIST train or val split from a directory holding the four IDX files
/// under their canonical names.
pub fn load_mnist_dir(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let dir = dir.as_ref();
    let prefix = match split {
        Split::Train => "train",
        Split::Val => "t10k",
    };
    let mut ds = load_mnist(
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )?;
    ds.split = split;
    Ok(ds)
}

fn parse_cifar_records(path: &Path, bytes: &[u8], pixels: &mut Vec<f32>, labels: &mut Vec<usize>) -> Result<()> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::RecordSize {
            path: path.to_path_buf(),
            size: bytes.len() as u64,
            record: CIFAR_RECORD,
        });
    }
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(Error::Format(format!(
                "{}: label byte {label} out of range",
                path.display()
            )));
        }
        labels.push(label);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok(())
}

/// Loads CIFAR-10 binary batches from `dir`: `data_batch_1..5.bin` for the
/// train split, `test_batch.bin` for val.
pub fn load_cifar10(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let dir = dir.as_ref();
    let files: Vec<PathBuf> = match split {
        Split::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
        Split::Val => vec![dir.join("test_batch.bin")],
    };
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in &files {
        let bytes = read_file(f)?;
        parse_cifar_records(f, &bytes, &mut pixels, &mut labels)?;
    }
    let n = labels.len();
    if n == 0 {
        return Err(Error::Format(format!("no CIFAR-10 records under {}", dir.display())));
    }
    Dataset::new(
        "cifar10",
        split,
        Tensor::from_vec(vec![n, 3, 32, 32], pixels)?,
        labels,
        10,
    )
}

/// Loads a single CIFAR-10 binary batch file.
pub fn load_cifar10_batch(path: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    parse_cifar_records(path, &bytes, &mut pixels, &mut labels)?;
    if labels.is_empty() {
        return Err(Error::Format(format!("{}: empty batch file", path.display())));
    }
    Dataset::new(
        "cifar10",
        split,
        Tensor::from_vec(vec![labels.len(), 3, 32, 32], pixels)?,
        labels,
        10,
    )
}
