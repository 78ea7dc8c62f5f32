//! Dataset ingestion: IDX (MNIST / Fashion-MNIST), CIFAR-10 binary, and a
//! seeded synthetic Gaussian-blob task. Pixels are scaled to `[0, 1]`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::Batch;
use crate::rng;
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic in {what}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { what: String, expected: u32, found: u32 },
    #[error("truncated {what}: {detail}")]
    Truncated { what: String, detail: String },
    #[error("truncated record at index {index}")]
    TruncatedRecord { index: usize },
    #[error("image file has {images} items but label file has {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} at index {index} out of range for {classes} classes")]
    Label { index: usize, label: usize, classes: usize },
    #[error("invalid dataset parameters: {0}")]
    Params(String),
}

/// Train and test splits of one task.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub train: Batch,
    pub test: Batch,
    pub input_shape: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    /// Same data with every sample flattened to a vector.
    pub fn flattened(&self) -> Dataset {
        let flat = |b: &Batch| {
            let n = b.len();
            Batch {
                inputs: b.inputs.clone().reshape(vec![n, b.sample_len()]).expect("same element count"),
                labels: b.labels.clone(),
            }
        };
        Dataset {
            name: self.name.clone(),
            train: flat(&self.train),
            test: flat(&self.test),
            input_shape: vec![self.input_shape.iter().product()],
            classes: self.classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub dim: usize,
    pub train: usize,
    pub test: usize,
    /// Per-pixel standard deviation around each class prototype.
    #[serde(default = "default_noise")]
    pub noise: f32,
    pub seed: u64,
}

fn default_noise() -> f32 {
    0.25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetConfig {
    /// Directory with the four standard `*-idx?-ubyte` files (uncompressed).
    Idx {
        dir: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    /// Directory with `data_batch_{1..5}.bin` and `test_batch.bin`.
    CifarBin {
        dir: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    Synthetic(SyntheticConfig),
}

pub fn load_dataset(cfg: &DatasetConfig) -> Result<Dataset, DataError> {
    match cfg {
        DatasetConfig::Idx {
            dir,
            train_limit,
            test_limit,
        } => load_idx_dir(dir, *train_limit, *test_limit),
        DatasetConfig::CifarBin {
            dir,
            train_limit,
            test_limit,
        } => load_cifar_dir(dir, *train_limit, *test_limit),
        DatasetConfig::Synthetic(s) => synthetic(s),
    }
}

fn read(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32, DataError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| DataError::Truncated {
            what: what.to_string(),
            detail: format!("header ends before offset {}", offset + 4),
        })
}

/// Parsed IDX image file: `count` images of `rows x cols`, pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<f32>,
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages, DataError> {
    let what = "idx image file";
    let magic = be_u32(bytes, 0, what)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            what: what.into(),
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4, what)? as usize;
    let rows = be_u32(bytes, 8, what)? as usize;
    let cols = be_u32(bytes, 12, what)? as usize;
    let needed = count * rows * cols;
    let body = &bytes[16..];
    if body.len() < needed {
        return Err(DataError::Truncated {
            what: what.into(),
            detail: format!("expected {needed} pixel bytes, found {}", body.len()),
        });
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: body[..needed].iter().map(|&p| f32::from(p) / 255.0).collect(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>, DataError> {
    let what = "idx label file";
    let magic = be_u32(bytes, 0, what)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            what: what.into(),
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4, what)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(DataError::Truncated {
            what: what.into(),
            detail: format!("expected {count} labels, found {}", body.len()),
        });
    }
    Ok(body[..count].iter().map(|&l| usize::from(l)).collect())
}

fn check_labels(labels: &[usize], classes: usize) -> Result<(), DataError> {
    match labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        Some((index, &label)) => Err(DataError::Label { index, label, classes }),
        None => Ok(()),
    }
}

fn make_batch(pixels: Vec<f32>, labels: Vec<usize>, shape: &[usize], limit: Option<usize>) -> Result<Batch, DataError> {
    let d: usize = shape.iter().product();
    let n = limit.map_or(labels.len(), |l| l.min(labels.len()));
    if n == 0 {
        return Err(DataError::Params("split is empty".into()));
    }
    let mut full_shape = vec![n];
    full_shape.extend_from_slice(shape);
    let inputs = Tensor::new(full_shape, pixels[..n * d].to_vec()).map_err(|e| DataError::Params(e.to_string()))?;
    Ok(Batch {
        inputs,
        labels: labels[..n].to_vec(),
    })
}

/// Pairs an IDX image file with its label file.
pub fn idx_split(images: &[u8], labels: &[u8], limit: Option<usize>) -> Result<Batch, DataError> {
    let images = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if images.count != labels.len() {
        return Err(DataError::CountMismatch {
            images: images.count,
            labels: labels.len(),
        });
    }
    check_labels(&labels, 10)?;
    make_batch(images.pixels, labels, &[1, images.rows, images.cols], limit)
}

fn load_idx_dir(dir: &Path, train_limit: Option<usize>, test_limit: Option<usize>) -> Result<Dataset, DataError> {
    let train = idx_split(
        &read(&dir.join("train-images-idx3-ubyte"))?,
        &read(&dir.join("train-labels-idx1-ubyte"))?,
        train_limit,
    )?;
    let test = idx_split(
        &read(&dir.join("t10k-images-idx3-ubyte"))?,
        &read(&dir.join("t10k-labels-idx1-ubyte"))?,
        test_limit,
    )?;
    let input_shape = train.inputs.shape()[1..].to_vec();
    Ok(Dataset {
        name: format!("idx:{}", dir.display()),
        train,
        test,
        input_shape,
        classes: 10,
    })
}

/// CIFAR-10 binary records: one label byte then 3072 channel-major pixel bytes.
pub fn parse_cifar(bytes: &[u8]) -> Result<(Vec<f32>, Vec<usize>), DataError> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(DataError::TruncatedRecord {
            index: bytes.len() / CIFAR_RECORD,
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(usize::from(rec[0]));
        pixels.extend(rec[1..].iter().map(|&p| f32::from(p) / 255.0));
    }
    check_labels(&labels, 10)?;
    Ok((pixels, labels))
}

fn load_cifar_dir(dir: &Path, train_limit: Option<usize>, test_limit: Option<usize>) -> Result<Dataset, DataError> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for i in 1..=5 {
        let (p, l) = parse_cifar(&read(&dir.join(format!("data_batch_{i}.bin")))?)?;
        pixels.extend(p);
        labels.extend(l);
    }
    let shape = [3, 32, 32];
    let train = make_batch(pixels, labels, &shape, train_limit)?;
    let (p, l) = parse_cifar(&read(&dir.join("test_batch.bin"))?)?;
    let test = make_batch(p, l, &shape, test_limit)?;
    Ok(Dataset {
        name: format!("cifar-bin:{}", dir.display()),
        train,
        test,
        input_shape: shape.to_vec(),
        classes: 10,
    })
}

/// Gaussian blobs around per-class prototypes drawn from `U(0.1, 0.9)^dim`, clipped to `[0, 1]`.
/// Classes are balanced and samples shuffled.
pub fn synthetic(cfg: &SyntheticConfig) -> Result<Dataset, DataError> {
    if cfg.classes < 2 || cfg.dim == 0 || cfg.train == 0 || cfg.test == 0 {
        return Err(DataError::Params(format!(
            "need classes >= 2 and non-empty dim/train/test, got {cfg:?}"
        )));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(DataError::Params(format!("noise must be >= 0, got {}", cfg.noise)));
    }
    let mut proto_rng = rng::stream(cfg.seed, &[0x5359_4e54]);
    let prototypes: Vec<Vec<f32>> = (0..cfg.classes)
        .map(|_| (0..cfg.dim).map(|_| proto_rng.random_range(0.1..0.9)).collect())
        .collect();
    let normal = Normal::new(0.0f32, cfg.noise).map_err(|e| DataError::Params(e.to_string()))?;
    let split = |n: usize, tag: u64| {
        let mut r = rng::stream(cfg.seed, &[tag]);
        let mut labels: Vec<usize> = (0..n).map(|i| i % cfg.classes).collect();
        labels.shuffle(&mut r);
        let mut data = Vec::with_capacity(n * cfg.dim);
        for &l in &labels {
            data.extend(
                prototypes[l]
                    .iter()
                    .map(|&p| (p + normal.sample(&mut r)).clamp(0.0, 1.0)),
            );
        }
        Batch {
            inputs: Tensor::new(vec![n, cfg.dim], data).expect("n x dim"),
            labels,
        }
    };
    Ok(Dataset {
        name: format!("synthetic(classes={}, dim={})", cfg.classes, cfg.dim),
        train: split(cfg.train, 1),
        test: split(cfg.test, 2),
        input_shape: vec![cfg.dim],
        classes: cfg.classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn idx_images(count: u32, rows: u32, cols: u32, fill: u8) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_IMAGES_MAGIC, count, rows, cols] {
            b.extend(v.to_be_bytes());
        }
        b.extend(std::iter::repeat_n(fill, (count * rows * cols) as usize));
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        b.extend((labels.len() as u32).to_be_bytes());
        b.extend(labels);
        b
    }

    #[test]
    fn idx_header_parse() {
        let imgs = parse_idx_images(&idx_images(2, 28, 28, 255)).unwrap();
        assert_eq!((imgs.count, imgs.rows, imgs.cols), (2, 28, 28));
        assert_eq!(imgs.pixels.len(), 2 * 784);
        assert!(imgs.pixels.iter().all(|&p| p == 1.0));
        let batch = idx_split(&idx_images(2, 28, 28, 0), &idx_labels(&[3, 7]), None).unwrap();
        assert_eq!(batch.inputs.shape(), &[2, 1, 28, 28]);
        assert_eq!(batch.labels, vec![3, 7]);
    }

    #[test]
    fn idx_errors() {
        let mut bad = idx_images(1, 2, 2, 0);
        bad[3] = 0x01;
        assert!(matches!(parse_idx_images(&bad), Err(DataError::BadMagic { found: 0x801, .. })));
        let short = idx_images(2, 2, 2, 0);
        assert!(matches!(parse_idx_images(&short[..short.len() - 1]), Err(DataError::Truncated { .. })));
        assert!(matches!(parse_idx_images(&short[..10]), Err(DataError::Truncated { .. })));
        assert!(matches!(
            idx_split(&idx_images(2, 2, 2, 0), &idx_labels(&[1]), None),
            Err(DataError::CountMismatch { images: 2, labels: 1 })
        ));
        assert!(matches!(
            idx_split(&idx_images(1, 2, 2, 0), &idx_labels(&[12]), None),
            Err(DataError::Label { label: 12, .. })
        ));
    }

    #[test]
    fn cifar_records() {
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[0] = 4;
        bytes[1] = 255;
        bytes[CIFAR_RECORD] = 9;
        let (pixels, labels) = parse_cifar(&bytes).unwrap();
        assert_eq!(labels, vec![4, 9]);
        assert_eq!(pixels[0], 1.0);
        assert_eq!(pixels.len(), 2 * 3072);
        let err = parse_cifar(&bytes[..bytes.len() - 1]).unwrap_err();
        assert_eq!(err.to_string(), "truncated record at index 1");
    }

    #[test]
    fn synthetic_is_deterministic() {
        let cfg = SyntheticConfig {
            classes: 2,
            dim: 64,
            train: 100,
            test: 20,
            noise: 0.25,
            seed: 1,
        };
        let a = synthetic(&cfg).unwrap();
        let b = synthetic(&cfg).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert_eq!(a.train.labels.iter().filter(|&&l| l == 0).count(), 50);
        assert!(a.train.inputs.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        let other = synthetic(&SyntheticConfig { seed: 2, ..cfg }).unwrap();
        assert_ne!(a.train, other.train);
    }

    #[test]
    fn flattening_keeps_values() {
        let batch = idx_split(&idx_images(3, 4, 4, 128), &idx_labels(&[0, 1, 2]), Some(2)).unwrap();
        let ds = Dataset {
            name: "t".into(),
            train: batch.clone(),
            test: batch,
            input_shape: vec![1, 4, 4],
            classes: 10,
        };
        let flat = ds.flattened();
        assert_eq!(flat.train.inputs.shape(), &[2, 16]);
        assert_eq!(flat.input_shape, vec![16]);
    }
}
