//! MNIST (IDX) and CIFAR-10 (binary batch) ingestion.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::rng::Stream;

/// Environment variable naming the dataset root directory.
pub const DATA_ENV: &str = "NOISY_NN_DATA";

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Labeled images `[N, C, H, W]`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<u8>,
}

#[derive(Clone, Debug)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<u8>) -> Result<Self> {
        if images.rank() != 4 || images.dim0() != labels.len() {
            return Err(Error::Dimension(format!(
                "dataset of {} labels needs [N, C, H, W] images, got {:?}",
                labels.len(),
                images.shape()
            )));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.gather_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// `n` examples drawn without replacement, kept in their original order.
    /// `n = 0` or `n >= len` returns the whole set.
    pub fn sample(&self, n: usize, rng: &mut Stream) -> Dataset {
        if n == 0 || n >= self.len() {
            return self.clone();
        }
        let mut idx = rand::seq::index::sample(rng, self.len(), n).into_vec();
        idx.sort_unstable();
        self.subset(&idx)
    }

    /// The first `n` examples (all of them if `n` is larger).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images.slice_rows(0, n),
            labels: self.labels[..n].to_vec(),
        }
    }
}

fn ingest(file: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Ingest {
        file: file.display().to_string(),
        offset: offset as u64,
        message: message.into(),
    }
}

fn be_u32(bytes: &[u8], at: usize, file: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| ingest(file, bytes.len(), format!("truncated header, needed 4 bytes at offset {at}")))
}

/// Raw IDX image payload.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn parse(bytes: &[u8], file: &Path) -> Result<Self> {
        let magic = be_u32(bytes, 0, file)?;
        if magic != IDX_IMAGE_MAGIC {
            return Err(ingest(file, 0, format!("bad magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}")));
        }
        let count = be_u32(bytes, 4, file)? as usize;
        let rows = be_u32(bytes, 8, file)? as usize;
        let cols = be_u32(bytes, 12, file)? as usize;
        let need = 16 + count * rows * cols;
        if bytes.len() < need {
            return Err(ingest(file, bytes.len(), format!("truncated pixel data, expected {need} bytes")));
        }
        if bytes.len() > need {
            return Err(ingest(file, need, format!("{} trailing bytes", bytes.len() - need)));
        }
        Ok(Self {
            count,
            rows,
            cols,
            pixels: bytes[16..].to_vec(),
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.pixels.len());
        for v in [IDX_IMAGE_MAGIC, self.count as u32, self.rows as u32, self.cols as u32] {
            out.extend_from_slice(&v.to_be_bytes());
        }
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Pixels scaled to `[0, 1]`, shaped `[N, 1, rows, cols]`.
    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(
            vec![self.count, 1, self.rows, self.cols],
            self.pixels.iter().map(|&p| p as f32 / 255.0).collect(),
        )
    }
}

pub fn parse_idx_labels(bytes: &[u8], file: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, file)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(ingest(file, 0, format!("bad magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}")));
    }
    let count = be_u32(bytes, 4, file)? as usize;
    if bytes.len() != 8 + count {
        return Err(ingest(
            file,
            bytes.len().min(8 + count),
            format!("expected {count} labels, file holds {}", bytes.len().saturating_sub(8)),
        ));
    }
    let labels = bytes[8..].to_vec();
    if let Some(pos) = labels.iter().position(|&l| l > 9) {
        return Err(ingest(file, 8 + pos, format!("label {} out of range 0..9", labels[pos])));
    }
    Ok(labels)
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| ingest(path, 0, format!("cannot read: {e}")))
}

fn mnist_pair(dir: &Path, prefix: &str) -> Result<Dataset> {
    let ipath = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let lpath = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    let images = IdxImages::parse(&read(&ipath)?, &ipath)?;
    let labels = parse_idx_labels(&read(&lpath)?, &lpath)?;
    if images.count != labels.len() {
        return Err(ingest(
            &lpath,
            4,
            format!("{} labels for {} images", labels.len(), images.count),
        ));
    }
    Dataset::new(images.to_tensor()?, labels)
}

/// Loads the four uncompressed IDX files from `dir`.
pub fn load_mnist(dir: &Path) -> Result<Split> {
    Ok(Split {
        train: mnist_pair(dir, "train")?,
        test: mnist_pair(dir, "t10k")?,
    })
}

/// Per-channel standardization constants computed on the training images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

/// Splits a CIFAR-10 batch file into labels and channel-major pixel bytes.
pub fn parse_cifar_records(bytes: &[u8], file: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        let offset = bytes.len() - bytes.len() % CIFAR_RECORD;
        return Err(ingest(
            file,
            offset,
            format!("size {} is not a positive multiple of the {CIFAR_RECORD}-byte record", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(ingest(file, i * CIFAR_RECORD, format!("label {} out of range 0..9", rec[0])));
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((labels, pixels))
}

pub fn encode_cifar_records(labels: &[u8], pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(labels.len() * CIFAR_RECORD);
    for (l, px) in labels.iter().zip(pixels.chunks_exact(CIFAR_RECORD - 1)) {
        out.push(*l);
        out.extend_from_slice(px);
    }
    out
}

fn cifar_files(dir: &Path, names: &[String]) -> Result<(Vec<u8>, Vec<u8>)> {
    let root = if dir.join("cifar-10-batches-bin").is_dir() {
        dir.join("cifar-10-batches-bin")
    } else {
        dir.to_path_buf()
    };
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for name in names {
        let path = root.join(name);
        let (l, p) = parse_cifar_records(&read(&path)?, &path)?;
        labels.extend(l);
        pixels.extend(p);
    }
    Ok((labels, pixels))
}

/// Loads the binary CIFAR-10 batches and standardizes each channel with
/// training-set mean and standard deviation.
pub fn load_cifar10(dir: &Path) -> Result<(Split, ChannelStats)> {
    let train_names: Vec<String> = (1..=5).map(|i| format!("data_batch_{i}.bin")).collect();
    let (train_labels, train_px) = cifar_files(dir, &train_names)?;
    let (test_labels, test_px) = cifar_files(dir, &["test_batch.bin".to_string()])?;

    let plane = 32 * 32;
    let mut mean = vec![0.0; 3];
    let mut std = vec![0.0; 3];
    for c in 0..3 {
        let (mut s, mut s2, mut n) = (0f64, 0f64, 0f64);
        for img in train_px.chunks_exact(3 * plane) {
            for &p in &img[c * plane..(c + 1) * plane] {
                let v = p as f64 / 255.0;
                s += v;
                s2 += v * v;
                n += 1.0;
            }
        }
        let m = s / n;
        mean[c] = m as f32;
        std[c] = (s2 / n - m * m).max(0.0).sqrt() as f32;
    }
    if std.iter().any(|&s| s == 0.0) {
        return Err(Error::Calibration("a CIFAR-10 channel has zero variance".into()));
    }
    let stats = ChannelStats { mean, std };
    let to_dataset = |labels: Vec<u8>, px: &[u8]| -> Result<Dataset> {
        let data = px
            .chunks_exact(plane)
            .enumerate()
            .flat_map(|(k, ch)| {
                let c = k % 3;
                let (m, s) = (stats.mean[c], stats.std[c]);
                ch.iter().map(move |&p| (p as f32 / 255.0 - m) / s)
            })
            .collect();
        Dataset::new(Tensor::new(vec![labels.len(), 3, 32, 32], data)?, labels)
    };
    let split = Split {
        train: to_dataset(train_labels, &train_px)?,
        test: to_dataset(test_labels, &test_px)?,
    };
    Ok((split, stats))
}
