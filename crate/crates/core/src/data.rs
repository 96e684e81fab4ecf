//! MNIST ingestion: IDX parsing, the train/validation split, normalization
//! and seeded batching. Also a synthetic dataset for fast toy runs.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Environment variable naming the directory that holds the MNIST files.
pub const MNIST_DIR_ENV: &str = "LAYERBIN_MNIST_DIR";

pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const MNIST_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const MNIST_TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

pub const MNIST_TRAIN_SIZE: usize = 55_000;
pub const MNIST_VAL_SIZE: usize = 5_000;

/// Element type codes of the IDX container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum IdxType {
    U8 = 0x08,
    I8 = 0x09,
    I16 = 0x0B,
    I32 = 0x0C,
    F32 = 0x0D,
    F64 = 0x0E,
}

impl IdxType {
    fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0x08 => IdxType::U8,
            0x09 => IdxType::I8,
            0x0B => IdxType::I16,
            0x0C => IdxType::I32,
            0x0D => IdxType::F32,
            0x0E => IdxType::F64,
            _ => return None,
        })
    }

    pub fn size(self) -> usize {
        match self {
            IdxType::U8 | IdxType::I8 => 1,
            IdxType::I16 => 2,
            IdxType::I32 | IdxType::F32 => 4,
            IdxType::F64 => 8,
        }
    }
}

/// A parsed IDX file. The payload is kept as raw big-endian bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxFile {
    pub kind: IdxType,
    pub dims: Vec<usize>,
    pub payload: Vec<u8>,
}

fn idx_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Idx { offset, reason: reason.into() }
}

/// Parses an uncompressed IDX file, rejecting anything but an exact fit.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxFile> {
    if bytes.len() < 4 {
        return Err(idx_err(bytes.len(), "file shorter than the 4-byte magic"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        let at = if bytes[0] != 0 { 0 } else { 1 };
        return Err(idx_err(at, format!("magic must start with two zero bytes, got {:02x} {:02x}", bytes[0], bytes[1])));
    }
    let kind = IdxType::from_code(bytes[2])
        .ok_or_else(|| idx_err(2, format!("unsupported type code 0x{:02x}", bytes[2])))?;
    let rank = bytes[3] as usize;
    let header_end = 4 + 4 * rank;
    if bytes.len() < header_end {
        return Err(idx_err(bytes.len(), format!("header truncated: {rank} dimensions need {header_end} bytes")));
    }
    let dims: Vec<usize> = bytes[4..header_end]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let payload_len = dims
        .iter()
        .try_fold(kind.size(), |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| idx_err(4, "dimension product overflows"))?;
    let end = header_end + payload_len;
    if bytes.len() < end {
        return Err(idx_err(
            bytes.len(),
            format!("payload truncated: expected {payload_len} bytes after the header, file ends {} short", end - bytes.len()),
        ));
    }
    if bytes.len() > end {
        return Err(idx_err(end, format!("{} trailing bytes after the payload", bytes.len() - end)));
    }
    Ok(IdxFile { kind, dims, payload: bytes[header_end..].to_vec() })
}

impl IdxFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.dims.len() + self.payload.len());
        out.extend_from_slice(&[0, 0, self.kind as u8, self.dims.len() as u8]);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
        out.extend_from_slice(&self.payload);
        out
    }
}

/// Reads an IDX file, gunzipping it first when it starts with the gzip magic.
pub fn read_idx(path: &Path) -> Result<IdxFile> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bytes = if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(|e| Error::io(path, e))?;
        out
    } else {
        raw
    };
    parse_idx(&bytes).map_err(|e| Error::Parse { path: path.to_path_buf(), reason: e.to_string() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Immutable labelled samples with pixel values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub split: Split,
    sample_shape: Vec<usize>,
    pixels: Vec<f32>,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(split: Split, sample_shape: Vec<usize>, pixels: Vec<f32>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let width: usize = sample_shape.iter().product();
        if width == 0 || pixels.len() != width * labels.len() {
            return Err(Error::Data(format!(
                "{} values for {} samples of shape {sample_shape:?}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::Data(format!("label {l} at index {i} outside [0, {classes})")));
        }
        Ok(Dataset { split, sample_shape, pixels, labels, classes })
    }

    /// Images `[n, rows, cols]` (u8) plus labels `[n]` (u8), scaled by 1/255.
    pub fn from_idx(images: &IdxFile, labels: &IdxFile, split: Split) -> Result<Self> {
        if images.kind != IdxType::U8 || labels.kind != IdxType::U8 {
            return Err(Error::Data("MNIST files must hold unsigned bytes".into()));
        }
        if images.dims.len() != 3 || labels.dims.len() != 1 || images.dims[0] != labels.dims[0] {
            return Err(Error::Data(format!(
                "image dims {:?} do not pair with label dims {:?}",
                images.dims, labels.dims
            )));
        }
        let pixels = images.payload.iter().map(|&b| f32::from(b) / 255.0).collect();
        let labels = labels.payload.iter().map(|&b| b as usize).collect();
        Dataset::new(split, vec![1, images.dims[1], images.dims[2]], pixels, labels, 10)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let w = self.sample_len();
        &self.pixels[i * w..(i + 1) * w]
    }

    /// Stacks the given samples into a batch tensor `[k, sample_shape...]`.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        let x = Tensor::new(shape, data).expect("gathered batch matches its shape");
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Contiguous samples `range` as a new dataset.
    pub fn slice(&self, range: std::ops::Range<usize>, split: Split) -> Dataset {
        let w = self.sample_len();
        Dataset {
            split,
            sample_shape: self.sample_shape.clone(),
            pixels: self.pixels[range.start * w..range.end * w].to_vec(),
            labels: self.labels[range].to_vec(),
            classes: self.classes,
        }
    }
}

/// Holds the last `val_count` samples (file order) out for validation.
pub fn split_last(train: &Dataset, val_count: usize) -> Result<(Dataset, Dataset)> {
    if val_count == 0 || val_count >= train.len() {
        return Err(Error::config(format!("cannot hold out {val_count} of {} samples", train.len())));
    }
    let cut = train.len() - val_count;
    Ok((train.slice(0..cut, Split::Train), train.slice(cut..train.len(), Split::Val)))
}

/// The MNIST split: file indices 0–54,999 train, 55,000–59,999 validation.
pub fn split(train: &Dataset) -> Result<(Dataset, Dataset)> {
    let expected = MNIST_TRAIN_SIZE + MNIST_VAL_SIZE;
    if train.len() != expected {
        return Err(Error::config(format!("MNIST split needs {expected} training samples, got {}", train.len())));
    }
    split_last(train, MNIST_VAL_SIZE)
}

/// Train, validation and test sets for one experiment.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn sample_shape(&self) -> &[usize] {
        self.train.sample_shape()
    }

    /// Short content description used to key cached runs.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for ds in [&self.train, &self.val, &self.test] {
            h.update((ds.len() as u64).to_le_bytes());
            for v in ds.pixels.iter().step_by(97) {
                h.update(v.to_le_bytes());
            }
            for &l in &ds.labels {
                h.update([l as u8]);
            }
        }
        crate::experiment::hex(&h.finalize()[..8])
    }
}

pub fn mnist_paths(dir: &Path) -> [PathBuf; 4] {
    [MNIST_TRAIN_IMAGES, MNIST_TRAIN_LABELS, MNIST_TEST_IMAGES, MNIST_TEST_LABELS].map(|name| {
        let plain = dir.join(name);
        let gz = dir.join(format!("{name}.gz"));
        if !plain.exists() && gz.exists() {
            gz
        } else {
            plain
        }
    })
}

/// Loads the four MNIST files from `dir` and applies the 55K/5K/10K split.
pub fn load_mnist(dir: &Path) -> Result<Splits> {
    let [ti, tl, si, sl] = mnist_paths(dir);
    let full = Dataset::from_idx(&read_idx(&ti)?, &read_idx(&tl)?, Split::Train)?;
    let test = Dataset::from_idx(&read_idx(&si)?, &read_idx(&sl)?, Split::Test)?;
    let (train, val) = split(&full)?;
    Ok(Splits { train, val, test })
}

/// Directory from `LAYERBIN_MNIST_DIR`, if set.
pub fn mnist_dir_from_env() -> Option<PathBuf> {
    std::env::var_os(MNIST_DIR_ENV).map(PathBuf::from)
}

/// Mixes a run seed and an epoch number into an independent shuffle seed.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Shuffled mini-batches for one epoch; the final short batch is included.
pub struct Batches<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

pub fn batches(data: &Dataset, batch_size: usize, shuffle_seed: u64) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    Ok(Batches { data, order, batch_size, pos: 0 })
}

impl Batches<'_> {
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn batch_count(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for Batches<'_> {
    type Item = (Tensor<f32>, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let item = self.data.gather(&self.order[self.pos..end]);
        self.pos = end;
        Some(item)
    }
}

/// Gaussian class clusters, for quick deterministic toy experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub sample_shape: Vec<usize>,
    pub classes: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Noise standard deviation around each class centre.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { sample_shape: vec![16], classes: 4, train: 256, val: 64, test: 64, noise: 0.35, seed: 0 }
    }
}

pub fn synthetic(spec: &SyntheticSpec) -> Result<Splits> {
    if spec.classes < 2 {
        return Err(Error::config("synthetic data needs at least 2 classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let width: usize = spec.sample_shape.iter().product();
    let uniform = rand::distr::Uniform::new(0.0f64, 1.0).unwrap();
    let centres: Vec<Vec<f64>> =
        (0..spec.classes).map(|_| (0..width).map(|_| uniform.sample(&mut rng)).collect()).collect();
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::config(e.to_string()))?;
    let mut make = |n: usize, split: Split| {
        let mut pixels = Vec::with_capacity(n * width);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % spec.classes;
            labels.push(class);
            for &c in &centres[class] {
                pixels.push((c + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32);
            }
        }
        Dataset::new(split, spec.sample_shape.clone(), pixels, labels, spec.classes)
    };
    Ok(Splits { train: make(spec.train, Split::Train)?, val: make(spec.val, Split::Val)?, test: make(spec.test, Split::Test)? })
}
