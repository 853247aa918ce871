//! Built-in synthetic datasets, a small binary file format, and batching.
//!
//! File format (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "ADGPDS01"
//! count     u32      number of samples
//! classes   u32
//! rank      u32      rank of one sample (1 or 3)
//! dims      rank x u32
//! records   count x (label u32, prod(dims) x f32)
//! ```

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, streams, Rng64};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"ADGPDS01";

/// Side length of the stripes images.
pub const STRIPES_SIDE: usize = 16;
pub const STRIPES_CLASSES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Shape `(N, ...)`.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.rank() < 2 || inputs.shape()[0] != labels.len() {
            return Err(Error::Data(format!(
                "{} labels for inputs of shape {:?}",
                labels.len(),
                inputs.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self { inputs, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of one sample.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn subset(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        (self.inputs.gather_outer(idx), idx.iter().map(|&i| self.labels[i]).collect())
    }
}

/// Index lists for one epoch, shuffled by `rng`. The last batch may be short.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut Rng64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Gaussian clusters in `dim` dimensions, one per class, with balanced labels.
pub fn blobs(n: usize, dim: usize, classes: usize, spread: f64, centers_seed: u64, rng: &mut Rng64) -> Result<Dataset> {
    if dim == 0 || classes < 2 {
        return Err(Error::Data("blobs need dim >= 1 and at least two classes".into()));
    }
    let mut crng = rng::seeded(centers_seed);
    let centers: Vec<Vec<f64>> =
        (0..classes).map(|_| (0..dim).map(|_| crng.gen_range(-2.0..2.0)).collect()).collect();
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut data = Vec::with_capacity(n * dim);
    for &l in &labels {
        for &c in &centers[l] {
            data.push(c + spread * normal(rng));
        }
    }
    Dataset::new(Tensor::new(vec![n, dim], data)?, labels, classes)
}

/// `channels x 16 x 16` images of horizontal stripes, vertical stripes,
/// checkerboards and diagonal stripes (classes 0..4), with random period,
/// phase and contrast plus additive Gaussian noise.
pub fn stripes(n: usize, channels: usize, noise: f64, rng: &mut Rng64) -> Result<Dataset> {
    if channels == 0 {
        return Err(Error::Data("stripes need at least one channel".into()));
    }
    let s = STRIPES_SIDE;
    let labels: Vec<usize> = (0..n).map(|i| i % STRIPES_CLASSES).collect();
    let mut data = Vec::with_capacity(n * channels * s * s);
    for &l in &labels {
        let period = rng.gen_range(2..=4usize);
        let phase = rng.gen_range(0..period);
        let contrast = rng.gen_range(0.6..1.0);
        for _ in 0..channels {
            for y in 0..s {
                for x in 0..s {
                    let on = match l {
                        0 => (y + phase) % period < period / 2 + period % 2,
                        1 => (x + phase) % period < period / 2 + period % 2,
                        2 => ((x + phase) / period + y / period) % 2 == 0,
                        _ => (x + y + phase) % period < period / 2 + period % 2,
                    };
                    let v = if on { contrast } else { -contrast };
                    data.push(v + noise * normal(rng));
                }
            }
        }
    }
    Dataset::new(Tensor::new(vec![n, channels, s, s], data)?, labels, STRIPES_CLASSES)
}

/// Standard normal sample by Box-Muller.
fn normal(rng: &mut Rng64) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let dims = ds.sample_shape();
    for v in [ds.len(), ds.classes, dims.len()].into_iter().chain(dims.iter().copied()) {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let per = dims.iter().product::<usize>();
    for (i, &l) in ds.labels.iter().enumerate() {
        out.extend_from_slice(&(l as u32).to_le_bytes());
        for v in &ds.inputs.data()[i * per..(i + 1) * per] {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    let bad = |what: &str| Error::Data(format!("{}: {what}", path.display()));
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(bad("not a dataset file (bad magic)"));
    }
    let mut pos = 8;
    let u32_at = |pos: &mut usize| -> Result<u32> {
        let b = bytes.get(*pos..*pos + 4).ok_or_else(|| bad("truncated"))?;
        *pos += 4;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    };
    let count = u32_at(&mut pos)? as usize;
    let classes = u32_at(&mut pos)? as usize;
    let rank = u32_at(&mut pos)? as usize;
    if !(rank == 1 || rank == 3) {
        return Err(bad("sample rank must be 1 or 3"));
    }
    let dims: Vec<usize> = (0..rank).map(|_| u32_at(&mut pos).map(|v| v as usize)).collect::<Result<_>>()?;
    let per: usize = dims.iter().product();
    if per == 0 {
        return Err(bad("zero-sized samples"));
    }
    let mut labels = Vec::with_capacity(count);
    let mut data = Vec::with_capacity(count * per);
    for _ in 0..count {
        labels.push(u32_at(&mut pos)? as usize);
        for _ in 0..per {
            let v = f32::from_bits(u32_at(&mut pos)?) as f64;
            if !v.is_finite() {
                return Err(bad("non-finite pixel"));
            }
            data.push(v);
        }
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    let mut shape = vec![count];
    shape.extend(dims);
    Dataset::new(Tensor::new(shape, data)?, labels, classes)
}

/// Where the training and evaluation sets come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Blobs {
        #[serde(default = "defaults::train_size")]
        train_size: usize,
        #[serde(default = "defaults::eval_size")]
        eval_size: usize,
        #[serde(default = "defaults::blob_dim")]
        dim: usize,
        #[serde(default = "defaults::blob_classes")]
        classes: usize,
        #[serde(default = "defaults::blob_spread")]
        spread: f64,
    },
    Stripes {
        #[serde(default = "defaults::train_size")]
        train_size: usize,
        #[serde(default = "defaults::eval_size")]
        eval_size: usize,
        #[serde(default = "defaults::channels")]
        channels: usize,
        #[serde(default = "defaults::stripes_noise")]
        noise: f64,
    },
    File {
        train: PathBuf,
        eval: PathBuf,
    },
}

mod defaults {
    pub fn train_size() -> usize {
        512
    }
    pub fn eval_size() -> usize {
        256
    }
    pub fn blob_dim() -> usize {
        16
    }
    pub fn blob_classes() -> usize {
        4
    }
    pub fn blob_spread() -> f64 {
        1.0
    }
    pub fn channels() -> usize {
        1
    }
    pub fn stripes_noise() -> f64 {
        0.5
    }
}

impl DatasetSpec {
    pub fn stripes_default() -> Self {
        DatasetSpec::Stripes {
            train_size: defaults::train_size(),
            eval_size: defaults::eval_size(),
            channels: defaults::channels(),
            noise: defaults::stripes_noise(),
        }
    }

    pub fn blobs_default() -> Self {
        DatasetSpec::Blobs {
            train_size: defaults::train_size(),
            eval_size: defaults::eval_size(),
            dim: defaults::blob_dim(),
            classes: defaults::blob_classes(),
            spread: defaults::blob_spread(),
        }
    }

    /// Short name for reports.
    pub fn name(&self) -> &'static str {
        match self {
            DatasetSpec::Blobs { .. } => "blobs",
            DatasetSpec::Stripes { .. } => "stripes",
            DatasetSpec::File { .. } => "file",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DatasetSpec::Blobs { train_size, eval_size, dim, classes, spread } => {
                if *train_size == 0 || *eval_size == 0 || *dim == 0 || *classes < 2 || !(*spread >= 0.0) {
                    return Err(Error::Config(
                        "blobs need positive sizes, dim >= 1, classes >= 2 and spread >= 0".into(),
                    ));
                }
            }
            DatasetSpec::Stripes { train_size, eval_size, channels, noise } => {
                if *train_size == 0 || *eval_size == 0 || *channels == 0 || !(*noise >= 0.0) {
                    return Err(Error::Config("stripes need positive sizes and channels, noise >= 0".into()));
                }
            }
            DatasetSpec::File { .. } => {}
        }
        Ok(())
    }

    /// Per-sample shape, class count and training-set size, without
    /// generating synthetic data (file sets are read).
    pub fn describe(&self) -> Result<(Vec<usize>, usize, usize)> {
        self.validate()?;
        match self {
            DatasetSpec::Blobs { train_size, dim, classes, .. } => Ok((vec![*dim], *classes, *train_size)),
            DatasetSpec::Stripes { train_size, channels, .. } => {
                Ok((vec![*channels, STRIPES_SIDE, STRIPES_SIDE], STRIPES_CLASSES, *train_size))
            }
            DatasetSpec::File { train, .. } => {
                let d = read_dataset(train)?;
                Ok((d.sample_shape().to_vec(), d.classes, d.len()))
            }
        }
    }

    /// Training and evaluation sets; synthetic sets are drawn from independent
    /// streams of `seed`, with class centers shared between the two.
    pub fn load(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        self.validate()?;
        let mut train_rng = rng::stream(seed, streams::TRAIN_DATA);
        let mut eval_rng = rng::stream(seed, streams::EVAL_DATA);
        match self {
            DatasetSpec::Blobs { train_size, eval_size, dim, classes, spread } => Ok((
                blobs(*train_size, *dim, *classes, *spread, seed, &mut train_rng)?,
                blobs(*eval_size, *dim, *classes, *spread, seed, &mut eval_rng)?,
            )),
            DatasetSpec::Stripes { train_size, eval_size, channels, noise } => Ok((
                stripes(*train_size, *channels, *noise, &mut train_rng)?,
                stripes(*eval_size, *channels, *noise, &mut eval_rng)?,
            )),
            DatasetSpec::File { train, eval } => {
                let (a, b) = (read_dataset(train)?, read_dataset(eval)?);
                if a.sample_shape() != b.sample_shape() || a.classes != b.classes {
                    return Err(Error::Data("train and eval files disagree on sample shape or classes".into()));
                }
                Ok((a, b))
            }
        }
    }
}
