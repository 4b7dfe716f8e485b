//! Dataset ingestion: the CIFAR binary format and a synthetic separable set.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::harness::config::{DatasetConfig, DatasetKind};
use crate::model::Dataset;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;

/// Class-conditional Gaussian blobs. Class `k` puts a blob at angle
/// `2πk/K` on a circle around the image center, brightest in channel
/// `k mod C`; pixels get independent noise. Classes differ in their mean
/// image by far more than the noise, so a linear probe separates them.
pub fn gen_synthetic(classes: usize, per_class: usize, channels: usize, side: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Dataset("synthetic data needs at least two classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.15).expect("normal");
    let plane = side * side;
    let n = classes * per_class;
    let mut images = Array2::zeros((n, channels * plane));
    let mut labels = Vec::with_capacity(n);
    let mid = (side as f64 - 1.0) / 2.0;
    let radius = side as f64 / 4.0;
    let sigma = (side as f64 / 6.0).max(0.75);
    for (i, mut row) in images.axis_iter_mut(Axis(0)).enumerate() {
        let k = i % classes;
        let angle = std::f64::consts::TAU * k as f64 / classes as f64;
        let cy = mid + radius * angle.sin() + rng.random_range(-0.5..0.5);
        let cx = mid + radius * angle.cos() + rng.random_range(-0.5..0.5);
        for c in 0..channels {
            let amp = if c == k % channels { 1.0 } else { 0.3 };
            for y in 0..side {
                for x in 0..side {
                    let r2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    row[c * plane + y * side + x] = amp * (-r2 / (2.0 * sigma * sigma)).exp() + noise.sample(&mut rng);
                }
            }
        }
        labels.push(k);
    }
    Dataset::new(images, labels, channels, side, classes)
}

/// Raw CIFAR records: one or two label bytes (the last one is used) and
/// 3072 pixel bytes in R, G, B planes.
pub fn read_cifar_file(path: &Path, kind: DatasetKind) -> Result<(Array2<f64>, Vec<usize>)> {
    let label_bytes = match kind {
        DatasetKind::Cifar10 => 1,
        DatasetKind::Cifar100 => 2,
        DatasetKind::Synthetic => return Err(Error::Dataset("not a CIFAR dataset".into())),
    };
    let record = label_bytes + CIFAR_PIXELS;
    let bytes = std::fs::read(path)?;
    if bytes.is_empty() || bytes.len() % record != 0 {
        return Err(Error::Dataset(format!(
            "{}: {} bytes is not a whole number of {record}-byte records (truncated or wrong variant)",
            path.display(),
            bytes.len()
        )));
    }
    let classes = if kind == DatasetKind::Cifar10 { 10 } else { 100 };
    let n = bytes.len() / record;
    let mut images = Array2::zeros((n, CIFAR_PIXELS));
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        let y = rec[label_bytes - 1] as usize;
        if y >= classes {
            return Err(Error::Dataset(format!("{}: record {i} has label {y}", path.display())));
        }
        labels.push(y);
        for (dst, &p) in images.row_mut(i).iter_mut().zip(&rec[label_bytes..]) {
            *dst = f64::from(p) / 255.0;
        }
    }
    Ok((images, labels))
}

/// Seeded subset: the first `subset` indices of a shuffled `0..len`.
pub fn subset_indices(len: usize, subset: Option<usize>, seed: u64) -> Result<Vec<usize>> {
    let take = subset.unwrap_or(len);
    if take > len {
        return Err(Error::Dataset(format!("subset {take} larger than dataset size {len}")));
    }
    let mut idx: Vec<usize> = (0..len).collect();
    if take < len {
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(take);
    }
    Ok(idx)
}

/// Per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn of(data: &Dataset) -> Self {
        let plane = data.side * data.side;
        let mut mean = vec![0.0; data.channels];
        let mut std = vec![0.0; data.channels];
        for c in 0..data.channels {
            let block = data.images.slice(ndarray::s![.., c * plane..(c + 1) * plane]);
            let m = block.mean().unwrap_or(0.0);
            let v = block.mapv(|x| (x - m).powi(2)).mean().unwrap_or(0.0);
            mean[c] = m;
            std[c] = if v > 0.0 { v.sqrt() } else { 1.0 };
        }
        Self { mean, std }
    }

    pub fn apply(&self, data: &mut Dataset) {
        let plane = data.side * data.side;
        for mut row in data.images.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                let c = j / plane;
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
    }
}

fn cifar_files(dir: &Path, kind: DatasetKind) -> Result<(Vec<PathBuf>, PathBuf)> {
    let nested = match kind {
        DatasetKind::Cifar10 => "cifar-10-batches-bin",
        _ => "cifar-100-binary",
    };
    let root = if dir.join(nested).is_dir() { dir.join(nested) } else { dir.to_path_buf() };
    let (train, test) = match kind {
        DatasetKind::Cifar10 => ((1..=5).map(|i| root.join(format!("data_batch_{i}.bin"))).collect(), root.join("test_batch.bin")),
        _ => (vec![root.join("train.bin")], root.join("test.bin")),
    };
    Ok((train, test))
}

/// Loads one CIFAR file or a directory of batches, selects the seeded
/// subset and scales pixels to `[0, 1]` (standardization is separate so the
/// test split can reuse the training statistics).
pub fn load_cifar(paths: &[PathBuf], kind: DatasetKind, subset: Option<usize>, seed: u64) -> Result<Dataset> {
    let mut parts = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let (x, y) = read_cifar_file(p, kind)?;
        parts.push(x);
        labels.extend(y);
    }
    let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
    let images = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Dataset(e.to_string()))?;
    let classes = if kind == DatasetKind::Cifar10 { 10 } else { 100 };
    let all = Dataset::new(images, labels, 3, CIFAR_SIDE, classes)?;
    let idx = subset_indices(all.len(), subset, seed)?;
    Ok(all.select(&idx))
}

/// Training and test splits for a run, standardized with training statistics.
pub fn load_splits(cfg: &DatasetConfig, model: &crate::model::ModelConfig) -> Result<(Dataset, Dataset)> {
    match cfg.kind {
        DatasetKind::Synthetic => {
            if cfg.per_class == 0 || cfg.test_per_class == 0 {
                return Err(Error::Dataset("synthetic dataset is empty (per_class = 0)".into()));
            }
            let gen = |per, seed| gen_synthetic(model.num_classes, per, model.in_channels, model.image_size, seed);
            Ok((gen(cfg.per_class, cfg.seed)?, gen(cfg.test_per_class, cfg.seed.wrapping_add(1))?))
        }
        kind => {
            let dir = cfg.path.as_ref().ok_or_else(|| Error::Dataset("data_path is required for CIFAR".into()))?;
            let (train_files, test_file) = if dir.is_file() {
                (vec![dir.clone()], dir.clone())
            } else {
                cifar_files(dir, kind)?
            };
            let mut train = load_cifar(&train_files, kind, cfg.train_subset, cfg.seed)?;
            let mut test = load_cifar(&[test_file], kind, cfg.test_subset, cfg.seed.wrapping_add(1))?;
            let stats = ChannelStats::of(&train);
            stats.apply(&mut train);
            stats.apply(&mut test);
            Ok((train, test))
        }
    }
}
