//! Datasets, batching, augmentation and Gaussian-noise injection.
//!
//! Images are stored as `N × (C·H·W)` rows in channel-major (NCHW) order,
//! already normalized.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::LabelBatch;

/// Environment variable naming the directory that holds on-disk datasets.
pub const DATA_ROOT_ENV: &str = "MGKD_DATA_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub name: String,
    pub images: Array2<f32>,
    pub shape: ImageShape,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl DatasetSplit {
    pub fn new(
        name: impl Into<String>,
        images: Array2<f32>,
        shape: ImageShape,
        labels: Vec<usize>,
        class_count: usize,
    ) -> Result<Self> {
        let split = Self { name: name.into(), images, shape, labels, class_count };
        split.validate()?;
        Ok(split)
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.nrows() != self.labels.len() {
            return Err(Error::invalid(format!(
                "split {}: {} images but {} labels",
                self.name,
                self.images.nrows(),
                self.labels.len()
            )));
        }
        if self.images.ncols() != self.shape.len() {
            return Err(Error::invalid(format!("split {}: row length does not match image shape", self.name)));
        }
        if self.class_count < 2 {
            return Err(Error::invalid("class_count must be at least 2"));
        }
        if let Some(i) = self.labels.iter().position(|&y| y >= self.class_count) {
            return Err(Error::invalid(format!("split {}: label at index {i} out of range", self.name)));
        }
        if self.images.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("split {}: non-finite pixel", self.name)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> (Array2<f32>, LabelBatch) {
        let x = self.images.select(Axis(0), indices);
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        (x, LabelBatch::new(y))
    }

    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> DatasetSplit {
        let (images, labels) = self.batch(indices);
        DatasetSplit {
            name: name.into(),
            images,
            shape: self.shape,
            labels: labels.as_slice().to_vec(),
            class_count: self.class_count,
        }
    }

    /// Per-class sample counts.
    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }

    /// Contiguous index chunks of at most `batch_size`, in order.
    pub fn sequential_batches(&self, batch_size: usize) -> Vec<Vec<usize>> {
        (0..self.len()).collect::<Vec<_>>().chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }
}

/// Shuffled mini-batch index lists for one epoch.
pub fn shuffled_batches(n: usize, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Returns a noisy copy with i.i.d. `N(0, sigma^2)` added to every pixel.
/// `sigma == 0` returns the input unchanged, bit for bit.
pub fn add_gaussian_noise(split: &DatasetSplit, sigma: f64, seed: u64) -> Result<DatasetSplit> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::invalid(format!("noise sigma must be finite and >= 0, got {sigma}")));
    }
    let mut out = split.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
    out.images.mapv_inplace(|v| (v as f64 + normal.sample(&mut rng)) as f32);
    Ok(out)
}

/// Train-time augmentation: zero-padded random crop and horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Augment {
    pub crop_padding: usize,
    pub hflip: bool,
}

impl Augment {
    pub fn is_identity(&self) -> bool {
        self.crop_padding == 0 && !self.hflip
    }

    pub fn apply(&self, x: &Array2<f32>, shape: ImageShape, rng: &mut impl Rng) -> Array2<f32> {
        if self.is_identity() {
            return x.clone();
        }
        let ImageShape { channels: c, height: h, width: w } = shape;
        let pad = self.crop_padding as isize;
        let mut out = Array2::<f32>::zeros(x.raw_dim());
        for (src, mut dst) in x.rows().into_iter().zip(out.rows_mut()) {
            let dy = if pad > 0 { rng.random_range(-(pad as i64)..=pad as i64) as isize } else { 0 };
            let dx = if pad > 0 { rng.random_range(-(pad as i64)..=pad as i64) as isize } else { 0 };
            let flip = self.hflip && rng.random_bool(0.5);
            for ch in 0..c {
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let cx = if flip { w - 1 - xx } else { xx };
                        let sx = cx as isize + dx;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        dst[(ch * h + y) * w + xx] = src[(ch * h + sy as usize) * w + sx as usize];
                    }
                }
            }
        }
        out
    }
}

/// Per-channel normalization `(x - mean) / std`, applied to pixels in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn cifar10() -> Self {
        Self { mean: vec![0.4914, 0.4822, 0.4465], std: vec![0.2470, 0.2435, 0.2616] }
    }

    pub fn cifar100() -> Self {
        Self { mean: vec![0.5071, 0.4867, 0.4408], std: vec![0.2675, 0.2565, 0.2761] }
    }

    pub fn check(&self, channels: usize) -> Result<()> {
        if self.mean.len() != channels || self.std.len() != channels {
            return Err(Error::invalid(format!("normalization stats must have {channels} entries per field")));
        }
        if self.std.iter().any(|s| s.is_nan() || *s <= 0.0) {
            return Err(Error::invalid("normalization std must be positive"));
        }
        Ok(())
    }
}

/// Class-structured image blobs: each class pattern is a superclass pattern
/// plus a class-specific offset, and samples add a random shift and pixel noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticImages {
    pub classes: usize,
    pub superclasses: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Weight of the class-specific pattern relative to the shared superclass pattern.
    pub class_offset: f32,
    pub pixel_noise: f32,
    pub max_shift: usize,
}

impl Default for SyntheticImages {
    fn default() -> Self {
        Self {
            classes: 10,
            superclasses: 5,
            channels: 1,
            height: 16,
            width: 16,
            train_per_class: 200,
            test_per_class: 100,
            class_offset: 0.6,
            pixel_noise: 0.9,
            max_shift: 2,
        }
    }
}

/// Isotropic Gaussian blobs in a vector space, one blob per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VectorBlobs {
    pub classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Expected norm of each class center.
    pub separation: f32,
    pub spread: f32,
}

impl Default for VectorBlobs {
    fn default() -> Self {
        Self { classes: 3, dim: 8, train_per_class: 100, test_per_class: 50, separation: 4.0, spread: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSource {
    Synthetic(SyntheticImages),
    Blobs(VectorBlobs),
    /// CIFAR-10 binary layout: `data_batch_{1..5}.bin` and `test_batch.bin`.
    Cifar10 { path: Option<PathBuf> },
    /// CIFAR-100 binary layout: `train.bin` and `test.bin`, fine labels.
    Cifar100 { path: Option<PathBuf> },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(SyntheticImages::default())
    }
}

impl DatasetSource {
    pub fn shape(&self) -> ImageShape {
        match self {
            DatasetSource::Synthetic(s) => ImageShape { channels: s.channels, height: s.height, width: s.width },
            DatasetSource::Blobs(b) => ImageShape { channels: 1, height: 1, width: b.dim },
            DatasetSource::Cifar10 { .. } | DatasetSource::Cifar100 { .. } => {
                ImageShape { channels: 3, height: 32, width: 32 }
            }
        }
    }

    pub fn class_count(&self) -> usize {
        match self {
            DatasetSource::Synthetic(s) => s.classes,
            DatasetSource::Blobs(b) => b.classes,
            DatasetSource::Cifar10 { .. } => 10,
            DatasetSource::Cifar100 { .. } => 100,
        }
    }
}

/// Train/validation/test splits plus the train-pool indices that went to each.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: DatasetSplit,
    pub val: DatasetSplit,
    pub test: DatasetSplit,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { val_fraction: 0.1, seed: 0 }
    }
}

/// Loads or generates a dataset and carves a validation split out of the
/// training pool with a seeded permutation.
pub fn load_dataset(
    source: &DatasetSource,
    normalization: Option<&Normalization>,
    split: &SplitConfig,
    data_root: Option<&Path>,
) -> Result<Dataset> {
    if !(0.0..1.0).contains(&split.val_fraction) {
        return Err(Error::invalid("val_fraction must be in [0, 1)"));
    }
    let (pool, test) = match source {
        DatasetSource::Synthetic(cfg) => synthetic_images(cfg, split.seed)?,
        DatasetSource::Blobs(cfg) => vector_blobs(cfg, split.seed)?,
        DatasetSource::Cifar10 { path } => {
            let dir = resolve_dir(path.as_deref(), data_root, "cifar-10-batches-bin")?;
            let train_files: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
            let train = read_cifar(&train_files, 1, 0, 10, "train")?;
            let test = read_cifar(&[dir.join("test_batch.bin")], 1, 0, 10, "test")?;
            (train, test)
        }
        DatasetSource::Cifar100 { path } => {
            let dir = resolve_dir(path.as_deref(), data_root, "cifar-100-binary")?;
            let train = read_cifar(&[dir.join("train.bin")], 2, 1, 100, "train")?;
            let test = read_cifar(&[dir.join("test.bin")], 2, 1, 100, "test")?;
            (train, test)
        }
    };
    let (mut pool, mut test) = (pool, test);
    let norm = match (normalization, source) {
        (Some(n), _) => Some(n.clone()),
        (None, DatasetSource::Cifar10 { .. }) => Some(Normalization::cifar10()),
        (None, DatasetSource::Cifar100 { .. }) => Some(Normalization::cifar100()),
        (None, _) => None,
    };
    if let Some(n) = norm {
        normalize(&mut pool, &n)?;
        normalize(&mut test, &n)?;
    }

    let mut perm: Vec<usize> = (0..pool.len()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(split.seed ^ 0x5111_7000));
    let n_val = (pool.len() as f64 * split.val_fraction).round() as usize;
    let mut val_indices = perm[..n_val].to_vec();
    let mut train_indices = perm[n_val..].to_vec();
    val_indices.sort_unstable();
    train_indices.sort_unstable();
    let train = pool.subset(&train_indices, "train");
    let val = pool.subset(&val_indices, "val");
    if train.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    Ok(Dataset { train, val, test, train_indices, val_indices })
}

fn resolve_dir(explicit: Option<&Path>, root: Option<&Path>, default_name: &str) -> Result<PathBuf> {
    let dir = match (explicit, root) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(r)) => r.join(default_name),
        (None, None) => match std::env::var_os(DATA_ROOT_ENV) {
            Some(r) => PathBuf::from(r).join(default_name),
            None => PathBuf::from(default_name),
        },
    };
    if !dir.is_dir() {
        return Err(Error::NotFound { path: dir });
    }
    Ok(dir)
}

fn normalize(split: &mut DatasetSplit, n: &Normalization) -> Result<()> {
    n.check(split.shape.channels)?;
    let plane = split.shape.height * split.shape.width;
    for mut row in split.images.rows_mut() {
        for (i, v) in row.iter_mut().enumerate() {
            let c = i / plane;
            *v = (*v - n.mean[c]) / n.std[c];
        }
    }
    Ok(())
}

/// Reads CIFAR binary records: `label_bytes` label bytes then 3072 pixel bytes.
fn read_cifar(
    files: &[PathBuf],
    label_bytes: usize,
    label_offset: usize,
    classes: usize,
    name: &str,
) -> Result<DatasetSplit> {
    const PIXELS: usize = 3 * 32 * 32;
    let record = label_bytes + PIXELS;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for file in files {
        if !file.is_file() {
            return Err(Error::NotFound { path: file.clone() });
        }
        let bytes = fs::read(file)?;
        let whole = bytes.len() / record;
        if bytes.len() % record != 0 {
            return Err(Error::Format(format!(
                "{}: truncated record at index {whole} ({} trailing bytes)",
                file.display(),
                bytes.len() % record
            )));
        }
        for (i, rec) in bytes.chunks_exact(record).enumerate() {
            let y = rec[label_offset] as usize;
            if y >= classes {
                return Err(Error::Format(format!(
                    "{}: record {i} has label {y}, expected < {classes}",
                    file.display()
                )));
            }
            labels.push(y);
            pixels.extend(rec[label_bytes..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    let n = labels.len();
    let images = Array2::from_shape_vec((n, PIXELS), pixels).expect("record arithmetic");
    DatasetSplit::new(name, images, ImageShape { channels: 3, height: 32, width: 32 }, labels, classes)
}

fn blob_pattern(shape: ImageShape, blobs: usize, rng: &mut impl Rng) -> Vec<f32> {
    let ImageShape { channels: c, height: h, width: w } = shape;
    let mut img = vec![0.0f32; shape.len()];
    for _ in 0..blobs {
        let cy = rng.random_range(0.0..h as f32);
        let cx = rng.random_range(0.0..w as f32);
        let radius = rng.random_range(1.0..(h.min(w) as f32 / 3.0).max(1.5));
        let amps: Vec<f32> = (0..c).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        for (ch, amp) in amps.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                    img[(ch * h + y) * w + x] += amp * (-d2 / (2.0 * radius * radius)).exp();
                }
            }
        }
    }
    img
}

fn synthetic_images(cfg: &SyntheticImages, seed: u64) -> Result<(DatasetSplit, DatasetSplit)> {
    if cfg.classes < 2 || cfg.superclasses == 0 || cfg.train_per_class == 0 {
        return Err(Error::invalid("synthetic dataset needs >= 2 classes, >= 1 superclass and samples"));
    }
    let shape = ImageShape { channels: cfg.channels, height: cfg.height, width: cfg.width };
    if shape.is_empty() {
        return Err(Error::invalid("synthetic image shape must be non-empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let supers: Vec<Vec<f32>> = (0..cfg.superclasses).map(|_| blob_pattern(shape, 4, &mut rng)).collect();
    let patterns: Vec<Vec<f32>> = (0..cfg.classes)
        .map(|c| {
            let offset = blob_pattern(shape, 3, &mut rng);
            supers[c % cfg.superclasses]
                .iter()
                .zip(&offset)
                .map(|(s, o)| s + cfg.class_offset * o)
                .collect()
        })
        .collect();

    let make = |per_class: usize, name: &str, rng: &mut ChaCha8Rng| -> Result<DatasetSplit> {
        let n = per_class * cfg.classes;
        let mut images = Array2::<f32>::zeros((n, shape.len()));
        let mut labels = Vec::with_capacity(n);
        let shift = cfg.max_shift as isize;
        for (i, mut row) in images.rows_mut().into_iter().enumerate() {
            let y = i % cfg.classes;
            labels.push(y);
            let dy = if shift > 0 { rng.random_range(-(shift as i64)..=shift as i64) as isize } else { 0 };
            let dx = if shift > 0 { rng.random_range(-(shift as i64)..=shift as i64) as isize } else { 0 };
            let gain = 1.0 + 0.2 * rng.sample::<f32, _>(StandardNormal);
            let (h, w) = (shape.height as isize, shape.width as isize);
            for ch in 0..shape.channels {
                for yy in 0..h {
                    for xx in 0..w {
                        let (sy, sx) = (yy - dy, xx - dx);
                        let base = if (0..h).contains(&sy) && (0..w).contains(&sx) {
                            patterns[y][((ch as isize * h + sy) * w + sx) as usize]
                        } else {
                            0.0
                        };
                        let noise: f32 = rng.sample(StandardNormal);
                        row[((ch as isize * h + yy) * w + xx) as usize] = gain * base + cfg.pixel_noise * noise;
                    }
                }
            }
        }
        DatasetSplit::new(name, images, shape, labels, cfg.classes)
    };
    let train = make(cfg.train_per_class, "train", &mut rng)?;
    let test = make(cfg.test_per_class.max(1), "test", &mut rng)?;
    Ok((train, test))
}

fn vector_blobs(cfg: &VectorBlobs, seed: u64) -> Result<(DatasetSplit, DatasetSplit)> {
    if cfg.classes < 2 || cfg.dim == 0 || cfg.train_per_class == 0 {
        return Err(Error::invalid("blob dataset needs >= 2 classes, dim >= 1 and samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = cfg.separation / (cfg.dim as f32).sqrt();
    let centers: Vec<Vec<f32>> = (0..cfg.classes)
        .map(|_| (0..cfg.dim).map(|_| scale * rng.sample::<f32, _>(StandardNormal)).collect())
        .collect();
    let shape = ImageShape { channels: 1, height: 1, width: cfg.dim };
    let mut make = |per_class: usize, name: &str| {
        let n = per_class * cfg.classes;
        let mut images = Array2::<f32>::zeros((n, cfg.dim));
        let mut labels = Vec::with_capacity(n);
        for (i, mut row) in images.rows_mut().into_iter().enumerate() {
            let y = i % cfg.classes;
            labels.push(y);
            for (v, c) in row.iter_mut().zip(&centers[y]) {
                *v = c + cfg.spread * rng.sample::<f32, _>(StandardNormal);
            }
        }
        DatasetSplit::new(name, images, shape, labels, cfg.classes)
    };
    let train = make(cfg.train_per_class, "train")?;
    let test = make(cfg.test_per_class.max(1), "test")?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_synthetic() -> DatasetSource {
        DatasetSource::Synthetic(SyntheticImages {
            classes: 4,
            superclasses: 2,
            height: 8,
            width: 8,
            train_per_class: 20,
            test_per_class: 5,
            ..Default::default()
        })
    }

    #[test]
    fn split_is_deterministic() {
        let cfg = SplitConfig { val_fraction: 0.25, seed: 3 };
        let a = load_dataset(&tiny_synthetic(), None, &cfg, None).unwrap();
        let b = load_dataset(&tiny_synthetic(), None, &cfg, None).unwrap();
        assert_eq!(a.train_indices, b.train_indices);
        assert_eq!(a.val_indices, b.val_indices);
        assert_eq!(a, b);
        assert_eq!(a.val.len(), 20);
        assert_eq!(a.train.len(), 60);
    }

    #[test]
    fn balanced_histogram() {
        let d = load_dataset(&tiny_synthetic(), None, &SplitConfig { val_fraction: 0.0, seed: 1 }, None).unwrap();
        assert_eq!(d.train.label_histogram(), vec![20; 4]);
        assert_eq!(d.test.label_histogram(), vec![5; 4]);
    }

    #[test]
    fn noise_zero_sigma_is_identity() {
        let d = load_dataset(&tiny_synthetic(), None, &SplitConfig::default(), None).unwrap();
        assert_eq!(add_gaussian_noise(&d.test, 0.0, 9).unwrap(), d.test);
        assert!(add_gaussian_noise(&d.test, -0.1, 9).is_err());
        let a = add_gaussian_noise(&d.test, 0.1, 9).unwrap();
        let b = add_gaussian_noise(&d.test, 0.1, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.labels, d.test.labels);
        assert_ne!(a.images, d.test.images);
    }

    #[test]
    fn noise_statistics() {
        let images = Array2::<f32>::zeros((1000, 1000));
        let split =
            DatasetSplit::new("z", images, ImageShape { channels: 1, height: 1, width: 1000 }, vec![0; 1000], 2)
                .unwrap();
        let sigma = 0.1;
        let noisy = add_gaussian_noise(&split, sigma, 42).unwrap();
        let n = noisy.images.len() as f64;
        let mean = noisy.images.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = noisy.images.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 3.0 * sigma / n.sqrt(), "mean {mean}");
        assert!((var.sqrt() - sigma).abs() < 0.01 * sigma, "std {}", var.sqrt());
    }

    #[test]
    fn augment_flip_only() {
        let shape = ImageShape { channels: 1, height: 1, width: 3 };
        let x = Array2::from_shape_vec((1, 3), vec![1.0, 2.0, 3.0]).unwrap();
        let aug = Augment { crop_padding: 0, hflip: true };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let outs: Vec<Array2<f32>> = (0..16).map(|_| aug.apply(&x, shape, &mut rng)).collect();
        assert!(outs.iter().any(|o| o.as_slice().unwrap() == [3.0, 2.0, 1.0]));
        assert!(outs.contains(&x));
        assert_eq!(Augment::default().apply(&x, shape, &mut rng), x);
    }

    #[test]
    fn cifar_missing_dir_is_not_found() {
        let src = DatasetSource::Cifar10 { path: Some(PathBuf::from("/definitely/not/here")) };
        let err = load_dataset(&src, None, &SplitConfig::default(), None).unwrap_err();
        assert!(matches!(err, Error::NotFound { .. }), "{err}");
    }

    #[test]
    fn cifar_truncated_record_reports_index() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = vec![3u8];
        rec.extend(vec![128u8; 3072]);
        let mut bytes = rec.repeat(2);
        bytes.extend(&rec[..100]);
        for i in 1..=5 {
            fs::write(dir.path().join(format!("data_batch_{i}.bin")), &rec).unwrap();
        }
        fs::write(dir.path().join("test_batch.bin"), &bytes).unwrap();
        let src = DatasetSource::Cifar10 { path: Some(dir.path().to_path_buf()) };
        let err = load_dataset(&src, None, &SplitConfig::default(), None).unwrap_err().to_string();
        assert!(err.contains("record at index 2"), "{err}");

        fs::write(dir.path().join("test_batch.bin"), &rec).unwrap();
        let d = load_dataset(&src, None, &SplitConfig { val_fraction: 0.2, seed: 0 }, None).unwrap();
        assert_eq!(d.train.len() + d.val.len(), 5);
        assert_eq!(d.test.labels, vec![3]);
        let expected = (128.0 / 255.0 - 0.4914) / 0.2470;
        assert!((d.test.images[[0, 0]] - expected).abs() < 1e-6);
    }
}
