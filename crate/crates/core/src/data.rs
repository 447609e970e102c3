//! Datasets and the two-view augmentation pipeline.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{norm, Matrix};
use crate::rng::{stream, Purpose};

pub const CIFAR_IMAGE_BYTES: usize = 32 * 32 * 3;
pub const CIFAR_RECORD_BYTES: usize = CIFAR_IMAGE_BYTES + 1;
pub const CIFAR_CLASSES: usize = 10;

/// Feature vectors with integer class labels in `[0, class_count)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl LabeledDataset {
    pub fn new(name: impl Into<String>, features: Matrix, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for {} samples",
                labels.len(),
                features.rows()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::config(format!("label {bad} outside [0, {class_count})")));
        }
        Ok(Self {
            name: name.into(),
            features,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            name: self.name.clone(),
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }

    /// Deterministic shuffled split into `(train, test)`.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::config(format!("test fraction {test_fraction} outside [0, 1)")));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut stream(seed, Purpose::Split, &[]));
        let n_test = (self.len() as f64 * test_fraction).round() as usize;
        let (test, train) = order.split_at(n_test);
        Ok((self.subset(train), self.subset(test)))
    }

    /// Writes the text format: a `name,n,d,c` line, then `label,f1,...,fd`
    /// per sample. Reals use the shortest representation that round-trips.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .flexible(true)
            .has_headers(false)
            .from_path(path)?;
        let header = [
            self.name.clone(),
            self.len().to_string(),
            self.dim().to_string(),
            self.class_count.to_string(),
        ];
        w.write_record(&header)?;
        let mut record = Vec::with_capacity(self.dim() + 1);
        for (i, &label) in self.labels.iter().enumerate() {
            record.clear();
            record.push(label.to_string());
            record.extend(self.features.row(i).iter().map(|v| v.to_string()));
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            what: "dataset csv",
            detail,
        };
        let mut r = csv::ReaderBuilder::new()
            .flexible(true)
            .has_headers(false)
            .from_path(path)?;
        let mut records = r.records();
        let header = records.next().ok_or_else(|| bad("empty file".into()))??;
        if header.len() != 4 {
            return Err(bad(format!("header has {} fields, expected name,n,d,c", header.len())));
        }
        let parse = |field: &str, what: &str| -> Result<usize> {
            field.parse().map_err(|_| bad(format!("{what} `{field}` is not a count")))
        };
        let name = header[0].to_string();
        let n = parse(&header[1], "n")?;
        let d = parse(&header[2], "d")?;
        let c = parse(&header[3], "c")?;
        let mut labels = Vec::with_capacity(n);
        let mut data = Vec::with_capacity(n * d);
        for (i, rec) in records.enumerate() {
            let rec = rec?;
            if rec.len() != d + 1 {
                return Err(bad(format!("row {i} has {} fields, expected {}", rec.len(), d + 1)));
            }
            labels.push(parse(&rec[0], "label")?);
            for f in rec.iter().skip(1) {
                data.push(f.parse::<f64>().map_err(|_| bad(format!("row {i}: `{f}` is not a number")))?);
            }
        }
        if labels.len() != n {
            return Err(bad(format!("header says {n} rows, file has {}", labels.len())));
        }
        LabeledDataset::new(name, Matrix::new(n, d, data)?, labels, c)
    }
}

/// Points scattered around `classes` random centers on the unit sphere.
pub fn gen_blobs(classes: usize, dim: usize, per_class: usize, spread: f64, seed: u64) -> Result<LabeledDataset> {
    if classes < 2 || dim < 2 || per_class < 1 {
        return Err(Error::config("blobs need classes >= 2, dim >= 2, per_class >= 1"));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::config(format!("spread must be >= 0, got {spread}")));
    }
    let mut rng = stream(seed, Purpose::Data, &[0]);
    let mut centers = Vec::with_capacity(classes);
    while centers.len() < classes {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            centers.push(v.into_iter().map(|x| x / n).collect::<Vec<f64>>());
        }
    }
    let mut data = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            for &x in center {
                let e: f64 = StandardNormal.sample(&mut rng);
                data.push(x + spread * e);
            }
            labels.push(c);
        }
    }
    LabeledDataset::new("blobs", Matrix::new(classes * per_class, dim, data)?, labels, classes)
}

/// Concentric circles in 2-D; class `c` has radius `c + 1`.
pub fn gen_rings(classes: usize, per_class: usize, noise: f64, seed: u64) -> Result<LabeledDataset> {
    if classes < 2 || per_class < 1 {
        return Err(Error::config("rings need classes >= 2, per_class >= 1"));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::config(format!("noise must be >= 0, got {noise}")));
    }
    let mut rng = stream(seed, Purpose::Data, &[1]);
    let mut data = Vec::with_capacity(classes * per_class * 2);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let radius = (c + 1) as f64;
        for _ in 0..per_class {
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let ex: f64 = StandardNormal.sample(&mut rng);
            let ey: f64 = StandardNormal.sample(&mut rng);
            data.push(radius * theta.cos() + noise * ex);
            data.push(radius * theta.sin() + noise * ey);
            labels.push(c);
        }
    }
    LabeledDataset::new("rings", Matrix::new(classes * per_class, 2, data)?, labels, classes)
}

/// Parses CIFAR-10 binary batches: 3073-byte records of one label byte
/// followed by 1024 red, 1024 green and 1024 blue bytes (row-major 32x32).
/// Pixels are divided by 255.
pub fn load_cifar10_binary<P: AsRef<Path>>(paths: &[P]) -> Result<LabeledDataset> {
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        parse_cifar10(&bytes, path, &mut labels, &mut data)?;
    }
    let n = labels.len();
    LabeledDataset::new("cifar10", Matrix::new(n, CIFAR_IMAGE_BYTES, data)?, labels, CIFAR_CLASSES)
}

fn parse_cifar10(bytes: &[u8], path: &Path, labels: &mut Vec<usize>, data: &mut Vec<f64>) -> Result<()> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD_BYTES) {
        return Err(Error::BadFileSize {
            path: path.to_path_buf(),
            size: bytes.len() as u64,
            record: CIFAR_RECORD_BYTES,
        });
    }
    for (record, chunk) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let label = chunk[0];
        if label as usize >= CIFAR_CLASSES {
            return Err(Error::BadLabel {
                path: path.to_path_buf(),
                record,
                label,
            });
        }
        labels.push(label as usize);
        data.extend(chunk[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok(())
}

/// Writes a dataset of 3072-dim vectors in `[0, 1]` as CIFAR-10 records,
/// rounding each value to the nearest of 256 levels.
pub fn write_cifar10_binary(dataset: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    if dataset.dim() != CIFAR_IMAGE_BYTES || dataset.class_count > CIFAR_CLASSES {
        return Err(Error::config(format!(
            "CIFAR records need {CIFAR_IMAGE_BYTES} features and at most {CIFAR_CLASSES} classes"
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    for (i, &label) in dataset.labels.iter().enumerate() {
        w.write_all(&[label as u8])?;
        let pixels: Vec<u8> = dataset
            .features
            .row(i)
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        w.write_all(&pixels)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-dimension standardization fitted on a training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Constant columns get unit scale.
    pub fn fit(x: &Matrix) -> Self {
        let n = x.rows().max(1) as f64;
        let d = x.cols();
        let mut mean = vec![0.0; d];
        for row in x.iter_rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for row in x.iter_rows() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = x.clone();
        for i in 0..out.rows() {
            for ((v, m), s) in out.row_mut(i).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        out
    }
}

/// Train/test split with optional standardization fitted on the train part.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub standardizer: Option<Standardizer>,
}

pub fn prepare(dataset: &LabeledDataset, test_fraction: f64, seed: u64, standardize: bool) -> Result<PreparedData> {
    let (mut train, mut test) = dataset.split(test_fraction, seed)?;
    let standardizer = standardize.then(|| Standardizer::fit(&train.features));
    if let Some(s) = &standardizer {
        train.features = s.apply(&train.features);
        test.features = s.apply(&test.features);
    }
    Ok(PreparedData {
        train,
        test,
        standardizer,
    })
}

/// Strength of the vector-space augmentations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Standard deviation of additive Gaussian noise.
    pub noise_sigma: f64,
    /// Probability of zeroing each coordinate, in `[0, 1)`.
    pub mask_prob: f64,
    /// Scale factor drawn from `[1 - scale_jitter, 1 + scale_jitter]`.
    pub scale_jitter: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.1,
            mask_prob: 0.2,
            scale_jitter: 0.1,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// No augmentation at all.
    pub fn identity() -> Self {
        Self {
            noise_sigma: 0.0,
            mask_prob: 0.0,
            scale_jitter: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if !(0.0..1.0).contains(&self.mask_prob) {
            return Err(Error::config(format!("mask_prob must lie in [0, 1), got {}", self.mask_prob)));
        }
        if !(self.scale_jitter >= 0.0 && self.scale_jitter.is_finite()) {
            return Err(Error::config(format!("scale_jitter must be >= 0, got {}", self.scale_jitter)));
        }
        Ok(())
    }
}

/// One augmented view: scale jitter, additive noise, then coordinate masking.
pub fn augment(x: &[f64], cfg: &AugmentConfig, rng: &mut impl Rng) -> Vec<f64> {
    let scale = if cfg.scale_jitter > 0.0 {
        rng.random_range(1.0 - cfg.scale_jitter..=1.0 + cfg.scale_jitter)
    } else {
        1.0
    };
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
    x.iter()
        .map(|&v| {
            let mut y = v * scale;
            if cfg.noise_sigma > 0.0 {
                y += noise.sample(rng);
            }
            if cfg.mask_prob > 0.0 && rng.random::<f64>() < cfg.mask_prob {
                y = 0.0;
            }
            y
        })
        .collect()
}

/// Where a pair of views sits in training: keys the view streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ViewKey {
    pub epoch: u64,
    pub step: u64,
    pub sample: u64,
}

/// Two independent views of `x`, reproducible from `(cfg.seed, key)`.
pub fn two_views(x: &[f64], cfg: &AugmentConfig, key: ViewKey) -> (Vec<f64>, Vec<f64>) {
    let view = |v: u64| {
        let mut rng = stream(cfg.seed, Purpose::View, &[key.epoch, key.step, key.sample, v]);
        augment(x, cfg, &mut rng)
    };
    (view(0), view(1))
}

/// Data source description used by configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Blobs {
        classes: usize,
        dim: usize,
        per_class: usize,
        spread: f64,
        seed: u64,
    },
    Rings {
        classes: usize,
        per_class: usize,
        noise: f64,
        seed: u64,
    },
    Csv {
        path: PathBuf,
    },
    Cifar10 {
        paths: Vec<PathBuf>,
    },
}

impl DataSource {
    pub fn load(&self) -> Result<LabeledDataset> {
        match self {
            DataSource::Blobs {
                classes,
                dim,
                per_class,
                spread,
                seed,
            } => gen_blobs(*classes, *dim, *per_class, *spread, *seed),
            DataSource::Rings {
                classes,
                per_class,
                noise,
                seed,
            } => gen_rings(*classes, *per_class, *noise, *seed),
            DataSource::Csv { path } => LabeledDataset::read_csv(path),
            DataSource::Cifar10 { paths } => load_cifar10_binary(paths),
        }
    }

    /// CIFAR keeps its fixed /255 scaling; everything else is standardized.
    pub fn standardize(&self) -> bool {
        !matches!(self, DataSource::Cifar10 { .. })
    }
}
