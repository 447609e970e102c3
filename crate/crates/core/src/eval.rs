//! Linear evaluation of a frozen encoder, plus embedding export.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{backward, ParamSet, Tape};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::matrix::{dot, norm, Matrix};
use crate::model::{encode, ModelParams};
use crate::rng::{stream, Purpose};
use crate::train::Sgd;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            batch: 256,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    /// Image-scale settings.
    pub fn cifar() -> Self {
        Self {
            lr: 10.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("probe epochs must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("probe lr must be > 0, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::config("probe batch must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("probe momentum must lie in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }
}

/// Encoder outputs, one row per sample, without head or normalization.
pub fn extract_features(encoder: &ModelParams, x: &Matrix) -> Result<Matrix> {
    encode(encoder, x)
}

/// Affine classifier `scores = x W + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl LinearClassifier {
    pub fn scores(&self, x: &Matrix) -> Result<Matrix> {
        let mut s = x.matmul(&self.weight)?;
        for i in 0..s.rows() {
            for (v, b) in s.row_mut(i).iter_mut().zip(self.bias.as_slice()) {
                *v += b;
            }
        }
        Ok(s)
    }
}

fn class_count(labels: &[usize]) -> Result<usize> {
    let c = labels.iter().max().map_or(0, |&m| m + 1);
    if labels.iter().any(|&l| l != labels[0]) {
        Ok(c)
    } else {
        Err(Error::DegenerateLabels)
    }
}

/// Mean softmax cross-entropy of `x W + b` against `labels`, recorded on `tape`.
fn cross_entropy(tape: &mut Tape, params: &ParamSet, x: &Matrix, labels: &[usize]) -> Result<crate::autodiff::NodeId> {
    let w = tape.param(params, 0);
    let b = tape.param(params, 1);
    let x = tape.constant(x.clone());
    let s = tape.matmul(x, w)?;
    let s = tape.add_bias(s, b)?;
    let (n, c) = tape.value(s).shape();
    let mut shift = Matrix::zeros(n, c);
    let mut onehot = Matrix::zeros(n, c);
    for i in 0..n {
        let m = tape.value(s).row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        shift.row_mut(i).iter_mut().for_each(|v| *v = m);
        onehot.set(i, labels[i], 1.0);
    }
    let shift = tape.constant(shift);
    let onehot = tape.constant(onehot);
    let centered = tape.sub(s, shift)?;
    let e = tape.exp(centered)?;
    let z = tape.row_sum(e)?;
    let lse = tape.log(z)?;
    let picked = tape.mul(centered, onehot)?;
    let picked = tape.row_sum(picked)?;
    let per_row = tape.sub(lse, picked)?;
    let total = tape.sum(per_row)?;
    tape.scale(total, 1.0 / n as f64)
}

/// Result of training a probe.
#[derive(Debug, Clone)]
pub struct ProbeFit {
    pub classifier: LinearClassifier,
    /// Mean training loss per epoch.
    pub history: Vec<f64>,
}

/// Trains a linear softmax classifier on frozen features by minibatch SGD
/// with a cosine-decayed rate. Weights start at zero.
pub fn linear_probe(features: &Matrix, labels: &[usize], cfg: &ProbeConfig) -> Result<ProbeFit> {
    cfg.validate()?;
    if features.rows() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} feature rows for {} labels",
            features.rows(),
            labels.len()
        )));
    }
    let c = class_count(labels)?;
    let n = labels.len();
    let mut params = ParamSet::new();
    params.push("probe.weight", Matrix::zeros(features.cols(), c));
    params.push("probe.bias", Matrix::zeros(1, c));
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let steps_per_epoch = n.div_ceil(cfg.batch);
    let total = (cfg.epochs * steps_per_epoch) as f64;
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut stream(cfg.seed, Purpose::Probe, &[epoch as u64]));
        let mut sum = 0.0;
        for (step, chunk) in order.chunks(cfg.batch).enumerate() {
            let x = features.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let loss = cross_entropy(&mut tape, &params, &x, &y)?;
            sum += tape.scalar(loss) * chunk.len() as f64;
            params.zero_grad();
            backward(&tape, loss, &mut params)?;
            let t = (epoch * steps_per_epoch + step) as f64;
            let lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * t / total).cos());
            sgd.step(&mut params, lr);
        }
        history.push(sum / n as f64);
    }
    let mut it = params.iter();
    let weight = it.next().expect("weight").value.clone();
    let bias = it.next().expect("bias").value.clone();
    Ok(ProbeFit {
        classifier: LinearClassifier { weight, bias },
        history,
    })
}

/// Fraction of rows whose label ranks among the `k` highest scores. Ties go
/// to the lower class index; `k` above the class count counts every row.
pub fn topk_accuracy(scores: &Matrix, labels: &[usize], k: usize) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = scores.row(i);
            let sy = row[y];
            let rank = row
                .iter()
                .enumerate()
                .filter(|&(j, &s)| s > sy || (s == sy && j < y))
                .count();
            rank < k
        })
        .count();
    hits as f64 / labels.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeScore {
    pub top1: f64,
    pub top5: f64,
}

/// Encodes both splits with the frozen encoder, fits a probe on `train`, and
/// scores it on `test`.
pub fn evaluate_encoder(
    encoder: &ModelParams,
    train: &LabeledDataset,
    test: &LabeledDataset,
    cfg: &ProbeConfig,
) -> Result<ProbeScore> {
    let f_train = extract_features(encoder, &train.features)?;
    let f_test = extract_features(encoder, &test.features)?;
    let fit = linear_probe(&f_train, &train.labels, cfg)?;
    let mut scores = fit.classifier.scores(&f_test)?;
    if scores.cols() < test.class_count {
        // classes absent from the training split never win
        let mut padded = Matrix::filled(scores.rows(), test.class_count, f64::NEG_INFINITY);
        for i in 0..scores.rows() {
            padded.row_mut(i)[..scores.cols()].copy_from_slice(scores.row(i));
        }
        scores = padded;
    }
    Ok(ProbeScore {
        top1: topk_accuracy(&scores, &test.labels, 1),
        top5: topk_accuracy(&scores, &test.labels, 5),
    })
}

/// Writes `label,f1,...,fd` with a header row.
pub fn export_embeddings(features: &Matrix, labels: &[usize], path: impl AsRef<Path>) -> Result<()> {
    if features.rows() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} feature rows for {} labels",
            features.rows(),
            labels.len()
        )));
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["label".to_string()];
    header.extend((1..=features.cols()).map(|j| format!("f{j}")));
    w.write_record(&header)?;
    for (row, label) in features.iter_rows().zip(labels) {
        let mut rec = vec![label.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Top two principal directions and the data projected onto them.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca2 {
    pub components: [Vec<f64>; 2],
    pub variances: [f64; 2],
    /// `n x 2` centered projections.
    pub projected: Matrix,
}

const PCA_TOL: f64 = 1e-9;
const PCA_MAX_ITERS: usize = 100_000;

fn orthogonalize(v: &mut [f64], against: &[&[f64]]) {
    for u in against {
        let p = dot(v, u);
        v.iter_mut().zip(u.iter()).for_each(|(x, y)| *x -= p * y);
    }
}

fn power_iterate(cov: &Matrix, start: &[f64], against: &[&[f64]]) -> Vec<f64> {
    let d = start.len();
    let trace: f64 = (0..d).map(|i| cov.get(i, i)).sum();
    let mut v = start.to_vec();
    orthogonalize(&mut v, against);
    orthogonalize(&mut v, against);
    let n0 = norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);
    for _ in 0..PCA_MAX_ITERS {
        let mut w: Vec<f64> = (0..d).map(|i| dot(cov.row(i), &v)).collect();
        orthogonalize(&mut w, against);
        orthogonalize(&mut w, against);
        let nw = norm(&w);
        // nothing left outside the deflated directions
        if nw <= 1e-12 * trace || nw < 1e-300 {
            break;
        }
        w.iter_mut().for_each(|x| *x /= nw);
        if dot(&w, &v) < 0.0 {
            w.iter_mut().for_each(|x| *x = -*x);
        }
        let delta = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = w;
        if delta < PCA_TOL {
            break;
        }
    }
    orthogonalize(&mut v, against);
    let n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Projects onto the top two principal components found by power iteration
/// with deflation. The starting vector is fixed.
pub fn pca2d(features: &Matrix) -> Result<Pca2> {
    let (n, d) = features.shape();
    if n < 2 || d < 2 {
        return Err(Error::config(format!("pca2d needs at least 2 rows and 2 columns, got {n}x{d}")));
    }
    let mut mean = vec![0.0; d];
    for row in features.iter_rows() {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n as f64);
    }
    let centered = Matrix::new(
        n,
        d,
        features
            .iter_rows()
            .flat_map(|r| r.iter().zip(&mean).map(|(v, m)| v - m).collect::<Vec<_>>())
            .collect(),
    )?;
    let cov = centered.transpose().matmul(&centered)?.map(|v| v / (n - 1) as f64);
    let start: Vec<f64> = (0..d).map(|i| 1.0 + 0.5 * ((i as f64 * 0.618_033_988_75).fract())).collect();
    let c1 = power_iterate(&cov, &start, &[]);
    let c2 = power_iterate(&cov, &start, &[&c1]);
    let mut projected = Matrix::zeros(n, 2);
    for (i, row) in centered.iter_rows().enumerate() {
        projected.set(i, 0, dot(row, &c1));
        projected.set(i, 1, dot(row, &c2));
    }
    let var = |j: usize| (0..n).map(|i| projected.get(i, j).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok(Pca2 {
        variances: [var(0), var(1)],
        components: [c1, c2],
        projected,
    })
}

/// One row of an evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub seed: u64,
    pub top1: f64,
    pub top5: f64,
}

/// Writes `method,seed,top1,top5`.
pub fn write_report(rows: &[ReportRow], path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "method,seed,top1,top5")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.method, r.seed, r.top1, r.top5)?;
    }
    out.flush()?;
    Ok(())
}
