//! Contrastive pretraining: batching, two-view encoding, the loss, and SGD
//! under linear warmup followed by cosine decay.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{backward, ParamSet, Tape};
use crate::data::{two_views, AugmentConfig, LabeledDataset, ViewKey};
use crate::error::{Error, Result};
use crate::loss::{sscl_loss_on_tape, LossMode};
use crate::matrix::Matrix;
use crate::model::{EncoderConfig, ModelParams};
use crate::negatives::{build_negative_sets, LossParams, NegativeSet, StepKey};
use crate::rng::{stream, Purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Inputs per batch; each contributes two views.
    pub batch_n: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Defaults to `0.1 * batch_n / 256`.
    pub base_lr: Option<f64>,
    pub warmup_start_lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub loss: LossParams,
    pub mode: LossMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_n: 256,
            epochs: 200,
            warmup_epochs: 20,
            base_lr: None,
            warmup_start_lr: 1e-4,
            weight_decay: 1e-3,
            momentum: 0.9,
            loss: LossParams::default(),
            mode: LossMode::Sscl,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn base_lr(&self) -> f64 {
        self.base_lr.unwrap_or(0.1 * self.batch_n as f64 / 256.0)
    }

    /// Loss parameters with the mode's components switched on or off.
    pub fn effective_loss(&self) -> LossParams {
        self.mode.effective(&self.loss)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_n == 0 {
            return Err(Error::config("batch_n must be >= 1"));
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(Error::config(format!(
                "warmup_epochs ({}) must be below epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        let base = self.base_lr();
        if !(base > 0.0 && base.is_finite()) {
            return Err(Error::config(format!("base_lr must be > 0, got {base}")));
        }
        if !(self.warmup_start_lr >= 0.0 && self.warmup_start_lr.is_finite()) {
            return Err(Error::config("warmup_start_lr must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay must be >= 0"));
        }
        self.effective_loss().validate()?;
        let eff = self.effective_loss();
        if eff.k > 0 && eff.s > 2 * self.batch_n - 2 {
            return Err(Error::config(format!(
                "hardest set s = {} exceeds the {} real negatives per anchor",
                eff.s,
                2 * self.batch_n - 2
            )));
        }
        Ok(())
    }
}

/// Learning rate at global `step`: linear warmup from `warmup_start_lr`, then
/// cosine decay from `base_lr` over the remaining steps.
pub fn lr_at(step: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    let spe = steps_per_epoch.max(1);
    let warm = cfg.warmup_epochs * spe;
    let total = cfg.epochs * spe;
    let base = cfg.base_lr();
    if step < warm {
        return cfg.warmup_start_lr + (base - cfg.warmup_start_lr) * step as f64 / warm as f64;
    }
    if total <= warm {
        return base;
    }
    let progress = ((step - warm) as f64 / (total - warm) as f64).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: Vec<Matrix>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers: Vec::new(),
        }
    }

    /// `buf = momentum * buf + grad + wd * param; param -= lr * buf`.
    pub fn step(&mut self, params: &mut ParamSet, lr: f64) {
        if self.buffers.is_empty() {
            self.buffers = params
                .iter()
                .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
                .collect();
        }
        for (p, buf) in params.iter_mut().zip(&mut self.buffers) {
            let value = p.value.as_mut_slice();
            for ((b, v), g) in buf.as_mut_slice().iter_mut().zip(value).zip(p.grad.as_slice()) {
                *b = self.momentum * *b + g + self.weight_decay * *v;
                *v -= lr * *b;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Rate used at the first step of the epoch.
    pub lr: f64,
}

/// Hooks into the training loop. All methods default to no-ops.
pub trait TrainObserver {
    fn on_step(&mut self, _epoch: usize, _step: usize, _loss: f64, _sets: &[NegativeSet]) -> Result<()> {
        Ok(())
    }

    /// `model` still carries its projection head.
    fn on_epoch(&mut self, _metrics: &EpochMetrics, _model: &ModelParams) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Output of [`pretrain`]: the encoder without its head, plus per-epoch metrics.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub encoder: ModelParams,
    pub history: Vec<EpochMetrics>,
}

/// The stacked `2N x D` view block of one batch: first views, then second views.
pub fn batch_views(dataset: &LabeledDataset, indices: &[usize], augment: &AugmentConfig, epoch: usize, step: usize) -> Matrix {
    let n = indices.len();
    let d = dataset.dim();
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = indices
        .par_iter()
        .map(|&i| {
            let key = ViewKey {
                epoch: epoch as u64,
                step: step as u64,
                sample: i as u64,
            };
            two_views(dataset.features.row(i), augment, key)
        })
        .collect();
    let mut data = Vec::with_capacity(2 * n * d);
    for (a, _) in &pairs {
        data.extend_from_slice(a);
    }
    for (_, b) in &pairs {
        data.extend_from_slice(b);
    }
    Matrix::new(2 * n, d, data).expect("augmented views are finite")
}

/// Trains encoder and projection head with the contrastive objective and
/// returns the encoder alone.
pub fn pretrain(
    dataset: &LabeledDataset,
    model_cfg: &EncoderConfig,
    cfg: &TrainConfig,
    augment: &AugmentConfig,
    observer: &mut dyn TrainObserver,
) -> Result<Pretrained> {
    cfg.validate()?;
    augment.validate()?;
    if model_cfg.input_dim != dataset.dim() {
        return Err(Error::shape(
            "pretrain",
            format!("data has {} features, encoder expects {}", dataset.dim(), model_cfg.input_dim),
        ));
    }
    let mut model = ModelParams::init(model_cfg)?;
    if cfg.epochs == 0 {
        return Ok(Pretrained {
            encoder: model.into_encoder(),
            history: Vec::new(),
        });
    }
    let n = cfg.batch_n;
    if dataset.len() < n {
        return Err(Error::DatasetTooSmall {
            n: dataset.len(),
            batch: n,
        });
    }
    let loss_params = cfg.effective_loss();
    let steps_per_epoch = dataset.len() / n;
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut stream(cfg.seed, Purpose::Shuffle, &[epoch as u64]));
        let mut total = 0.0;
        let first_lr = lr_at(epoch * steps_per_epoch, steps_per_epoch, cfg);
        for step in 0..steps_per_epoch {
            let x = batch_views(dataset, &order[step * n..(step + 1) * n], augment, epoch, step);

            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let x = tape.constant(x);
            let h = bound.encode(&mut tape, x)?;
            let z = bound.project(&mut tape, h)?;
            let key = StepKey {
                seed: cfg.seed,
                epoch: epoch as u64,
                step: step as u64,
            };
            let sets = build_negative_sets(tape.value(z), &loss_params, key)?;
            let nodes = sscl_loss_on_tape(&mut tape, z, &loss_params, &sets)?;
            let loss = tape.scalar(nodes.loss);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step });
            }
            observer.on_step(epoch, step, loss, &sets)?;

            model.params_mut().zero_grad();
            backward(&tape, nodes.loss, model.params_mut())?;
            let lr = lr_at(epoch * steps_per_epoch + step, steps_per_epoch, cfg);
            sgd.step(model.params_mut(), lr);
            total += loss;
        }
        let metrics = EpochMetrics {
            epoch,
            mean_loss: total / steps_per_epoch as f64,
            lr: first_lr,
        };
        observer.on_epoch(&metrics, &model)?;
        history.push(metrics);
    }
    Ok(Pretrained {
        encoder: model.into_encoder(),
        history,
    })
}

/// Sizes for [`check_model_gradients`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckSetup {
    pub batch_n: usize,
    pub model: EncoderConfig,
    pub loss: LossParams,
}

impl Default for GradCheckSetup {
    fn default() -> Self {
        Self {
            batch_n: 4,
            model: EncoderConfig {
                input_dim: 5,
                encoder_layers: vec![6, 5],
                projection_dim: 4,
                seed: 0,
            },
            loss: LossParams {
                s: 4,
                k: 2,
                tau: 0.1,
                ..LossParams::default()
            },
        }
    }
}

/// Finite-difference check of the full objective with respect to every
/// encoder and head parameter of a random model. Hardest sets and mixing
/// coefficients are drawn once and reused for every probe.
pub fn check_model_gradients(setup: &GradCheckSetup, seed: u64, eps: f64) -> Result<f64> {
    use rand::Rng;
    let model_cfg = EncoderConfig {
        seed: crate::rng::derive_seed(seed, 1),
        ..setup.model.clone()
    };
    let model = ModelParams::init(&model_cfg)?;
    let mut rng = stream(seed, Purpose::Data, &[2]);
    let rows = 2 * setup.batch_n;
    let x = Matrix::new(
        rows,
        model_cfg.input_dim,
        (0..rows * model_cfg.input_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let z = crate::model::project(&model, &crate::model::encode(&model, &x)?)?;
    let key = StepKey { seed, epoch: 0, step: 0 };
    let sets = build_negative_sets(&z, &setup.loss, key)?;
    let config = model.config().clone();
    crate::autodiff::grad_check(
        |tape, params| {
            let m = ModelParams::from_params(config.clone(), params.clone())?;
            let bound = m.bind(tape);
            let xn = tape.constant(x.clone());
            let h = bound.encode(tape, xn)?;
            let zn = bound.project(tape, h)?;
            Ok(sscl_loss_on_tape(tape, zn, &setup.loss, &sets)?.loss)
        },
        model.params(),
        eps,
    )
}

/// Incremental `epoch,mean_loss,lr` writer. Each row is flushed as written.
pub struct MetricsCsv {
    out: BufWriter<File>,
}

impl MetricsCsv {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "epoch,mean_loss,lr")?;
        out.flush()?;
        Ok(Self { out })
    }

    pub fn append(&mut self, m: &EpochMetrics) -> Result<()> {
        writeln!(self.out, "{},{},{}", m.epoch, m.mean_loss, m.lr)?;
        self.out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_blobs;

    fn cfg(epochs: usize, warmup: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            warmup_epochs: warmup,
            batch_n: 8,
            base_lr: Some(0.4),
            warmup_start_lr: 0.1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedule_endpoints() {
        let c = cfg(10, 2);
        let spe = 5;
        assert_eq!(lr_at(0, spe, &c), 0.1);
        let increment = (0.4 - 0.1) / 10.0;
        assert!((lr_at(9, spe, &c) - (0.4 - increment)).abs() < 1e-15);
        assert_eq!(lr_at(10, spe, &c), 0.4);
        assert!((lr_at(10, spe, &c) - lr_at(9, spe, &c)) <= increment + 1e-15);
        let t = 40.0;
        let bound = 0.4 * 0.5 * (1.0 + (std::f64::consts::PI * 39.0 / t).cos());
        assert!(lr_at(49, spe, &c) <= bound + 1e-15);
        assert!(lr_at(49, spe, &c) < 1e-3);
        let mid = lr_at(30, spe, &c);
        assert!((mid - 0.2).abs() < 1e-12);
        assert_eq!(TrainConfig { batch_n: 128, ..TrainConfig::default() }.base_lr(), 0.05);
    }

    #[test]
    fn lr_is_monotone_in_each_phase() {
        let c = cfg(20, 5);
        let lrs: Vec<f64> = (0..200).map(|s| lr_at(s, 10, &c)).collect();
        assert!(lrs[..50].windows(2).all(|w| w[1] > w[0]));
        assert!(lrs[50..].windows(2).all(|w| w[1] < w[0]));
    }

    fn one_param(value: f64, grad: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("w", Matrix::scalar(value));
        p.iter_mut().next().unwrap().grad = Matrix::scalar(grad);
        p
    }

    #[test]
    fn sgd_plain_and_frozen() {
        let mut p = one_param(1.0, 0.5);
        Sgd::new(0.0, 0.0).step(&mut p, 0.2);
        assert_eq!(p.value(0).get(0, 0), 0.9);

        let mut p = one_param(1.0, 0.0);
        Sgd::new(0.9, 0.0).step(&mut p, 0.2);
        assert_eq!(p.value(0).get(0, 0), 1.0);
    }

    #[test]
    fn sgd_two_step_recurrence() {
        let (mom, wd, lr) = (0.9, 0.1, 0.5);
        let mut p = one_param(2.0, 1.0);
        let mut opt = Sgd::new(mom, wd);
        opt.step(&mut p, lr);
        opt.step(&mut p, lr);
        // b1 = 1 + 0.1*2 = 1.2, x1 = 2 - 0.6 = 1.4
        // b2 = 0.9*1.2 + 1 + 0.1*1.4 = 2.22, x2 = 1.4 - 1.11 = 0.29
        assert!((p.value(0).get(0, 0) - 0.29).abs() < 1e-14);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_ok());
        assert!(TrainConfig { epochs: 20, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { base_lr: Some(0.0), ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_n: 4, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_n: 4, mode: LossMode::Baseline, ..TrainConfig::default() }
            .validate()
            .is_ok());
    }

    fn small_run(mode: LossMode, seed: u64, epochs: usize) -> Pretrained {
        let data = gen_blobs(4, 6, 16, 0.3, 1).unwrap();
        let c = TrainConfig {
            mode,
            seed,
            loss: LossParams { s: 6, k: 2, ..LossParams::default() },
            ..cfg(epochs, 1)
        };
        let aug = AugmentConfig { seed, ..AugmentConfig::default() };
        let model = EncoderConfig { input_dim: 6, encoder_layers: vec![8, 8], projection_dim: 4, seed };
        pretrain(&data, &model, &c, &aug, &mut ()).unwrap()
    }

    #[test]
    fn zero_epochs_returns_initial_encoder() {
        let out = small_run(LossMode::Sscl, 3, 0);
        assert!(out.history.is_empty());
        let model = EncoderConfig { input_dim: 6, encoder_layers: vec![8, 8], projection_dim: 4, seed: 3 };
        assert_eq!(out.encoder, ModelParams::init(&model).unwrap().into_encoder());
        assert!(!out.encoder.has_head());
    }

    #[test]
    fn runs_are_bitwise_reproducible() {
        let a = small_run(LossMode::Sscl, 5, 3);
        let b = small_run(LossMode::Sscl, 5, 3);
        assert_eq!(a.history, b.history);
        assert_eq!(a.encoder, b.encoder);
        let c = small_run(LossMode::Sscl, 6, 3);
        assert_ne!(a.history[0].mean_loss, c.history[0].mean_loss);
    }

    #[test]
    fn mode_lattice_holds_over_training() {
        let data = gen_blobs(4, 6, 16, 0.3, 1).unwrap();
        let model = EncoderConfig { input_dim: 6, encoder_layers: vec![8], projection_dim: 4, seed: 1 };
        let aug = AugmentConfig { seed: 1, ..AugmentConfig::default() };
        let run = |mode, k| {
            let c = TrainConfig { mode, loss: LossParams { s: 4, k, ..LossParams::default() }, ..cfg(3, 1) };
            pretrain(&data, &model, &c, &aug, &mut ()).unwrap().history
        };
        assert_eq!(run(LossMode::Synth, 0), run(LossMode::Baseline, 2));
        assert_eq!(run(LossMode::Sscl, 0), run(LossMode::Sampling, 2));
    }

    #[test]
    fn too_small_dataset() {
        let data = gen_blobs(2, 6, 3, 0.3, 1).unwrap();
        let model = EncoderConfig { input_dim: 6, encoder_layers: vec![8], projection_dim: 4, seed: 1 };
        let c = TrainConfig { mode: LossMode::Baseline, ..cfg(2, 1) };
        let err = pretrain(&data, &model, &c, &AugmentConfig::default(), &mut ()).unwrap_err();
        assert!(matches!(err, Error::DatasetTooSmall { n: 6, batch: 8 }));
    }

    #[test]
    fn observer_sees_every_step() {
        struct Count(usize, usize);
        impl TrainObserver for Count {
            fn on_step(&mut self, _: usize, _: usize, _: f64, sets: &[NegativeSet]) -> Result<()> {
                assert_eq!(sets.len(), 16);
                assert!(sets.iter().all(|s| s.alphas.len() == 2));
                self.0 += 1;
                Ok(())
            }
            fn on_epoch(&mut self, _: &EpochMetrics, model: &ModelParams) -> Result<()> {
                assert!(model.has_head());
                self.1 += 1;
                Ok(())
            }
        }
        let data = gen_blobs(4, 6, 16, 0.3, 1).unwrap();
        let model = EncoderConfig { input_dim: 6, encoder_layers: vec![8], projection_dim: 4, seed: 1 };
        let c = TrainConfig { loss: LossParams { s: 4, k: 2, ..LossParams::default() }, ..cfg(2, 1) };
        let mut count = Count(0, 0);
        pretrain(&data, &model, &c, &AugmentConfig::default(), &mut count).unwrap();
        assert_eq!((count.0, count.1), (16, 2));
    }

    #[test]
    fn baseline_loss_decreases_on_blobs() {
        let data = gen_blobs(8, 32, 512, 0.35, 1).unwrap();
        let c = TrainConfig {
            epochs: 30,
            warmup_epochs: 3,
            mode: LossMode::Baseline,
            ..TrainConfig::default()
        };
        let out = pretrain(&data, &EncoderConfig::toy(32), &c, &AugmentConfig::default(), &mut ()).unwrap();
        let h = &out.history;
        assert!(h[29].mean_loss < h[0].mean_loss);
        let quarter = |s: &[EpochMetrics]| s.iter().map(|m| m.mean_loss).sum::<f64>() / s.len() as f64;
        assert!(quarter(&h[22..]) < quarter(&h[..7]));
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let setup = GradCheckSetup::default();
        for seed in 0..10 {
            let err = check_model_gradients(&setup, seed, 1e-6).unwrap();
            assert!(err <= 1e-5, "seed {seed}: {err}");
        }
        assert_eq!(
            check_model_gradients(&setup, 3, 1e-6).unwrap(),
            check_model_gradients(&setup, 3, 1e-6).unwrap()
        );
    }

    #[test]
    fn metrics_file_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut w = MetricsCsv::create(&path).unwrap();
        w.append(&EpochMetrics { epoch: 0, mean_loss: 1.5, lr: 0.1 }).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "epoch,mean_loss,lr\n0,1.5,0.1\n");
    }
}
