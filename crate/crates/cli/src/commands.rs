use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sscl_core::train::{check_model_gradients, GradCheckSetup};
use sscl_core::{
    evaluate_encoder, export_embeddings, extract_features, pca2d, prepare, pretrain as run_pretrain, write_report,
    Checkpoint, DataSource, EpochMetrics, LabeledDataset, LossMode, MetricsCsv, ModelParams, NegativeSet,
    PreparedData, ProbeConfig, ProbeScore, ReportRow, TrainObserver,
};

use crate::config::{with_extension_suffix, RunConfig};
use crate::DataKind;

/// The gradient check exceeded its threshold.
#[derive(Debug)]
pub struct ThresholdExceeded {
    pub error: f64,
    pub threshold: f64,
}

impl std::fmt::Display for ThresholdExceeded {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "max relative error {:e} exceeds threshold {:e}", self.error, self.threshold)
    }
}

impl std::error::Error for ThresholdExceeded {}

#[derive(Serialize)]
struct DataFile<'a> {
    data: &'a DataSource,
}

pub fn gen_data(
    kind: DataKind,
    classes: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
    out: &Path,
) -> anyhow::Result<()> {
    let source = match kind {
        DataKind::Blobs => DataSource::Blobs {
            classes,
            dim,
            per_class,
            spread,
            seed,
        },
        DataKind::Rings => DataSource::Rings {
            classes,
            per_class,
            noise: spread,
            seed,
        },
    };
    let ds = source.load()?;
    ds.write_csv(out).with_context(|| format!("writing {}", out.display()))?;
    let cfg_path = with_extension_suffix(out, ".config.toml");
    fs::write(&cfg_path, toml::to_string_pretty(&DataFile { data: &source })?)?;
    println!("wrote {} samples ({} classes, dim {}) to {}", ds.len(), ds.class_count, ds.dim(), out.display());
    Ok(())
}

fn resolve(
    config: Option<&Path>,
    overrides: &[String],
    data: Option<PathBuf>,
    out_dir: Option<PathBuf>,
) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(config, overrides)?;
    if let Some(path) = data {
        cfg.data = DataSource::Csv { path };
    }
    if let Some(dir) = out_dir {
        cfg.output.dir = dir;
    }
    Ok(cfg)
}

fn load_prepared(cfg: &RunConfig) -> anyhow::Result<PreparedData> {
    let ds = cfg.data.load().context("loading data")?;
    Ok(prepare(&ds, cfg.split.test_fraction, cfg.split.seed, cfg.data.standardize())?)
}

/// Preprocessing and probe settings stored in a checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    seed: u64,
    mode: LossMode,
    standardize: bool,
    test_fraction: f64,
    split_seed: u64,
    probe: ProbeConfig,
}

impl CheckpointMeta {
    fn of(cfg: &RunConfig) -> Self {
        Self {
            seed: cfg.seed,
            mode: cfg.loss.mode,
            standardize: cfg.data.standardize(),
            test_fraction: cfg.split.test_fraction,
            split_seed: cfg.split.seed,
            probe: cfg.probe_config(),
        }
    }
}

struct RunObserver {
    metrics: MetricsCsv,
    audit: Option<BufWriter<File>>,
    checkpoint_every: usize,
    dir: PathBuf,
    meta: serde_json::Value,
}

impl TrainObserver for RunObserver {
    fn on_step(&mut self, epoch: usize, step: usize, _loss: f64, sets: &[NegativeSet]) -> sscl_core::Result<()> {
        if let Some(w) = &mut self.audit {
            for s in sets {
                let line = json!({
                    "epoch": epoch,
                    "step": step,
                    "anchor": s.anchor,
                    "hard_indices": s.hard_indices,
                    "parents": s.parents,
                    "alphas": s.alphas,
                });
                writeln!(w, "{line}")?;
            }
        }
        Ok(())
    }

    fn on_epoch(&mut self, m: &EpochMetrics, model: &ModelParams) -> sscl_core::Result<()> {
        self.metrics.append(m)?;
        let done = m.epoch + 1;
        if self.checkpoint_every > 0 && done.is_multiple_of(self.checkpoint_every) {
            let path = self.dir.join(format!("checkpoint_epoch{done}.bin"));
            Checkpoint::new(model.clone().into_encoder(), self.meta.clone()).save(path)?;
        }
        Ok(())
    }
}

fn train_run(
    cfg: &RunConfig,
    data: &PreparedData,
    metrics_path: &Path,
    audit: Option<&Path>,
) -> anyhow::Result<(ModelParams, serde_json::Value)> {
    let meta = serde_json::to_value(CheckpointMeta::of(cfg))?;
    let audit = audit
        .map(|p| File::create(p).with_context(|| format!("creating {}", p.display())))
        .transpose()?
        .map(BufWriter::new);
    let mut observer = RunObserver {
        metrics: MetricsCsv::create(metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?,
        audit,
        checkpoint_every: cfg.train.checkpoint_every,
        dir: metrics_path.parent().map(Path::to_path_buf).unwrap_or_default(),
        meta: meta.clone(),
    };
    let out = run_pretrain(
        &data.train,
        &cfg.encoder_config(data.train.dim()),
        &cfg.train_config(),
        &cfg.augment_config(),
        &mut observer,
    )?;
    if let Some(w) = &mut observer.audit {
        w.flush()?;
    }
    Ok((out.encoder, meta))
}

pub fn pretrain(
    config: Option<&Path>,
    overrides: &[String],
    data: Option<PathBuf>,
    out_dir: Option<PathBuf>,
    audit: Option<&Path>,
) -> anyhow::Result<()> {
    let cfg = resolve(config, overrides, data, out_dir)?;
    let dir = cfg.output.dir.clone();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    cfg.save(&dir.join("config.toml"))?;
    let prepared = load_prepared(&cfg)?;
    let (encoder, meta) = train_run(&cfg, &prepared, &dir.join("metrics.csv"), audit)?;
    let ck_path = dir.join("checkpoint.bin");
    Checkpoint::new(encoder, meta).save(&ck_path)?;
    println!(
        "pretrained {} epochs in mode {} on {} samples; checkpoint {}",
        cfg.train.epochs,
        cfg.loss.mode,
        prepared.train.len(),
        ck_path.display()
    );
    Ok(())
}

pub struct ProbeArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub out: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub embeddings: Option<PathBuf>,
    pub pca: Option<PathBuf>,
}

/// Resolved settings of one probe run, persisted beside its report.
#[derive(Debug, Serialize)]
struct ProbeRun {
    checkpoint: PathBuf,
    data: PathBuf,
    standardize: bool,
    test_fraction: f64,
    split_seed: u64,
    probe: ProbeConfig,
}

pub fn probe(args: &ProbeArgs) -> anyhow::Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let meta: CheckpointMeta = serde_json::from_value(ck.meta.clone()).context("checkpoint metadata")?;
    let mut probe_cfg = meta.probe.clone();
    if let Some(e) = args.epochs {
        probe_cfg.epochs = e;
    }
    if let Some(lr) = args.lr {
        probe_cfg.lr = lr;
    }
    probe_cfg
        .validate()
        .map_err(|e| crate::config::config_error(e.to_string()))?;
    let ds = LabeledDataset::read_csv(&args.data).with_context(|| format!("reading {}", args.data.display()))?;
    let prepared = prepare(&ds, meta.test_fraction, meta.split_seed, meta.standardize)?;
    let score = evaluate_encoder(&ck.model, &prepared.train, &prepared.test, &probe_cfg)?;

    let out = args.out.clone().unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join("probe_report.csv")
    });
    let row = ReportRow {
        method: meta.mode.name().to_string(),
        seed: meta.seed,
        top1: score.top1,
        top5: score.top5,
    };
    write_report(std::slice::from_ref(&row), &out)?;
    let run = ProbeRun {
        checkpoint: args.checkpoint.clone(),
        data: args.data.clone(),
        standardize: meta.standardize,
        test_fraction: meta.test_fraction,
        split_seed: meta.split_seed,
        probe: probe_cfg,
    };
    fs::write(with_extension_suffix(&out, ".config.toml"), toml::to_string_pretty(&run)?)?;

    if args.embeddings.is_some() || args.pca.is_some() {
        let features = extract_features(&ck.model, &prepared.test.features)?;
        if let Some(path) = &args.embeddings {
            export_embeddings(&features, &prepared.test.labels, path)?;
        }
        if let Some(path) = &args.pca {
            let p = pca2d(&features)?;
            export_embeddings(&p.projected, &prepared.test.labels, path)?;
        }
    }
    println!("top1 {:.4} top5 {:.4}", score.top1, score.top5);
    Ok(())
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Aligned `mode  top1  top5` table of mean ± sample std in percent.
pub fn summary_table(rows: &[ReportRow]) -> String {
    let mut out = format!("{:<14}{:>18}{:>18}\n", "mode", "top1 (%)", "top5 (%)");
    for mode in LossMode::ALL {
        let mine: Vec<&ReportRow> = rows.iter().filter(|r| r.method == mode.name()).collect();
        if mine.is_empty() {
            continue;
        }
        let (m1, s1) = mean_std(&mine.iter().map(|r| 100.0 * r.top1).collect::<Vec<_>>());
        let (m5, s5) = mean_std(&mine.iter().map(|r| 100.0 * r.top5).collect::<Vec<_>>());
        let cell = |m: f64, s: f64| format!("{m:.2} ± {s:.2}");
        out.push_str(&format!("{:<14}{:>18}{:>18}\n", mode.name(), cell(m1, s1), cell(m5, s5)));
    }
    out
}

pub fn compare(
    config: Option<&Path>,
    overrides: &[String],
    data: Option<PathBuf>,
    seeds: u64,
    out_dir: Option<PathBuf>,
    parallel: bool,
) -> anyhow::Result<()> {
    if seeds == 0 {
        return Err(crate::config::config_error("--seeds must be >= 1"));
    }
    let cfg = resolve(config, overrides, data, out_dir)?;
    let dir = cfg.output.dir.clone();
    let metrics_dir = dir.join("metrics");
    fs::create_dir_all(&metrics_dir).with_context(|| format!("creating {}", metrics_dir.display()))?;
    cfg.save(&dir.join("config.toml"))?;
    let prepared = load_prepared(&cfg)?;

    let jobs: Vec<RunConfig> = LossMode::ALL
        .iter()
        .flat_map(|&mode| {
            let base = &cfg;
            (0..seeds).map(move |i| {
                let mut c = base.clone();
                c.loss.mode = mode;
                c.seed = base.seed + i;
                c
            })
        })
        .collect();
    let one = |c: &RunConfig| -> anyhow::Result<ReportRow> {
        let metrics = metrics_dir.join(format!("{}_seed{}.csv", c.loss.mode, c.seed));
        let (encoder, _) = train_run(c, &prepared, &metrics, None)?;
        let ProbeScore { top1, top5 } = evaluate_encoder(&encoder, &prepared.train, &prepared.test, &c.probe_config())?;
        eprintln!("{} seed {}: top1 {top1:.4} top5 {top5:.4}", c.loss.mode, c.seed);
        Ok(ReportRow {
            method: c.loss.mode.name().to_string(),
            seed: c.seed,
            top1,
            top5,
        })
    };
    let rows: Vec<ReportRow> = if parallel {
        jobs.par_iter().map(one).collect::<anyhow::Result<_>>()?
    } else {
        jobs.iter().map(one).collect::<anyhow::Result<_>>()?
    };
    write_report(&rows, dir.join("compare.csv"))?;
    let table = summary_table(&rows);
    fs::write(dir.join("compare.txt"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn gradcheck(seed: u64, threshold: f64, eps: f64, out: Option<&Path>) -> anyhow::Result<()> {
    let err = check_model_gradients(&GradCheckSetup::default(), seed, eps)?;
    let passed = err <= threshold;
    println!("max relative error: {err:e} (threshold {threshold:e}) {}", if passed { "PASS" } else { "FAIL" });
    if let Some(path) = out {
        let report = json!({
            "seed": seed,
            "eps": eps,
            "threshold": threshold,
            "max_relative_error": err,
            "passed": passed,
        });
        fs::write(path, serde_json::to_string_pretty(&report)?)?;
    }
    if passed {
        Ok(())
    } else {
        Err(ThresholdExceeded { error: err, threshold }.into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: &str, seed: u64, top1: f64) -> ReportRow {
        ReportRow {
            method: method.into(),
            seed,
            top1,
            top5: 1.0,
        }
    }

    #[test]
    fn mean_and_sample_std() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn table_has_a_row_per_mode() {
        let rows: Vec<ReportRow> = LossMode::ALL.iter().map(|m| row(m.name(), 0, 0.5)).collect();
        let t = summary_table(&rows);
        assert_eq!(t.lines().count(), 6);
        assert!(t.contains("synth-debias"));
        assert!(t.contains("50.00 ± 0.00"));
    }
}
