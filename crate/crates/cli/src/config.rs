//! Run configuration: a TOML file plus `--set section.key=value` overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sscl_core::{
    derive_seed, AugmentConfig, DataSource, EncoderConfig, LossMode, LossParams, ProbeConfig, TrainConfig,
};

/// Marks an error as a usage or configuration problem (exit code 1).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub encoder_layers: Vec<usize>,
    pub projection_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let toy = EncoderConfig::toy(1);
        Self {
            encoder_layers: toy.encoder_layers,
            projection_dim: toy.projection_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSection {
    pub noise_sigma: f64,
    pub mask_prob: f64,
    pub scale_jitter: f64,
}

impl Default for AugmentSection {
    fn default() -> Self {
        let d = AugmentConfig::default();
        Self {
            noise_sigma: d.noise_sigma,
            mask_prob: d.mask_prob,
            scale_jitter: d.scale_jitter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub mode: LossMode,
    pub r: f64,
    pub tau: f64,
    pub beta: f64,
    pub s: usize,
    pub k: usize,
    pub clamp_floor: bool,
}

impl Default for LossSection {
    fn default() -> Self {
        let d = LossParams::default();
        Self {
            mode: LossMode::Sscl,
            r: d.r,
            tau: d.tau,
            beta: d.beta,
            s: d.s,
            k: d.k,
            clamp_floor: d.clamp_floor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_n: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_lr: Option<f64>,
    pub warmup_start_lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    /// Also checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            batch_n: d.batch_n,
            epochs: d.epochs,
            warmup_epochs: d.warmup_epochs,
            base_lr: d.base_lr,
            warmup_start_lr: d.warmup_start_lr,
            weight_decay: d.weight_decay,
            momentum: d.momentum,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Defaults to `train.batch_n`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
}

impl Default for ProbeSection {
    fn default() -> Self {
        let d = ProbeConfig::default();
        Self {
            epochs: d.epochs,
            lr: d.lr,
            momentum: d.momentum,
            weight_decay: d.weight_decay,
            batch: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
        }
    }
}

/// Everything a run needs. Every random stream derives from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_data")]
    pub data: DataSource,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub augment: AugmentSection,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub probe: ProbeSection,
    #[serde(default)]
    pub output: OutputSection,
}

fn default_data() -> DataSource {
    DataSource::Blobs {
        classes: 8,
        dim: 32,
        per_class: 512,
        spread: 0.35,
        seed: 1,
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: default_data(),
            split: SplitSection::default(),
            model: ModelSection::default(),
            augment: AugmentSection::default(),
            loss: LossSection::default(),
            train: TrainSection::default(),
            probe: ProbeSection::default(),
            output: OutputSection::default(),
        }
    }
}

const MODEL_STREAM: u64 = 1;
const VIEW_STREAM: u64 = 2;
const PROBE_STREAM: u64 = 3;

impl RunConfig {
    /// Reads `path` (or the defaults) and applies each `key=value` override.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<Self> {
        let base = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| config_error(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::try_from(RunConfig::default()).expect("defaults serialize"),
        };
        let mut table = base;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config_error(format!("invalid config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        std::fs::write(path, self.to_toml()).with_context(|| format!("writing {}", path.display()))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let as_config = |e: sscl_core::Error| config_error(e.to_string());
        self.train_config().validate().map_err(as_config)?;
        self.augment_config().validate().map_err(as_config)?;
        self.probe_config().validate().map_err(as_config)?;
        self.encoder_config(1).validate().map_err(as_config)?;
        if !(0.0..1.0).contains(&self.split.test_fraction) {
            bail!(config_error(format!(
                "split.test_fraction must lie in [0, 1), got {}",
                self.split.test_fraction
            )));
        }
        Ok(())
    }

    pub fn loss_params(&self) -> LossParams {
        LossParams {
            r: self.loss.r,
            tau: self.loss.tau,
            beta: self.loss.beta,
            s: self.loss.s,
            k: self.loss.k,
            clamp_floor: self.loss.clamp_floor,
            ..LossParams::default()
        }
    }

    pub fn encoder_config(&self, input_dim: usize) -> EncoderConfig {
        EncoderConfig {
            input_dim,
            encoder_layers: self.model.encoder_layers.clone(),
            projection_dim: self.model.projection_dim,
            seed: derive_seed(self.seed, MODEL_STREAM),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            batch_n: t.batch_n,
            epochs: t.epochs,
            warmup_epochs: t.warmup_epochs,
            base_lr: t.base_lr,
            warmup_start_lr: t.warmup_start_lr,
            weight_decay: t.weight_decay,
            momentum: t.momentum,
            loss: self.loss_params(),
            mode: self.loss.mode,
            seed: self.seed,
        }
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            noise_sigma: self.augment.noise_sigma,
            mask_prob: self.augment.mask_prob,
            scale_jitter: self.augment.scale_jitter,
            seed: derive_seed(self.seed, VIEW_STREAM),
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            epochs: self.probe.epochs,
            lr: self.probe.lr,
            momentum: self.probe.momentum,
            weight_decay: self.probe.weight_decay,
            batch: self.probe.batch.unwrap_or(self.train.batch_n),
            seed: derive_seed(self.seed, PROBE_STREAM),
        }
    }
}

/// Parses the right-hand side as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

pub fn apply_override(table: &mut toml::Table, assignment: &str) -> anyhow::Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_error(format!("override `{assignment}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        bail!(config_error(format!("override key `{key}` is malformed")));
    }
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| config_error(format!("`{p}` in `{key}` is not a section")))?;
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

pub fn with_extension_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}
