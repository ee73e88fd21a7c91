//! Run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use chrono::NaiveDate;
use hydroscan::baselines::ClimatologyStat;
use hydroscan::data::SampleSpec;
use hydroscan::model::ModelConfig;
use hydroscan::training::{LossConfig, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds dataset generation, model initialization and batch order.
    pub seed: u64,
    pub data: DataConfig,
    pub split: SplitConfig,
    pub thresholds: ThresholdConfig,
    pub evaluate: EvalConfig,
    pub paths: Paths,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            data: DataConfig::default(),
            split: SplitConfig::default(),
            thresholds: ThresholdConfig::default(),
            evaluate: EvalConfig::default(),
            paths: Paths::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub points: usize,
    pub days: usize,
    pub sample: SampleSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            points: 256,
            days: 2000,
            sample: SampleSpec::default(),
        }
    }
}

/// Chronological split, by dates when both are given, else by fractions of the issuance days.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub val_start: Option<NaiveDate>,
    pub test_start: Option<NaiveDate>,
    /// Every n-th validation date is scored during training.
    pub val_stride: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.7,
            val_fraction: 0.15,
            val_start: None,
            test_start: None,
            val_stride: 1,
        }
    }
}

/// Which part of the discharge record the flood thresholds are fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordSpan {
    /// Days up to the last training target.
    #[default]
    Train,
    /// The whole simulated record.
    Full,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThresholdConfig {
    pub record: RecordSpan,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub climatology: ClimatologyStat,
}

/// Artifact locations; relative paths resolve against `--out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dataset: PathBuf,
    pub thresholds: PathBuf,
    pub checkpoint: PathBuf,
    pub norm: PathBuf,
    pub trace: PathBuf,
    pub forecast: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: "dataset.rsds".into(),
            thresholds: "thresholds.csv".into(),
            checkpoint: "model.rsnn".into(),
            norm: "norm.toml".into(),
            trace: "trace.csv".into(),
            forecast: "forecast.csv".into(),
        }
    }
}

impl Paths {
    pub fn resolve(&self, out: &Path) -> Paths {
        let r = |p: &PathBuf| if p.is_absolute() { p.clone() } else { out.join(p) };
        Paths {
            dataset: r(&self.dataset),
            thresholds: r(&self.thresholds),
            checkpoint: r(&self.checkpoint),
            norm: r(&self.norm),
            trace: r(&self.trace),
            forecast: r(&self.forecast),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| anyhow::anyhow!("{}", e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("config {}", path.display()))
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        let s = &self.data.sample;
        if s.hindcast_steps != self.model.hindcast_steps || s.lead_times != self.model.lead_times {
            bail!(
                "data.sample uses T={} L={} but the model expects T={} L={}",
                s.hindcast_steps,
                s.lead_times,
                self.model.hindcast_steps,
                self.model.lead_times
            );
        }
        if self.data.points == 0 {
            bail!("data.points must be positive");
        }
        if self.split.val_stride == 0 {
            bail!("split.val_stride must be at least 1");
        }
        if self.split.val_start.is_some() != self.split.test_start.is_some() {
            bail!("split.val_start and split.test_start must be given together");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("seed = 1\nbogus = 2\n").is_err());
        assert!(RunConfig::from_toml("[model]\nhiden = 32\n").is_err());
        assert!(RunConfig::from_toml("[train]\nepochs = 2\n").is_ok());
    }

    #[test]
    fn mismatched_windows_are_rejected() {
        assert!(RunConfig::from_toml("[data.sample]\nlead_times = 5\n").is_err());
        assert!(RunConfig::from_toml("[split]\nval_start = \"2003-01-01\"\n").is_err());
    }

    #[test]
    fn relative_paths_resolve_against_out() {
        let p = Paths::default().resolve(Path::new("/tmp/run"));
        assert_eq!(p.dataset, Path::new("/tmp/run/dataset.rsds"));
    }
}
