//! Serializable run configuration. A saved `run_config.json` passed back
//! through `--config` re-executes the same run.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use hyperlat::datasets::{OodParams, UnsupParams};
use hyperlat::losses::LossSpec;
use hyperlat::model::TrainConfig;
use hyperlat::{Error, Result};
use serde::{Deserialize, Serialize};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    pub seed: u64,
    pub out: PathBuf,
    pub command: Command,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config {
            field: "run config".into(),
            reason: e.to_string(),
        })?;
        if cfg.format_version != FORMAT_VERSION {
            return Err(Error::Config {
                field: "format_version".into(),
                reason: format!("expected {FORMAT_VERSION}, got {}", cfg.format_version),
            });
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("RunConfig is always serialisable")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Command {
    Simulate(SimulateConfig),
    Train(TrainCommandConfig),
    Eval(EvalConfig),
    Visualize(VisualizeConfig),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Visualize(_) => "visualize",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SimKind {
    Norms,
    Angles,
    Slice,
    VolumeCurves,
    HsphHistograms,
}

impl SimKind {
    pub fn default_dims(self) -> Vec<usize> {
        match self {
            SimKind::Norms | SimKind::Angles => vec![10, 100, 1000],
            SimKind::Slice => vec![10, 20, 50, 100, 200, 500, 1000],
            SimKind::VolumeCurves => vec![3, 20],
            SimKind::HsphHistograms => vec![8],
        }
    }
}

fn default_samples() -> usize {
    10_000
}

fn default_slice_eps() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub kind: SimKind,
    /// Empty means the per-kind default.
    #[serde(default)]
    pub dims: Vec<usize>,
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Slice width for `slice`.
    #[serde(default = "default_slice_eps")]
    pub eps: f64,
}

impl SimulateConfig {
    pub fn new(kind: SimKind) -> Self {
        Self {
            kind,
            dims: Vec::new(),
            samples: default_samples(),
            eps: default_slice_eps(),
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        if self.dims.is_empty() {
            self.kind.default_dims()
        } else {
            self.dims.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Hyperspherical objective, no index compressed.
    Standard,
    /// Every angle compressed.
    Compressed,
    /// Only the first angle compressed.
    Vmf,
    /// Cartesian KLD without latent normalization.
    Plain,
}

impl Mode {
    pub fn loss_spec(self, latent_dim: usize) -> LossSpec {
        match self {
            Mode::Standard => LossSpec::uncompressed(latent_dim),
            Mode::Compressed => LossSpec::compressed(latent_dim),
            Mode::Vmf => LossSpec::vmf(latent_dim),
            Mode::Plain => LossSpec::plain(latent_dim),
        }
    }
}

/// Training data. Generated sets draw from the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    Unsup {
        d: usize,
        clusters: usize,
        anomaly_shift: f64,
        n_train: usize,
        n_test: usize,
        intrinsic: Option<usize>,
        cluster_std: Option<f64>,
    },
    Ood {
        d: usize,
        classes: usize,
        offset: f64,
        n_train: usize,
        n_test: usize,
        intrinsic: Option<usize>,
        cluster_std: Option<f64>,
    },
    /// Headerless CSV; with `labels`, the last column is an integer label.
    Csv {
        train: PathBuf,
        labels: bool,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Unsup {
            d: 32,
            clusters: 3,
            anomaly_shift: 3.0,
            n_train: 2000,
            n_test: 400,
            intrinsic: None,
            cluster_std: None,
        }
    }
}

impl DatasetSpec {
    pub fn unsup_params(&self, seed: u64) -> Option<UnsupParams> {
        match *self {
            DatasetSpec::Unsup {
                d,
                clusters,
                anomaly_shift,
                n_train,
                n_test,
                intrinsic,
                cluster_std,
            } => {
                let mut p = UnsupParams::new(d, clusters, anomaly_shift, n_train, n_test, seed);
                p.intrinsic = intrinsic.unwrap_or(p.intrinsic);
                p.cluster_std = cluster_std.unwrap_or(p.cluster_std);
                Some(p)
            }
            _ => None,
        }
    }

    pub fn ood_params(&self, seed: u64) -> Option<OodParams> {
        match *self {
            DatasetSpec::Ood {
                d,
                classes,
                offset,
                n_train,
                n_test,
                intrinsic,
                cluster_std,
            } => {
                let mut p = OodParams::new(d, classes, offset, n_train, n_test, seed);
                p.intrinsic = intrinsic.unwrap_or(p.intrinsic);
                p.cluster_std = cluster_std.unwrap_or(p.cluster_std);
                Some(p)
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCommandConfig {
    pub mode: Mode,
    /// Overrides `mode` and `latent_dim` when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_spec: Option<PathBuf>,
    pub latent_dim: usize,
    pub dataset: DatasetSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roll_spacing: Option<usize>,
}

impl Default for TrainCommandConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            mode: Mode::Compressed,
            loss_spec: None,
            latent_dim: 16,
            dataset: DatasetSpec::default(),
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            hidden: t.hidden,
            roll_spacing: None,
        }
    }
}

impl TrainCommandConfig {
    pub fn resolve_loss_spec(&self) -> Result<LossSpec> {
        match &self.loss_spec {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
                    std::io::ErrorKind::NotFound => Error::Missing(path.clone()),
                    _ => Error::Io(e),
                })?;
                LossSpec::from_json(&text)
            }
            None => {
                let spec = self.mode.loss_spec(self.latent_dim);
                spec.validate()?;
                Ok(spec)
            }
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed,
            hidden: self.hidden.clone(),
            roll_spacing: self.roll_spacing,
        }
    }
}

fn default_k() -> usize {
    hyperlat::anomaly::DEFAULT_K
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub checkpoint: PathBuf,
    pub train: PathBuf,
    pub test: PathBuf,
    #[serde(default = "default_k")]
    pub k: usize,
    /// Whether the train CSV carries a label column.
    #[serde(default = "yes")]
    pub train_labels: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisualizeConfig {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    #[serde(default = "yes")]
    pub labels: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_config_round_trips() {
        let cfg = RunConfig {
            format_version: FORMAT_VERSION,
            seed: 7,
            out: "o".into(),
            command: Command::Train(TrainCommandConfig::default()),
        };
        let back: RunConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn dataset_spec_rejects_unknown_fields() {
        let bad = r#"{"kind":"csv","train":"a.csv","labels":true,"extra":1}"#;
        let err = serde_json::from_str::<DatasetSpec>(bad).unwrap_err().to_string();
        assert!(err.contains("extra"), "{err}");
    }

    #[test]
    fn modes_select_masks() {
        use hyperlat::losses::{Compression, CompressionPreset};
        let preset = |m: Mode| match m.loss_spec(8).compression {
            Compression::Preset(p) => p,
            Compression::Indices(_) => unreachable!(),
        };
        assert_eq!(preset(Mode::Standard), CompressionPreset::None);
        assert_eq!(preset(Mode::Compressed), CompressionPreset::All);
        assert_eq!(preset(Mode::Vmf), CompressionPreset::Vmf);
    }
}
