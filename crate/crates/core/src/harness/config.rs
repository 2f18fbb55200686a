//! Experiment configuration files.
//!
//! A config is a TOML document with a top-level `version = 1`, a `task`,
//! a master `seed`, and one table per concern:
//!
//! ```toml
//! version = 1
//! task = "probe"
//! seed = 7
//!
//! [model]
//! preset = "desk"            # or a full [model.unet] table, or checkpoint = "…"
//!
//! [data]
//! source = "synthetic"
//! classes = 4
//! per_class = 32
//! size = 16
//! seed = 1
//! eval_fraction = 0.25
//!
//! [probe]
//! t = 150
//! block = 7
//! head = { kind = "linear" }
//! ```
//!
//! Overrides use dotted paths with TOML values, e.g. `probe.t=90` or
//! `data.variant="separable"`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{GridSpec, Metric};
use crate::ddpm::ScheduleParams;
use crate::diffeed::Strategy;
use crate::error::{Error, Result};
use crate::harness::data::DataSource;
use crate::harness::train::TrainConfig;
use crate::heads::{AttentionHeadConfig, HeadKind, ProbeMode, ProbeProtocol};
use crate::unet::UNetConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    TrainDiffusion,
    Sample,
    Extract,
    Probe,
    Difformer,
    Diffeed,
    Cka,
    Knn,
    Grid,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::TrainDiffusion => "train-diffusion",
            Task::Sample => "sample",
            Task::Extract => "extract",
            Task::Probe => "probe",
            Task::Difformer => "difformer",
            Task::Diffeed => "diffeed",
            Task::Cka => "cka",
            Task::Knn => "knn",
            Task::Grid => "grid",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// `paper`, `toy`, `desk` or `miniature`.
    pub preset: Option<String>,
    pub unet: Option<UNetConfig>,
    /// Load weights (and config) from a checkpoint instead.
    pub checkpoint: Option<PathBuf>,
    /// Seed of freshly initialized weights; defaults to the master seed.
    pub init_seed: Option<u64>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            preset: Some("desk".into()),
            unet: None,
            checkpoint: None,
            init_seed: None,
        }
    }
}

pub fn preset(name: &str) -> Result<UNetConfig> {
    match name {
        "paper" => Ok(UNetConfig::paper_scale()),
        "toy" => Ok(UNetConfig::reference_toy()),
        "desk" => Ok(UNetConfig::desk()),
        "miniature" => Ok(UNetConfig::miniature()),
        other => Err(Error::Parameter {
            field: "model.preset",
            reason: format!("unknown preset {other:?}; expected paper, toy, desk or miniature"),
        }),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    #[serde(flatten)]
    pub source: DataSource,
    /// Fraction of each class held out for evaluation.
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
    /// Optional label file (one integer per line) replacing the dataset's
    /// own labels.
    #[serde(default)]
    pub labels_file: Option<PathBuf>,
}

fn default_eval_fraction() -> f64 {
    0.25
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeTask {
    pub t: usize,
    pub block: usize,
    #[serde(default)]
    pub pool: Option<usize>,
    #[serde(default = "linear_head")]
    pub head: HeadKind,
    #[serde(default)]
    pub protocol: ProbeProtocol,
    /// New noise every training epoch; evaluation always uses one fixed
    /// draw per image.
    #[serde(default = "yes")]
    pub fresh_noise: bool,
    #[serde(default = "frozen")]
    pub mode: ProbeMode,
    /// Map every feature dimension to zero mean and unit variance, fitted
    /// on the training split.
    #[serde(default)]
    pub standardize: bool,
}

fn yes() -> bool {
    true
}

fn linear_head() -> HeadKind {
    HeadKind::Linear
}

fn frozen() -> ProbeMode {
    ProbeMode::Frozen
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DifformerTask {
    pub times: Vec<usize>,
    pub blocks: Vec<usize>,
    #[serde(default)]
    pub head: AttentionHeadConfig,
    #[serde(default)]
    pub protocol: ProbeProtocol,
    #[serde(default = "yes")]
    pub fresh_noise: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffeedTask {
    pub strategy: Strategy,
    pub t: usize,
    pub final_block: usize,
    #[serde(default)]
    pub head: AttentionHeadConfig,
    #[serde(default)]
    pub protocol: ProbeProtocol,
    #[serde(default = "yes")]
    pub fresh_noise: bool,
    /// When set, sweep these final blocks and keep the best.
    #[serde(default)]
    pub candidates: Option<Vec<usize>>,
    /// Also train the same head with the feedback held at zero.
    #[serde(default)]
    pub baseline: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CkaAxisKind {
    Blocks,
    Timesteps,
    /// Blocks against the tensors of a feature store, whose rows follow
    /// dataset order.
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CkaTask {
    pub axis: CkaAxisKind,
    #[serde(default)]
    pub t: Option<usize>,
    #[serde(default)]
    pub blocks: Vec<usize>,
    #[serde(default)]
    pub block: Option<usize>,
    #[serde(default)]
    pub times: Vec<usize>,
    /// Images from the evaluation split to use (all when absent).
    #[serde(default)]
    pub samples: Option<usize>,
    /// Feature store for the external axis.
    #[serde(default)]
    pub features: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnnTask {
    pub t: usize,
    pub block: usize,
    #[serde(default)]
    pub pool: Option<usize>,
    pub k: Vec<usize>,
    #[serde(default = "cosine")]
    pub metric: Metric,
}

fn cosine() -> Metric {
    Metric::Cosine
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleTask {
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractTask {
    pub t: usize,
    pub blocks: Vec<usize>,
    #[serde(default)]
    pub pool: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub task: Task,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub schedule: ScheduleParams,
    pub data: Option<DataSpec>,
    pub train: Option<TrainConfig>,
    pub probe: Option<ProbeTask>,
    pub difformer: Option<DifformerTask>,
    pub diffeed: Option<DiffeedTask>,
    pub cka: Option<CkaTask>,
    pub knn: Option<KnnTask>,
    pub grid: Option<GridSpec>,
    pub sample: Option<SampleTask>,
    pub extract: Option<ExtractTask>,
}

fn parse_value(text: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {text}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(text.to_string()))
}

/// Apply one `dotted.path=value` override to a TOML table.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, value) = assignment.split_once('=').ok_or_else(|| Error::Parameter {
        field: "--set",
        reason: format!("{assignment:?} is not key=value"),
    })?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Parameter {
            field: "--set",
            reason: format!("bad key path {path:?}"),
        });
    }
    let mut table = doc;
    for key in &keys[..keys.len() - 1] {
        let entry = table
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| Error::Parameter {
            field: "--set",
            reason: format!("`{key}` in {path:?} is not a table"),
        })?;
    }
    table.insert(keys[keys.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

impl ExperimentConfig {
    /// Parse TOML text and apply overrides in order.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| Error::Format {
            what: "config",
            reason: e.message().to_string(),
        })?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let version = doc.get("version").and_then(toml::Value::as_integer);
        match version {
            Some(v) if v == i64::from(CONFIG_VERSION) => {}
            Some(v) => {
                return Err(Error::Version {
                    found: v.clamp(0, i64::from(u32::MAX)) as u32,
                    supported: CONFIG_VERSION,
                })
            }
            None => {
                return Err(Error::Format {
                    what: "config",
                    reason: "missing `version`".into(),
                })
            }
        }
        let config: ExperimentConfig =
            toml::Value::Table(doc)
                .try_into()
                .map_err(|e: toml::de::Error| Error::Format {
                    what: "config",
                    reason: e.message().to_string(),
                })?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, overrides)
    }

    /// Canonical TOML of the fully resolved config.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format {
            what: "config",
            reason: e.to_string(),
        })
    }

    pub fn unet(&self) -> Result<UNetConfig> {
        match (&self.model.unet, &self.model.preset) {
            (Some(c), _) => Ok(c.clone()),
            (None, Some(p)) => preset(p),
            (None, None) => Ok(UNetConfig::desk()),
        }
    }

    /// The task section, or an error naming the missing table.
    pub fn section<'a, T>(&self, value: &'a Option<T>) -> Result<&'a T> {
        value.as_ref().ok_or_else(|| Error::Format {
            what: "config",
            reason: format!(
                "task {} needs a [{}] table",
                self.task.name(),
                self.task_table()
            ),
        })
    }

    fn task_table(&self) -> &'static str {
        match self.task {
            Task::TrainDiffusion => "train",
            Task::Sample => "sample",
            Task::Extract => "extract",
            Task::Probe => "probe",
            Task::Difformer => "difformer",
            Task::Diffeed => "diffeed",
            Task::Cka => "cka",
            Task::Knn => "knn",
            Task::Grid => "grid",
        }
    }
}
