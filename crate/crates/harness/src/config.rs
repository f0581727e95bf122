//! Experiment configuration, schema `feddom-config/1`.
//!
//! Relative paths inside a config file (dataset manifest, output directory)
//! resolve against the directory holding the file.

use std::fs;
use std::path::{Path, PathBuf};

use feddom_core::channel::ChannelConfig;
use feddom_core::data::partition::{self, MODERATE_COUNTS, HIGH_SKEW_COUNTS};
use feddom_core::data::{DatasetManifest, DomainSource};
use feddom_core::fl::StrategyConfig;
use feddom_core::model::JsccConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA: &str = "feddom-config/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub partition: PartitionSpec,
    #[serde(default)]
    pub model: JsccConfig,
    #[serde(default)]
    pub channel: ChannelConfig,
    pub strategy: StrategyConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_threads")]
    pub threads: usize,
    /// Rounds between state checkpoints; defaults to `eval.eval_every`.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    /// Record the full objective at each broadcast model (needed by `analyze`).
    #[serde(default)]
    pub trace_half_step: bool,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

fn default_threads() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DatasetSpec {
    /// Path to a manifest file.
    File { manifest: PathBuf },
    Inline(DatasetManifest),
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Inline(DatasetManifest::synthetic())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainClients {
    pub domain: String,
    pub clients: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitClient {
    pub domain: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionSpec {
    /// Ten clients with moderate size skew (2399 images), scaled.
    Moderate {
        #[serde(default = "unit_scale")]
        scale: f64,
    },
    /// Ten clients with strong size skew across domains (2543 images), scaled.
    HighSkew {
        #[serde(default = "unit_scale")]
        scale: f64,
    },
    Dirichlet {
        clients: Vec<DomainClients>,
        #[serde(default = "unit_scale")]
        alpha: f64,
        /// Train images drawn per synthetic domain; directory domains use all images.
        #[serde(default = "default_train_per_domain")]
        train_per_domain: usize,
    },
    Explicit { clients: Vec<ExplicitClient> },
}

fn unit_scale() -> f64 {
    1.0
}

fn default_train_per_domain() -> usize {
    200
}

impl Default for PartitionSpec {
    fn default() -> Self {
        let clients = [("photo", 2), ("art", 3), ("cartoon", 3), ("sketch", 2)]
            .into_iter()
            .map(|(d, k)| DomainClients { domain: d.into(), clients: k })
            .collect();
        PartitionSpec::Dirichlet { clients, alpha: 1.0, train_per_domain: default_train_per_domain() }
    }
}

/// How client datasets are cut from the domain pools.
#[derive(Debug, Clone, PartialEq)]
pub enum Plan {
    Table(Vec<(String, Vec<usize>)>),
    Dirichlet { clients: Vec<(String, usize)>, alpha: f64, train_per_domain: usize },
}

impl Plan {
    /// Train images the partition takes from `domain`, when known up front.
    pub fn train_needed(&self, domain: &str) -> Option<usize> {
        match self {
            Plan::Table(t) => t.iter().filter(|(d, _)| d == domain).map(|(_, c)| c.iter().sum::<usize>()).reduce(|a, b| a + b),
            Plan::Dirichlet { clients, train_per_domain, .. } => clients.iter().any(|(d, _)| d == domain).then_some(*train_per_domain),
        }
    }

    pub fn domains(&self) -> Vec<&str> {
        match self {
            Plan::Table(t) => t.iter().map(|(d, _)| d.as_str()).collect(),
            Plan::Dirichlet { clients, .. } => clients.iter().map(|(d, _)| d.as_str()).collect(),
        }
    }
}

impl PartitionSpec {
    pub fn plan(&self) -> feddom_core::Result<Plan> {
        Ok(match self {
            PartitionSpec::Moderate { scale } => Plan::Table(partition::scale_table(&partition::table_owned(&MODERATE_COUNTS), *scale)?),
            PartitionSpec::HighSkew { scale } => Plan::Table(partition::scale_table(&partition::table_owned(&HIGH_SKEW_COUNTS), *scale)?),
            PartitionSpec::Dirichlet { clients, alpha, train_per_domain } => Plan::Dirichlet {
                clients: clients.iter().map(|c| (c.domain.clone(), c.clients)).collect(),
                alpha: *alpha,
                train_per_domain: *train_per_domain,
            },
            PartitionSpec::Explicit { clients } => {
                let mut table: Vec<(String, Vec<usize>)> = Vec::new();
                for c in clients {
                    match table.iter_mut().find(|(d, _)| *d == c.domain) {
                        Some((_, counts)) => counts.push(c.count),
                        None => table.push((c.domain.clone(), vec![c.count])),
                    }
                }
                Plan::Table(table)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub snr_points_db: Vec<f64>,
    /// Evaluate every this many rounds; the final round is always evaluated.
    pub eval_every: usize,
    /// Cap on test images per domain.
    pub max_test_images: Option<usize>,
    /// Channel used for evaluation; the training channel when absent.
    pub channel: Option<ChannelConfig>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { snr_points_db: vec![1.0, 4.0, 7.0, 10.0, 13.0], eval_every: 10, max_test_images: None, channel: None }
    }
}

impl ExperimentConfig {
    /// A config with every default and the given strategy.
    pub fn new(strategy: StrategyConfig) -> Self {
        ExperimentConfig {
            schema: SCHEMA.into(),
            seed: 0,
            dataset: DatasetSpec::default(),
            partition: PartitionSpec::default(),
            model: JsccConfig::default(),
            channel: ChannelConfig::default(),
            strategy,
            eval: EvalConfig::default(),
            output_dir: default_output_dir(),
            threads: default_threads(),
            checkpoint_every: None,
            trace_half_step: false,
        }
    }

    /// Reads, resolves and validates a config file. Every failure names `path`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::config(path, format!("cannot read config: {e}")))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| Error::config(path, format!("invalid config: {e}")))?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let DatasetSpec::File { manifest } = &mut cfg.dataset {
            *manifest = base.join(&*manifest);
        }
        cfg.output_dir = base.join(&cfg.output_dir);
        cfg.validate().map_err(|e| Error::config(path, e))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.schema != SCHEMA {
            return Err(format!("unsupported schema '{}', expected '{SCHEMA}'", self.schema));
        }
        if self.threads == 0 {
            return Err("threads must be >= 1".into());
        }
        if self.eval.eval_every == 0 || self.checkpoint_every == Some(0) {
            return Err("eval_every and checkpoint_every must be >= 1".into());
        }
        if self.eval.snr_points_db.is_empty() || self.eval.snr_points_db.iter().any(|s| !s.is_finite()) {
            return Err("eval.snr_points_db must be a non-empty list of finite values".into());
        }
        if self.eval.max_test_images == Some(0) {
            return Err("eval.max_test_images must be >= 1".into());
        }
        self.channel.validate().map_err(|e| e.to_string())?;
        if let Some(c) = &self.eval.channel {
            c.validate().map_err(|e| format!("eval channel: {e}"))?;
        }
        self.strategy.validate().map_err(|e| e.to_string())?;
        let plan = self.partition.plan().map_err(|e| e.to_string())?;
        if let DatasetSpec::Inline(m) = &self.dataset {
            m.validate().map_err(|e| e.to_string())?;
            for d in plan.domains() {
                if m.position(d).is_none() {
                    return Err(format!("partition refers to domain '{d}' missing from the dataset"));
                }
            }
        }
        Ok(())
    }

    pub fn checkpoint_every(&self) -> usize {
        self.checkpoint_every.unwrap_or(self.eval.eval_every)
    }

    /// The dataset manifest, read from disk if the config points at a file.
    /// Relative directory sources resolve against the manifest's directory.
    pub fn manifest(&self) -> Result<DatasetManifest> {
        match &self.dataset {
            DatasetSpec::Inline(m) => Ok(m.clone()),
            DatasetSpec::File { manifest } => load_manifest(manifest),
        }
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::config(path, format!("cannot read manifest: {e}")))?;
    let mut m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::config(path, format!("invalid manifest: {e}")))?;
    m.validate().map_err(|e| Error::config(path, e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new(""));
    for d in &mut m.domains {
        if let DomainSource::Directory { path: dir } = &mut d.source {
            *dir = base.join(&*dir);
        }
    }
    Ok(m)
}
