//! Versioned, fully serializable run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::batch::Sample;
use crate::collectives::WirePrecision;
use crate::data::criteo::read_criteo;
use crate::data::synthetic::{SyntheticGenerator, SyntheticSpec};
use crate::error::{DesError, Result};
use crate::exec::ExecMode;
use crate::model::{InitConfig, ModelGraph, ModelKind, OptimizerBindings};

pub const CONFIG_VERSION: u32 = 1;
pub const CRITEO_FIELDS: u32 = 39;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        #[serde(default)]
        spec: SyntheticSpec,
        samples: usize,
    },
    Criteo {
        path: PathBuf,
        #[serde(default)]
        max_lines: Option<usize>,
        #[serde(default)]
        hash_seed: u64,
    },
}

impl DataSource {
    pub fn fields(&self) -> u32 {
        match self {
            DataSource::Synthetic { spec, .. } => spec.fields,
            DataSource::Criteo { .. } => CRITEO_FIELDS,
        }
    }

    /// All samples in source order.
    pub fn load(&self, seed: u64) -> Result<Vec<Sample>> {
        match self {
            DataSource::Synthetic { spec, samples } => {
                Ok(SyntheticGenerator::new(spec.clone(), seed)?.take_samples(*samples))
            }
            DataSource::Criteo {
                path,
                max_lines,
                hash_seed,
            } => read_criteo(path, *max_lines, *hash_seed),
        }
    }
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            spec: SyntheticSpec::default(),
            samples: 50_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub model: ModelKind,
    pub workers: usize,
    pub batch: usize,
    pub epochs: u32,
    pub seed: u64,
    pub exec: ExecMode,
    pub wire: WirePrecision,
    pub embed_dim: usize,
    /// Deep tower widths; empty means the model default.
    pub hidden: Vec<usize>,
    /// Zero means the model default.
    pub cross_depth: usize,
    pub train_fraction: f64,
    pub optimizers: OptimizerBindings,
    pub init: InitConfig,
    pub data: DataSource,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            model: ModelKind::Lr,
            workers: 4,
            batch: 4096,
            epochs: 5,
            seed: 0,
            exec: ExecMode::default(),
            wire: WirePrecision::F32,
            embed_dim: 8,
            hidden: Vec::new(),
            cross_depth: 0,
            train_fraction: 0.95,
            optimizers: OptimizerBindings::default(),
            init: InitConfig::default(),
            data: DataSource::default(),
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| DesError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn graph(&self) -> ModelGraph {
        let mut g = ModelGraph::new(self.model, self.data.fields(), self.embed_dim, self.seed);
        if self.model.has_deep() && !self.hidden.is_empty() {
            g.hidden = self.hidden.clone();
        }
        if self.model.has_cross() && self.cross_depth > 0 {
            g.cross_depth = self.cross_depth;
        }
        g.init = self.init;
        g.optimizers = self.optimizers;
        g
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(DesError::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.workers == 0 || self.batch == 0 {
            return Err(DesError::Config("workers and batch must be at least 1".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(DesError::Config(format!("train fraction {} outside (0, 1)", self.train_fraction)));
        }
        if let DataSource::Synthetic { spec, .. } = &self.data {
            spec.validate()?;
        }
        self.graph().validate()
    }
}
