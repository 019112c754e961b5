//! Substituted models: shard-local sub-operators, their aggregations, and the
//! combiners that turn aggregated partials into predictions.

mod dense;
mod engine;
pub mod ops;

pub use dense::{DeepTrace, DenseLayout, ReplicatedDense};
pub use engine::{DesEngine, ForwardPass, Gradients, ParamRef, StepOutput, WorkerGradients};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{DesError, Result};
use crate::optim::OptimizerConfig;
use crate::store::Initializer;

pub(crate) const TAG_LINEAR: u64 = 1;
pub(crate) const TAG_EMBEDDING: u64 = 2;
pub(crate) const TAG_FC1: u64 = 3;
pub(crate) const TAG_CROSS_W: u64 = 4;
pub(crate) const TAG_CROSS_B: u64 = 5;
pub(crate) const TAG_CROSS_HEAD: u64 = 6;
pub(crate) const TAG_DENSE: u64 = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Lr,
    Fm,
    Wdl,
    #[serde(rename = "deepfm")]
    DeepFm,
    DcnDemo,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Lr,
        ModelKind::Fm,
        ModelKind::Wdl,
        ModelKind::DeepFm,
        ModelKind::DcnDemo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Lr => "lr",
            ModelKind::Fm => "fm",
            ModelKind::Wdl => "wdl",
            ModelKind::DeepFm => "deepfm",
            ModelKind::DcnDemo => "dcn-demo",
        }
    }

    pub fn has_linear(self) -> bool {
        !matches!(self, ModelKind::DcnDemo)
    }

    pub fn has_fm(self) -> bool {
        matches!(self, ModelKind::Fm | ModelKind::DeepFm)
    }

    pub fn has_embedding(self) -> bool {
        !matches!(self, ModelKind::Lr)
    }

    pub fn has_deep(self) -> bool {
        matches!(self, ModelKind::Wdl | ModelKind::DeepFm)
    }

    pub fn has_cross(self) -> bool {
        matches!(self, ModelKind::DcnDemo)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = DesError;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| DesError::Config(format!("unknown model kind `{s}`")))
    }
}

/// How fresh parameters are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub linear: Initializer,
    pub embedding: Initializer,
    /// Multiplier on the Xavier-uniform bound of dense matrices.
    pub dense_gain: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            linear: Initializer::Zero,
            embedding: Initializer::Uniform {
                low: -0.01,
                high: 0.01,
            },
            dense_gain: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerBindings {
    /// First-order weights.
    pub linear: OptimizerConfig,
    pub embedding: OptimizerConfig,
    /// First FC blocks, cross parameters and replicated upper layers.
    pub dense: OptimizerConfig,
}

impl Default for OptimizerBindings {
    fn default() -> Self {
        Self {
            linear: OptimizerConfig::ftrl(),
            embedding: OptimizerConfig::adagrad(),
            dense: OptimizerConfig::adagrad(),
        }
    }
}

/// Static description of a model, identical on every worker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelGraph {
    pub kind: ModelKind,
    pub embed_dim: usize,
    pub fields: u32,
    /// Widths of the deep tower; the first entry is the sharded first FC.
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub cross_depth: usize,
    pub seed: u64,
    #[serde(default)]
    pub init: InitConfig,
    #[serde(default)]
    pub optimizers: OptimizerBindings,
}

/// One aggregation of a forward pass: `per_sample` elements per sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Aggregation {
    pub op: String,
    pub per_sample: usize,
}

impl ModelGraph {
    pub fn new(kind: ModelKind, fields: u32, embed_dim: usize, seed: u64) -> Self {
        Self {
            kind,
            embed_dim,
            fields,
            hidden: if kind.has_deep() { vec![32, 16] } else { Vec::new() },
            cross_depth: if kind.has_cross() { 2 } else { 0 },
            seed,
            init: InitConfig::default(),
            optimizers: OptimizerBindings::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DesError::Config(format!("{}: {m}", self.kind)));
        if self.fields == 0 {
            return bad("needs at least one field");
        }
        if self.kind.has_embedding() && self.embed_dim == 0 {
            return bad("embedding dimension must be positive");
        }
        if self.kind.has_deep() && (self.hidden.is_empty() || self.hidden.contains(&0)) {
            return bad("deep tower needs positive widths");
        }
        if self.kind.has_cross() && self.cross_depth == 0 {
            return bad("cross depth must be positive");
        }
        if !(self.init.dense_gain.is_finite() && self.init.dense_gain >= 0.0) {
            return bad("dense gain must be finite and non-negative");
        }
        self.optimizers.linear.validate()?;
        self.optimizers.embedding.validate()?;
        self.optimizers.dense.validate()
    }

    /// First FC width, or 0 without a deep tower.
    pub fn first_width(&self) -> usize {
        if self.kind.has_deep() {
            self.hidden[0]
        } else {
            0
        }
    }

    /// The aggregations of one forward pass, in call order.
    pub fn aggregation_plan(&self) -> Vec<Aggregation> {
        let mut plan = Vec::new();
        let mut push = |op: String, per_sample| plan.push(Aggregation { op, per_sample });
        if self.kind.has_linear() {
            push("lr.m1".into(), 1);
        }
        if self.kind.has_fm() {
            push("fm2.m1".into(), self.embed_dim);
            push("fm2.m2".into(), 1);
        }
        if self.kind.has_deep() {
            push("dnn.m1".into(), self.hidden[0]);
        }
        if self.kind.has_cross() {
            for l in 0..self.cross_depth {
                push(format!("dcn.cross{l}"), if l == 0 { 1 } else { 2 });
            }
            push("dcn.head".into(), 2);
        }
        plan
    }

    /// Bytes each worker sends per forward pass under ring accounting.
    pub fn q_des(&self, n_workers: usize, batch: usize, value_bytes: u64) -> f64 {
        let elems: usize = self.aggregation_plan().iter().map(|a| a.per_sample).sum();
        let s = (elems * batch) as u64 * value_bytes;
        (2 * (n_workers as u64).saturating_sub(1) * s) as f64 / n_workers as f64
    }

    pub(crate) fn xavier(&self, fan_in: usize, fan_out: usize) -> Initializer {
        let bound = (self.init.dense_gain * (6.0 / (fan_in + fan_out) as f64).sqrt()) as f32;
        if bound > 0.0 {
            Initializer::Uniform {
                low: -bound,
                high: bound,
            }
        } else {
            Initializer::Zero
        }
    }
}
