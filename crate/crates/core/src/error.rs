use std::path::PathBuf;

use crate::store::FeatureKey;

/// Errors raised by the training engine and its supporting modules.
#[derive(Debug, thiserror::Error)]
pub enum DesError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("protocol violation in `{op}` (epoch {epoch}): {detail}")]
    Protocol { op: String, epoch: u64, detail: String },

    #[error("collective `{op}` deadlocked at epoch {epoch}: ranks {missing:?} never contributed")]
    Deadlock { op: String, epoch: u64, missing: Vec<usize> },

    #[error("placement violation: key {key} belongs to shard {expected}, found on shard {shard}")]
    Placement { key: FeatureKey, shard: usize, expected: usize },

    #[error("unknown key {0} in shard update")]
    UnknownKey(FeatureKey),

    #[error("weight split does not tile the cross vector: {0}")]
    SplitMisalignment(String),

    #[error("non-finite gradient at coordinate {index}: {value}")]
    NonFiniteGradient { index: usize, value: f64 },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("communication ratio undefined: mesh traffic is zero")]
    UndefinedRatio,

    #[error("replicated weights diverged between rank 0 and rank {rank}: {detail}")]
    ReplicaDivergence { rank: usize, detail: String },

    #[error("stale epoch: forward ran at epoch {forward}, backward requested at epoch {current}")]
    StaleEpoch { forward: u64, current: u64 },

    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DesError> = std::result::Result<T, E>;
