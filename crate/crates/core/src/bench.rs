//! Communication reports measured from real substituted steps.

use serde::{Deserialize, Serialize};

use crate::batch::{Feature, Sample, SparseBatch};
use crate::collectives::{CommLedger, Phase, WirePrecision};
use crate::cost::{CommRow, CostInputs, CostModel, REFERENCE_WORKLOAD};
use crate::error::Result;
use crate::exec::ExecMode;
use crate::model::{DesEngine, ModelGraph, ModelKind};
use crate::store::FeatureKey;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub models: Vec<CostModel>,
    /// `(B, unique features)` cells.
    pub cells: Vec<(usize, u64)>,
    pub template: CostInputs,
    /// Distinct keys actually materialized per batch. Traffic does not
    /// depend on it, so large workloads are capped to keep tables small.
    pub max_uniq: u64,
    pub seed: u64,
    pub exec: ExecMode,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            models: CostModel::ALL.to_vec(),
            cells: REFERENCE_WORKLOAD.to_vec(),
            template: CostInputs::new(4, 512, 1),
            max_uniq: 4096,
            seed: 0,
            exec: ExecMode::default(),
        }
    }
}

fn op_prefix(model: CostModel) -> &'static str {
    match model {
        CostModel::Lr => "lr.",
        CostModel::Fm => "fm2.",
        CostModel::Dnn => "dnn.",
    }
}

/// Forward bytes per worker booked by ops starting with `prefix`.
pub fn forward_bytes_per_worker(ledger: &CommLedger, n: usize, prefix: &str) -> f64 {
    let total: u64 = ledger
        .records()
        .iter()
        .filter(|r| r.phase == Phase::Forward && r.op.starts_with(prefix))
        .map(|r| r.total_bytes())
        .sum();
    total as f64 / n as f64
}

/// One sample per row, one feature per field, keys cycling through a pool of
/// `uniq` per batch.
pub fn workload_batch(fields: u32, batch: usize, uniq: u64) -> Result<SparseBatch> {
    let per_field = uniq.div_ceil(fields as u64).max(1);
    let samples = (0..batch)
        .map(|i| Sample {
            label: (i % 2) as u8,
            features: (0..fields)
                .map(|f| Feature::new(FeatureKey::new(f, (i as u64 * 7919 + f as u64) % per_field), 1.0))
                .collect(),
        })
        .collect();
    SparseBatch::new(samples)
}

fn graph_for(model: CostModel, c: &CostInputs, seed: u64) -> ModelGraph {
    let kind = match model {
        CostModel::Lr => ModelKind::Lr,
        CostModel::Fm => ModelKind::Fm,
        CostModel::Dnn => ModelKind::Wdl,
    };
    let mut g = ModelGraph::new(kind, c.fields as u32, c.embed_dim, seed);
    if kind.has_deep() {
        g.hidden = vec![c.first_width];
    }
    g
}

/// One substituted training step per `(model, B)` cell; the measured column
/// is the forward traffic of the model's own aggregations.
pub fn bench_comm(cfg: &BenchConfig) -> Result<Vec<CommRow>> {
    let mut rows = Vec::new();
    for &model in &cfg.models {
        for &(batch, uniq) in &cfg.cells {
            let c = CostInputs {
                batch,
                uniq,
                ..cfg.template
            };
            let row = CommRow::predicted(model, &c)?;
            let mut engine = DesEngine::new(graph_for(model, &c, cfg.seed), c.n, WirePrecision::F32, cfg.exec)?;
            let b = workload_batch(c.fields as u32, batch, uniq.min(cfg.max_uniq))?;
            engine.step(&b)?;
            let measured = forward_bytes_per_worker(engine.group().ledger(), c.n, op_prefix(model));
            rows.push(row.with_measured(measured));
        }
    }
    Ok(rows)
}
