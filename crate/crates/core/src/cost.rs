//! Analytic traffic and time models for the mesh, parameter-server, ring
//! and substituted strategies.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::collectives::{csv_io, des_time, ring_time, NetworkParams};
use crate::error::{DesError, Result};

/// `(batch size, unique features per batch)` rows of the reference
/// production workload.
pub const REFERENCE_WORKLOAD: [(usize, u64); 5] = [
    (512, 147_664),
    (1024, 257_757),
    (2048, 448_814),
    (4096, 789_511),
    (8192, 1_389_353),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostModel {
    Lr,
    Fm,
    /// Embedding plus first fully connected layer.
    Dnn,
}

impl CostModel {
    pub const ALL: [CostModel; 3] = [CostModel::Lr, CostModel::Fm, CostModel::Dnn];

    pub fn name(self) -> &'static str {
        match self {
            CostModel::Lr => "lr",
            CostModel::Fm => "fm",
            CostModel::Dnn => "dnn",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostInputs {
    pub n: usize,
    pub batch: usize,
    /// Unique features in one batch.
    pub uniq: u64,
    pub key_bytes: f64,
    pub value_bytes: f64,
    pub embed_dim: usize,
    pub first_width: usize,
    pub fields: usize,
}

impl CostInputs {
    /// 8-byte keys, 4-byte values, `d = 8`, a 256-wide first FC over 39 fields.
    pub fn new(n: usize, batch: usize, uniq: u64) -> Self {
        Self {
            n,
            batch,
            uniq,
            key_bytes: 8.0,
            value_bytes: 4.0,
            embed_dim: 8,
            first_width: 256,
            fields: 39,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.n > 0
            && self.batch > 0
            && self.uniq > 0
            && self.key_bytes > 0.0
            && self.value_bytes > 0.0
            && self.embed_dim > 0
            && self.first_width > 0
            && self.fields > 0;
        if ok {
            Ok(())
        } else {
            Err(DesError::Config(format!("cost inputs must be positive: {self:?}")))
        }
    }

    pub fn s_f(&self) -> f64 {
        self.key_bytes * self.uniq as f64
    }

    pub fn s_w(&self) -> f64 {
        self.value_bytes * self.uniq as f64
    }

    pub fn s_v(&self) -> f64 {
        self.value_bytes * self.embed_dim as f64 * self.uniq as f64
    }

    /// First FC matrix over all fields.
    pub fn s_big_w(&self) -> f64 {
        self.value_bytes * (self.fields * self.embed_dim * self.first_width) as f64
    }

    fn share(&self) -> f64 {
        (self.n as f64 - 1.0) / self.n as f64
    }
}

/// Per-batch payload sizes `S_Mj` of the aggregations.
pub fn sub_sizes(model: CostModel, c: &CostInputs) -> Vec<f64> {
    let b = c.batch as f64 * c.value_bytes;
    match model {
        CostModel::Lr => vec![b],
        CostModel::Fm => vec![c.embed_dim as f64 * b, b],
        CostModel::Dnn => vec![c.first_width as f64 * b],
    }
}

pub fn q_mesh(model: CostModel, c: &CostInputs) -> f64 {
    let payload = match model {
        CostModel::Lr => c.s_f() + c.s_w(),
        CostModel::Fm => c.s_f() + c.s_v(),
        CostModel::Dnn => c.s_f() + c.s_v() + c.s_big_w(),
    };
    c.share() * payload
}

pub fn q_des(model: CostModel, c: &CostInputs) -> f64 {
    let s: f64 = sub_sizes(model, c).iter().sum();
    2.0 * (c.n as f64 - 1.0) * s / c.n as f64
}

pub fn saving_ratio(model: CostModel, c: &CostInputs) -> Result<f64> {
    let mesh = q_mesh(model, c);
    if mesh <= 0.0 {
        return Err(DesError::UndefinedRatio);
    }
    Ok(1.0 - q_des(model, c) / mesh)
}

/// Inputs of the per-iteration time formulas.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeInputs {
    pub n: usize,
    pub batch: usize,
    /// `S_f + S_w` of one sample.
    pub sample_bytes: f64,
    /// Gradient bytes reduced by a full-replica ring.
    pub gradient_bytes: f64,
    /// Aggregation payloads of the substituted model.
    pub sub_sizes: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyTimes {
    pub sync_ps: f64,
    pub async_ps: f64,
    pub sync_mesh: f64,
    pub async_mesh: f64,
    pub ring: f64,
    pub des: f64,
}

pub fn strategy_times(params: NetworkParams, t: &TimeInputs) -> StrategyTimes {
    let n = t.n as f64;
    let b = t.batch as f64;
    let c = params.bandwidth;
    let ps = params.alpha + b * t.sample_bytes / c;
    let mesh = params.alpha + (n - 1.0) * b * t.sample_bytes / c;
    let async_ps = 2.0 * ps;
    let async_mesh = 2.0 * mesh;
    StrategyTimes {
        sync_ps: n * async_ps,
        async_ps,
        sync_mesh: n * async_mesh,
        async_mesh,
        ring: ring_time(params, t.n, t.gradient_bytes),
        des: des_time(params, t.n, &t.sub_sizes),
    }
}

/// One `(model, B)` cell of a communication report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommRow {
    pub model: String,
    #[serde(rename = "B")]
    pub batch: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub uniq: u64,
    pub q_mesh: f64,
    pub q_des: f64,
    pub ratio: f64,
    /// Forward bytes per worker read from a ledger, when a run was made.
    pub measured: Option<f64>,
    /// `(measured - q_des) / q_des`.
    pub deviation: Option<f64>,
}

impl CommRow {
    pub fn predicted(model: CostModel, c: &CostInputs) -> Result<Self> {
        c.validate()?;
        Ok(Self {
            model: model.name().into(),
            batch: c.batch,
            n: c.n,
            uniq: c.uniq,
            q_mesh: q_mesh(model, c),
            q_des: q_des(model, c),
            ratio: saving_ratio(model, c)?,
            measured: None,
            deviation: None,
        })
    }

    pub fn with_measured(mut self, measured: f64) -> Self {
        self.measured = Some(measured);
        self.deviation = Some(if self.q_des == 0.0 {
            if measured == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (measured - self.q_des) / self.q_des
        });
        self
    }
}

/// Predicted rows for every model and reference batch size.
pub fn reference_report(n: usize, template: &CostInputs) -> Result<Vec<CommRow>> {
    let mut rows = Vec::new();
    for model in CostModel::ALL {
        for (batch, uniq) in REFERENCE_WORKLOAD {
            let c = CostInputs {
                n,
                batch,
                uniq,
                ..*template
            };
            rows.push(CommRow::predicted(model, &c)?);
        }
    }
    Ok(rows)
}

pub fn write_report_tsv<W: Write>(rows: &[CommRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_writer(out);
    for r in rows {
        w.serialize(r).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn report_json(rows: &[CommRow]) -> serde_json::Value {
    serde_json::to_value(rows).expect("rows serialize")
}
