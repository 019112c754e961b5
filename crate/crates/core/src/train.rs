//! Synchronous training loop with held-out evaluation after every epoch.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::batch::Sample;
use crate::collectives::{csv_io, Phase};
use crate::config::RunConfig;
use crate::data::{batches, split_by_position};
use crate::error::Result;
use crate::metrics::{auc, logloss};
use crate::model::DesEngine;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub step: u64,
    pub epoch: u32,
    pub auc: f64,
    pub logloss: f64,
    /// Forward bytes summed over workers since the start of the run.
    pub fwd_bytes: u64,
    pub bwd_bytes: u64,
    pub wall_ms: f64,
}

impl MetricsSnapshot {
    /// Equality of everything but wall time.
    pub fn same_result(&self, other: &Self) -> bool {
        self.step == other.step
            && self.epoch == other.epoch
            && self.auc.to_bits() == other.auc.to_bits()
            && self.logloss.to_bits() == other.logloss.to_bits()
            && self.fwd_bytes == other.fwd_bytes
            && self.bwd_bytes == other.bwd_bytes
    }
}

pub struct TrainOutcome {
    pub metrics: Vec<MetricsSnapshot>,
    /// `(file name, bytes)` of the final checkpoint.
    pub checkpoint: Vec<(String, Vec<u8>)>,
    pub engine: DesEngine,
}

pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let samples = cfg.data.load(cfg.seed)?;
    let (tr, te) = split_by_position(samples, cfg.train_fraction);
    train_on(cfg, &tr, &te)
}

pub fn train_on(cfg: &RunConfig, train: &[Sample], test: &[Sample]) -> Result<TrainOutcome> {
    let mut engine = DesEngine::new(cfg.graph(), cfg.workers, cfg.wire, cfg.exec)?;
    let train_batches = batches(train, cfg.batch)?;
    let test_batches = batches(test, cfg.batch)?;
    let labels: Vec<f64> = test.iter().map(|s| s.label as f64).collect();
    let start = Instant::now();
    let mut metrics = Vec::new();
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        for b in &train_batches {
            engine.step(b)?;
            step += 1;
        }
        let mut probs = Vec::with_capacity(test.len());
        for b in &test_batches {
            probs.extend(engine.forward_eval(b)?);
        }
        let ledger = engine.group().ledger();
        metrics.push(MetricsSnapshot {
            step,
            epoch,
            auc: auc(&probs, &labels)?,
            logloss: logloss(&probs, &labels)?,
            fwd_bytes: ledger.total_bytes(Phase::Forward),
            bwd_bytes: ledger.total_bytes(Phase::Backward),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    let checkpoint = engine.checkpoint()?;
    Ok(TrainOutcome {
        metrics,
        checkpoint,
        engine,
    })
}

pub fn write_metrics_tsv<W: Write>(metrics: &[MetricsSnapshot], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_writer(out);
    for m in metrics {
        w.serialize(m).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `config.toml`, `metrics.tsv`, `metrics.json`, `ledger.tsv` and the
/// checkpoint under `dir/checkpoint`.
pub fn write_outputs(cfg: &RunConfig, outcome: &TrainOutcome, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let path = dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml())?;
    written.push(path);
    let path = dir.join("metrics.tsv");
    write_metrics_tsv(&outcome.metrics, std::fs::File::create(&path)?)?;
    written.push(path);
    let path = dir.join("metrics.json");
    std::fs::write(&path, serde_json::to_string_pretty(&outcome.metrics).expect("metrics serialize"))?;
    written.push(path);
    let path = dir.join("ledger.tsv");
    outcome.engine.group().ledger().write_tsv(std::fs::File::create(&path)?)?;
    written.push(path);
    written.extend(outcome.engine.write_checkpoint(&dir.join("checkpoint"))?);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DataSource;
    use crate::data::synthetic::SyntheticSpec;
    use crate::exec::ExecMode;
    use crate::model::ModelKind;

    fn small(model: ModelKind, epochs: u32) -> RunConfig {
        RunConfig {
            model,
            workers: 2,
            batch: 64,
            epochs,
            seed: 3,
            exec: ExecMode::Sequential,
            hidden: vec![8],
            data: DataSource::Synthetic {
                spec: SyntheticSpec {
                    fields: 4,
                    vocab_per_field: 50,
                    ..SyntheticSpec::default()
                },
                samples: 600,
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn zero_epochs_leave_the_tables_untouched() {
        let out = train(&small(ModelKind::Fm, 0)).unwrap();
        assert!(out.metrics.is_empty());
        assert_eq!(out.engine.linear_shard(0).unwrap().len(), 0);
        assert!(out.engine.group().ledger().records().is_empty());
    }

    #[test]
    fn metrics_are_well_formed_and_repeatable() {
        for kind in ModelKind::ALL {
            let cfg = small(kind, 2);
            let a = train(&cfg).unwrap();
            let b = train(&cfg).unwrap();
            assert_eq!(a.metrics.len(), 2);
            for (x, y) in a.metrics.iter().zip(&b.metrics) {
                assert!(x.same_result(y));
                assert!((0.0..=1.0).contains(&x.auc) && x.logloss >= 0.0);
                assert_eq!(x.bwd_bytes, 0);
                assert!(x.fwd_bytes > 0);
            }
            assert_eq!(a.checkpoint, b.checkpoint);
        }
    }

    #[test]
    fn outputs_are_written() {
        let cfg = small(ModelKind::Wdl, 1);
        let out = train(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = write_outputs(&cfg, &out, dir.path()).unwrap();
        assert!(files.iter().all(|f| f.exists()));
        let back = RunConfig::load(&dir.path().join("config.toml")).unwrap();
        assert_eq!(back, cfg);
    }
}
