//! In-process collectives over `N` logical workers.
//!
//! Every collective is a rendezvous: each rank submits exactly one payload per
//! call, the reduction runs in ascending rank order, and the same result is
//! handed to every rank. Transfer volume is charged to a [`CommLedger`] by
//! stepping through the ring schedule chunk by chunk, so the ledger holds the
//! bytes each rank would actually put on the wire.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{DesError, Result};
use crate::exec::ExecMode;
use crate::math::DenseVector;

/// Numeric format of payloads on the wire.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WirePrecision {
    /// Single precision, 4 bytes per element.
    #[default]
    F32,
    /// Double precision, 8 bytes per element.
    F64,
}

impl WirePrecision {
    pub fn bytes(self) -> u64 {
        match self {
            WirePrecision::F32 => 4,
            WirePrecision::F64 => 8,
        }
    }

    #[inline]
    fn encode(self, x: f64) -> f64 {
        match self {
            WirePrecision::F32 => x as f32 as f64,
            WirePrecision::F64 => x,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Forward,
    Backward,
    Update,
    Eval,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Phase::Forward => "forward",
            Phase::Backward => "backward",
            Phase::Update => "update",
            Phase::Eval => "eval",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerRecord {
    pub phase: Phase,
    pub op: String,
    pub epoch: u64,
    pub bytes_per_worker: Vec<u64>,
}

impl LedgerRecord {
    pub fn total_bytes(&self) -> u64 {
        self.bytes_per_worker.iter().sum()
    }
}

/// Append-only record of every collective call.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CommLedger {
    n_workers: usize,
    records: Vec<LedgerRecord>,
}

impl CommLedger {
    pub fn new(n_workers: usize) -> Self {
        Self {
            n_workers,
            records: Vec::new(),
        }
    }

    pub fn records(&self) -> &[LedgerRecord] {
        &self.records
    }

    /// Bytes summed over all workers.
    pub fn total_bytes(&self, phase: Phase) -> u64 {
        self.records
            .iter()
            .filter(|r| r.phase == phase)
            .map(LedgerRecord::total_bytes)
            .sum()
    }

    /// Mean bytes sent by one worker.
    pub fn bytes_per_worker(&self, phase: Phase) -> f64 {
        self.total_bytes(phase) as f64 / self.n_workers as f64
    }

    /// Number of aggregation operations (the `m` of the cost model).
    pub fn op_count(&self, phase: Phase) -> usize {
        self.records.iter().filter(|r| r.phase == phase).count()
    }

    pub fn epoch_records(&self, phase: Phase, epoch: u64) -> impl Iterator<Item = &LedgerRecord> {
        self.records
            .iter()
            .filter(move |r| r.phase == phase && r.epoch == epoch)
    }

    pub fn clear(&mut self) {
        self.records.clear();
    }

    /// Flat TSV export: `phase, op, epoch, bytes_per_worker` where the last
    /// column lists one count per rank, comma separated.
    pub fn write_tsv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_writer(out);
        w.write_record(["phase", "op", "epoch", "bytes_per_worker"])
            .map_err(csv_io)?;
        for r in &self.records {
            let bytes = r
                .bytes_per_worker
                .iter()
                .map(u64::to_string)
                .collect::<Vec<_>>()
                .join(",");
            w.write_record([
                r.phase.to_string(),
                r.op.clone(),
                r.epoch.to_string(),
                bytes,
            ])
            .map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.records).expect("ledger records serialize")
    }
}

pub(crate) fn csv_io(e: csv::Error) -> DesError {
    DesError::Io(std::io::Error::other(e))
}

/// Link parameters for the analytic time model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    /// Latency in seconds.
    pub alpha: f64,
    /// Bandwidth in bytes per second.
    pub bandwidth: f64,
}

impl NetworkParams {
    pub fn new(alpha: f64, bandwidth: f64) -> Result<Self> {
        if !(alpha >= 0.0) || !(bandwidth > 0.0) {
            return Err(DesError::Config(format!(
                "network needs alpha >= 0 and bandwidth > 0, got {alpha}, {bandwidth}"
            )));
        }
        Ok(Self { alpha, bandwidth })
    }
}

/// Ring all-reduce time: `2(n-1)(alpha + s/(n C))`.
pub fn ring_time(params: NetworkParams, n: usize, s_bytes: f64) -> f64 {
    let n_f = n as f64;
    2.0 * (n_f - 1.0) * (params.alpha + s_bytes / (n_f * params.bandwidth))
}

/// Time of a substituted operator: one ring all-reduce per aggregation.
pub fn des_time(params: NetworkParams, n: usize, sub_sizes: &[f64]) -> f64 {
    sub_sizes.iter().map(|&s| ring_time(params, n, s)).sum()
}

/// Element counts of the `n` ring chunks; the last chunks absorb the remainder.
pub fn ring_chunks(len: usize, n: usize) -> Vec<usize> {
    let q = len.div_ceil(n);
    (0..n).map(|i| len.saturating_sub(i * q).min(q)).collect()
}

/// Elements each rank sends during a ring all-reduce
/// (`n-1` reduce-scatter steps followed by `n-1` all-gather steps).
pub fn ring_allreduce_elements(len: usize, n: usize) -> Vec<u64> {
    let chunks = ring_chunks(len, n);
    (0..n)
        .map(|rank| {
            let mut sent = 0u64;
            for step in 0..n - 1 {
                // reduce-scatter: forward the partially reduced chunk rank - step
                sent += chunks[(rank + n - step) % n] as u64;
                // all-gather: forward the fully reduced chunk rank + 1 - step
                sent += chunks[(rank + 1 + n - step) % n] as u64;
            }
            sent
        })
        .collect()
}

/// Elements each rank sends during a ring all-gather of blocks of the given sizes.
pub fn ring_allgather_elements(block_lens: &[usize]) -> Vec<u64> {
    let n = block_lens.len();
    (0..n)
        .map(|rank| {
            (0..n - 1)
                .map(|step| block_lens[(rank + n - step) % n] as u64)
                .sum()
        })
        .collect()
}

/// One payload slot per rank for a single collective call.
#[derive(Debug)]
pub struct Contributions {
    op: String,
    epoch: u64,
    slots: Vec<Option<DenseVector>>,
}

impl Contributions {
    pub fn submit(&mut self, rank: usize, payload: DenseVector) -> Result<()> {
        let n = self.slots.len();
        let slot = self.slots.get_mut(rank).ok_or_else(|| DesError::Protocol {
            op: self.op.clone(),
            epoch: self.epoch,
            detail: format!("rank {rank} outside group of {n}"),
        })?;
        if slot.is_some() {
            return Err(DesError::Protocol {
                op: self.op.clone(),
                epoch: self.epoch,
                detail: format!("rank {rank} contributed twice"),
            });
        }
        *slot = Some(payload);
        Ok(())
    }

    fn complete(self) -> Result<(String, u64, Vec<DenseVector>)> {
        let missing: Vec<usize> = self
            .slots
            .iter()
            .enumerate()
            .filter_map(|(r, s)| s.is_none().then_some(r))
            .collect();
        if !missing.is_empty() {
            return Err(DesError::Deadlock {
                op: self.op,
                epoch: self.epoch,
                missing,
            });
        }
        let payloads = self.slots.into_iter().map(Option::unwrap).collect();
        Ok((self.op, self.epoch, payloads))
    }
}

/// `N` logical workers sharing one aggregation channel and one ledger.
#[derive(Clone, Debug)]
pub struct WorkerGroup {
    n_workers: usize,
    epoch: u64,
    phase: Phase,
    wire: WirePrecision,
    exec: ExecMode,
    ledger: CommLedger,
}

impl WorkerGroup {
    pub fn new(n_workers: usize, wire: WirePrecision, exec: ExecMode) -> Result<Self> {
        if n_workers == 0 {
            return Err(DesError::Config("worker group needs at least one worker".into()));
        }
        Ok(Self {
            n_workers,
            epoch: 0,
            phase: Phase::Forward,
            wire,
            exec,
            ledger: CommLedger::new(n_workers),
        })
    }

    pub fn n_workers(&self) -> usize {
        self.n_workers
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn set_phase(&mut self, phase: Phase) {
        self.phase = phase;
    }

    pub fn wire(&self) -> WirePrecision {
        self.wire
    }

    pub fn exec(&self) -> ExecMode {
        self.exec
    }

    pub fn set_exec(&mut self, exec: ExecMode) {
        self.exec = exec;
    }

    pub fn ledger(&self) -> &CommLedger {
        &self.ledger
    }

    pub fn ledger_mut(&mut self) -> &mut CommLedger {
        &mut self.ledger
    }

    /// Closes the current epoch; every rank has finished its step.
    pub fn barrier(&mut self) -> u64 {
        self.epoch += 1;
        self.epoch
    }

    pub fn contributions(&self, op: &str) -> Contributions {
        Contributions {
            op: op.to_string(),
            epoch: self.epoch,
            slots: vec![None; self.n_workers],
        }
    }

    fn check_epoch(&self, op: &str, epoch: u64) -> Result<()> {
        if epoch != self.epoch {
            return Err(DesError::Protocol {
                op: op.to_string(),
                epoch: self.epoch,
                detail: format!("contributions opened at epoch {epoch}"),
            });
        }
        Ok(())
    }

    /// Element-wise sum, reduced in ascending rank order.
    pub fn all_reduce_sum(&mut self, contributions: Contributions) -> Result<DenseVector> {
        let (op, epoch, payloads) = contributions.complete()?;
        self.check_epoch(&op, epoch)?;
        let len = payloads[0].len();
        if let Some((rank, p)) = payloads.iter().enumerate().find(|(_, p)| p.len() != len) {
            return Err(DesError::Protocol {
                op,
                epoch,
                detail: format!("rank {rank} sent {} elements, rank 0 sent {len}", p.len()),
            });
        }
        let n = self.n_workers;
        let result = if n == 1 {
            payloads.into_iter().next().unwrap()
        } else {
            let wire = self.wire;
            let mut acc: Vec<f64> = payloads[0].iter().map(|&x| wire.encode(x)).collect();
            for p in &payloads[1..] {
                for (a, &x) in acc.iter_mut().zip(p.iter()) {
                    *a = wire.encode(*a + wire.encode(x));
                }
            }
            DenseVector(acc)
        };
        let eb = self.wire.bytes();
        let bytes = if n == 1 {
            vec![0]
        } else {
            ring_allreduce_elements(len, n)
                .into_iter()
                .map(|e| e * eb)
                .collect()
        };
        self.record(op, bytes);
        Ok(result)
    }

    /// Convenience wrapper: `locals[r]` is rank `r`'s payload.
    pub fn all_reduce_vec(&mut self, op: &str, locals: Vec<DenseVector>) -> Result<DenseVector> {
        let mut c = self.contributions(op);
        for (rank, v) in locals.into_iter().enumerate() {
            c.submit(rank, v)?;
        }
        self.all_reduce_sum(c)
    }

    /// Every rank receives all payloads indexed by rank. Payload lengths may differ.
    pub fn all_gather(&mut self, contributions: Contributions) -> Result<Vec<DenseVector>> {
        let (op, epoch, payloads) = contributions.complete()?;
        self.check_epoch(&op, epoch)?;
        let n = self.n_workers;
        let lens: Vec<usize> = payloads.iter().map(|p| p.len()).collect();
        let result = if n == 1 {
            payloads
        } else {
            let wire = self.wire;
            payloads
                .into_iter()
                .map(|p| DenseVector(p.iter().map(|&x| wire.encode(x)).collect()))
                .collect()
        };
        let eb = self.wire.bytes();
        let bytes = if n == 1 {
            vec![0]
        } else {
            ring_allgather_elements(&lens)
                .into_iter()
                .map(|e| e * eb)
                .collect()
        };
        self.record(op, bytes);
        Ok(result)
    }

    fn record(&mut self, op: String, bytes_per_worker: Vec<u64>) {
        self.ledger.records.push(LedgerRecord {
            phase: self.phase,
            op,
            epoch: self.epoch,
            bytes_per_worker,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn group(n: usize) -> WorkerGroup {
        WorkerGroup::new(n, WirePrecision::F32, ExecMode::Sequential).unwrap()
    }

    #[test]
    fn single_worker_is_identity_and_free() {
        let mut g = group(1);
        let out = g
            .all_reduce_vec("x", vec![DenseVector(vec![5.0, 7.0])])
            .unwrap();
        assert_eq!(out.0, vec![5.0, 7.0]);
        assert_eq!(g.ledger().total_bytes(Phase::Forward), 0);
        assert_eq!(g.ledger().op_count(Phase::Forward), 1);
    }

    #[test]
    fn two_worker_sum() {
        let mut g = group(2);
        let out = g
            .all_reduce_vec(
                "x",
                vec![DenseVector(vec![1.0, 2.0]), DenseVector(vec![3.0, 4.0])],
            )
            .unwrap();
        assert_eq!(out.0, vec![4.0, 6.0]);
    }

    #[test]
    fn four_worker_kilobyte_payload_charges_ring_volume() {
        // 1024 bytes = 256 f32 elements, four chunks of 64; each rank forwards
        // 2 * 3 chunks of 256 bytes.
        let mut g = group(4);
        let locals = (0..4).map(|_| DenseVector::zeros(256)).collect();
        g.all_reduce_vec("x", locals).unwrap();
        assert_eq!(
            g.ledger().records()[0].bytes_per_worker,
            vec![1536, 1536, 1536, 1536]
        );
    }

    #[test]
    fn all_gather_examples() {
        let mut g = group(1);
        let mut c = g.contributions("g");
        c.submit(0, DenseVector(vec![3.0])).unwrap();
        assert_eq!(g.all_gather(c).unwrap(), vec![DenseVector(vec![3.0])]);

        let mut g = group(2);
        let mut c = g.contributions("g");
        c.submit(0, DenseVector(vec![1.0])).unwrap();
        c.submit(1, DenseVector(vec![2.0])).unwrap();
        assert_eq!(
            g.all_gather(c).unwrap(),
            vec![DenseVector(vec![1.0]), DenseVector(vec![2.0])]
        );

        // 100 bytes per rank = 25 f32 elements
        let mut g = group(4);
        let mut c = g.contributions("g");
        for r in 0..4 {
            c.submit(r, DenseVector::zeros(25)).unwrap();
        }
        g.all_gather(c).unwrap();
        assert_eq!(g.ledger().records()[0].bytes_per_worker, vec![300; 4]);
    }

    #[test]
    fn protocol_errors() {
        let mut g = group(2);
        let err = g
            .all_reduce_vec(
                "x",
                vec![DenseVector(vec![1.0]), DenseVector(vec![1.0, 2.0])],
            )
            .unwrap_err();
        assert!(matches!(err, DesError::Protocol { .. }));

        let mut c = g.contributions("x");
        c.submit(0, DenseVector(vec![1.0])).unwrap();
        assert!(matches!(
            c.submit(0, DenseVector(vec![1.0])),
            Err(DesError::Protocol { .. })
        ));
        match g.all_reduce_sum(c).unwrap_err() {
            DesError::Deadlock { missing, .. } => assert_eq!(missing, vec![1]),
            e => panic!("unexpected {e}"),
        }

        let c = g.contributions("late");
        g.barrier();
        let mut c2 = c;
        c2.submit(0, DenseVector(vec![0.0])).unwrap();
        c2.submit(1, DenseVector(vec![0.0])).unwrap();
        assert!(matches!(
            g.all_reduce_sum(c2),
            Err(DesError::Protocol { .. })
        ));
    }

    #[test]
    fn ring_time_examples() {
        let p = NetworkParams::new(0.0, 1.0).unwrap();
        assert_eq!(ring_time(p, 1, 123.0), 0.0);
        assert_eq!(ring_time(p, 2, 4.0), 4.0);
        let p = NetworkParams::new(1.0, 1e9).unwrap();
        assert_eq!(ring_time(p, 4, 0.0), 6.0);
        assert!(NetworkParams::new(-1.0, 1.0).is_err());
        assert!(NetworkParams::new(0.0, 0.0).is_err());
    }

    #[test]
    fn des_time_examples() {
        let p = NetworkParams::new(0.0, 1.0).unwrap();
        assert_eq!(des_time(p, 2, &[4.0]), ring_time(p, 2, 4.0));
        assert_eq!(des_time(p, 2, &[4.0, 4.0]), 8.0);
        assert_eq!(des_time(p, 1, &[10.0, 20.0, 30.0]), 0.0);
    }

    #[test]
    fn ledger_tsv_export() {
        let mut g = group(2);
        g.all_reduce_vec("lr.m1", vec![DenseVector::zeros(3), DenseVector::zeros(3)])
            .unwrap();
        let mut buf = Vec::new();
        g.ledger().write_tsv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "phase\top\tepoch\tbytes_per_worker\nforward\tlr.m1\t0\t12,12\n"
        );
    }

    proptest! {
        #[test]
        fn ring_volume_mean_matches_formula(len in 0usize..500, n in 1usize..9) {
            let per = ring_allreduce_elements(len, n);
            let total: u64 = per.iter().sum();
            prop_assert_eq!(total, 2 * (n as u64 - 1) * len as u64);
            if len % n == 0 {
                let expect = 2 * (n - 1) * len / n;
                prop_assert!(per.iter().all(|&e| e == expect as u64));
            }
        }

        #[test]
        fn allgather_volume_mean_matches_formula(lens in proptest::collection::vec(0usize..50, 1..9)) {
            let n = lens.len() as u64;
            let total: u64 = ring_allgather_elements(&lens).iter().sum();
            prop_assert_eq!(total, (n - 1) * lens.iter().sum::<usize>() as u64);
        }

        #[test]
        fn reduction_is_rank_ordered_and_shared(
            vals in proptest::collection::vec(proptest::collection::vec(-1e3f64..1e3, 4), 1..6)
        ) {
            let n = vals.len();
            let mut g = group(n);
            let out = g.all_reduce_vec("x", vals.iter().cloned().map(DenseVector).collect()).unwrap();
            let mut expect = vec![0.0f64; 4];
            for (k, e) in expect.iter_mut().enumerate() {
                if n == 1 {
                    *e = vals[0][k];
                } else {
                    let mut acc = vals[0][k] as f32;
                    for v in &vals[1..] {
                        acc += v[k] as f32;
                    }
                    *e = acc as f64;
                }
            }
            prop_assert_eq!(out.0, expect);
        }

        #[test]
        fn des_time_single_term_equals_ring(alpha in 0.0f64..1.0, c in 1.0f64..1e10, n in 1usize..64, s in 0.0f64..1e9) {
            let p = NetworkParams::new(alpha, c).unwrap();
            prop_assert_eq!(des_time(p, n, &[s]), ring_time(p, n, s));
        }
    }
}
