//! Randomized correctness checks of the substituted models against the
//! unsharded references.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::baseline::FmForm;
use crate::batch::{Feature, Sample, SparseBatch};
use crate::collectives::{Phase, WirePrecision};
use crate::error::Result;
use crate::exec::ExecMode;
use crate::model::{DesEngine, ModelGraph, ModelKind};
use crate::store::{FeatureKey, Initializer};

pub const EQUIVALENCE_RTOL: f64 = 1e-5;
pub const FM_IDENTITY_TOL: f64 = 1e-10;
pub const GRADIENT_RTOL: f64 = 1e-4;
/// Gradients below this magnitude are compared on an absolute scale of
/// `GRADIENT_RTOL * GRADIENT_FLOOR`; central differences of a double
/// precision loss cannot resolve them more finely.
pub const GRADIENT_FLOOR: f64 = 1e-4;
/// Coordinates checked per gradient instance.
const GRADIENT_COORDS: usize = 160;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub cases: usize,
    pub skipped: usize,
    pub max_error: f64,
    pub failures: Vec<String>,
}

impl CheckOutcome {
    fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            cases: 0,
            skipped: 0,
            max_error: 0.0,
            failures: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.cases > 0 && self.failures.is_empty()
    }

    fn record(&mut self, err: f64, ok: bool, what: impl FnOnce() -> String) {
        self.cases += 1;
        if err.is_nan() || err > self.max_error {
            self.max_error = err;
        }
        if !ok && self.failures.len() < 20 {
            self.failures.push(what());
        }
    }
}

/// A small random model plus batch; fully determined by `(kind, seed)`.
#[derive(Clone, Debug)]
pub struct Instance {
    pub seed: u64,
    pub graph: ModelGraph,
    pub batch: SparseBatch,
}

pub fn instance_seed(base: u64, kind: ModelKind, trial: usize) -> u64 {
    let k = ModelKind::ALL.iter().position(|&x| x == kind).unwrap() as u64;
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (k << 56) ^ trial as u64
}

/// Up to 10 fields, 100 distinct features, `d <= 8`, 8 samples.
pub fn random_instance(kind: ModelKind, seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fields = rng.gen_range(1..=10u32);
    let d = if kind.has_embedding() { rng.gen_range(1..=8) } else { 1 };
    let mut graph = ModelGraph::new(kind, fields, d, rng.gen());
    if kind.has_deep() {
        let depth = rng.gen_range(1..=3);
        graph.hidden = (0..depth).map(|_| rng.gen_range(1..=8)).collect();
    }
    if kind.has_cross() {
        graph.cross_depth = rng.gen_range(1..=3);
    }
    graph.init.linear = Initializer::Uniform { low: -1.0, high: 1.0 };
    graph.init.embedding = Initializer::Uniform { low: -0.5, high: 0.5 };
    graph.init.dense_gain = rng.gen_range(0.5..2.0);

    let n_keys = rng.gen_range(1..=100usize);
    let pool: Vec<FeatureKey> = (0..n_keys)
        .map(|_| FeatureKey::new(rng.gen_range(0..fields), rng.gen_range(0..40)))
        .collect();
    let b = rng.gen_range(1..=8);
    let samples = (0..b)
        .map(|_| {
            let k = rng.gen_range(0..=12);
            let features = (0..k)
                .map(|_| {
                    let key = pool[rng.gen_range(0..pool.len())];
                    let value = if rng.gen_bool(0.5) { 1.0 } else { rng.gen_range(-2.0..2.0) };
                    Feature::new(key, value)
                })
                .collect();
            Sample {
                label: rng.gen_range(0..=1),
                features,
            }
        })
        .collect();
    Instance {
        seed,
        graph,
        batch: SparseBatch::new(samples).expect("non-empty batch"),
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

/// Outcomes of one `(kind, N)` cell of the equivalence grid.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EquivalenceOutcome {
    pub equivalence: CheckOutcome,
    /// Only run for `N = 1`.
    pub bitwise: Option<CheckOutcome>,
    pub ledger: CheckOutcome,
}

/// Forward outputs against the pairwise reference, the single-worker case
/// bit for bit against the linear-form reference, and the forward ledger
/// against the aggregation plan.
pub fn equivalence(kind: ModelKind, n: usize, trials: usize, seed: u64, exec: ExecMode) -> Result<EquivalenceOutcome> {
    let mut eq = CheckOutcome::new(format!("equivalence/{kind}/N={n}"));
    let mut bit = (n == 1).then(|| CheckOutcome::new(format!("bitwise/{kind}/N=1")));
    let mut led = CheckOutcome::new(format!("ledger/{kind}/N={n}"));
    for t in 0..trials {
        let inst = random_instance(kind, instance_seed(seed, kind, t));
        let mut engine = DesEngine::new(inst.graph.clone(), n, WirePrecision::F32, exec)?;
        let pass = engine.forward(&inst.batch)?;
        let pairwise = engine.monolithic(FmForm::Pairwise).forward(&inst.batch);
        let worst = pass
            .probs
            .iter()
            .zip(&pairwise)
            .map(|(&a, &b)| rel_err(a, b))
            .fold(0.0, f64::max);
        eq.record(worst, worst <= EQUIVALENCE_RTOL, || {
            format!("seed {}: relative error {worst:e}", inst.seed)
        });
        if let Some(bit) = &mut bit {
            let linear = engine.monolithic(FmForm::LinearForm).forward(&inst.batch);
            let same = pass
                .probs
                .iter()
                .zip(&linear)
                .all(|(a, b)| a.to_bits() == b.to_bits());
            let worst = pass
                .probs
                .iter()
                .zip(&linear)
                .map(|(&a, &b)| (a - b).abs())
                .fold(0.0, f64::max);
            bit.record(worst, same, || format!("seed {}: differs by {worst:e}", inst.seed));
        }
        let ledger = engine.group().ledger();
        let measured = ledger.bytes_per_worker(Phase::Forward);
        let predicted = inst.graph.q_des(n, inst.batch.len(), WirePrecision::F32.bytes());
        let plan: Vec<String> = inst.graph.aggregation_plan().into_iter().map(|a| a.op).collect();
        let ops: Vec<String> = ledger.records().iter().map(|r| r.op.clone()).collect();
        led.record((measured - predicted).abs(), measured == predicted && ops == plan, || {
            format!(
                "seed {}: measured {measured} bytes over {ops:?}, plan {predicted} over {plan:?}",
                inst.seed
            )
        });
    }
    Ok(EquivalenceOutcome {
        equivalence: eq,
        bitwise: bit,
        ledger: led,
    })
}

/// The second-order term computed from `(M1, M2)` by `combiner` against the
/// brute-force pairwise sum, in double precision.
pub fn fm_identity(trials: usize, seed: u64, combiner: fn(&[f64], f64) -> f64) -> CheckOutcome {
    let mut out = CheckOutcome::new("fm-identity");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in 0..trials {
        let d = rng.gen_range(1..=8);
        let m = rng.gen_range(0..=100);
        let vs: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let xs: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut pair = 0.0;
        for i in 0..m {
            for j in i + 1..m {
                let dot: f64 = (0..d).map(|k| vs[i][k] * vs[j][k]).sum();
                pair += dot * xs[i] * xs[j];
            }
        }
        let mut m1 = vec![0.0; d];
        let mut m2 = 0.0;
        for (v, &x) in vs.iter().zip(&xs) {
            for k in 0..d {
                let t = v[k] * x;
                m1[k] += t;
                m2 += t * t;
            }
        }
        let lin = combiner(&m1, m2);
        let err = (pair - lin).abs();
        out.record(err, err <= FM_IDENTITY_TOL, || {
            format!("trial {t}: pairwise {pair} vs combined {lin}")
        });
    }
    out
}

/// Backward gradients against central differences of the reference loss.
pub fn gradient_check(kind: ModelKind, n: usize, trials: usize, seed: u64, exec: ExecMode) -> Result<CheckOutcome> {
    let mut out = CheckOutcome::new(format!("gradient/{kind}/N={n}"));
    for t in 0..trials {
        let inst = random_instance(kind, instance_seed(seed, kind, t) ^ 0x5eed);
        let mut engine = DesEngine::new(inst.graph.clone(), n, WirePrecision::F64, exec)?;
        let pass = engine.forward(&inst.batch)?;
        let grads = engine.backward(&pass)?;
        let mut entries = engine.gradient_entries(&grads);
        let mut oracle = engine.monolithic(FmForm::LinearForm);
        let base_pattern = oracle.relu_pattern(&inst.batch);
        let mut rng = ChaCha8Rng::seed_from_u64(inst.seed);
        while entries.len() > GRADIENT_COORDS {
            entries.swap_remove(rng.gen_range(0..entries.len()));
        }
        for (p, g) in entries {
            let w = oracle.get(p);
            let h = 1e-6 * w.abs().max(1.0);
            oracle.set(p, w + h);
            let (lp, pp) = (oracle.loss(&inst.batch), oracle.relu_pattern(&inst.batch));
            oracle.set(p, w - h);
            let (lm, pm) = (oracle.loss(&inst.batch), oracle.relu_pattern(&inst.batch));
            oracle.set(p, w);
            if pp != base_pattern || pm != base_pattern {
                out.skipped += 1;
                continue;
            }
            let fd = (lp - lm) / (2.0 * h);
            let err = (g - fd).abs() / g.abs().max(fd.abs()).max(GRADIENT_FLOOR);
            out.record(err, err <= GRADIENT_RTOL, || {
                format!("seed {}: {p:?} backward {g:e} vs difference {fd:e}", inst.seed)
            });
        }
    }
    Ok(out)
}

/// Full training steps book no bytes outside the forward phase.
pub fn backward_zero_bytes(kind: ModelKind, n: usize, trials: usize, seed: u64, exec: ExecMode) -> Result<CheckOutcome> {
    let mut out = CheckOutcome::new(format!("backward-bytes/{kind}/N={n}"));
    for t in 0..trials {
        let inst = random_instance(kind, instance_seed(seed, kind, t) ^ 0xb0b);
        let mut engine = DesEngine::new(inst.graph.clone(), n, WirePrecision::F32, exec)?;
        engine.step(&inst.batch)?;
        engine.step(&inst.batch)?;
        let ledger = engine.group().ledger();
        let bwd = ledger.total_bytes(Phase::Backward);
        let upd = ledger.total_bytes(Phase::Update);
        let fwd = ledger.total_bytes(Phase::Forward);
        let ok = bwd == 0 && upd == 0 && (n == 1 || fwd > 0);
        out.record((bwd + upd) as f64, ok, || {
            format!("seed {}: backward {bwd}, update {upd}, forward {fwd}", inst.seed)
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyConfig {
    pub kinds: Vec<ModelKind>,
    pub workers: Vec<usize>,
    pub trials: usize,
    pub gradient_trials: usize,
    pub fm_trials: usize,
    pub seed: u64,
    pub exec: ExecMode,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            kinds: ModelKind::ALL.to_vec(),
            workers: vec![1, 2, 3, 4, 8],
            trials: 100,
            gradient_trials: 50,
            fm_trials: 1000,
            seed: 0,
            exec: ExecMode::default(),
        }
    }
}

pub fn run_all(cfg: &VerifyConfig, combiner: fn(&[f64], f64) -> f64) -> Result<Vec<CheckOutcome>> {
    let mut out = vec![fm_identity(cfg.fm_trials, cfg.seed, combiner)];
    for &kind in &cfg.kinds {
        for &n in &cfg.workers {
            let e = equivalence(kind, n, cfg.trials, cfg.seed, cfg.exec)?;
            out.push(e.equivalence);
            out.extend(e.bitwise);
            out.push(e.ledger);
            out.push(gradient_check(kind, n, cfg.gradient_trials, cfg.seed, cfg.exec)?);
            out.push(backward_zero_bytes(kind, n, cfg.trials.min(10), cfg.seed, cfg.exec)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ops::fm2_combine;

    #[test]
    fn instances_are_reproducible_and_bounded() {
        for kind in ModelKind::ALL {
            for t in 0..20 {
                let a = random_instance(kind, t);
                let b = random_instance(kind, t);
                assert_eq!(a.batch, b.batch);
                assert_eq!(a.graph, b.graph);
                assert!(a.graph.fields <= 10 && a.graph.embed_dim <= 8);
                let mut keys: Vec<_> = a.batch.samples().iter().flat_map(|s| s.features.iter().map(|f| f.key)).collect();
                keys.sort();
                keys.dedup();
                assert!(keys.len() <= 100);
            }
        }
    }

    #[test]
    fn fm_identity_holds_and_detects_sign_flip() {
        assert!(fm_identity(200, 1, fm2_combine).passed());
        fn flipped(m1: &[f64], m2: f64) -> f64 {
            let s: f64 = m1.iter().map(|m| m * m).sum();
            0.5 * s + 0.5 * m2
        }
        assert!(!fm_identity(200, 1, flipped).passed());
    }

    #[test]
    fn small_grid_passes() {
        for kind in ModelKind::ALL {
            for n in [1, 3] {
                let e = equivalence(kind, n, 10, 7, ExecMode::Sequential).unwrap();
                assert!(e.equivalence.passed(), "{:?}", e.equivalence);
                assert!(e.ledger.passed(), "{:?}", e.ledger);
                if let Some(b) = e.bitwise {
                    assert!(b.passed(), "{b:?}");
                }
                let g = gradient_check(kind, n, 5, 7, ExecMode::Sequential).unwrap();
                assert!(g.passed(), "{g:?}");
                assert!(backward_zero_bytes(kind, n, 2, 7, ExecMode::Sequential).unwrap().passed());
            }
        }
    }
}
