use des_core::batch::{Feature, Sample, SparseBatch};
use des_core::collectives::{ring_allreduce_elements, Phase, WirePrecision};
use des_core::config::{DataSource, RunConfig};
use des_core::cost::{saving_ratio, CostInputs, CostModel};
use des_core::data::criteo::{featurize, parse_criteo};
use des_core::data::synthetic::SyntheticSpec;
use des_core::exec::ExecMode;
use des_core::model::{DesEngine, ModelKind};
use des_core::store::{shard_of, FeatureKey};
use des_core::train::train;
use des_core::verify::{equivalence, random_instance};
use proptest::prelude::*;

fn kind_strategy() -> impl Strategy<Value = ModelKind> {
    prop::sample::select(ModelKind::ALL.to_vec())
}

fn workers_strategy() -> impl Strategy<Value = usize> {
    prop::sample::select(vec![1usize, 2, 3, 4, 8])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_matches_reference(kind in kind_strategy(), n in workers_strategy(), seed in any::<u64>()) {
        let e = equivalence(kind, n, 1, seed, ExecMode::Sequential).unwrap();
        prop_assert!(e.equivalence.passed(), "{:?}", e.equivalence);
        prop_assert!(e.ledger.passed(), "{:?}", e.ledger);
        if let Some(b) = e.bitwise {
            prop_assert!(b.passed(), "{:?}", b);
        }
    }

    #[test]
    fn aggregation_counts_and_payloads(kind in kind_strategy(), n in workers_strategy(), seed in any::<u64>()) {
        let inst = random_instance(kind, seed);
        let mut engine = DesEngine::new(inst.graph.clone(), n, WirePrecision::F32, ExecMode::Sequential).unwrap();
        engine.step(&inst.batch).unwrap();
        let ledger = engine.group().ledger();
        let m = match kind {
            ModelKind::Lr => 1,
            ModelKind::Fm => 3,
            ModelKind::Wdl => 2,
            ModelKind::DeepFm => 4,
            ModelKind::DcnDemo => inst.graph.cross_depth + 1,
        };
        prop_assert_eq!(ledger.op_count(Phase::Forward), m);
        let b = inst.batch.len();
        for (r, a) in ledger.records().iter().zip(inst.graph.aggregation_plan()) {
            let want: Vec<u64> = ring_allreduce_elements(a.per_sample * b, n).iter().map(|e| e * 4).collect();
            prop_assert_eq!(&r.bytes_per_worker, &want, "{}", r.op);
        }
        let per_sample: Vec<usize> = inst.graph.aggregation_plan().iter().map(|a| a.per_sample).collect();
        let d = inst.graph.embed_dim;
        match kind {
            ModelKind::Lr => prop_assert_eq!(per_sample, vec![1]),
            ModelKind::Fm => prop_assert_eq!(per_sample, vec![1, d, 1]),
            ModelKind::Wdl => prop_assert_eq!(per_sample, vec![1, inst.graph.hidden[0]]),
            _ => {}
        }
        prop_assert_eq!(ledger.total_bytes(Phase::Backward), 0);
        prop_assert_eq!(ledger.total_bytes(Phase::Update), 0);
    }

    #[test]
    fn keys_stay_on_their_shard(kind in kind_strategy(), n in workers_strategy(), seed in any::<u64>()) {
        let inst = random_instance(kind, seed);
        let mut engine = DesEngine::new(inst.graph.clone(), n, WirePrecision::F32, ExecMode::Sequential).unwrap();
        engine.step(&inst.batch).unwrap();
        engine.step(&inst.batch).unwrap();
        prop_assert_eq!(engine.placement_violations(), 0);
        for r in 0..n {
            for shard in [engine.linear_shard(r), engine.embedding_shard(r)].into_iter().flatten() {
                for (k, _) in shard.iter() {
                    prop_assert_eq!(shard_of(k.field, n), r);
                }
            }
        }
    }

    #[test]
    fn updates_touch_only_the_owning_shard(kind in kind_strategy(), n in 2usize..6, seed in any::<u64>()) {
        let inst = random_instance(kind, seed);
        let mut engine = DesEngine::new(inst.graph.clone(), n, WirePrecision::F32, ExecMode::Sequential).unwrap();
        engine.step(&inst.batch).unwrap();
        let snapshot = |e: &DesEngine| -> Vec<Vec<(FeatureKey, Vec<f32>)>> {
            (0..n)
                .map(|r| {
                    [e.linear_shard(r), e.embedding_shard(r)]
                        .into_iter()
                        .flatten()
                        .flat_map(|s| s.keys_sorted().into_iter().map(|k| (k, s.get(&k).unwrap().weight.clone())))
                        .collect()
                })
                .collect()
        };
        let before = snapshot(&engine);
        let only_zero: Vec<Sample> = inst
            .batch
            .samples()
            .iter()
            .map(|s| Sample {
                label: s.label,
                features: s.features.iter().filter(|f| shard_of(f.key.field, n) == 0).cloned().collect(),
            })
            .collect();
        engine.step(&SparseBatch::new(only_zero).unwrap()).unwrap();
        let after = snapshot(&engine);
        for r in 1..n {
            prop_assert_eq!(&before[r], &after[r]);
        }
    }

    #[test]
    fn ratio_falls_with_batch_under_sublinear_growth(
        gamma in 0.05f64..0.95,
        scale in 1.0f64..500.0,
        model in prop::sample::select(CostModel::ALL.to_vec()),
        n in 2usize..16,
    ) {
        let mut last = f64::INFINITY;
        for b in [512usize, 1024, 2048, 4096, 8192] {
            let uniq = (scale * (b as f64).powf(gamma)).ceil() as u64;
            let r = saving_ratio(model, &CostInputs::new(n, b, uniq)).unwrap();
            prop_assert!(r < last, "B={b}: {r} after {last}");
            last = r;
        }
    }

    #[test]
    fn criteo_fields_are_in_range(
        ints in prop::collection::vec(prop::option::of(-5i64..100_000), 13),
        cats in prop::collection::vec(prop::option::of("[0-9a-f]{8}"), 26),
        seed in any::<u64>(),
    ) {
        let mut cols = vec!["1".to_string()];
        cols.extend(ints.iter().map(|x| x.map(|v| v.to_string()).unwrap_or_default()));
        cols.extend(cats.iter().map(|c| c.clone().unwrap_or_default()));
        let rec = parse_criteo(&cols.join("\t"), 1).unwrap();
        let feats = featurize(&rec, seed);
        prop_assert_eq!(&feats, &featurize(&rec, seed));
        prop_assert!(feats.iter().all(|f: &Feature| f.key.field < 39));
        let present = ints.iter().filter(|x| x.is_some()).count() + cats.iter().filter(|c| c.is_some()).count();
        prop_assert_eq!(feats.len(), present);
    }
}

fn small_run(model: ModelKind, workers: usize, exec: ExecMode) -> RunConfig {
    RunConfig {
        model,
        workers,
        batch: 128,
        epochs: 2,
        seed: 5,
        exec,
        hidden: vec![8, 4],
        data: DataSource::Synthetic {
            spec: SyntheticSpec {
                fields: 7,
                vocab_per_field: 300,
                label_noise: 0.05,
                ..SyntheticSpec::default()
            },
            samples: 3000,
        },
        ..RunConfig::default()
    }
}

#[test]
fn execution_mode_does_not_change_results() {
    for kind in ModelKind::ALL {
        for n in [1, 3, 4] {
            let seq = train(&small_run(kind, n, ExecMode::Sequential)).unwrap();
            let par = train(&small_run(kind, n, ExecMode::Parallel)).unwrap();
            assert!(seq.metrics.iter().zip(&par.metrics).all(|(a, b)| a.same_result(b)), "{kind} N={n}");
            assert_eq!(seq.checkpoint, par.checkpoint, "{kind} N={n}");
            assert_eq!(seq.engine.group().ledger(), par.engine.group().ledger());
        }
    }
}

#[test]
fn phase_attribution_holds_for_training_runs() {
    for kind in ModelKind::ALL {
        for n in [2, 4] {
            let out = train(&small_run(kind, n, ExecMode::default())).unwrap();
            let ledger = out.engine.group().ledger();
            assert!(ledger.total_bytes(Phase::Forward) > 0);
            assert_eq!(ledger.total_bytes(Phase::Backward), 0);
            assert_eq!(ledger.total_bytes(Phase::Update), 0);
            out.engine.check_replicas().unwrap();
        }
    }
}

#[test]
fn worker_count_barely_moves_auc() {
    for kind in [ModelKind::Lr, ModelKind::Fm, ModelKind::DeepFm] {
        let one = train(&small_run(kind, 1, ExecMode::default())).unwrap();
        let four = train(&small_run(kind, 4, ExecMode::default())).unwrap();
        let (a, b) = (one.metrics.last().unwrap().auc, four.metrics.last().unwrap().auc);
        assert!((a - b).abs() <= 0.002, "{kind}: {a} vs {b}");
    }
}
