//! Sub-operators and combiners. Every `*_partial` function reads only the
//! calling worker's shard and slice; the combiners read only aggregated
//! values, which are identical on every worker.

use crate::batch::{route, Feature, ShardSlice, SparseBatch};
use crate::collectives::WorkerGroup;
use crate::error::{DesError, Result};
use crate::exec::try_map_ranks;
use crate::math::{sigmoid, DenseVector};
use crate::store::{BlockShard, Shard, ShardedWeightTable};

fn check_slice(shard: &Shard, slice: &ShardSlice) -> Result<()> {
    for f in slice.samples.iter().flatten() {
        shard.owns(f.key)?;
    }
    Ok(())
}

/// First-order partial sums `sum_j w_j x_j` over the shard-local features.
pub fn lr_partial(shard: &Shard, slice: &ShardSlice) -> Result<Vec<f64>> {
    check_slice(shard, slice)?;
    Ok(slice
        .samples
        .iter()
        .map(|feats| {
            let mut acc = 0.0;
            for f in feats {
                acc += shard.peek(f.key)[0] as f64 * f.value;
            }
            acc
        })
        .collect())
}

/// `(M1, M2)` per sample: `M1 = sum v_j x_j` (flattened `B x d`) and
/// `M2 = sum <v_j x_j, v_j x_j>`.
pub fn fm2_partials(shard: &Shard, slice: &ShardSlice) -> Result<(Vec<f64>, Vec<f64>)> {
    check_slice(shard, slice)?;
    let d = shard.dim();
    let mut m1 = vec![0.0f64; slice.samples.len() * d];
    let mut m2 = vec![0.0f64; slice.samples.len()];
    for (i, feats) in slice.samples.iter().enumerate() {
        let row = &mut m1[i * d..(i + 1) * d];
        for f in feats {
            let v = shard.peek(f.key);
            let mut sq = 0.0;
            for (m, &vk) in row.iter_mut().zip(v.iter()) {
                let t = vk as f64 * f.value;
                *m += t;
                sq += t * t;
            }
            m2[i] += sq;
        }
    }
    Ok((m1, m2))
}

/// Second-order term from aggregated partials: `(<M1, M1> - M2) / 2`.
pub fn fm2_combine(m1: &[f64], m2: f64) -> f64 {
    let mut s = 0.0;
    for &m in m1 {
        s += m * m;
    }
    0.5 * s - 0.5 * m2
}

/// Field-wise sum pooling of `x_j v_j`, in ascending field order.
pub fn pool_fields(shard: &Shard, feats: &[Feature]) -> Result<Vec<(u32, Vec<f64>)>> {
    let d = shard.dim();
    let mut pooled: Vec<(u32, Vec<f64>)> = Vec::new();
    for f in feats {
        shard.owns(f.key)?;
        let v = shard.peek(f.key);
        let at = match pooled.binary_search_by_key(&f.key.field, |p| p.0) {
            Ok(i) => i,
            Err(i) => {
                pooled.insert(i, (f.key.field, vec![0.0; d]));
                i
            }
        };
        for (p, &vk) in pooled[at].1.iter_mut().zip(v.iter()) {
            *p += vk as f64 * f.value;
        }
    }
    Ok(pooled)
}

/// Adds `V_i^T W_i` for the pooled fields of one sample to `out`.
pub fn dnn_first_partial(block: &BlockShard, pooled: &[(u32, Vec<f64>)], out: &mut [f64]) -> Result<()> {
    let cols = block.weights.cols();
    if out.len() != cols {
        return Err(DesError::Dimension(format!(
            "first FC output has {} columns, buffer holds {}",
            cols,
            out.len()
        )));
    }
    for (field, v) in pooled {
        let slot = block.fields.binary_search(field).map_err(|_| {
            DesError::Dimension(format!("field {field} has no block on rank {}", block.rank))
        })?;
        if v.len() != block.rows_per_field {
            return Err(DesError::Dimension(format!(
                "pooled width {} against {} block rows",
                v.len(),
                block.rows_per_field
            )));
        }
        for (k, &vk) in v.iter().enumerate() {
            let row = block.weights.row(block.field_rows(slot).start + k);
            for (o, &w) in out.iter_mut().zip(row) {
                *o += vk * w as f64;
            }
        }
    }
    Ok(())
}

/// One cross layer `y = x0 * (x^T w) + b + x` with `w` split contiguously
/// over the group and `x0`, `x`, `b` replicated. One scalar per sample is
/// aggregated.
pub fn dcn_cross_forward(
    group: &mut WorkerGroup,
    x0: &[DenseVector],
    x: &[DenseVector],
    w_parts: &[DenseVector],
    b: &DenseVector,
) -> Result<Vec<DenseVector>> {
    let n = group.n_workers();
    let d = b.len();
    if w_parts.len() != n {
        return Err(DesError::SplitMisalignment(format!(
            "{} weight parts for {n} workers",
            w_parts.len()
        )));
    }
    let total: usize = w_parts.iter().map(|p| p.len()).sum();
    if total != d {
        return Err(DesError::SplitMisalignment(format!(
            "parts cover {total} of {d} coordinates"
        )));
    }
    if x0.len() != x.len() || x0.iter().chain(x).any(|v| v.len() != d) {
        return Err(DesError::Dimension(format!(
            "cross inputs must be {} pairs of length {d}",
            x.len()
        )));
    }
    let offsets: Vec<usize> = w_parts
        .iter()
        .scan(0, |at, p| {
            let o = *at;
            *at += p.len();
            Some(o)
        })
        .collect();
    let locals = try_map_ranks(group.exec(), n, |r| -> Result<DenseVector> {
        let (o, w) = (offsets[r], &w_parts[r]);
        Ok(DenseVector(
            x.iter()
                .map(|xi| {
                    let mut s = 0.0;
                    for (k, &wk) in w.iter().enumerate() {
                        s += xi[o + k] * wk;
                    }
                    s
                })
                .collect(),
        ))
    })?;
    let s = group.all_reduce_vec("dcn.cross", locals)?;
    Ok(x0
        .iter()
        .zip(x)
        .zip(s.iter())
        .map(|((x0i, xi), &si)| {
            DenseVector(
                (0..d)
                    .map(|k| x0i[k] * si + b[k] + xi[k])
                    .collect(),
            )
        })
        .collect())
}

/// `sigmoid(sum_i lr_partial_i + bias)` per sample, without inserting keys.
pub fn lr_forward(
    group: &mut WorkerGroup,
    table: &ShardedWeightTable,
    batch: &SparseBatch,
    bias: f64,
) -> Result<Vec<f64>> {
    let routed = route(batch, group.n_workers());
    check_group(group, table)?;
    let locals = try_map_ranks(group.exec(), group.n_workers(), |r| {
        lr_partial(table.shard(r), &routed.slices[r]).map(DenseVector)
    })?;
    let s = group.all_reduce_vec("lr.m1", locals)?;
    Ok(s.iter()
        .map(|&z| {
            let mut z = z;
            z += bias;
            sigmoid(z)
        })
        .collect())
}

/// Second-order term per sample from two aggregations, without inserting keys.
pub fn fm2_forward(
    group: &mut WorkerGroup,
    table: &ShardedWeightTable,
    batch: &SparseBatch,
) -> Result<Vec<f64>> {
    let routed = route(batch, group.n_workers());
    check_group(group, table)?;
    let d = table.dim();
    let parts = try_map_ranks(group.exec(), group.n_workers(), |r| {
        fm2_partials(table.shard(r), &routed.slices[r])
    })?;
    let (m1s, m2s): (Vec<_>, Vec<_>) = parts
        .into_iter()
        .map(|(a, b)| (DenseVector(a), DenseVector(b)))
        .unzip();
    let m1 = group.all_reduce_vec("fm2.m1", m1s)?;
    let m2 = group.all_reduce_vec("fm2.m2", m2s)?;
    Ok((0..batch.len())
        .map(|i| fm2_combine(&m1[i * d..(i + 1) * d], m2[i]))
        .collect())
}

fn check_group(group: &WorkerGroup, table: &ShardedWeightTable) -> Result<()> {
    if group.n_workers() != table.n_shards() {
        return Err(DesError::Config(format!(
            "{} workers for a table of {} shards",
            group.n_workers(),
            table.n_shards()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batch::Sample;
    use crate::collectives::{Phase, WirePrecision};
    use crate::exec::ExecMode;
    use crate::math::{matvec_t, DenseMatrix};
    use crate::optim::OptimizerConfig;
    use crate::store::{EntrySpec, FeatureKey, Initializer, ShardedBlocks};

    fn spec(dim: usize) -> EntrySpec {
        EntrySpec {
            dim,
            init: Initializer::Zero,
            seed: 0,
            tag: 0,
            optimizer: OptimizerConfig::adagrad(),
        }
    }

    fn group(n: usize) -> WorkerGroup {
        WorkerGroup::new(n, WirePrecision::F32, ExecMode::Sequential).unwrap()
    }

    fn set(shard: &mut Shard, key: FeatureKey, w: &[f32]) {
        shard.ensure([&key]).unwrap();
        shard.entry_mut(&key).unwrap().weight = w.to_vec();
    }

    fn slice(rank: usize, samples: Vec<Vec<Feature>>) -> ShardSlice {
        ShardSlice { rank, samples }
    }

    #[test]
    fn lr_partial_examples() {
        let mut shard = Shard::new(0, 1, spec(1));
        assert_eq!(lr_partial(&shard, &slice(0, vec![vec![]])).unwrap(), vec![0.0]);
        let (a, b) = (FeatureKey::new(0, 1), FeatureKey::new(0, 2));
        set(&mut shard, a, &[0.5]);
        set(&mut shard, b, &[-1.0]);
        let s = slice(0, vec![vec![Feature::new(a, 1.0), Feature::new(b, 2.0)]]);
        assert_eq!(lr_partial(&shard, &s).unwrap(), vec![-1.5]);
    }

    #[test]
    fn lr_partial_rejects_foreign_features() {
        let shard = Shard::new(0, 2, spec(1));
        let s = slice(0, vec![vec![Feature::new(FeatureKey::new(1, 3), 1.0)]]);
        assert!(matches!(lr_partial(&shard, &s), Err(DesError::Placement { .. })));
    }

    #[test]
    fn duplicate_keys_contribute_their_summed_value() {
        let mut table = ShardedWeightTable::new(1, spec(1));
        let k = FeatureKey::new(0, 4);
        set(&mut table.shards_mut()[0], k, &[0.75]);
        let batch = SparseBatch::new(vec![Sample {
            label: 1,
            features: vec![Feature::new(k, 1.0), Feature::new(k, 2.0)],
        }])
        .unwrap();
        let p = lr_forward(&mut group(1), &table, &batch, 0.0).unwrap();
        assert_eq!(p, vec![sigmoid(0.75 * 3.0)]);
    }

    #[test]
    fn lr_forward_cancellation() {
        let mut table = ShardedWeightTable::new(2, spec(1));
        let (a, b) = (FeatureKey::new(0, 1), FeatureKey::new(1, 1));
        set(&mut table.shards_mut()[0], a, &[0.3]);
        set(&mut table.shards_mut()[1], b, &[-0.3]);
        let batch = SparseBatch::new(vec![Sample {
            label: 0,
            features: vec![Feature::new(a, 1.0), Feature::new(b, 1.0)],
        }])
        .unwrap();
        let mut g = group(2);
        assert_eq!(lr_forward(&mut g, &table, &batch, 0.0).unwrap(), vec![0.5]);
        assert_eq!(g.ledger().op_count(Phase::Forward), 1);
        assert_eq!(g.ledger().bytes_per_worker(Phase::Forward), 4.0);
    }

    #[test]
    fn fm2_partial_examples() {
        let mut shard = Shard::new(0, 1, spec(2));
        let (m1, m2) = fm2_partials(&shard, &slice(0, vec![vec![]])).unwrap();
        assert_eq!((m1, m2), (vec![0.0, 0.0], vec![0.0]));
        let (a, b) = (FeatureKey::new(0, 1), FeatureKey::new(1, 1));
        set(&mut shard, a, &[1.0, 1.0]);
        set(&mut shard, b, &[2.0, 0.0]);
        let one = slice(0, vec![vec![Feature::new(a, 1.0)]]);
        assert_eq!(fm2_partials(&shard, &one).unwrap(), (vec![1.0, 1.0], vec![2.0]));
        let two = slice(0, vec![vec![Feature::new(a, 1.0), Feature::new(b, 1.0)]]);
        let (m1, m2) = fm2_partials(&shard, &two).unwrap();
        assert_eq!((m1.clone(), m2.clone()), (vec![3.0, 1.0], vec![6.0]));
        assert_eq!(fm2_combine(&m1, m2[0]), 2.0);
        let (m1, m2) = fm2_partials(&shard, &one).unwrap();
        assert_eq!(fm2_combine(&m1, m2[0]), 0.0);
    }

    #[test]
    fn fm2_forward_splits_agree() {
        let keys: Vec<FeatureKey> = (0..6).map(|i| FeatureKey::new(i, 10 + i as u64)).collect();
        let vals = [0.5, -1.0, 2.0, 1.5, -0.25, 1.0];
        let vecs: Vec<[f32; 3]> = (0..6)
            .map(|i| [i as f32 * 0.1 - 0.2, 0.3 - i as f32 * 0.05, (i % 3) as f32 * 0.2])
            .collect();
        let batch = SparseBatch::new(vec![Sample {
            label: 1,
            features: keys.iter().zip(vals).map(|(&k, v)| Feature::new(k, v)).collect(),
        }])
        .unwrap();
        let mut pair = 0.0;
        for i in 0..6 {
            for j in i + 1..6 {
                let dot: f64 = (0..3).map(|k| vecs[i][k] as f64 * vecs[j][k] as f64).sum();
                pair += dot * vals[i] * vals[j];
            }
        }
        for n in 1..=3 {
            let mut table = ShardedWeightTable::new(n, spec(3));
            for (k, v) in keys.iter().zip(&vecs) {
                set(&mut table.shards_mut()[k.field as usize % n], *k, v);
            }
            let out = fm2_forward(&mut group(n), &table, &batch).unwrap();
            assert!((out[0] - pair).abs() <= 1e-5 * pair.abs().max(1.0), "n={n}");
        }
    }

    #[test]
    fn blocked_first_fc_sums_to_full_product() {
        let w = DenseMatrix::from_vec(4, 2, vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let full = matvec_t(&[1.0, 2.0, 3.0, 4.0], &w).unwrap();
        let mut blocks = ShardedBlocks::new(0, 2, 2, 2, 2, Initializer::Zero, 0, &OptimizerConfig::adagrad());
        blocks.shards[0].weights = DenseMatrix::from_vec(2, 2, w.as_slice()[..4].to_vec()).unwrap();
        blocks.shards[1].weights = DenseMatrix::from_vec(2, 2, w.as_slice()[4..].to_vec()).unwrap();
        let mut out = [0.0; 2];
        dnn_first_partial(&blocks.shards[0], &[(0, vec![1.0, 2.0])], &mut out).unwrap();
        let mut out1 = [0.0; 2];
        dnn_first_partial(&blocks.shards[1], &[(1, vec![3.0, 4.0])], &mut out1).unwrap();
        assert_eq!([out[0] + out1[0], out[1] + out1[1]].to_vec(), full.0);
        let mut zero = [0.0; 2];
        let blank = ShardedBlocks::new(0, 2, 2, 2, 2, Initializer::Zero, 0, &OptimizerConfig::adagrad());
        dnn_first_partial(&blank.shards[1], &[(1, vec![3.0, 4.0])], &mut zero).unwrap();
        assert_eq!(zero, [0.0, 0.0]);
        assert!(dnn_first_partial(&blocks.shards[0], &[(1, vec![3.0, 4.0])], &mut out).is_err());
    }

    #[test]
    fn cross_layer_examples() {
        let v = |x: &[f64]| DenseVector(x.to_vec());
        let mut g = group(1);
        let y = dcn_cross_forward(&mut g, &[v(&[1.0, 2.0])], &[v(&[0.5, 0.5])], &[v(&[1.0, 1.0])], &v(&[0.0, 0.0]))
            .unwrap();
        assert_eq!(y[0].0, vec![1.5, 2.5]);
        let y = dcn_cross_forward(&mut g, &[v(&[1.0, 2.0])], &[v(&[0.5, 0.5])], &[v(&[0.0, 0.0])], &v(&[0.1, 0.2]))
            .unwrap();
        assert_eq!(y[0].0, vec![0.6, 0.7]);

        let x0 = [v(&[0.3, -1.0, 0.7]), v(&[1.1, 0.2, -0.4])];
        let x = [v(&[0.5, 0.25, -0.75]), v(&[0.0, 1.5, 0.5])];
        let b = v(&[0.1, 0.0, -0.1]);
        let one = dcn_cross_forward(&mut g, &x0, &x, &[v(&[0.2, -0.6, 0.9])], &b).unwrap();
        let mut g2 = group(2);
        let two = dcn_cross_forward(&mut g2, &x0, &x, &[v(&[0.2]), v(&[-0.6, 0.9])], &b).unwrap();
        for (a, c) in one.iter().zip(&two) {
            for (p, q) in a.iter().zip(c.iter()) {
                assert!((p - q).abs() <= 1e-6);
            }
        }
        assert_eq!(g2.ledger().bytes_per_worker(Phase::Forward), 2.0 * 0.5 * 4.0 * 2.0);
        assert!(matches!(
            dcn_cross_forward(&mut g2, &x0, &x, &[v(&[0.2]), v(&[-0.6])], &b),
            Err(DesError::SplitMisalignment(_))
        ));
        assert!(matches!(
            dcn_cross_forward(&mut g2, &x0, &x, &[v(&[0.2, -0.6, 0.9])], &b),
            Err(DesError::SplitMisalignment(_))
        ));
    }
}
