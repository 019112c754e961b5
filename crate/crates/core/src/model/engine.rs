use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::baseline::{FmForm, MonolithicModel};
use crate::batch::{route, RoutedBatch, ShardSlice, SparseBatch};
use crate::collectives::{Phase, WirePrecision, WorkerGroup};
use crate::error::{DesError, Result};
use crate::exec::{map_ranks, try_for_each_mut, try_map_ranks, ExecMode};
use crate::math::{bce_with_logit, sigmoid, sigmoid_raw, DenseVector};
use crate::optim::{self, OptimizerConfig};
use crate::store::{
    write_checkpoint, BlockShard, CheckpointRecord, EntrySpec, FeatureKey, Shard, ShardedBlocks,
};

use super::dense::{DeepTrace, ReplicatedDense};
use super::ops::{dnn_first_partial, fm2_combine, fm2_partials, lr_partial, pool_fields};
use super::{
    ModelGraph, OptimizerBindings, TAG_CROSS_B, TAG_CROSS_HEAD, TAG_CROSS_W, TAG_DENSE,
    TAG_EMBEDDING, TAG_FC1, TAG_LINEAR,
};

#[derive(Clone, Debug)]
struct CrossBlocks {
    w: BlockShard,
    b: BlockShard,
    head: BlockShard,
}

/// Everything one logical worker owns.
#[derive(Clone, Debug)]
struct Worker {
    linear: Option<Shard>,
    embedding: Option<Shard>,
    fc1: Option<BlockShard>,
    cross: Option<CrossBlocks>,
    dense: ReplicatedDense,
}

/// Aggregated cross-network values, identical on every worker.
#[derive(Clone, Debug, Default)]
struct CrossAgg {
    /// `s[l][i] = x_l . w_l` of sample `i`.
    s: Vec<Vec<f64>>,
    /// `p[l][i] = x0 . w_l`; layer 0 is never aggregated and stays empty.
    p: Vec<Vec<f64>>,
    x0_head: Vec<f64>,
    /// Per worker, per layer, flattened `B x (owned fields * d)` activations.
    states: Vec<Vec<Vec<f64>>>,
}

/// Result of one forward pass, consumed by [`DesEngine::backward`].
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub epoch: u64,
    pub labels: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    routed: RoutedBatch,
    fm_m1: Vec<f64>,
    dnn: Vec<f64>,
    cross: Option<CrossAgg>,
}

/// Gradients produced by one worker; only its own parameters plus its copy
/// of the replicated gradients.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WorkerGradients {
    pub linear: BTreeMap<FeatureKey, f64>,
    pub embedding: BTreeMap<FeatureKey, Vec<f64>>,
    pub fc1: Vec<f64>,
    pub cross_w: Vec<f64>,
    pub cross_b: Vec<f64>,
    pub cross_head: Vec<f64>,
    pub dense: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub epoch: u64,
    pub workers: Vec<WorkerGradients>,
}

/// Address of one scalar parameter in the unsharded model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamRef {
    Linear(FeatureKey),
    Embedding(FeatureKey, usize),
    /// `(field * d + k) * h + c`.
    Fc1(usize),
    /// `l * fields * d + field * d + k`.
    CrossW(usize),
    CrossB(usize),
    /// `field * d + k`.
    CrossHead(usize),
    Dense(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub probs: Vec<f64>,
    /// Summed binary cross-entropy of the batch.
    pub loss: f64,
}

/// `N` workers training one substituted model in lockstep.
#[derive(Clone, Debug)]
pub struct DesEngine {
    graph: ModelGraph,
    group: WorkerGroup,
    workers: Vec<Worker>,
}

fn entry_spec(graph: &ModelGraph, dim: usize, linear: bool) -> EntrySpec {
    let (init, tag, optimizer) = if linear {
        (graph.init.linear, TAG_LINEAR, graph.optimizers.linear)
    } else {
        (graph.init.embedding, TAG_EMBEDDING, graph.optimizers.embedding)
    };
    EntrySpec {
        dim,
        init,
        seed: graph.seed,
        tag,
        optimizer,
    }
}

fn blocks(
    graph: &ModelGraph,
    n: usize,
    tag: u64,
    rows: usize,
    cols: usize,
    init: crate::store::Initializer,
) -> Vec<BlockShard> {
    ShardedBlocks::new(
        tag,
        graph.fields,
        n,
        rows,
        cols,
        init,
        graph.seed,
        &graph.optimizers.dense,
    )
    .shards
}

impl DesEngine {
    pub fn new(graph: ModelGraph, n_workers: usize, wire: WirePrecision, exec: ExecMode) -> Result<Self> {
        graph.validate()?;
        let group = WorkerGroup::new(n_workers, wire, exec)?;
        let kind = graph.kind;
        let d = graph.embed_dim;
        let width = graph.fields as usize * d;
        let mut fc1 = if kind.has_deep() {
            let init = graph.xavier(width, graph.hidden[0]);
            blocks(&graph, n_workers, TAG_FC1, d, graph.hidden[0], init)
                .into_iter()
                .map(Some)
                .collect()
        } else {
            vec![None; n_workers]
        };
        let mut cross: Vec<Option<CrossBlocks>> = if kind.has_cross() {
            let l = graph.cross_depth;
            let w = blocks(&graph, n_workers, TAG_CROSS_W, l, d, graph.xavier(width, 1));
            let b = blocks(&graph, n_workers, TAG_CROSS_B, l, d, crate::store::Initializer::Zero);
            let head = blocks(&graph, n_workers, TAG_CROSS_HEAD, 1, d, graph.xavier(width, 1));
            w.into_iter()
                .zip(b)
                .zip(head)
                .map(|((w, b), head)| Some(CrossBlocks { w, b, head }))
                .collect()
        } else {
            vec![None; n_workers]
        };
        let dense = ReplicatedDense::new(&graph);
        let workers = (0..n_workers)
            .map(|r| Worker {
                linear: kind
                    .has_linear()
                    .then(|| Shard::new(r, n_workers, entry_spec(&graph, 1, true))),
                embedding: kind
                    .has_embedding()
                    .then(|| Shard::new(r, n_workers, entry_spec(&graph, d, false))),
                fc1: fc1[r].take(),
                cross: cross[r].take(),
                dense: dense.clone(),
            })
            .collect();
        Ok(Self {
            graph,
            group,
            workers,
        })
    }

    pub fn graph(&self) -> &ModelGraph {
        &self.graph
    }

    pub fn group(&self) -> &WorkerGroup {
        &self.group
    }

    pub fn group_mut(&mut self) -> &mut WorkerGroup {
        &mut self.group
    }

    pub fn n_workers(&self) -> usize {
        self.workers.len()
    }

    pub fn linear_shard(&self, rank: usize) -> Option<&Shard> {
        self.workers[rank].linear.as_ref()
    }

    pub fn embedding_shard(&self, rank: usize) -> Option<&Shard> {
        self.workers[rank].embedding.as_ref()
    }

    pub fn replicated(&self, rank: usize) -> &ReplicatedDense {
        &self.workers[rank].dense
    }

    /// Direct access to one worker's replica, for fault injection.
    pub fn replicated_mut(&mut self, rank: usize) -> &mut ReplicatedDense {
        &mut self.workers[rank].dense
    }

    /// Training forward: missing keys are inserted.
    pub fn forward(&mut self, batch: &SparseBatch) -> Result<ForwardPass> {
        let routed = route(batch, self.n_workers());
        try_for_each_mut(self.group.exec(), &mut self.workers, |r, w| {
            w.ensure(&routed.slices[r])
        })?;
        self.run_forward(routed, Phase::Forward)
    }

    /// Evaluation forward: the tables are left untouched and traffic is
    /// booked under [`Phase::Eval`].
    pub fn forward_eval(&mut self, batch: &SparseBatch) -> Result<Vec<f64>> {
        let routed = route(batch, self.n_workers());
        Ok(self.run_forward(routed, Phase::Eval)?.probs)
    }

    fn run_forward(&mut self, routed: RoutedBatch, phase: Phase) -> Result<ForwardPass> {
        self.group.set_phase(phase);
        let out = forward_inner(&self.graph, &self.workers, &mut self.group, routed);
        self.group.set_phase(Phase::Forward);
        out
    }

    /// Gradients of the summed loss. No collective is called.
    pub fn backward(&mut self, pass: &ForwardPass) -> Result<Gradients> {
        let epoch = self.group.epoch();
        if pass.epoch != epoch {
            return Err(DesError::StaleEpoch {
                forward: pass.epoch,
                current: epoch,
            });
        }
        self.group.set_phase(Phase::Backward);
        let deltas: Vec<f64> = pass
            .logits
            .iter()
            .zip(&pass.labels)
            .map(|(&z, &y)| sigmoid_raw(z) - y)
            .collect();
        let graph = &self.graph;
        let workers = &self.workers;
        let grads = try_map_ranks(self.group.exec(), workers.len(), |r| {
            workers[r].backward(graph, r, pass, &deltas)
        });
        self.group.set_phase(Phase::Forward);
        let grads = grads?;
        for (r, g) in grads.iter().enumerate().skip(1) {
            if let Some(i) = first_bit_difference(&g.dense, &grads[0].dense) {
                return Err(DesError::ReplicaDivergence {
                    rank: r,
                    detail: format!("replicated gradient {i} differs"),
                });
            }
        }
        Ok(Gradients {
            epoch,
            workers: grads,
        })
    }

    /// Shard-local optimizer steps followed by the step barrier.
    pub fn apply(&mut self, grads: &Gradients) -> Result<()> {
        if grads.epoch != self.group.epoch() {
            return Err(DesError::StaleEpoch {
                forward: grads.epoch,
                current: self.group.epoch(),
            });
        }
        self.group.set_phase(Phase::Update);
        let opt = self.graph.optimizers;
        let res = try_for_each_mut(self.group.exec(), &mut self.workers, |r, w| {
            w.apply(&opt, &grads.workers[r])
        });
        self.group.set_phase(Phase::Forward);
        res?;
        self.check_replicas()?;
        self.group.barrier();
        Ok(())
    }

    pub fn step(&mut self, batch: &SparseBatch) -> Result<StepOutput> {
        let pass = self.forward(batch)?;
        let grads = self.backward(&pass)?;
        self.apply(&grads)?;
        let loss = pass
            .logits
            .iter()
            .zip(&pass.labels)
            .map(|(&z, &y)| bce_with_logit(z, y))
            .sum();
        Ok(StepOutput {
            probs: pass.probs,
            loss,
        })
    }

    /// Fails unless every replica is bitwise identical to rank 0's.
    pub fn check_replicas(&self) -> Result<()> {
        let base = self.workers[0].dense.params();
        for (r, w) in self.workers.iter().enumerate().skip(1) {
            let p = w.dense.params();
            let diff = if p.len() != base.len() {
                Some(p.len().min(base.len()))
            } else {
                p.iter()
                    .zip(base)
                    .position(|(a, b)| a.to_bits() != b.to_bits())
            };
            if let Some(i) = diff {
                return Err(DesError::ReplicaDivergence {
                    rank: r,
                    detail: format!("replicated parameter {i} differs"),
                });
            }
        }
        Ok(())
    }

    /// Stored keys that violate `shard == field mod N`.
    pub fn placement_violations(&self) -> usize {
        self.workers
            .iter()
            .flat_map(|w| w.linear.iter().chain(w.embedding.iter()))
            .map(|s| s.iter().filter(|(k, _)| s.owns(**k).is_err()).count())
            .sum()
    }

    /// Gradients keyed by their unsharded parameter address.
    pub fn gradient_entries(&self, grads: &Gradients) -> Vec<(ParamRef, f64)> {
        let g = &self.graph;
        let (d, h, l) = (g.embed_dim, g.first_width(), g.cross_depth);
        let width = g.fields as usize * d;
        let mut out = Vec::new();
        for (w, wg) in self.workers.iter().zip(&grads.workers) {
            out.extend(wg.linear.iter().map(|(&k, &v)| (ParamRef::Linear(k), v)));
            for (&k, v) in &wg.embedding {
                out.extend(v.iter().enumerate().map(|(j, &x)| (ParamRef::Embedding(k, j), x)));
            }
            if let Some(fc1) = &w.fc1 {
                for (slot, &f) in fc1.fields.iter().enumerate() {
                    for k in 0..d {
                        for c in 0..h {
                            let local = (slot * d + k) * h + c;
                            let global = (f as usize * d + k) * h + c;
                            out.push((ParamRef::Fc1(global), wg.fc1[local]));
                        }
                    }
                }
            }
            if let Some(cross) = &w.cross {
                for (slot, &f) in cross.w.fields.iter().enumerate() {
                    for k in 0..d {
                        for layer in 0..l {
                            let local = (slot * l + layer) * d + k;
                            let global = layer * width + f as usize * d + k;
                            out.push((ParamRef::CrossW(global), wg.cross_w[local]));
                            out.push((ParamRef::CrossB(global), wg.cross_b[local]));
                        }
                        out.push((ParamRef::CrossHead(f as usize * d + k), wg.cross_head[slot * d + k]));
                    }
                }
            }
        }
        out.extend(
            grads.workers[0]
                .dense
                .iter()
                .enumerate()
                .map(|(i, &v)| (ParamRef::Dense(i), v)),
        );
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// The unsharded model holding exactly the current weights, widened to
    /// double precision.
    pub fn monolithic(&self, form: FmForm) -> MonolithicModel {
        let g = &self.graph;
        let (d, h, l) = (g.embed_dim, g.first_width(), g.cross_depth);
        let width = g.fields as usize * d;
        let mut m = MonolithicModel::new(g.clone(), form);
        for w in &self.workers {
            if let Some(s) = &w.linear {
                for (k, e) in s.iter() {
                    m.linear.insert(*k, e.weight[0] as f64);
                }
            }
            if let Some(s) = &w.embedding {
                for (k, e) in s.iter() {
                    m.embedding.insert(*k, e.weight.iter().map(|&x| x as f64).collect());
                }
            }
            if let Some(fc1) = &w.fc1 {
                let data = fc1.weights.as_slice();
                for (slot, &f) in fc1.fields.iter().enumerate() {
                    for k in 0..d {
                        for c in 0..h {
                            m.fc1[(f as usize * d + k) * h + c] = data[(slot * d + k) * h + c] as f64;
                        }
                    }
                }
            }
            if let Some(cross) = &w.cross {
                let (cw, cb, ch) = (
                    cross.w.weights.as_slice(),
                    cross.b.weights.as_slice(),
                    cross.head.weights.as_slice(),
                );
                for (slot, &f) in cross.w.fields.iter().enumerate() {
                    for k in 0..d {
                        for layer in 0..l {
                            let local = (slot * l + layer) * d + k;
                            let global = layer * width + f as usize * d + k;
                            m.cross_w[global] = cw[local] as f64;
                            m.cross_b[global] = cb[local] as f64;
                        }
                        m.cross_head[f as usize * d + k] = ch[slot * d + k] as f64;
                    }
                }
            }
        }
        m.dense = self.workers[0].dense.params().iter().map(|&x| x as f64).collect();
        m
    }

    /// Per-worker checkpoint files as `(name, bytes)`, sorted by name.
    pub fn checkpoint(&self) -> Result<Vec<(String, Vec<u8>)>> {
        let mut files = Vec::new();
        let mut emit = |name: String, cfg: &OptimizerConfig, records: Vec<CheckpointRecord>| -> Result<()> {
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, cfg.kind(), &records)?;
            files.push((name, buf));
            Ok(())
        };
        let opt = &self.graph.optimizers;
        for (r, w) in self.workers.iter().enumerate() {
            if let Some(s) = &w.linear {
                emit(format!("rank{r}.linear.ckpt"), &opt.linear, s.to_records())?;
            }
            if let Some(s) = &w.embedding {
                emit(format!("rank{r}.embedding.ckpt"), &opt.embedding, s.to_records())?;
            }
            if let Some(b) = &w.fc1 {
                emit(format!("rank{r}.fc1.ckpt"), &opt.dense, b.to_records(TAG_FC1))?;
            }
            if let Some(c) = &w.cross {
                let mut recs = c.w.to_records(TAG_CROSS_W);
                recs.extend(c.b.to_records(TAG_CROSS_B));
                recs.extend(c.head.to_records(TAG_CROSS_HEAD));
                emit(format!("rank{r}.cross.ckpt"), &opt.dense, recs)?;
            }
            let dense = CheckpointRecord {
                field_id: u32::MAX,
                key: TAG_DENSE,
                weights: w.dense.params().to_vec(),
                slots: w.dense.slots().to_floats(),
            };
            emit(format!("rank{r}.dense.ckpt"), &opt.dense, vec![dense])?;
        }
        files.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(files)
    }

    pub fn write_checkpoint(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        self.checkpoint()?
            .into_iter()
            .map(|(name, bytes)| {
                let path = dir.join(name);
                std::fs::write(&path, bytes)?;
                Ok(path)
            })
            .collect()
    }
}

fn first_bit_difference(a: &[f64], b: &[f64]) -> Option<usize> {
    if a.len() != b.len() {
        return Some(a.len().min(b.len()));
    }
    a.iter().zip(b).position(|(x, y)| x.to_bits() != y.to_bits())
}

fn forward_inner(
    graph: &ModelGraph,
    workers: &[Worker],
    group: &mut WorkerGroup,
    routed: RoutedBatch,
) -> Result<ForwardPass> {
    let kind = graph.kind;
    let n = workers.len();
    let exec = group.exec();
    let b = routed.batch_size();
    let slices = &routed.slices;
    let mut lr = Vec::new();
    let mut fm_m1 = Vec::new();
    let mut fm_m2 = Vec::new();
    let mut dnn = Vec::new();
    let mut cross = None;

    if kind.has_linear() {
        let locals = try_map_ranks(exec, n, |r| {
            lr_partial(workers[r].linear.as_ref().unwrap(), &slices[r]).map(DenseVector)
        })?;
        lr = group.all_reduce_vec("lr.m1", locals)?.0;
    }
    if kind.has_fm() {
        let parts = try_map_ranks(exec, n, |r| {
            fm2_partials(workers[r].embedding.as_ref().unwrap(), &slices[r])
        })?;
        let (m1s, m2s): (Vec<_>, Vec<_>) = parts
            .into_iter()
            .map(|(a, c)| (DenseVector(a), DenseVector(c)))
            .unzip();
        fm_m1 = group.all_reduce_vec("fm2.m1", m1s)?.0;
        fm_m2 = group.all_reduce_vec("fm2.m2", m2s)?.0;
    }
    if kind.has_deep() {
        let h = graph.hidden[0];
        let locals = try_map_ranks(exec, n, |r| -> Result<DenseVector> {
            let w = &workers[r];
            let emb = w.embedding.as_ref().unwrap();
            let fc1 = w.fc1.as_ref().unwrap();
            let mut out = vec![0.0; b * h];
            for (i, feats) in slices[r].samples.iter().enumerate() {
                let pooled = pool_fields(emb, feats)?;
                dnn_first_partial(fc1, &pooled, &mut out[i * h..(i + 1) * h])?;
            }
            Ok(DenseVector(out))
        })?;
        dnn = group.all_reduce_vec("dnn.m1", locals)?.0;
    }
    if kind.has_cross() {
        cross = Some(cross_forward(graph, workers, group, slices)?);
    }

    let d = graph.embed_dim;
    let h = graph.first_width();
    let per_rank = map_ranks(exec, n, |r| {
        let dense = &workers[r].dense;
        let mut trace = DeepTrace::default();
        (0..b)
            .map(|i| {
                let mut z = 0.0;
                if kind.has_linear() {
                    z += lr[i];
                }
                if kind.has_fm() {
                    z += fm2_combine(&fm_m1[i * d..(i + 1) * d], fm_m2[i]);
                }
                if kind.has_deep() {
                    z += dense.deep_forward(&dnn[i * h..(i + 1) * h], &mut trace);
                }
                if let Some(c) = &cross {
                    z += c.s[graph.cross_depth][i];
                }
                z += dense.bias();
                z
            })
            .collect::<Vec<f64>>()
    });
    for (r, z) in per_rank.iter().enumerate().skip(1) {
        if let Some(i) = first_bit_difference(z, &per_rank[0]) {
            return Err(DesError::ReplicaDivergence {
                rank: r,
                detail: format!("logit of sample {i} differs"),
            });
        }
    }
    let logits = per_rank.into_iter().next().unwrap();
    Ok(ForwardPass {
        epoch: group.epoch(),
        labels: routed.labels.clone(),
        probs: logits.iter().map(|&z| sigmoid(z)).collect(),
        logits,
        routed,
        fm_m1,
        dnn,
        cross,
    })
}

/// Runs the cross layers round by round. `s` gets one extra row holding the
/// aggregated head value.
fn cross_forward(
    graph: &ModelGraph,
    workers: &[Worker],
    group: &mut WorkerGroup,
    slices: &[ShardSlice],
) -> Result<CrossAgg> {
    let n = workers.len();
    let exec = group.exec();
    let d = graph.embed_dim;
    let depth = graph.cross_depth;
    let b = slices[0].samples.len();
    let mut states: Vec<Vec<Vec<f64>>> = try_map_ranks(exec, n, |r| -> Result<Vec<Vec<f64>>> {
        let w = &workers[r];
        let fields = &w.cross.as_ref().unwrap().w.fields;
        let width = fields.len() * d;
        let mut x0 = vec![0.0; b * width];
        for (i, feats) in slices[r].samples.iter().enumerate() {
            for (f, v) in pool_fields(w.embedding.as_ref().unwrap(), feats)? {
                let slot = fields.binary_search(&f).expect("routed by ownership");
                x0[i * width + slot * d..i * width + (slot + 1) * d].copy_from_slice(&v);
            }
        }
        Ok(vec![x0])
    })?;
    let mut agg = CrossAgg::default();
    for l in 0..depth {
        let locals = map_ranks(exec, n, |r| {
            let c = workers[r].cross.as_ref().unwrap();
            let width = c.w.fields.len() * d;
            let (x0, x) = (&states[r][0], &states[r][l]);
            let mut out = Vec::with_capacity(if l == 0 { b } else { 2 * b });
            for i in 0..b {
                let (mut s, mut q) = (0.0, 0.0);
                for slot in 0..c.w.fields.len() {
                    let w = c.w.weights.row(slot * depth + l);
                    let at = i * width + slot * d;
                    for k in 0..d {
                        s += x[at + k] * w[k] as f64;
                    }
                    if l > 0 {
                        for k in 0..d {
                            q += x0[at + k] * w[k] as f64;
                        }
                    }
                }
                out.push(s);
                if l > 0 {
                    out.push(q);
                }
            }
            DenseVector(out)
        });
        let v = group.all_reduce_vec(&format!("dcn.cross{l}"), locals)?.0;
        let (s, p): (Vec<f64>, Vec<f64>) = if l == 0 {
            (v, Vec::new())
        } else {
            (v.iter().step_by(2).copied().collect(), v.iter().skip(1).step_by(2).copied().collect())
        };
        let next = map_ranks(exec, n, |r| {
            let c = workers[r].cross.as_ref().unwrap();
            let width = c.w.fields.len() * d;
            let (x0, x) = (&states[r][0], &states[r][l]);
            let mut y = vec![0.0; b * width];
            for i in 0..b {
                for slot in 0..c.w.fields.len() {
                    let bias = c.b.weights.row(slot * depth + l);
                    let at = i * width + slot * d;
                    for k in 0..d {
                        y[at + k] = x0[at + k] * s[i] + bias[k] as f64 + x[at + k];
                    }
                }
            }
            y
        });
        for (st, y) in states.iter_mut().zip(next) {
            st.push(y);
        }
        agg.s.push(s);
        agg.p.push(p);
    }
    let locals = map_ranks(exec, n, |r| {
        let c = workers[r].cross.as_ref().unwrap();
        let width = c.w.fields.len() * d;
        let (x0, x) = (&states[r][0], &states[r][depth]);
        let mut out = Vec::with_capacity(2 * b);
        for i in 0..b {
            let (mut hx, mut h0) = (0.0, 0.0);
            for slot in 0..c.w.fields.len() {
                let head = c.head.weights.row(slot);
                let at = i * width + slot * d;
                for k in 0..d {
                    hx += head[k] as f64 * x[at + k];
                    h0 += x0[at + k] * head[k] as f64;
                }
            }
            out.push(hx);
            out.push(h0);
        }
        DenseVector(out)
    });
    let v = group.all_reduce_vec("dcn.head", locals)?.0;
    agg.s.push(v.iter().step_by(2).copied().collect());
    agg.x0_head = v.iter().skip(1).step_by(2).copied().collect();
    agg.states = states;
    Ok(agg)
}

impl Worker {
    fn ensure(&mut self, slice: &ShardSlice) -> Result<()> {
        let keys = slice.samples.iter().flatten().map(|f| &f.key);
        if let Some(s) = &mut self.linear {
            s.ensure(keys.clone())?;
        }
        if let Some(s) = &mut self.embedding {
            s.ensure(keys)?;
        }
        Ok(())
    }

    fn backward(
        &self,
        graph: &ModelGraph,
        rank: usize,
        pass: &ForwardPass,
        deltas: &[f64],
    ) -> Result<WorkerGradients> {
        let kind = graph.kind;
        let d = graph.embed_dim;
        let h = graph.first_width();
        let depth = graph.cross_depth;
        let slice = &pass.routed.slices[rank];
        let mut g = WorkerGradients {
            fc1: vec![0.0; self.fc1.as_ref().map_or(0, |b| b.weights.as_slice().len())],
            cross_w: vec![0.0; self.cross.as_ref().map_or(0, |c| c.w.weights.as_slice().len())],
            cross_b: vec![0.0; self.cross.as_ref().map_or(0, |c| c.b.weights.as_slice().len())],
            cross_head: vec![0.0; self.cross.as_ref().map_or(0, |c| c.head.weights.as_slice().len())],
            dense: vec![0.0; self.dense.params().len()],
            ..Default::default()
        };
        let mut trace = DeepTrace::default();
        for (i, feats) in slice.samples.iter().enumerate() {
            let delta = deltas[i];
            if let Some(s) = &self.linear {
                for f in feats {
                    s.owns(f.key)?;
                    *g.linear.entry(f.key).or_insert(0.0) += delta * f.value;
                }
            }
            if kind.has_fm() {
                let emb = self.embedding.as_ref().unwrap();
                let m1 = &pass.fm_m1[i * d..(i + 1) * d];
                for f in feats {
                    let v = emb.peek(f.key);
                    let ge = g.embedding.entry(f.key).or_insert_with(|| vec![0.0; d]);
                    let x = f.value;
                    for k in 0..d {
                        ge[k] += delta * (x * m1[k] - x * x * v[k] as f64);
                    }
                }
            }
            if kind.has_deep() {
                let emb = self.embedding.as_ref().unwrap();
                let fc1 = self.fc1.as_ref().unwrap();
                self.dense.deep_forward(&pass.dnn[i * h..(i + 1) * h], &mut trace);
                let g_agg = self.dense.deep_backward(&trace, delta, &mut g.dense);
                for (field, pv) in pool_fields(emb, feats)? {
                    let slot = fc1.fields.binary_search(&field).expect("routed by ownership");
                    let rows = fc1.field_rows(slot);
                    let mut gp = vec![0.0; d];
                    for k in 0..d {
                        let row = fc1.weights.row(rows.start + k);
                        let at = (rows.start + k) * h;
                        for c in 0..h {
                            g.fc1[at + c] += pv[k] * g_agg[c];
                            gp[k] += row[c] as f64 * g_agg[c];
                        }
                    }
                    for f in feats.iter().filter(|f| f.key.field == field) {
                        let ge = g.embedding.entry(f.key).or_insert_with(|| vec![0.0; d]);
                        for k in 0..d {
                            ge[k] += f.value * gp[k];
                        }
                    }
                }
            }
            if let (Some(c), Some(agg)) = (&self.cross, &pass.cross) {
                let states = &agg.states[rank];
                let width = c.w.fields.len() * d;
                let g0 = delta * agg.x0_head[i];
                let mut g_s = vec![0.0; depth];
                for l in (0..depth).rev() {
                    g_s[l] = g0;
                    for k in l + 1..depth {
                        g_s[l] += g_s[k] * agg.p[k][i];
                    }
                }
                let mut g_x0 = vec![0.0; width];
                for slot in 0..c.w.fields.len() {
                    let at = i * width + slot * d;
                    let head = c.head.weights.row(slot);
                    let mut gx: Vec<f64> = head.iter().map(|&w| delta * w as f64).collect();
                    for k in 0..d {
                        g.cross_head[slot * d + k] += delta * states[depth][at + k];
                    }
                    let gx0 = &mut g_x0[slot * d..(slot + 1) * d];
                    for l in (0..depth).rev() {
                        let row = slot * depth + l;
                        let w = c.w.weights.row(row);
                        for k in 0..d {
                            g.cross_b[row * d + k] += gx[k];
                            gx0[k] += gx[k] * agg.s[l][i];
                            g.cross_w[row * d + k] += g_s[l] * states[l][at + k];
                            gx[k] += g_s[l] * w[k] as f64;
                        }
                    }
                    for k in 0..d {
                        gx0[k] += gx[k];
                    }
                }
                for f in feats {
                    let slot = c.w.fields.binary_search(&f.key.field).expect("routed by ownership");
                    let ge = g.embedding.entry(f.key).or_insert_with(|| vec![0.0; d]);
                    for k in 0..d {
                        ge[k] += f.value * g_x0[slot * d + k];
                    }
                }
            }
            g.dense[0] += delta;
        }
        Ok(g)
    }

    fn apply(&mut self, opt: &OptimizerBindings, g: &WorkerGradients) -> Result<()> {
        if let Some(s) = &mut self.linear {
            for (key, &grad) in &g.linear {
                let e = s.entry_mut(key)?;
                optim::step(&opt.linear, &mut e.weight, &mut e.slots, &[grad])?;
            }
        }
        if let Some(s) = &mut self.embedding {
            for (key, grad) in &g.embedding {
                let e = s.entry_mut(key)?;
                optim::step(&opt.embedding, &mut e.weight, &mut e.slots, grad)?;
            }
        }
        if let Some(b) = &mut self.fc1 {
            optim::step(&opt.dense, b.weights.as_mut_slice(), &mut b.slots, &g.fc1)?;
        }
        if let Some(c) = &mut self.cross {
            optim::step(&opt.dense, c.w.weights.as_mut_slice(), &mut c.w.slots, &g.cross_w)?;
            optim::step(&opt.dense, c.b.weights.as_mut_slice(), &mut c.b.slots, &g.cross_b)?;
            optim::step(&opt.dense, c.head.weights.as_mut_slice(), &mut c.head.slots, &g.cross_head)?;
        }
        self.dense.apply(&opt.dense, &g.dense)
    }
}
