//! Sharded dynamic weight storage.
//!
//! Worker `i` owns every weight whose feature field satisfies
//! `field mod N == i`. Entries are created on first lookup, carry their own
//! optimizer slots and are only ever touched by the owning worker.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use xxhash_rust::xxh3::xxh3_64_with_seed;

use crate::batch::SparseBatch;
use crate::error::{DesError, Result};
use crate::math::DenseMatrix;
use crate::optim::{slot_float_count, OptimizerConfig, OptimizerKind, OptimizerSlots};

/// Worker that owns `field`.
pub fn shard_of(field_id: u32, n: usize) -> usize {
    field_id as usize % n
}

/// Seeded 64-bit hash of a raw token string.
pub fn hash_token(seed: u64, token: &str) -> u64 {
    xxh3_64_with_seed(token.as_bytes(), seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FeatureKey {
    pub field: u32,
    pub key: u64,
}

impl FeatureKey {
    pub fn new(field: u32, key: u64) -> Self {
        Self { field, key }
    }

    /// Key of `token` in `field`, hashed as the string `"{field}:{token}"`.
    pub fn from_token(field: u32, token: &str, seed: u64) -> Self {
        Self {
            field,
            key: hash_token(seed, &format!("{field}:{token}")),
        }
    }
}

impl fmt::Display for FeatureKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{:016x}", self.field, self.key)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Initializer {
    Zero,
    Uniform { low: f32, high: f32 },
}

impl Initializer {
    /// Deterministic values for the weight identified by `(tag, field, id)`.
    pub fn values(&self, seed: u64, tag: u64, field: u32, id: u64, len: usize) -> Vec<f32> {
        match *self {
            Initializer::Zero => vec![0.0; len],
            Initializer::Uniform { low, high } => {
                let mut ident = [0u8; 20];
                ident[..8].copy_from_slice(&tag.to_le_bytes());
                ident[8..12].copy_from_slice(&field.to_le_bytes());
                ident[12..].copy_from_slice(&id.to_le_bytes());
                let mut rng = ChaCha8Rng::seed_from_u64(xxh3_64_with_seed(&ident, seed));
                (0..len)
                    .map(|_| if low < high { rng.gen_range(low..high) } else { low })
                    .collect()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightEntry {
    pub weight: Vec<f32>,
    pub slots: OptimizerSlots,
}

/// Everything needed to create a missing entry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EntrySpec {
    pub dim: usize,
    pub init: Initializer,
    pub seed: u64,
    /// Distinguishes tables that share the key space.
    pub tag: u64,
    pub optimizer: OptimizerConfig,
}

impl EntrySpec {
    pub fn fresh(&self, key: FeatureKey) -> WeightEntry {
        WeightEntry {
            weight: self.init.values(self.seed, self.tag, key.field, key.key, self.dim),
            slots: self.optimizer.new_slots(self.dim),
        }
    }
}

/// One worker's part of a [`ShardedWeightTable`].
#[derive(Clone, Debug)]
pub struct Shard {
    index: usize,
    n_shards: usize,
    spec: EntrySpec,
    entries: HashMap<FeatureKey, WeightEntry>,
}

impl Shard {
    pub fn new(index: usize, n_shards: usize, spec: EntrySpec) -> Self {
        Self {
            index,
            n_shards,
            spec,
            entries: HashMap::new(),
        }
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn spec(&self) -> &EntrySpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn owns(&self, key: FeatureKey) -> Result<()> {
        let expected = shard_of(key.field, self.n_shards);
        if expected != self.index {
            return Err(DesError::Placement {
                key,
                shard: self.index,
                expected,
            });
        }
        Ok(())
    }

    /// Inserts initialized entries for any keys not yet present.
    pub fn ensure<'a>(&mut self, keys: impl IntoIterator<Item = &'a FeatureKey>) -> Result<()> {
        for &key in keys {
            self.owns(key)?;
            if !self.entries.contains_key(&key) {
                let fresh = self.spec.fresh(key);
                self.entries.insert(key, fresh);
            }
        }
        Ok(())
    }

    /// Lookup-or-insert; returns the weights of `keys` as a row-major
    /// `keys.len() x dim` block.
    pub fn lookup(&mut self, keys: &[FeatureKey]) -> Result<DenseMatrix<f32>> {
        self.ensure(keys)?;
        let mut data = Vec::with_capacity(keys.len() * self.spec.dim);
        for key in keys {
            data.extend_from_slice(&self.entries[key].weight);
        }
        DenseMatrix::from_vec(keys.len(), self.spec.dim, data)
    }

    pub fn get(&self, key: &FeatureKey) -> Option<&WeightEntry> {
        self.entries.get(key)
    }

    /// Stored weight, or the value a lookup would insert, without inserting.
    pub fn peek(&self, key: FeatureKey) -> std::borrow::Cow<'_, [f32]> {
        match self.entries.get(&key) {
            Some(e) => std::borrow::Cow::Borrowed(&e.weight),
            None => std::borrow::Cow::Owned(self.spec.fresh(key).weight),
        }
    }

    pub fn entry_mut(&mut self, key: &FeatureKey) -> Result<&mut WeightEntry> {
        self.entries.get_mut(key).ok_or(DesError::UnknownKey(*key))
    }

    /// Overwrites existing entries.
    pub fn apply_update(
        &mut self,
        keys: &[FeatureKey],
        new_weights: &[Vec<f32>],
        new_slots: &[OptimizerSlots],
    ) -> Result<()> {
        if keys.len() != new_weights.len() || keys.len() != new_slots.len() {
            return Err(DesError::Dimension(format!(
                "update of {} keys with {} weights and {} slot sets",
                keys.len(),
                new_weights.len(),
                new_slots.len()
            )));
        }
        for ((key, w), s) in keys.iter().zip(new_weights).zip(new_slots) {
            if w.len() != self.spec.dim || s.len() != self.spec.dim {
                return Err(DesError::Dimension(format!(
                    "update of {key} with weight {} and slots {}, table dim {}",
                    w.len(),
                    s.len(),
                    self.spec.dim
                )));
            }
            if !self.entries.contains_key(key) {
                return Err(DesError::UnknownKey(*key));
            }
        }
        for ((key, w), s) in keys.iter().zip(new_weights).zip(new_slots) {
            let e = self.entries.get_mut(key).expect("checked above");
            e.weight.clone_from(w);
            e.slots = s.clone();
        }
        Ok(())
    }

    pub fn keys_sorted(&self) -> Vec<FeatureKey> {
        let mut keys: Vec<FeatureKey> = self.entries.keys().copied().collect();
        keys.sort_unstable();
        keys
    }

    pub fn iter(&self) -> impl Iterator<Item = (&FeatureKey, &WeightEntry)> {
        self.entries.iter()
    }

    pub fn to_records(&self) -> Vec<CheckpointRecord> {
        self.keys_sorted()
            .into_iter()
            .map(|k| {
                let e = &self.entries[&k];
                CheckpointRecord {
                    field_id: k.field,
                    key: k.key,
                    weights: e.weight.clone(),
                    slots: e.slots.to_floats(),
                }
            })
            .collect()
    }

    pub fn load_records(&mut self, kind: OptimizerKind, records: &[CheckpointRecord]) -> Result<()> {
        for r in records {
            let key = FeatureKey::new(r.field_id, r.key);
            self.owns(key)?;
            let slots = OptimizerSlots::from_floats(kind, r.weights.len(), &r.slots)?;
            self.entries.insert(
                key,
                WeightEntry {
                    weight: r.weights.clone(),
                    slots,
                },
            );
        }
        Ok(())
    }
}

/// A key-value weight table split into one [`Shard`] per worker.
#[derive(Clone, Debug)]
pub struct ShardedWeightTable {
    shards: Vec<Shard>,
}

impl ShardedWeightTable {
    pub fn new(n_shards: usize, spec: EntrySpec) -> Self {
        Self {
            shards: (0..n_shards).map(|i| Shard::new(i, n_shards, spec)).collect(),
        }
    }

    pub fn n_shards(&self) -> usize {
        self.shards.len()
    }

    pub fn dim(&self) -> usize {
        self.shards[0].dim()
    }

    pub fn shard(&self, i: usize) -> &Shard {
        &self.shards[i]
    }

    pub fn shards(&self) -> &[Shard] {
        &self.shards
    }

    pub fn shards_mut(&mut self) -> &mut [Shard] {
        &mut self.shards
    }

    pub fn len(&self) -> usize {
        self.shards.iter().map(Shard::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &FeatureKey) -> Option<&WeightEntry> {
        self.shards[shard_of(key.field, self.shards.len())].get(key)
    }

    /// Full scan: every stored key whose shard differs from `shard_of(field, N)`.
    pub fn placement_violations(&self) -> Vec<(usize, FeatureKey)> {
        let n = self.shards.len();
        self.shards
            .iter()
            .flat_map(|s| {
                s.entries
                    .keys()
                    .filter(move |k| shard_of(k.field, n) != s.index)
                    .map(move |k| (s.index, *k))
            })
            .collect()
    }
}

/// Sorted distinct keys of `shard` appearing anywhere in the batch.
pub fn unique_keys(batch: &SparseBatch, shard: usize, n_shards: usize) -> Vec<FeatureKey> {
    batch
        .samples()
        .iter()
        .flat_map(|s| s.features.iter())
        .filter(|f| shard_of(f.key.field, n_shards) == shard)
        .map(|f| f.key)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Dense per-field parameter blocks. Each owned field contributes
/// `rows_per_field` consecutive rows of a `rows x cols` matrix; the blocks of
/// one worker are stacked in ascending field order.
#[derive(Clone, Debug)]
pub struct BlockShard {
    pub rank: usize,
    pub fields: Vec<u32>,
    pub rows_per_field: usize,
    pub weights: DenseMatrix<f32>,
    pub slots: OptimizerSlots,
}

impl BlockShard {
    pub fn field_rows(&self, slot: usize) -> std::ops::Range<usize> {
        slot * self.rows_per_field..(slot + 1) * self.rows_per_field
    }

    /// Flat coordinate range of the `slot`-th owned field.
    pub fn field_coords(&self, slot: usize) -> std::ops::Range<usize> {
        let per = self.rows_per_field * self.weights.cols();
        slot * per..(slot + 1) * per
    }

    pub fn to_records(&self, tag: u64) -> Vec<CheckpointRecord> {
        self.fields
            .iter()
            .enumerate()
            .map(|(slot, &f)| {
                let r = self.field_coords(slot);
                CheckpointRecord {
                    field_id: f,
                    key: tag,
                    weights: self.weights.as_slice()[r.clone()].to_vec(),
                    slots: self.slots.floats_in(r),
                }
            })
            .collect()
    }
}

/// Field-blocked dense parameter split across workers by field ownership.
#[derive(Clone, Debug)]
pub struct ShardedBlocks {
    pub tag: u64,
    pub shards: Vec<BlockShard>,
}

impl ShardedBlocks {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        tag: u64,
        n_fields: u32,
        n_shards: usize,
        rows_per_field: usize,
        cols: usize,
        init: Initializer,
        seed: u64,
        optimizer: &OptimizerConfig,
    ) -> Self {
        let shards = (0..n_shards)
            .map(|rank| {
                let fields: Vec<u32> = (0..n_fields)
                    .filter(|&f| shard_of(f, n_shards) == rank)
                    .collect();
                let mut data = Vec::with_capacity(fields.len() * rows_per_field * cols);
                for &f in &fields {
                    data.extend(init.values(seed, tag, f, 0, rows_per_field * cols));
                }
                let weights = DenseMatrix::from_vec(fields.len() * rows_per_field, cols, data)
                    .expect("block sizes are consistent");
                let slots = optimizer.new_slots(weights.as_slice().len());
                BlockShard {
                    rank,
                    fields,
                    rows_per_field,
                    weights,
                    slots,
                }
            })
            .collect();
        Self { tag, shards }
    }

    pub fn to_records(&self, rank: usize) -> Vec<CheckpointRecord> {
        self.shards[rank].to_records(self.tag)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DESCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// `(field_id, key, d, weights, slots)`; `d` is `weights.len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRecord {
    pub field_id: u32,
    pub key: u64,
    pub weights: Vec<f32>,
    pub slots: Vec<f32>,
}

fn kind_code(kind: OptimizerKind) -> u32 {
    match kind {
        OptimizerKind::Ftrl => 1,
        OptimizerKind::Adagrad => 2,
        OptimizerKind::Adam => 3,
    }
}

/// Little-endian shard file: an 8-byte magic, `version: u32`,
/// `slot_kind: u32`, `count: u64`, then `count` records of
/// `field_id: u32, key: u64, d: u32, d x f32 weights, slot floats`.
pub fn write_checkpoint<W: Write>(
    mut out: W,
    kind: OptimizerKind,
    records: &[CheckpointRecord],
) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&kind_code(kind).to_le_bytes())?;
    out.write_all(&(records.len() as u64).to_le_bytes())?;
    for r in records {
        let want = slot_float_count(kind, r.weights.len());
        if r.slots.len() != want {
            return Err(DesError::Dimension(format!(
                "record {}:{} has {} slot floats, expected {want}",
                r.field_id,
                r.key,
                r.slots.len()
            )));
        }
        out.write_all(&r.field_id.to_le_bytes())?;
        out.write_all(&r.key.to_le_bytes())?;
        out.write_all(&(r.weights.len() as u32).to_le_bytes())?;
        for x in r.weights.iter().chain(&r.slots) {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<(OptimizerKind, Vec<CheckpointRecord>)> {
    fn bad(detail: impl Into<String>) -> DesError {
        DesError::Checkpoint {
            path: "<stream>".into(),
            detail: detail.into(),
        }
    }
    fn u32_of<R: Read>(r: &mut R) -> Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
    fn u64_of<R: Read>(r: &mut R) -> Result<u64> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }
    fn floats<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf)?;
        Ok(buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32_of(&mut input)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let kind = match u32_of(&mut input)? {
        1 => OptimizerKind::Ftrl,
        2 => OptimizerKind::Adagrad,
        3 => OptimizerKind::Adam,
        k => return Err(bad(format!("unknown slot kind {k}"))),
    };
    let count = u64_of(&mut input)?;
    let mut records = Vec::with_capacity(count.min(1 << 20) as usize);
    for _ in 0..count {
        let field_id = u32_of(&mut input)?;
        let key = u64_of(&mut input)?;
        let d = u32_of(&mut input)? as usize;
        let weights = floats(&mut input, d)?;
        let slots = floats(&mut input, slot_float_count(kind, d))?;
        records.push(CheckpointRecord {
            field_id,
            key,
            weights,
            slots,
        });
    }
    Ok((kind, records))
}
