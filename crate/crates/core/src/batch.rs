//! Sparse samples and their routing onto worker shards.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{DesError, Result};
use crate::store::{shard_of, FeatureKey};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub key: FeatureKey,
    pub value: f64,
}

impl Feature {
    pub fn new(key: FeatureKey, value: f64) -> Self {
        Self { key, value }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub label: u8,
    pub features: Vec<Feature>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseBatch {
    samples: Vec<Sample>,
}

impl SparseBatch {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(DesError::Config("a batch needs at least one sample".into()));
        }
        if let Some(s) = samples.iter().find(|s| s.label > 1) {
            return Err(DesError::Config(format!("label {} is not 0 or 1", s.label)));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.label as f64).collect()
    }
}

/// Merges repeated keys into one feature whose value is the sum of the
/// occurrences. Keys keep the position of their first occurrence.
pub fn canonicalize(features: &[Feature]) -> Vec<Feature> {
    let mut out: Vec<Feature> = Vec::with_capacity(features.len());
    let mut index: HashMap<FeatureKey, usize> = HashMap::with_capacity(features.len());
    for f in features {
        match index.get(&f.key) {
            Some(&i) => out[i].value += f.value,
            None => {
                index.insert(f.key, out.len());
                out.push(*f);
            }
        }
    }
    out
}

/// The part of a batch owned by one worker: for every sample, the
/// canonicalized features whose field maps to this shard.
#[derive(Clone, Debug, PartialEq)]
pub struct ShardSlice {
    pub rank: usize,
    pub samples: Vec<Vec<Feature>>,
}

impl ShardSlice {
    pub fn check_placement(&self, n_shards: usize) -> Result<()> {
        for f in self.samples.iter().flatten() {
            let expected = shard_of(f.key.field, n_shards);
            if expected != self.rank {
                return Err(DesError::Placement {
                    key: f.key,
                    shard: self.rank,
                    expected,
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutedBatch {
    pub labels: Vec<f64>,
    pub slices: Vec<ShardSlice>,
}

impl RoutedBatch {
    pub fn n_workers(&self) -> usize {
        self.slices.len()
    }

    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }
}

/// Partitions a global batch by `field mod n`.
pub fn route(batch: &SparseBatch, n: usize) -> RoutedBatch {
    let b = batch.len();
    let mut slices: Vec<ShardSlice> = (0..n)
        .map(|rank| ShardSlice {
            rank,
            samples: vec![Vec::new(); b],
        })
        .collect();
    for (i, sample) in batch.samples().iter().enumerate() {
        for f in canonicalize(&sample.features) {
            slices[shard_of(f.key.field, n)].samples[i].push(f);
        }
    }
    RoutedBatch {
        labels: batch.labels(),
        slices,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feat(field: u32, key: u64, value: f64) -> Feature {
        Feature::new(FeatureKey::new(field, key), value)
    }

    #[test]
    fn duplicates_merge_in_first_occurrence_order() {
        let c = canonicalize(&[feat(0, 1, 1.0), feat(1, 2, 2.0), feat(0, 1, 0.5)]);
        assert_eq!(c, vec![feat(0, 1, 1.5), feat(1, 2, 2.0)]);
    }

    #[test]
    fn routing_places_by_field() {
        let batch = SparseBatch::new(vec![
            Sample {
                label: 1,
                features: vec![feat(0, 1, 1.0), feat(5, 2, 1.0), feat(2, 9, 1.0)],
            },
            Sample {
                label: 0,
                features: vec![],
            },
        ])
        .unwrap();
        let r = route(&batch, 4);
        assert_eq!(r.labels, vec![1.0, 0.0]);
        assert_eq!(r.slices[0].samples[0], vec![feat(0, 1, 1.0)]);
        assert_eq!(r.slices[1].samples[0], vec![feat(5, 2, 1.0)]);
        assert_eq!(r.slices[2].samples[0], vec![feat(2, 9, 1.0)]);
        assert!(r.slices[3].samples[0].is_empty());
        for s in &r.slices {
            s.check_placement(4).unwrap();
            assert!(s.samples[1].is_empty());
        }
        let mut bad = r.slices[0].clone();
        bad.samples[0].push(feat(1, 3, 1.0));
        assert!(matches!(
            bad.check_placement(4),
            Err(DesError::Placement { expected: 1, .. })
        ));
    }

    #[test]
    fn empty_batch_and_bad_labels_rejected() {
        assert!(SparseBatch::new(vec![]).is_err());
        assert!(SparseBatch::new(vec![Sample {
            label: 2,
            features: vec![]
        }])
        .is_err());
    }
}
