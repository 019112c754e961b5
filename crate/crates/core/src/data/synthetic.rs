//! Seeded synthetic click data drawn from a hidden logistic model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Zipf};
use serde::{Deserialize, Serialize};

use crate::batch::{Feature, Sample};
use crate::error::{DesError, Result};
use crate::math::sigmoid_raw;
use crate::store::FeatureKey;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelModel {
    /// `y ~ Bernoulli(sigmoid(sharpness * (logit - threshold)))`.
    Logistic,
    /// `y = [logit > threshold]`; separable before noise.
    Threshold,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub fields: u32,
    pub vocab_per_field: u64,
    /// Probability that a field appears in a sample.
    pub field_presence: f64,
    /// Active tokens per present field, drawn uniformly from `1..=max`.
    pub max_tokens_per_field: u32,
    /// Zipf exponent of token popularity inside a field.
    pub zipf_exponent: f64,
    /// Standard deviation of the hidden per-token weights.
    pub weight_scale: f64,
    pub weight_seed: u64,
    pub label_model: LabelModel,
    pub sharpness: f64,
    /// Positive rate of the labels before noise.
    pub positive_rate: f64,
    /// Probability of flipping each label.
    pub label_noise: f64,
    pub hash_seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            fields: 10,
            vocab_per_field: 10_000,
            field_presence: 1.0,
            max_tokens_per_field: 1,
            zipf_exponent: 1.05,
            weight_scale: 1.0,
            weight_seed: 7,
            label_model: LabelModel::Logistic,
            sharpness: 1.0,
            positive_rate: 0.25,
            label_noise: 0.0,
            hash_seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.fields > 0
            && self.vocab_per_field > 0
            && self.max_tokens_per_field > 0
            && (0.0..=1.0).contains(&self.field_presence)
            && self.field_presence > 0.0
            && self.zipf_exponent > 0.0
            && self.weight_scale >= 0.0
            && self.sharpness > 0.0
            && self.positive_rate > 0.0
            && self.positive_rate < 1.0
            && (0.0..0.5).contains(&self.label_noise);
        if ok {
            Ok(())
        } else {
            Err(DesError::Config(format!("invalid synthetic spec {self:?}")))
        }
    }
}

const PILOT_SAMPLES: usize = 20_000;

/// Infinite, reproducible sample stream.
pub struct SyntheticGenerator {
    spec: SyntheticSpec,
    hidden: Vec<Vec<f64>>,
    keys: Vec<Vec<FeatureKey>>,
    zipf: Zipf<f64>,
    threshold: f64,
    rng: ChaCha8Rng,
}

impl SyntheticGenerator {
    pub fn new(spec: SyntheticSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut wrng = ChaCha8Rng::seed_from_u64(spec.weight_seed);
        let normal = Normal::new(0.0, spec.weight_scale.max(f64::MIN_POSITIVE))
            .map_err(|e| DesError::Config(e.to_string()))?;
        let hidden: Vec<Vec<f64>> = (0..spec.fields)
            .map(|_| (0..spec.vocab_per_field).map(|_| normal.sample(&mut wrng)).collect())
            .collect();
        let keys = (0..spec.fields)
            .map(|f| {
                (0..spec.vocab_per_field)
                    .map(|t| FeatureKey::from_token(f, &format!("t{t}"), spec.hash_seed))
                    .collect()
            })
            .collect();
        let zipf = Zipf::new(spec.vocab_per_field, spec.zipf_exponent)
            .map_err(|e| DesError::Config(format!("zipf: {e:?}")))?;
        let mut gen = Self {
            spec,
            hidden,
            keys,
            zipf,
            threshold: 0.0,
            rng: ChaCha8Rng::seed_from_u64(spec_pilot_seed(seed)),
        };
        gen.threshold = gen.calibrate();
        gen.rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(gen)
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Hidden logit of a sample's features.
    pub fn hidden_logit(&self, features: &[(u32, u64)]) -> f64 {
        features
            .iter()
            .map(|&(f, t)| self.hidden[f as usize][t as usize])
            .sum()
    }

    fn draw_tokens(&mut self) -> Vec<(u32, u64)> {
        let mut out = Vec::new();
        for f in 0..self.spec.fields {
            if self.spec.field_presence < 1.0 && !self.rng.gen_bool(self.spec.field_presence) {
                continue;
            }
            let k = self.rng.gen_range(1..=self.spec.max_tokens_per_field);
            for _ in 0..k {
                let t = self.zipf.sample(&mut self.rng) as u64 - 1;
                out.push((f, t.min(self.spec.vocab_per_field - 1)));
            }
        }
        out
    }

    fn calibrate(&mut self) -> f64 {
        let logits: Vec<f64> = (0..PILOT_SAMPLES)
            .map(|_| {
                let toks = self.draw_tokens();
                self.hidden_logit(&toks)
            })
            .collect();
        let rate = self.spec.positive_rate;
        match self.spec.label_model {
            LabelModel::Threshold => {
                let mut sorted = logits;
                sorted.sort_by(f64::total_cmp);
                let idx = ((1.0 - rate) * sorted.len() as f64) as usize;
                sorted[idx.min(sorted.len() - 1)]
            }
            LabelModel::Logistic => {
                let a = self.spec.sharpness;
                let mean_p = |tau: f64| {
                    logits.iter().map(|&z| sigmoid_raw(a * (z - tau))).sum::<f64>()
                        / logits.len() as f64
                };
                let (mut lo, mut hi) = (-1e3, 1e3);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if mean_p(mid) > rate {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                0.5 * (lo + hi)
            }
        }
    }

    pub fn next_sample(&mut self) -> Sample {
        let toks = self.draw_tokens();
        let z = self.hidden_logit(&toks);
        let clean = match self.spec.label_model {
            LabelModel::Threshold => z > self.threshold,
            LabelModel::Logistic => {
                let p = sigmoid_raw(self.spec.sharpness * (z - self.threshold));
                self.rng.gen_bool(p)
            }
        };
        let flip = self.spec.label_noise > 0.0 && self.rng.gen_bool(self.spec.label_noise);
        let features = toks
            .iter()
            .map(|&(f, t)| Feature::new(self.keys[f as usize][t as usize], 1.0))
            .collect();
        Sample {
            label: (clean ^ flip) as u8,
            features,
        }
    }

    pub fn take_samples(&mut self, n: usize) -> Vec<Sample> {
        (0..n).map(|_| self.next_sample()).collect()
    }
}

fn spec_pilot_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

impl Iterator for SyntheticGenerator {
    type Item = Sample;

    fn next(&mut self) -> Option<Sample> {
        Some(self.next_sample())
    }
}
