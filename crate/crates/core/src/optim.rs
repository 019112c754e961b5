//! Shard-local optimizers. Slots live next to the weights they belong to and
//! are never sent anywhere; every update is a pure function of
//! `(config, weight, slots, grad)`.

use serde::{Deserialize, Serialize};

use crate::error::{DesError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Ftrl,
    Adagrad,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    /// FTRL-proximal.
    Ftrl {
        #[serde(default = "defaults::ftrl_alpha")]
        alpha: f64,
        #[serde(default = "defaults::ftrl_beta")]
        beta: f64,
        #[serde(default = "defaults::ftrl_l1")]
        l1: f64,
        #[serde(default = "defaults::ftrl_l2")]
        l2: f64,
    },
    Adagrad {
        #[serde(default = "defaults::adagrad_lr")]
        learning_rate: f64,
        #[serde(default = "defaults::adagrad_eps")]
        epsilon: f64,
    },
    Adam {
        #[serde(default = "defaults::adam_lr")]
        learning_rate: f64,
        #[serde(default = "defaults::adam_beta1")]
        beta1: f64,
        #[serde(default = "defaults::adam_beta2")]
        beta2: f64,
        #[serde(default = "defaults::adam_eps")]
        epsilon: f64,
    },
}

mod defaults {
    pub fn ftrl_alpha() -> f64 {
        0.05
    }
    pub fn ftrl_beta() -> f64 {
        1.0
    }
    pub fn ftrl_l1() -> f64 {
        1e-4
    }
    pub fn ftrl_l2() -> f64 {
        1e-4
    }
    pub fn adagrad_lr() -> f64 {
        0.05
    }
    pub fn adagrad_eps() -> f64 {
        1e-8
    }
    pub fn adam_lr() -> f64 {
        0.001
    }
    pub fn adam_beta1() -> f64 {
        0.9
    }
    pub fn adam_beta2() -> f64 {
        0.999
    }
    pub fn adam_eps() -> f64 {
        1e-8
    }
}

impl OptimizerConfig {
    pub fn ftrl() -> Self {
        OptimizerConfig::Ftrl {
            alpha: defaults::ftrl_alpha(),
            beta: defaults::ftrl_beta(),
            l1: defaults::ftrl_l1(),
            l2: defaults::ftrl_l2(),
        }
    }

    pub fn adagrad() -> Self {
        OptimizerConfig::Adagrad {
            learning_rate: defaults::adagrad_lr(),
            epsilon: defaults::adagrad_eps(),
        }
    }

    pub fn adam() -> Self {
        OptimizerConfig::Adam {
            learning_rate: defaults::adam_lr(),
            beta1: defaults::adam_beta1(),
            beta2: defaults::adam_beta2(),
            epsilon: defaults::adam_eps(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            OptimizerConfig::Ftrl { .. } => OptimizerKind::Ftrl,
            OptimizerConfig::Adagrad { .. } => OptimizerKind::Adagrad,
            OptimizerConfig::Adam { .. } => OptimizerKind::Adam,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Ftrl { alpha, beta, l1, l2 } => {
                alpha > 0.0 && beta >= 0.0 && l1 >= 0.0 && l2 >= 0.0
            }
            OptimizerConfig::Adagrad {
                learning_rate,
                epsilon,
            } => learning_rate > 0.0 && epsilon >= 0.0,
            OptimizerConfig::Adam {
                learning_rate,
                beta1,
                beta2,
                epsilon,
            } => {
                learning_rate > 0.0
                    && (0.0..1.0).contains(&beta1)
                    && (0.0..1.0).contains(&beta2)
                    && epsilon >= 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(DesError::Config(format!("invalid optimizer settings {self:?}")))
        }
    }

    /// Fresh slots for a weight of `len` coordinates.
    pub fn new_slots(&self, len: usize) -> OptimizerSlots {
        match self {
            OptimizerConfig::Ftrl { .. } => OptimizerSlots::Ftrl {
                z: vec![0.0; len],
                n: vec![0.0; len],
            },
            OptimizerConfig::Adagrad { .. } => OptimizerSlots::Adagrad {
                acc: vec![0.0; len],
            },
            OptimizerConfig::Adam { .. } => OptimizerSlots::Adam {
                m: vec![0.0; len],
                v: vec![0.0; len],
                t: 0,
            },
        }
    }
}

/// Auxiliary optimizer state, one value per weight coordinate
/// (plus the Adam step counter, shared by the whole entry).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum OptimizerSlots {
    Ftrl { z: Vec<f32>, n: Vec<f32> },
    Adagrad { acc: Vec<f32> },
    Adam { m: Vec<f32>, v: Vec<f32>, t: u32 },
}

impl OptimizerSlots {
    pub fn kind(&self) -> OptimizerKind {
        match self {
            OptimizerSlots::Ftrl { .. } => OptimizerKind::Ftrl,
            OptimizerSlots::Adagrad { .. } => OptimizerKind::Adagrad,
            OptimizerSlots::Adam { .. } => OptimizerKind::Adam,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            OptimizerSlots::Ftrl { z, .. } => z.len(),
            OptimizerSlots::Adagrad { acc } => acc.len(),
            OptimizerSlots::Adam { m, .. } => m.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Slot values flattened in checkpoint order: each slot vector in turn,
    /// then the Adam step counter.
    pub fn to_floats(&self) -> Vec<f32> {
        match self {
            OptimizerSlots::Ftrl { z, n } => z.iter().chain(n).copied().collect(),
            OptimizerSlots::Adagrad { acc } => acc.clone(),
            OptimizerSlots::Adam { m, v, t } => {
                let mut out: Vec<f32> = m.iter().chain(v).copied().collect();
                out.push(*t as f32);
                out
            }
        }
    }

    /// Same as [`Self::to_floats`] restricted to coordinates `range`.
    pub fn floats_in(&self, range: std::ops::Range<usize>) -> Vec<f32> {
        match self {
            OptimizerSlots::Ftrl { z, n } => {
                z[range.clone()].iter().chain(&n[range]).copied().collect()
            }
            OptimizerSlots::Adagrad { acc } => acc[range].to_vec(),
            OptimizerSlots::Adam { m, v, t } => {
                let mut out: Vec<f32> =
                    m[range.clone()].iter().chain(&v[range]).copied().collect();
                out.push(*t as f32);
                out
            }
        }
    }

    pub fn from_floats(kind: OptimizerKind, len: usize, data: &[f32]) -> Result<Self> {
        let want = slot_float_count(kind, len);
        if data.len() != want {
            return Err(DesError::Dimension(format!(
                "{kind:?} slots for {len} coordinates need {want} floats, got {}",
                data.len()
            )));
        }
        Ok(match kind {
            OptimizerKind::Ftrl => OptimizerSlots::Ftrl {
                z: data[..len].to_vec(),
                n: data[len..].to_vec(),
            },
            OptimizerKind::Adagrad => OptimizerSlots::Adagrad {
                acc: data.to_vec(),
            },
            OptimizerKind::Adam => OptimizerSlots::Adam {
                m: data[..len].to_vec(),
                v: data[len..2 * len].to_vec(),
                t: data[2 * len] as u32,
            },
        })
    }
}

pub fn slot_float_count(kind: OptimizerKind, len: usize) -> usize {
    match kind {
        OptimizerKind::Ftrl => 2 * len,
        OptimizerKind::Adagrad => len,
        OptimizerKind::Adam => 2 * len + 1,
    }
}

/// Applies one optimizer update in place.
pub fn step(
    cfg: &OptimizerConfig,
    weight: &mut [f32],
    slots: &mut OptimizerSlots,
    grad: &[f64],
) -> Result<()> {
    if weight.len() != grad.len() || slots.len() != weight.len() {
        return Err(DesError::Dimension(format!(
            "optimizer step: weight {}, slots {}, grad {}",
            weight.len(),
            slots.len(),
            grad.len()
        )));
    }
    if let Some((index, &value)) = grad.iter().enumerate().find(|(_, g)| !g.is_finite()) {
        return Err(DesError::NonFiniteGradient { index, value });
    }
    match (*cfg, slots) {
        (OptimizerConfig::Ftrl { alpha, beta, l1, l2 }, OptimizerSlots::Ftrl { z, n }) => {
            for i in 0..weight.len() {
                let g = grad[i];
                let n_old = n[i] as f64;
                let n_new = n_old + g * g;
                let sigma = (n_new.sqrt() - n_old.sqrt()) / alpha;
                let z_new = z[i] as f64 + g - sigma * weight[i] as f64;
                z[i] = z_new as f32;
                n[i] = n_new as f32;
                weight[i] = if z_new.abs() <= l1 {
                    0.0
                } else {
                    let denom = (beta + n_new.sqrt()) / alpha + l2;
                    (-(z_new - z_new.signum() * l1) / denom) as f32
                };
            }
        }
        (
            OptimizerConfig::Adagrad {
                learning_rate,
                epsilon,
            },
            OptimizerSlots::Adagrad { acc },
        ) => {
            for i in 0..weight.len() {
                let g = grad[i];
                let a = acc[i] as f64 + g * g;
                acc[i] = a as f32;
                weight[i] = (weight[i] as f64 - learning_rate * g / (a.sqrt() + epsilon)) as f32;
            }
        }
        (
            OptimizerConfig::Adam {
                learning_rate,
                beta1,
                beta2,
                epsilon,
            },
            OptimizerSlots::Adam { m, v, t },
        ) => {
            *t += 1;
            let bc1 = 1.0 - beta1.powi(*t as i32);
            let bc2 = 1.0 - beta2.powi(*t as i32);
            for i in 0..weight.len() {
                let g = grad[i];
                let mi = beta1 * m[i] as f64 + (1.0 - beta1) * g;
                let vi = beta2 * v[i] as f64 + (1.0 - beta2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                weight[i] = (weight[i] as f64 - learning_rate * m_hat / (v_hat.sqrt() + epsilon)) as f32;
            }
        }
        (cfg, slots) => {
            return Err(DesError::Config(format!(
                "optimizer {:?} applied to {:?} slots",
                cfg.kind(),
                slots.kind()
            )))
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_gradient_adagrad_is_a_no_op() {
        let cfg = OptimizerConfig::adagrad();
        let mut w = vec![0.25f32, -1.5];
        let mut s = cfg.new_slots(2);
        step(&cfg, &mut w, &mut s, &[0.0, 0.0]).unwrap();
        assert_eq!(w, vec![0.25, -1.5]);
    }

    #[test]
    fn ftrl_large_l1_forces_exact_zero() {
        let cfg = OptimizerConfig::Ftrl {
            alpha: 0.05,
            beta: 1.0,
            l1: 100.0,
            l2: 0.0,
        };
        let mut w = vec![0.3f32];
        let mut s = cfg.new_slots(1);
        for g in [0.5, -2.0, 3.0] {
            step(&cfg, &mut w, &mut s, &[g]).unwrap();
            assert_eq!(w[0], 0.0);
        }
    }

    #[test]
    fn ftrl_closed_form_single_step() {
        let cfg = OptimizerConfig::ftrl();
        let mut w = vec![0.0f32];
        let mut s = cfg.new_slots(1);
        step(&cfg, &mut w, &mut s, &[0.8]).unwrap();
        // n = 0.64, sigma = 0.8 / 0.05 = 16, z = 0.8
        // w = -(0.8 - 1e-4) / ((1 + 0.8) / 0.05 + 1e-4)
        let expect = -(0.8 - 1e-4) / ((1.0 + 0.8) / 0.05 + 1e-4);
        assert!((w[0] as f64 - expect).abs() < 1e-7);
        match &s {
            OptimizerSlots::Ftrl { z, n } => {
                assert!((z[0] - 0.8).abs() < 1e-7);
                assert!((n[0] - 0.64).abs() < 1e-7);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn adam_single_step_matches_scalar_recompute() {
        let cfg = OptimizerConfig::adam();
        let mut w = vec![1.0f32];
        let mut s = cfg.new_slots(1);
        step(&cfg, &mut w, &mut s, &[1.0]).unwrap();
        // m = 0.1, v = 0.001; m_hat = 1, v_hat = 1
        let expect = 1.0f64 - 0.001 * 1.0 / (1.0 + 1e-8);
        assert_eq!(w[0], expect as f32);
        assert!((w[0] as f64 - 0.999).abs() < 1e-7);
    }

    #[test]
    fn nan_gradient_rejected() {
        let cfg = OptimizerConfig::adam();
        let mut w = vec![1.0f32, 2.0];
        let mut s = cfg.new_slots(2);
        let err = step(&cfg, &mut w, &mut s, &[0.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, DesError::NonFiniteGradient { index: 1, .. }));
        assert_eq!(w, vec![1.0, 2.0]);
    }

    #[test]
    fn mismatched_slots_rejected() {
        let mut w = vec![1.0f32];
        let mut s = OptimizerConfig::adam().new_slots(1);
        assert!(step(&OptimizerConfig::adagrad(), &mut w, &mut s, &[1.0]).is_err());
        assert!(step(&OptimizerConfig::adam(), &mut w, &mut s, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn slot_float_round_trip() {
        let s = OptimizerSlots::Adam {
            m: vec![1.0, 2.0],
            v: vec![3.0, 4.0],
            t: 7,
        };
        let f = s.to_floats();
        assert_eq!(f, vec![1.0, 2.0, 3.0, 4.0, 7.0]);
        assert_eq!(OptimizerSlots::from_floats(OptimizerKind::Adam, 2, &f).unwrap(), s);
        assert_eq!(s.floats_in(1..2), vec![2.0, 4.0, 7.0]);
    }

    #[test]
    fn config_parses_with_defaults() {
        let c: OptimizerConfig = toml::from_str("kind = \"adam\"\nlearning_rate = 0.01").unwrap();
        assert_eq!(
            c,
            OptimizerConfig::Adam {
                learning_rate: 0.01,
                beta1: 0.9,
                beta2: 0.999,
                epsilon: 1e-8
            }
        );
        let bad = OptimizerConfig::Adam {
            learning_rate: 0.01,
            beta1: 1.0,
            beta2: 0.9,
            epsilon: 0.0,
        };
        assert!(bad.validate().is_err());
    }

    fn configs() -> impl Strategy<Value = OptimizerConfig> {
        prop_oneof![
            Just(OptimizerConfig::ftrl()),
            Just(OptimizerConfig::adagrad()),
            Just(OptimizerConfig::adam()),
        ]
    }

    proptest! {
        #[test]
        fn coordinates_are_independent(
            cfg in configs(),
            coords in proptest::collection::vec((-1.0f32..1.0, proptest::collection::vec(-3.0f64..3.0, 1..5)), 1..6),
        ) {
            let steps = coords.iter().map(|c| c.1.len()).min().unwrap();
            let mut w: Vec<f32> = coords.iter().map(|c| c.0).collect();
            let mut s = cfg.new_slots(w.len());
            for k in 0..steps {
                let g: Vec<f64> = coords.iter().map(|c| c.1[k]).collect();
                step(&cfg, &mut w, &mut s, &g).unwrap();
            }
            for (i, c) in coords.iter().enumerate() {
                let mut wi = vec![c.0];
                let mut si = cfg.new_slots(1);
                for k in 0..steps {
                    step(&cfg, &mut wi, &mut si, &[c.1[k]]).unwrap();
                }
                prop_assert_eq!(wi[0].to_bits(), w[i].to_bits());
            }
        }
    }
}
