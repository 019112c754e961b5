use std::ops::Range;

use crate::error::Result;
use crate::optim::{self, OptimizerConfig, OptimizerSlots};

use super::{ModelGraph, TAG_DENSE};

/// Flat layout of the replicated parameters: the global bias, then (with a
/// deep tower of widths `h_1..h_k`) the first-FC bias, the upper layers as
/// `(W_i, b_i)` pairs with `W_i` row-major `h_{i-1} x h_i`, and the head.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DenseLayout {
    widths: Vec<usize>,
}

impl DenseLayout {
    pub fn new(widths: &[usize]) -> Self {
        Self {
            widths: widths.to_vec(),
        }
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn has_tower(&self) -> bool {
        !self.widths.is_empty()
    }

    pub fn bias(&self) -> usize {
        0
    }

    pub fn first_bias(&self) -> Range<usize> {
        1..1 + self.widths.first().copied().unwrap_or(0)
    }

    /// `(W_i, b_i)` for `1 <= i < k`.
    pub fn layer(&self, i: usize) -> (Range<usize>, Range<usize>) {
        let mut at = self.first_bias().end;
        for j in 1..i {
            at += self.widths[j - 1] * self.widths[j] + self.widths[j];
        }
        let w = at..at + self.widths[i - 1] * self.widths[i];
        (w.clone(), w.end..w.end + self.widths[i])
    }

    /// `(head weights, head bias index)`.
    pub fn head(&self) -> (Range<usize>, usize) {
        let k = self.widths.len();
        let start = if k > 1 {
            self.layer(k - 1).1.end
        } else {
            self.first_bias().end
        };
        let w = start..start + self.widths.last().copied().unwrap_or(0);
        let b = w.end;
        (w, b)
    }

    pub fn len(&self) -> usize {
        if self.has_tower() {
            self.head().1 + 1
        } else {
            1
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Activations of one deep-tower evaluation, kept for the backward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DeepTrace {
    pub pre: Vec<Vec<f64>>,
    pub act: Vec<Vec<f64>>,
}

/// Parameters every worker holds an identical copy of.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplicatedDense {
    layout: DenseLayout,
    params: Vec<f32>,
    slots: OptimizerSlots,
}

impl ReplicatedDense {
    pub fn new(graph: &ModelGraph) -> Self {
        let widths: &[usize] = if graph.kind.has_deep() {
            &graph.hidden
        } else {
            &[]
        };
        let layout = DenseLayout::new(widths);
        let mut params = vec![0.0f32; layout.len()];
        for i in 1..widths.len() {
            let (w, _) = layout.layer(i);
            let init = graph.xavier(widths[i - 1], widths[i]);
            params[w.clone()].copy_from_slice(&init.values(graph.seed, TAG_DENSE, i as u32, 0, w.len()));
        }
        if layout.has_tower() {
            let (w, _) = layout.head();
            let init = graph.xavier(*widths.last().unwrap(), 1);
            params[w.clone()].copy_from_slice(&init.values(graph.seed, TAG_DENSE, 0, 1, w.len()));
        }
        let slots = graph.optimizers.dense.new_slots(params.len());
        Self {
            layout,
            params,
            slots,
        }
    }

    pub fn layout(&self) -> &DenseLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn slots(&self) -> &OptimizerSlots {
        &self.slots
    }

    pub fn bias(&self) -> f64 {
        self.params[self.layout.bias()] as f64
    }

    /// Deep-tower logit from the aggregated first-FC output.
    pub fn deep_forward(&self, agg: &[f64], trace: &mut DeepTrace) -> f64 {
        let p = &self.params;
        let widths = self.layout.widths();
        trace.pre.clear();
        trace.act.clear();
        let b1 = self.layout.first_bias();
        let pre: Vec<f64> = agg
            .iter()
            .zip(&p[b1])
            .map(|(&a, &b)| a + b as f64)
            .collect();
        trace.act.push(pre.iter().map(|&u| u.max(0.0)).collect());
        trace.pre.push(pre);
        for i in 1..widths.len() {
            let (w, b) = self.layout.layer(i);
            let h = widths[i];
            let prev = &trace.act[i - 1];
            let mut out = vec![0.0f64; h];
            for (r, &a) in prev.iter().enumerate() {
                let row = &p[w.start + r * h..w.start + (r + 1) * h];
                for (o, &x) in out.iter_mut().zip(row) {
                    *o += a * x as f64;
                }
            }
            for (o, &x) in out.iter_mut().zip(&p[b]) {
                *o += x as f64;
            }
            trace.act.push(out.iter().map(|&u| u.max(0.0)).collect());
            trace.pre.push(out);
        }
        let (hw, hb) = self.layout.head();
        let last = trace.act.last().unwrap();
        let mut z = 0.0;
        for (&a, &x) in last.iter().zip(&p[hw]) {
            z += a * x as f64;
        }
        z + p[hb] as f64
    }

    /// Accumulates parameter gradients into `grad` and returns the gradient
    /// with respect to the aggregated first-FC output.
    pub fn deep_backward(&self, trace: &DeepTrace, g_out: f64, grad: &mut [f64]) -> Vec<f64> {
        let p = &self.params;
        let widths = self.layout.widths();
        let k = widths.len();
        let (hw, hb) = self.layout.head();
        let last = &trace.act[k - 1];
        for (j, &a) in last.iter().enumerate() {
            grad[hw.start + j] += g_out * a;
        }
        grad[hb] += g_out;
        let mut g_act: Vec<f64> = p[hw].iter().map(|&x| g_out * x as f64).collect();
        for i in (1..k).rev() {
            let (w, b) = self.layout.layer(i);
            let h = widths[i];
            let g_pre: Vec<f64> = g_act
                .iter()
                .zip(&trace.pre[i])
                .map(|(&g, &u)| if u > 0.0 { g } else { 0.0 })
                .collect();
            let prev = &trace.act[i - 1];
            let mut g_prev = vec![0.0f64; widths[i - 1]];
            for (r, &a) in prev.iter().enumerate() {
                let base = w.start + r * h;
                for c in 0..h {
                    grad[base + c] += a * g_pre[c];
                    g_prev[r] += p[base + c] as f64 * g_pre[c];
                }
            }
            for (c, &g) in g_pre.iter().enumerate() {
                grad[b.start + c] += g;
            }
            g_act = g_prev;
        }
        let b1 = self.layout.first_bias();
        let g_agg: Vec<f64> = g_act
            .iter()
            .zip(&trace.pre[0])
            .map(|(&g, &u)| if u > 0.0 { g } else { 0.0 })
            .collect();
        for (c, &g) in g_agg.iter().enumerate() {
            grad[b1.start + c] += g;
        }
        g_agg
    }

    pub fn apply(&mut self, cfg: &OptimizerConfig, grad: &[f64]) -> Result<()> {
        optim::step(cfg, &mut self.params, &mut self.slots, grad)
    }
}
