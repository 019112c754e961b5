//! Unsharded reference models. They are written independently of the
//! substituted operators and evaluate every model directly in double
//! precision.

use std::collections::BTreeMap;

use crate::batch::{canonicalize, Feature, SparseBatch};
use crate::math::{bce_with_logit, sigmoid};
use crate::model::{DenseLayout, ModelGraph, ParamRef};
use crate::store::FeatureKey;

/// How the second-order term is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FmForm {
    /// `sum_{i<j} <v_i, v_j> x_i x_j`, quadratic in the number of features.
    Pairwise,
    /// `(|sum v x|^2 - sum |v x|^2) / 2`, the same arithmetic as the
    /// substituted combiner.
    LinearForm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MonolithicModel {
    pub graph: ModelGraph,
    pub form: FmForm,
    pub linear: BTreeMap<FeatureKey, f64>,
    pub embedding: BTreeMap<FeatureKey, Vec<f64>>,
    /// Row-major `(fields * d) x h`.
    pub fc1: Vec<f64>,
    /// Row-major `depth x (fields * d)`.
    pub cross_w: Vec<f64>,
    pub cross_b: Vec<f64>,
    pub cross_head: Vec<f64>,
    pub dense: Vec<f64>,
}

impl MonolithicModel {
    pub fn new(graph: ModelGraph, form: FmForm) -> Self {
        let width = graph.fields as usize * graph.embed_dim;
        let h = graph.first_width();
        let depth = if graph.kind.has_cross() { graph.cross_depth } else { 0 };
        let widths: &[usize] = if graph.kind.has_deep() { &graph.hidden } else { &[] };
        let dense_len = DenseLayout::new(widths).len();
        let head_len = if graph.kind.has_cross() { width } else { 0 };
        Self {
            form,
            linear: BTreeMap::new(),
            embedding: BTreeMap::new(),
            fc1: vec![0.0; width * h],
            cross_w: vec![0.0; depth * width],
            cross_b: vec![0.0; depth * width],
            cross_head: vec![0.0; head_len],
            dense: vec![0.0; dense_len],
            graph,
        }
    }

    pub fn with_form(mut self, form: FmForm) -> Self {
        self.form = form;
        self
    }

    fn w(&self, key: &FeatureKey) -> f64 {
        match self.linear.get(key) {
            Some(&w) => w,
            None => {
                let g = &self.graph;
                g.init.linear.values(g.seed, crate::model::TAG_LINEAR, key.field, key.key, 1)[0] as f64
            }
        }
    }

    fn v(&self, key: &FeatureKey) -> Vec<f64> {
        match self.embedding.get(key) {
            Some(v) => v.clone(),
            None => {
                let g = &self.graph;
                g.init
                    .embedding
                    .values(g.seed, crate::model::TAG_EMBEDDING, key.field, key.key, g.embed_dim)
                    .into_iter()
                    .map(f64::from)
                    .collect()
            }
        }
    }

    /// Logit of one sample; pre-activations of the deep tower are appended
    /// to `pre` when given.
    pub fn logit(&self, features: &[Feature], mut pre: Option<&mut Vec<f64>>) -> f64 {
        let g = &self.graph;
        let kind = g.kind;
        let d = g.embed_dim;
        let feats = canonicalize(features);
        let mut z = 0.0;
        if kind.has_linear() {
            let mut s = 0.0;
            for f in &feats {
                s += self.w(&f.key) * f.value;
            }
            z += s;
        }
        if kind.has_fm() {
            z += match self.form {
                FmForm::Pairwise => {
                    let vs: Vec<Vec<f64>> = feats.iter().map(|f| self.v(&f.key)).collect();
                    let mut s = 0.0;
                    for i in 0..feats.len() {
                        for j in i + 1..feats.len() {
                            let mut dot = 0.0;
                            for k in 0..d {
                                dot += vs[i][k] * vs[j][k];
                            }
                            s += dot * feats[i].value * feats[j].value;
                        }
                    }
                    s
                }
                FmForm::LinearForm => {
                    let mut m1 = vec![0.0; d];
                    let mut m2 = 0.0;
                    for f in &feats {
                        let v = self.v(&f.key);
                        let mut sq = 0.0;
                        for k in 0..d {
                            let t = v[k] * f.value;
                            m1[k] += t;
                            sq += t * t;
                        }
                        m2 += sq;
                    }
                    let mut s = 0.0;
                    for &m in &m1 {
                        s += m * m;
                    }
                    0.5 * s - 0.5 * m2
                }
            };
        }
        let pooled = if kind.has_deep() || kind.has_cross() {
            let mut p: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
            for f in &feats {
                let v = self.v(&f.key);
                let acc = p.entry(f.key.field).or_insert_with(|| vec![0.0; d]);
                for k in 0..d {
                    acc[k] += v[k] * f.value;
                }
            }
            p
        } else {
            BTreeMap::new()
        };
        if kind.has_deep() {
            z += self.deep(&pooled, pre.as_deref_mut());
        }
        if kind.has_cross() {
            z += self.cross(&pooled);
        }
        z += self.dense[0];
        z
    }

    fn deep(&self, pooled: &BTreeMap<u32, Vec<f64>>, mut pre: Option<&mut Vec<f64>>) -> f64 {
        let g = &self.graph;
        let d = g.embed_dim;
        let widths = &g.hidden;
        let h = widths[0];
        let mut agg = vec![0.0; h];
        for (&field, v) in pooled {
            for k in 0..d {
                let row = (field as usize * d + k) * h;
                for c in 0..h {
                    agg[c] += v[k] * self.fc1[row + c];
                }
            }
        }
        // Parameter offsets follow the replicated layout: bias, b1, then
        // (W_i, b_i) pairs, then the head.
        let mut at = 1;
        let mut a: Vec<f64> = Vec::with_capacity(h);
        for c in 0..h {
            let u = agg[c] + self.dense[at + c];
            if let Some(p) = pre.as_deref_mut() {
                p.push(u);
            }
            a.push(u.max(0.0));
        }
        at += h;
        for i in 1..widths.len() {
            let (rows, cols) = (widths[i - 1], widths[i]);
            let wb = at + rows * cols;
            let mut next = Vec::with_capacity(cols);
            for c in 0..cols {
                let mut u = 0.0;
                for r in 0..rows {
                    u += a[r] * self.dense[at + r * cols + c];
                }
                let u = u + self.dense[wb + c];
                if let Some(p) = pre.as_deref_mut() {
                    p.push(u);
                }
                next.push(u.max(0.0));
            }
            a = next;
            at = wb + cols;
        }
        let mut out = 0.0;
        for (j, &x) in a.iter().enumerate() {
            out += x * self.dense[at + j];
        }
        out + self.dense[at + a.len()]
    }

    fn cross(&self, pooled: &BTreeMap<u32, Vec<f64>>) -> f64 {
        let g = &self.graph;
        let d = g.embed_dim;
        let width = g.fields as usize * d;
        let mut x0 = vec![0.0; width];
        for (&field, v) in pooled {
            x0[field as usize * d..(field as usize + 1) * d].copy_from_slice(v);
        }
        let mut x = x0.clone();
        for l in 0..g.cross_depth {
            let w = &self.cross_w[l * width..(l + 1) * width];
            let b = &self.cross_b[l * width..(l + 1) * width];
            let mut s = 0.0;
            for j in 0..width {
                s += x[j] * w[j];
            }
            x = (0..width).map(|j| x0[j] * s + b[j] + x[j]).collect();
        }
        let mut out = 0.0;
        for j in 0..width {
            out += self.cross_head[j] * x[j];
        }
        out
    }

    pub fn logits(&self, batch: &SparseBatch) -> Vec<f64> {
        batch
            .samples()
            .iter()
            .map(|s| self.logit(&s.features, None))
            .collect()
    }

    pub fn forward(&self, batch: &SparseBatch) -> Vec<f64> {
        self.logits(batch).into_iter().map(sigmoid).collect()
    }

    /// Summed binary cross-entropy.
    pub fn loss(&self, batch: &SparseBatch) -> f64 {
        batch
            .samples()
            .iter()
            .map(|s| bce_with_logit(self.logit(&s.features, None), s.label as f64))
            .sum()
    }

    /// Which deep pre-activations are positive, over the whole batch.
    pub fn relu_pattern(&self, batch: &SparseBatch) -> Vec<bool> {
        let mut pre = Vec::new();
        for s in batch.samples() {
            self.logit(&s.features, Some(&mut pre));
        }
        pre.into_iter().map(|u| u > 0.0).collect()
    }

    pub fn get(&self, p: ParamRef) -> f64 {
        match p {
            ParamRef::Linear(k) => self.w(&k),
            ParamRef::Embedding(k, j) => self.v(&k)[j],
            ParamRef::Fc1(i) => self.fc1[i],
            ParamRef::CrossW(i) => self.cross_w[i],
            ParamRef::CrossB(i) => self.cross_b[i],
            ParamRef::CrossHead(i) => self.cross_head[i],
            ParamRef::Dense(i) => self.dense[i],
        }
    }

    pub fn set(&mut self, p: ParamRef, value: f64) {
        match p {
            ParamRef::Linear(k) => {
                self.linear.insert(k, value);
            }
            ParamRef::Embedding(k, j) => {
                let mut v = self.v(&k);
                v[j] = value;
                self.embedding.insert(k, v);
            }
            ParamRef::Fc1(i) => self.fc1[i] = value,
            ParamRef::CrossW(i) => self.cross_w[i] = value,
            ParamRef::CrossB(i) => self.cross_b[i] = value,
            ParamRef::CrossHead(i) => self.cross_head[i] = value,
            ParamRef::Dense(i) => self.dense[i] = value,
        }
    }
}
