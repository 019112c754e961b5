//! Held-out evaluation metrics.

use crate::error::{DesError, Result};
use crate::math::PROB_EPSILON;

/// Rank-based AUC: the probability that a random positive scores above a
/// random negative, ties counted as one half.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(DesError::Dimension(format!(
            "auc: {} scores, {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = labels.iter().filter(|&&y| y > 0.5).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(DesError::UndefinedMetric(format!(
            "auc needs both classes, got {n_pos} positives and {n_neg} negatives"
        )));
    }
    // Sum of 1-based mid-ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + 1 + j) as f64 / 2.0;
        let pos = order[i..j].iter().filter(|&&k| labels[k] > 0.5).count();
        rank_sum += mid * pos as f64;
        i = j;
    }
    let np = n_pos as f64;
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Mean binary cross-entropy with probabilities clamped to `[eps, 1 - eps]`.
pub fn logloss(probs: &[f64], labels: &[f64]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(DesError::Dimension(format!(
            "logloss: {} probabilities, {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_EPSILON, 1.0 - PROB_EPSILON);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / probs.len() as f64)
}
