// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::Serialize;

use crate::numeric::pearson;
use crate::stats::auc;

/// Detection metrics with "hallucinated" as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    /// `None` when the labels contain a single class.
    pub auc: Option<f64>,
    /// Pearson correlation of scores with 0/1 labels; 0 when undefined.
    pub pcc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Scores at or above `threshold` are predicted positive.
pub fn evaluate(scores: &[f64], labels: &[bool], threshold: f64) -> Metrics {
    let y: Vec<f64> = labels.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
            _ => {}
        }
    }
    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    Metrics {
        auc: auc(scores, labels),
        pcc: pearson(scores, &y).unwrap_or(0.0),
        precision,
        recall,
        f1: ratio(2.0 * precision * recall, precision + recall),
    }
}
