// SPDX-License-Identifier: MIT OR Apache-2.0

//! Report-grouped stratified folds and balanced undersampling.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::ClassifyError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldPlan {
    pub n_folds: usize,
    /// Report ids per fold, in assignment order.
    pub folds: Vec<Vec<String>>,
    /// Fold index of every citation row.
    pub row_fold: Vec<usize>,
}

impl FoldPlan {
    pub fn test_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.row_fold.len()).filter(|&i| self.row_fold[i] == fold).collect()
    }

    pub fn train_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.row_fold.len()).filter(|&i| self.row_fold[i] != fold).collect()
    }

    /// Positive rows per fold.
    pub fn positives_per_fold(&self, labels: &[bool]) -> Vec<usize> {
        let mut out = vec![0; self.n_folds];
        for (i, &f) in self.row_fold.iter().enumerate() {
            out[f] += usize::from(labels[i]);
        }
        out
    }
}

/// Assigns whole reports to folds, balancing the positive class.
///
/// Reports are shuffled with `seed`, stably sorted by positive count
/// (descending) and each placed in the fold with the fewest positives, then
/// fewest citations, then lowest index.
pub fn make_folds(groups: &[String], labels: &[bool], n_folds: usize, seed: u64) -> Result<FoldPlan, ClassifyError> {
    if groups.len() != labels.len() {
        return Err(ClassifyError::Shape(format!("{} groups for {} labels", groups.len(), labels.len())));
    }
    if n_folds < 2 {
        return Err(ClassifyError::Config(format!("need at least 2 folds, got {n_folds}")));
    }
    if !labels.iter().any(|&y| y) || labels.iter().all(|&y| y) {
        return Err(ClassifyError::SingleClass);
    }
    // (positives, citations) per report, in first-appearance order
    let mut order: Vec<&str> = Vec::new();
    let mut stats: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (g, &y) in groups.iter().zip(labels) {
        let e = stats.entry(g.as_str()).or_insert_with(|| {
            order.push(g.as_str());
            (0, 0)
        });
        e.0 += usize::from(y);
        e.1 += 1;
    }
    if order.len() < n_folds {
        return Err(ClassifyError::TooFewReports { reports: order.len(), folds: n_folds });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    order.sort_by(|a, b| stats[b].0.cmp(&stats[a].0));

    let mut load = vec![(0usize, 0usize); n_folds];
    let mut folds = vec![Vec::new(); n_folds];
    let mut fold_of: BTreeMap<&str, usize> = BTreeMap::new();
    for report in order {
        let f = (0..n_folds).min_by_key(|&f| (load[f].0, load[f].1, f)).expect("n_folds > 0");
        load[f].0 += stats[report].0;
        load[f].1 += stats[report].1;
        folds[f].push(report.to_string());
        fold_of.insert(report, f);
    }
    let row_fold = groups.iter().map(|g| fold_of[g.as_str()]).collect();
    Ok(FoldPlan { n_folds, folds, row_fold })
}

/// Undersamples the majority class of `rows` to the minority count.
/// The result keeps the input order.
pub fn balance_train(rows: &[usize], labels: &[bool], seed: u64) -> Result<Vec<usize>, ClassifyError> {
    let pos: Vec<usize> = rows.iter().copied().filter(|&i| labels[i]).collect();
    let neg: Vec<usize> = rows.iter().copied().filter(|&i| !labels[i]).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(ClassifyError::SingleClass);
    }
    if pos.len() == neg.len() {
        return Ok(rows.to_vec());
    }
    let (minority, majority) = if pos.len() < neg.len() { (pos, neg) } else { (neg, pos) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept: Vec<usize> = sample(&mut rng, majority.len(), minority.len()).into_iter().map(|i| majority[i]).collect();
    kept.extend(minority);
    let position: BTreeMap<usize, usize> = rows.iter().enumerate().map(|(p, &r)| (r, p)).collect();
    kept.sort_by_key(|r| position[r]);
    Ok(kept)
}
