// SPDX-License-Identifier: MIT OR Apache-2.0

//! Rank statistics, significance tests and multiple-testing correction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

use crate::numeric::midranks;
use crate::scores::ScoreKind;

/// Products `n_a * n_b` up to this size use the exact null distribution.
pub const EXACT_MWU_MAX_PAIRS: usize = 400;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("{0} sample is empty")]
    EmptySample(&'static str),
    #[error("paired samples differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("paired test needs at least 2 pairs, got {0}")]
    TooFewPairs(usize),
    #[error("p-value {0} outside [0, 1]")]
    BadPValue(f64),
    #[error("no {0} rows: both classes are required")]
    MissingClass(&'static str),
}

/// Area under the ROC curve of `scores` for the positive rows, with ties
/// counted as one half. `None` when either class is empty.
pub fn auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alternative {
    /// First sample tends to be larger.
    Greater,
    /// First sample tends to be smaller.
    Less,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MwuMethod {
    Auto,
    Exact,
    Normal,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MwuResult {
    /// U statistic of the first sample.
    pub u: f64,
    pub p: f64,
    pub exact: bool,
    /// All values identical: no ordering information.
    pub degenerate: bool,
}

/// One-sided Mann-Whitney U test of `a` against `b` with midrank ties.
pub fn mann_whitney_u(a: &[f64], b: &[f64], alternative: Alternative) -> Result<MwuResult, StatsError> {
    mann_whitney_u_with(a, b, alternative, MwuMethod::Auto)
}

pub fn mann_whitney_u_with(
    a: &[f64],
    b: &[f64],
    alternative: Alternative,
    method: MwuMethod,
) -> Result<MwuResult, StatsError> {
    if a.is_empty() {
        return Err(StatsError::EmptySample("first"));
    }
    if b.is_empty() {
        return Err(StatsError::EmptySample("second"));
    }
    let (na, nb) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&pooled);
    let rank_sum_a: f64 = ranks[..na].iter().sum();
    let u = rank_sum_a - (na * (na + 1)) as f64 / 2.0;

    if pooled.iter().all(|&v| v == pooled[0]) {
        return Ok(MwuResult { u, p: 1.0, exact: false, degenerate: true });
    }
    let exact = match method {
        MwuMethod::Auto => na * nb <= EXACT_MWU_MAX_PAIRS,
        MwuMethod::Exact => true,
        MwuMethod::Normal => false,
    };
    let p = if exact {
        exact_p(&ranks, na, rank_sum_a, alternative)
    } else {
        normal_p(&pooled, na, nb, u, alternative)
    };
    Ok(MwuResult { u, p: p.clamp(0.0, 1.0), exact, degenerate: false })
}

/// Exact permutation tail probability of the first sample's rank sum.
///
/// Midranks are doubled so every rank is an integer, then subsets of the
/// smaller sample's size are counted by rank sum.
fn exact_p(ranks: &[f64], na: usize, rank_sum_a: f64, alternative: Alternative) -> f64 {
    let n = ranks.len();
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let observed_a = (2.0 * rank_sum_a).round() as usize;
    // Count over the smaller sample; the other sum is `total - sum`.
    let (k, observed, flip) = if na <= n - na { (na, observed_a, false) } else { (n - na, total - observed_a, true) };
    let max_sum: usize = {
        let mut sorted = doubled.clone();
        sorted.sort_unstable_by(|x, y| y.cmp(x));
        sorted[..k].iter().sum()
    };
    let mut counts = vec![vec![0u128; max_sum + 1]; k + 1];
    counts[0][0] = 1;
    for &r in &doubled {
        for size in (1..=k).rev() {
            let (lower, upper) = counts.split_at_mut(size);
            let prev = &lower[size - 1];
            let cur = &mut upper[0];
            for s in (r..=max_sum).rev() {
                cur[s] += prev[s - r];
            }
        }
    }
    let dist = &counts[k];
    let all: u128 = dist.iter().sum();
    // "a tends larger" means the counted sample's sum is large unless flipped.
    let want_high = matches!(alternative, Alternative::Greater) != flip;
    let tail: u128 = if want_high {
        dist[observed.min(max_sum + 1)..].iter().sum()
    } else {
        dist[..=observed.min(max_sum)].iter().sum()
    };
    tail as f64 / all as f64
}

fn normal_p(pooled: &[f64], na: usize, nb: usize, u: f64, alternative: Alternative) -> f64 {
    let n = (na + nb) as f64;
    let mut sorted = pooled.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let prod = na as f64 * nb as f64;
    let mean = prod / 2.0;
    let var = prod / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        return 1.0;
    }
    let sd = var.sqrt();
    let std_normal = Normal::standard();
    match alternative {
        Alternative::Greater => std_normal.sf((u - mean - 0.5) / sd),
        Alternative::Less => std_normal.cdf((u - mean + 0.5) / sd),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TTestResult {
    pub t: f64,
    pub p: f64,
    pub df: usize,
    /// Zero variance of the differences; `p` is reported as 1.
    pub degenerate: bool,
}

/// Two-tailed paired t-test on `a[i] - b[i]`.
pub fn t_test_two_tailed(a: &[f64], b: &[f64]) -> Result<TTestResult, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(StatsError::TooFewPairs(n));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    if var <= 1e-300 {
        return Ok(TTestResult { t: 0.0, p: 1.0, df, degenerate: true });
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, df as f64).expect("positive degrees of freedom");
    let p = (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0);
    Ok(TTestResult { t, p, df, degenerate: false })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BhResult {
    pub adjusted: Vec<f64>,
    /// Input indices whose adjusted p is at most alpha.
    pub rejected: Vec<usize>,
}

/// Benjamini-Hochberg step-up adjustment, returned in input order.
pub fn bh_correct(pvals: &[f64], alpha: f64) -> Result<BhResult, StatsError> {
    if let Some(&p) = pvals.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(StatsError::BadPValue(p));
    }
    let m = pvals.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| pvals[i].total_cmp(&pvals[j]).then(i.cmp(&j)));
    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for (rank, &i) in order.iter().enumerate().rev() {
        running = running.min(m as f64 * pvals[i] / (rank + 1) as f64);
        adjusted[i] = running.min(1.0);
    }
    let rejected = (0..m).filter(|&i| adjusted[i] <= alpha).collect();
    Ok(BhResult { adjusted, rejected })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Correct citations score higher.
    #[serde(rename = "up")]
    CorrectHigher,
    /// Correct citations score lower.
    #[serde(rename = "down")]
    CorrectLower,
    #[serde(rename = "none")]
    None,
}

impl Direction {
    pub fn arrow(self) -> &'static str {
        match self {
            Direction::CorrectHigher => "↑",
            Direction::CorrectLower => "↓",
            Direction::None => "—",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tier {
    #[serde(rename = "p<0.001")]
    P001,
    #[serde(rename = "p<0.01")]
    P01,
    #[serde(rename = "p<0.05")]
    P05,
    #[serde(rename = "n.s.")]
    NotSignificant,
}

impl Tier {
    pub fn from_p(p: f64) -> Self {
        if p < 0.001 {
            Tier::P001
        } else if p < 0.01 {
            Tier::P01
        } else if p < 0.05 {
            Tier::P05
        } else {
            Tier::NotSignificant
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Tier::P001 => "p<0.001",
            Tier::P01 => "p<0.01",
            Tier::P05 => "p<0.05",
            Tier::NotSignificant => "n.s.",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignatureRow {
    pub score: ScoreKind,
    pub feature: String,
    pub direction: Direction,
    pub tier: Tier,
    pub p_raw: f64,
    pub p_adjusted: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignatureTable {
    pub rows: Vec<SignatureRow>,
}

impl SignatureTable {
    pub fn row(&self, score: ScoreKind) -> Option<&SignatureRow> {
        self.rows.iter().find(|r| r.score == score)
    }
}

/// Direction and significance tier of each score's class difference.
///
/// `values` maps each score to `(feature name, per-row values)`; `hallucinated`
/// labels the rows. Both one-sided tests are run, the smaller p is kept and
/// the kept p values are BH-adjusted across scores.
pub fn signature_table(
    values: &BTreeMap<ScoreKind, (String, Vec<f64>)>,
    hallucinated: &[bool],
) -> Result<SignatureTable, StatsError> {
    if !hallucinated.iter().any(|&h| h) {
        return Err(StatsError::MissingClass("hallucinated"));
    }
    if !hallucinated.iter().any(|&h| !h) {
        return Err(StatsError::MissingClass("correct"));
    }
    let mut raw = Vec::new();
    for (&score, (feature, v)) in values {
        let correct: Vec<f64> = v.iter().zip(hallucinated).filter(|(_, &h)| !h).map(|(x, _)| *x).collect();
        let halluc: Vec<f64> = v.iter().zip(hallucinated).filter(|(_, &h)| h).map(|(x, _)| *x).collect();
        let up = mann_whitney_u(&correct, &halluc, Alternative::Greater)?;
        let down = mann_whitney_u(&correct, &halluc, Alternative::Less)?;
        let (dir, p) = if up.p <= down.p { (Direction::CorrectHigher, up.p) } else { (Direction::CorrectLower, down.p) };
        raw.push((score, feature.clone(), dir, p, up.degenerate));
    }
    let pvals: Vec<f64> = raw.iter().map(|r| r.3).collect();
    let bh = bh_correct(&pvals, 0.05)?;
    let rows = raw
        .into_iter()
        .zip(bh.adjusted)
        .map(|((score, feature, dir, p_raw, degenerate), p_adjusted)| {
            let tier = Tier::from_p(p_adjusted);
            SignatureRow {
                score,
                feature,
                direction: if tier == Tier::NotSignificant { Direction::None } else { dir },
                tier,
                p_raw,
                p_adjusted,
                degenerate,
            }
        })
        .collect();
    Ok(SignatureTable { rows })
}
