// SPDX-License-Identifier: MIT OR Apache-2.0

//! From per-citation score tensors to a compact feature matrix.
//!
//! 1. rank every component (head or layer) of each score by its absolute
//!    point-biserial correlation with the label;
//! 2. keep the top `k` percent;
//! 3. aggregate retained heads per layer (mean and std);
//! 4. summarize each layer series (mean, std, min, max, slope, FFT magnitude);
//! 5. pick, per score, the summary with the largest univariate `|AUC - 0.5|`.
//!
//! Steps 1, 2 and 5 are fitted on training rows only ([`fit_features`]);
//! [`assemble`] then applies the fitted plan to any rows.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::{lit, pearson, to_f64, Scalar};
use crate::scores::{CitationKey, ScoreKind, ScoreSet, ScoredCitation};
use crate::stats::auc;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("need at least 2 training citations per class, got {correct} correct and {hallucinated} hallucinated")]
    TooFewPerClass { correct: usize, hallucinated: usize },
    #[error("k must lie in (0, 100], got {0}")]
    BadPercent(f64),
    #[error("no scores selected")]
    EmptySelection,
    #[error("score {0} is missing for citation {1}")]
    MissingScore(ScoreKind, String),
    #[error("confidence score {0} is missing for citation {1}")]
    MissingConfidence(&'static str, String),
    #[error("non-finite value in feature {column} for citation {key}")]
    NonFinite { column: String, key: String },
    #[error("fitted plan has no selection for score {0}")]
    NotFitted(ScoreKind),
}

/// Detector input families, mirroring the rows of the results table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Factum,
    CasPfs,
    EcsPks,
    Perplexity,
    LnEntropy,
    Energy,
    PTrue,
}

/// Classifier-free scalar baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceKind {
    Perplexity,
    LnEntropy,
    Energy,
    PTrue,
}

impl ConfidenceKind {
    pub fn name(self) -> &'static str {
        match self {
            ConfidenceKind::Perplexity => "perplexity",
            ConfidenceKind::LnEntropy => "ln_entropy",
            ConfidenceKind::Energy => "energy",
            ConfidenceKind::PTrue => "p_true",
        }
    }

    pub fn value<T: Scalar>(self, s: &ScoreSet<T>) -> Option<T> {
        let c = &s.confidence;
        match self {
            ConfidenceKind::Perplexity => Some(c.perplexity),
            ConfidenceKind::LnEntropy => Some(c.ln_entropy),
            ConfidenceKind::Energy => Some(c.energy),
            ConfidenceKind::PTrue => c.p_true,
        }
    }
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Factum,
        Variant::CasPfs,
        Variant::EcsPks,
        Variant::Perplexity,
        Variant::LnEntropy,
        Variant::Energy,
        Variant::PTrue,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Factum => "factum",
            Variant::CasPfs => "cas_pfs",
            Variant::EcsPks => "ecs_pks",
            Variant::Perplexity => "perplexity",
            Variant::LnEntropy => "ln_entropy",
            Variant::Energy => "energy",
            Variant::PTrue => "p_true",
        }
    }

    /// Row label used in result tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Variant::Factum => "FACTUM",
            Variant::CasPfs => "CAS+PFS",
            Variant::EcsPks => "ECS+PKS",
            Variant::Perplexity => "Perplexity",
            Variant::LnEntropy => "LN-Entropy",
            Variant::Energy => "Energy",
            Variant::PTrue => "P(True)",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn scores(self) -> &'static [ScoreKind] {
        match self {
            Variant::Factum => &[ScoreKind::Cas, ScoreKind::Bas, ScoreKind::Pfs, ScoreKind::Pas],
            Variant::CasPfs => &[ScoreKind::Cas, ScoreKind::Pfs],
            Variant::EcsPks => &[ScoreKind::Ecs, ScoreKind::Pks],
            _ => &[],
        }
    }

    pub fn confidence(self) -> Option<ConfidenceKind> {
        match self {
            Variant::Perplexity => Some(ConfidenceKind::Perplexity),
            Variant::LnEntropy => Some(ConfidenceKind::LnEntropy),
            Variant::Energy => Some(ConfidenceKind::Energy),
            Variant::PTrue => Some(ConfidenceKind::PTrue),
            _ => None,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A head `(layer, Some(head))` or a layer `(layer, None)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Component {
    pub layer: usize,
    pub head: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedComponent {
    pub component: Component,
    /// Signed point-biserial correlation with the hallucinated label.
    pub r: f64,
}

/// Per score, components ordered by decreasing `|r|`, ties by `(layer, head)`.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ComponentRanking {
    pub scores: BTreeMap<ScoreKind, Vec<RankedComponent>>,
}

/// Per score, the retained components.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct PruneMask {
    pub scores: BTreeMap<ScoreKind, BTreeSet<Component>>,
}

fn component_values<T: Scalar>(rows: &[&ScoreSet<T>], kind: ScoreKind) -> Result<Vec<(Component, Vec<f64>)>, usize> {
    let first = rows[0];
    if let Some(m) = first.head(kind) {
        let (l_n, h_n) = m.dim();
        Ok((0..l_n)
            .flat_map(|l| (0..h_n).map(move |h| (l, h)))
            .map(|(l, h)| {
                let v = rows.iter().map(|s| to_f64(s.head(kind).expect("same kind")[[l, h]])).collect();
                (Component { layer: l, head: Some(h) }, v)
            })
            .collect())
    } else {
        if let Some(i) = rows.iter().position(|s| s.layer(kind).is_none()) {
            return Err(i);
        }
        let l_n = first.layer(kind).expect("checked").len();
        Ok((0..l_n)
            .map(|l| {
                let v = rows.iter().map(|s| to_f64(s.layer(kind).expect("checked")[l])).collect();
                (Component { layer: l, head: None }, v)
            })
            .collect())
    }
}

fn class_counts(labels: &[bool]) -> (usize, usize) {
    let h = labels.iter().filter(|&&b| b).count();
    (labels.len() - h, h)
}

/// Ranks every component of every requested score on training rows.
pub fn rank_components<T: Scalar>(
    rows: &[&ScoreSet<T>],
    labels: &[bool],
    kinds: &[ScoreKind],
    keys: &[CitationKey],
) -> Result<ComponentRanking, FeatureError> {
    let (correct, hallucinated) = class_counts(labels);
    if correct < 2 || hallucinated < 2 {
        return Err(FeatureError::TooFewPerClass { correct, hallucinated });
    }
    let y: Vec<f64> = labels.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let mut scores = BTreeMap::new();
    for &kind in kinds {
        let comps = component_values(rows, kind).map_err(|i| FeatureError::MissingScore(kind, keys[i].to_string()))?;
        let mut ranked: Vec<RankedComponent> = comps
            .into_par_iter()
            .map(|(component, v)| RankedComponent { component, r: pearson(&v, &y).unwrap_or(0.0) })
            .collect();
        ranked.sort_by(|a, b| b.r.abs().total_cmp(&a.r.abs()).then(a.component.cmp(&b.component)));
        scores.insert(kind, ranked);
    }
    Ok(ComponentRanking { scores })
}

/// Number of components kept at `k` percent of `total`.
pub fn retained_count(total: usize, k: f64) -> usize {
    ((k / 100.0 * total as f64).round() as usize).clamp(1, total.max(1))
}

pub fn prune(ranking: &ComponentRanking, k: f64) -> Result<PruneMask, FeatureError> {
    if !(k > 0.0 && k <= 100.0) {
        return Err(FeatureError::BadPercent(k));
    }
    let scores = ranking
        .scores
        .iter()
        .map(|(&kind, ranked)| {
            let keep = retained_count(ranked.len(), k);
            (kind, ranked[..keep].iter().map(|r| r.component).collect())
        })
        .collect();
    Ok(PruneMask { scores })
}

/// Per-layer statistics over the retained heads of one `[L, H]` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadSeries<T> {
    /// Layers with at least one retained head.
    pub layers: Vec<usize>,
    pub mean: Vec<T>,
    pub std: Vec<T>,
}

/// Mean and population std of retained heads per layer. `None` keeps every head.
pub fn aggregate_heads<T: Scalar>(matrix: ArrayView2<'_, T>, retained: Option<&BTreeSet<Component>>) -> HeadSeries<T> {
    let (l_n, h_n) = matrix.dim();
    let mut out = HeadSeries { layers: Vec::new(), mean: Vec::new(), std: Vec::new() };
    for l in 0..l_n {
        let vals: Vec<T> = (0..h_n)
            .filter(|&h| retained.is_none_or(|r| r.contains(&Component { layer: l, head: Some(h) })))
            .map(|h| matrix[[l, h]])
            .collect();
        if vals.is_empty() {
            continue;
        }
        let (m, s) = crate::numeric::mean_std(&vals);
        out.layers.push(l);
        out.mean.push(m);
        out.std.push(s);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Summary {
    Mean,
    Std,
    Min,
    Max,
    Slope,
    FftMag,
}

impl Summary {
    pub const ALL: [Summary; 6] = [Summary::Mean, Summary::Std, Summary::Min, Summary::Max, Summary::Slope, Summary::FftMag];

    pub fn name(self) -> &'static str {
        match self {
            Summary::Mean => "mean",
            Summary::Std => "std",
            Summary::Min => "min",
            Summary::Max => "max",
            Summary::Slope => "slope",
            Summary::FftMag => "fft_mag",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSummaries<T> {
    pub mean: T,
    pub std: T,
    pub min: T,
    pub max: T,
    pub slope: T,
    pub fft_mag: T,
    /// Series of length one: slope and FFT magnitude are reported as 0.
    pub short: bool,
}

impl<T: Scalar> LayerSummaries<T> {
    pub fn get(&self, s: Summary) -> T {
        match s {
            Summary::Mean => self.mean,
            Summary::Std => self.std,
            Summary::Min => self.min,
            Summary::Max => self.max,
            Summary::Slope => self.slope,
            Summary::FftMag => self.fft_mag,
        }
    }
}

/// Summary statistics of a layer series.
///
/// `slope` regresses values on `layers`; `fft_mag` is the magnitude of DFT
/// bin `fft_bin` of the mean-subtracted series (indexed by position).
pub fn layer_summaries<T: Scalar>(layers: &[usize], values: &[T], fft_bin: usize) -> LayerSummaries<T> {
    assert_eq!(layers.len(), values.len(), "one layer index per value");
    assert!(!values.is_empty(), "empty series");
    let n = values.len();
    let (mean, std) = crate::numeric::mean_std(values);
    let min = values.iter().copied().fold(T::infinity(), T::min);
    let max = values.iter().copied().fold(T::neg_infinity(), T::max);
    if n < 2 {
        return LayerSummaries { mean, std, min, max, slope: T::zero(), fft_mag: T::zero(), short: true };
    }
    let xs: Vec<T> = layers.iter().map(|&l| lit(l as f64)).collect();
    let x_mean = crate::numeric::pairwise_sum(&xs) / lit(n as f64);
    let sxy = crate::numeric::pairwise_sum_by(n, &|i| (xs[i] - x_mean) * (values[i] - mean));
    let sxx = crate::numeric::pairwise_sum_by(n, &|i| (xs[i] - x_mean) * (xs[i] - x_mean));
    let slope = if sxx > T::zero() { sxy / sxx } else { T::zero() };

    let two_pi = std::f64::consts::TAU;
    let (re, im) = (0..n).fold((0.0, 0.0), |(re, im), t| {
        let v = to_f64(values[t] - mean);
        let angle = two_pi * (fft_bin * t) as f64 / n as f64;
        (re + v * angle.cos(), im - v * angle.sin())
    });
    LayerSummaries { mean, std, min, max, slope, fft_mag: lit(re.hypot(im)), short: false }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// Percentage of components kept per score.
    pub k: f64,
    /// DFT bin used for the FFT magnitude summary.
    pub fft_bin: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { k: 100.0, fft_bin: 1 }
    }
}

fn head_aggregators() -> [(&'static str, fn(&HeadSeries<f64>) -> &Vec<f64>); 2] {
    [("mean", |s| &s.mean), ("std", |s| &s.std)]
}

/// All candidate features of one score for one citation, by name.
fn candidates<T: Scalar>(
    s: &ScoreSet<T>,
    kind: ScoreKind,
    mask: &BTreeSet<Component>,
    fft_bin: usize,
) -> Option<Vec<(String, f64)>> {
    let mut out = Vec::new();
    if let Some(m) = s.head(kind) {
        let series = aggregate_heads(m.mapv(to_f64).view(), Some(mask));
        for (agg, pick) in head_aggregators() {
            let sums = layer_summaries(&series.layers, pick(&series), fft_bin);
            for summ in Summary::ALL {
                out.push((format!("{kind}.{agg}.{}", summ.name()), sums.get(summ)));
            }
        }
    } else {
        let v = s.layer(kind)?;
        let layers: Vec<usize> = mask.iter().map(|c| c.layer).collect();
        let values: Vec<f64> = layers.iter().map(|&l| to_f64(v[l])).collect();
        let sums = layer_summaries(&layers, &values, fft_bin);
        for summ in Summary::ALL {
            out.push((format!("{kind}.{}", summ.name()), sums.get(summ)));
        }
    }
    Some(out)
}

/// Candidate name with the largest `|AUC - 0.5|`; ties go to the
/// lexicographically smallest name.
pub fn select_feature(candidates: &[(String, Vec<f64>)], labels: &[bool]) -> Option<(String, f64)> {
    let mut best: Option<(String, f64, f64)> = None;
    let mut sorted: Vec<&(String, Vec<f64>)> = candidates.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    for (name, values) in sorted {
        let a = auc(values, labels).unwrap_or(0.5);
        let dist = (a - 0.5).abs();
        if best.as_ref().is_none_or(|b| dist > b.2) {
            best = Some((name.clone(), a, dist));
        }
    }
    best.map(|(n, a, _)| (n, a))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChosenFeature {
    pub score: ScoreKind,
    pub name: String,
    /// Univariate AUC on the fitting rows.
    pub train_auc: f64,
}

/// Everything learned from training rows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeaturePlan {
    pub variant: Variant,
    pub config: FeatureConfig,
    pub ranking: ComponentRanking,
    pub mask: PruneMask,
    pub chosen: Vec<ChosenFeature>,
}

impl FeaturePlan {
    pub fn columns(&self) -> Vec<String> {
        match self.variant.confidence() {
            Some(c) => vec![c.name().to_string()],
            None => self.chosen.iter().map(|c| c.name.clone()).collect(),
        }
    }
}

/// Fits ranking, pruning and per-score selection on training rows.
pub fn fit_features<T: Scalar>(
    train: &[&ScoredCitation<T>],
    variant: Variant,
    config: &FeatureConfig,
) -> Result<FeaturePlan, FeatureError> {
    fit_selection(train, variant, variant.scores(), config)
}

/// As [`fit_features`] with an explicit score subset.
pub fn fit_selection<T: Scalar>(
    train: &[&ScoredCitation<T>],
    variant: Variant,
    kinds: &[ScoreKind],
    config: &FeatureConfig,
) -> Result<FeaturePlan, FeatureError> {
    if !(config.k > 0.0 && config.k <= 100.0) {
        return Err(FeatureError::BadPercent(config.k));
    }
    let labels: Vec<bool> = train.iter().map(|r| r.hallucinated).collect();
    let (correct, hallucinated) = class_counts(&labels);
    if correct < 2 || hallucinated < 2 {
        return Err(FeatureError::TooFewPerClass { correct, hallucinated });
    }
    if variant.confidence().is_some() {
        return Ok(FeaturePlan {
            variant,
            config: *config,
            ranking: ComponentRanking::default(),
            mask: PruneMask::default(),
            chosen: Vec::new(),
        });
    }
    if kinds.is_empty() {
        return Err(FeatureError::EmptySelection);
    }
    let sets: Vec<&ScoreSet<T>> = train.iter().map(|r| &r.scores).collect();
    let keys: Vec<CitationKey> = train.iter().map(|r| r.key.clone()).collect();
    let ranking = rank_components(&sets, &labels, kinds, &keys)?;
    let mask = prune(&ranking, config.k)?;
    let mut chosen = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let per_row: Vec<Vec<(String, f64)>> = train
            .par_iter()
            .map(|r| {
                candidates(&r.scores, kind, &mask.scores[&kind], config.fft_bin)
                    .ok_or_else(|| FeatureError::MissingScore(kind, r.key.to_string()))
            })
            .collect::<Result<_, _>>()?;
        let names: Vec<String> = per_row[0].iter().map(|(n, _)| n.clone()).collect();
        let columns: Vec<(String, Vec<f64>)> = names
            .iter()
            .enumerate()
            .map(|(j, n)| (n.clone(), per_row.iter().map(|row| row[j].1).collect()))
            .collect();
        let (name, train_auc) = select_feature(&columns, &labels).expect("at least one candidate");
        chosen.push(ChosenFeature { score: kind, name, train_auc });
    }
    Ok(FeaturePlan { variant, config: *config, ranking, mask, chosen })
}

/// Assembled detector input.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix<T> {
    pub columns: Vec<String>,
    pub values: Array2<T>,
    pub groups: Vec<String>,
    pub labels: Vec<bool>,
    pub keys: Vec<CitationKey>,
}

/// Applies a fitted plan to `rows`. Labels are copied through for
/// evaluation only; nothing here depends on them.
pub fn assemble<T: Scalar>(rows: &[&ScoredCitation<T>], plan: &FeaturePlan) -> Result<FeatureMatrix<T>, FeatureError> {
    let columns = plan.columns();
    if columns.is_empty() {
        return Err(FeatureError::EmptySelection);
    }
    let mut values = Array2::zeros((rows.len(), columns.len()));
    for (i, r) in rows.iter().enumerate() {
        if let Some(c) = plan.variant.confidence() {
            values[[i, 0]] = c.value(&r.scores).ok_or_else(|| FeatureError::MissingConfidence(c.name(), r.key.to_string()))?;
        } else {
            for (j, chosen) in plan.chosen.iter().enumerate() {
                let mask = plan.mask.scores.get(&chosen.score).ok_or(FeatureError::NotFitted(chosen.score))?;
                let cands = candidates(&r.scores, chosen.score, mask, plan.config.fft_bin)
                    .ok_or_else(|| FeatureError::MissingScore(chosen.score, r.key.to_string()))?;
                let v = cands.into_iter().find(|(n, _)| *n == chosen.name).expect("chosen name is a candidate").1;
                values[[i, j]] = lit(v);
            }
        }
        for (j, col) in columns.iter().enumerate() {
            if !values[[i, j]].is_finite() {
                return Err(FeatureError::NonFinite { column: col.clone(), key: r.key.to_string() });
            }
        }
    }
    Ok(FeatureMatrix {
        columns,
        values,
        groups: rows.iter().map(|r| r.key.report_id.clone()).collect(),
        labels: rows.iter().map(|r| r.hallucinated).collect(),
        keys: rows.iter().map(|r| r.key.clone()).collect(),
    })
}

pub fn write_features_csv<T: Scalar>(path: &Path, m: &FeatureMatrix<T>, header: &[String]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for line in header {
        writeln!(f, "# {line}")?;
    }
    write!(f, "report_id,ordinal,label")?;
    for c in &m.columns {
        write!(f, ",{c}")?;
    }
    writeln!(f)?;
    for (i, key) in m.keys.iter().enumerate() {
        write!(f, "{},{},{}", key.report_id, key.ordinal, if m.labels[i] { "hallucinated" } else { "correct" })?;
        for v in m.values.row(i) {
            write!(f, ",{v}")?;
        }
        writeln!(f)?;
    }
    f.flush()
}

pub fn write_ranking_json(path: &Path, plan: &FeaturePlan, header: &[String]) -> std::io::Result<()> {
    let out = serde_json::json!({ "header": header, "plan": plan });
    let text = serde_json::to_string_pretty(&out).map_err(std::io::Error::other)?;
    std::fs::write(path, text + "\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scores::Confidence;
    use ndarray::{array, Array1};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(l: usize, h: usize, f: impl Fn(usize, usize) -> f64) -> ScoreSet<f64> {
        let m = Array2::from_shape_fn((l, h), |(a, b)| f(a, b));
        ScoreSet {
            cas: m.clone(),
            bas: m.clone(),
            ecs: m.clone(),
            pfs: Array1::from_shape_fn(l, |a| f(a, 0)),
            pas: Array1::from_shape_fn(l, |a| f(a, 0)),
            pks: None,
            confidence: Confidence { perplexity: 1.0, ln_entropy: 0.0, energy: 0.0, p_true: None },
            degenerate: BTreeSet::new(),
        }
    }

    fn keys(n: usize) -> Vec<CitationKey> {
        (0..n).map(|i| CitationKey { report_id: format!("r{}", i / 3), ordinal: i % 3 }).collect()
    }

    #[test]
    fn ranking_covers_every_head() {
        let sets = [set(32, 32, |_, _| 0.0), set(32, 32, |l, h| (l + h) as f64), set(32, 32, |_, _| 1.0), set(32, 32, |l, _| l as f64)];
        let refs: Vec<&ScoreSet<f64>> = sets.iter().collect();
        let r = rank_components(&refs, &[false, true, false, true], &[ScoreKind::Cas], &keys(4)).unwrap();
        assert_eq!(r.scores[&ScoreKind::Cas].len(), 1024);
        let m = prune(&r, 25.0).unwrap();
        assert_eq!(m.scores[&ScoreKind::Cas].len(), 256);
        assert_eq!(prune(&r, 100.0).unwrap().scores[&ScoreKind::Cas].len(), 1024);
    }

    #[test]
    fn perfect_component_ranks_first() {
        let labels = [false, true, false, true, true, false];
        let sets: Vec<ScoreSet<f64>> = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| set(2, 2, move |l, h| if (l, h) == (1, 0) { y as u8 as f64 } else { ((i * 7 + l * 3 + h) % 5) as f64 }))
            .collect();
        let refs: Vec<&ScoreSet<f64>> = sets.iter().collect();
        let r = rank_components(&refs, &labels, &[ScoreKind::Bas], &keys(6)).unwrap();
        let top = &r.scores[&ScoreKind::Bas][0];
        assert_eq!(top.component, Component { layer: 1, head: Some(0) });
        assert!((top.r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ranking_matches_brute_force_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let labels: Vec<bool> = (0..12).map(|i| i % 2 == 0).collect();
        let sets: Vec<ScoreSet<f64>> = (0..12)
            .map(|_| {
                let m = Array2::from_shape_simple_fn((3, 2), || rng.random_range(-1.0..1.0));
                set(3, 2, move |l, h| m[[l, h]])
            })
            .collect();
        let refs: Vec<&ScoreSet<f64>> = sets.iter().collect();
        let r = rank_components(&refs, &labels, &[ScoreKind::Cas], &keys(12)).unwrap();
        for rc in &r.scores[&ScoreKind::Cas] {
            let (l, h) = (rc.component.layer, rc.component.head.unwrap());
            // point-biserial via group means
            let n = 12.0;
            let xs: Vec<f64> = sets.iter().map(|s| s.cas[[l, h]]).collect();
            let mean = xs.iter().sum::<f64>() / n;
            let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            let m1 = xs.iter().zip(&labels).filter(|(_, &y)| y).map(|(x, _)| x).sum::<f64>() / 6.0;
            let m0 = xs.iter().zip(&labels).filter(|(_, &y)| !y).map(|(x, _)| x).sum::<f64>() / 6.0;
            let expected = (m1 - m0) / sd * (0.5f64 * 0.5).sqrt();
            assert!((rc.r - expected).abs() < 1e-12, "{} vs {expected}", rc.r);
        }
        let mags: Vec<f64> = r.scores[&ScoreKind::Cas].iter().map(|c| c.r.abs()).collect();
        assert!(mags.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn constant_component_gets_zero() {
        let sets = [set(1, 1, |_, _| 2.0), set(1, 1, |_, _| 2.0), set(1, 1, |_, _| 2.0), set(1, 1, |_, _| 2.0)];
        let refs: Vec<&ScoreSet<f64>> = sets.iter().collect();
        let r = rank_components(&refs, &[true, false, true, false], &[ScoreKind::Cas], &keys(4)).unwrap();
        assert_eq!(r.scores[&ScoreKind::Cas][0].r, 0.0);
        assert!(matches!(
            rank_components(&refs, &[true, false, false, false], &[ScoreKind::Cas], &keys(4)),
            Err(FeatureError::TooFewPerClass { .. })
        ));
    }

    #[test]
    fn prune_clamps_and_rejects() {
        assert_eq!(retained_count(3, 25.0), 1);
        assert_eq!(retained_count(1024, 25.0), 256);
        assert_eq!(retained_count(10, 100.0), 10);
        let r = ComponentRanking::default();
        assert_eq!(prune(&r, 0.0), Err(FeatureError::BadPercent(0.0)));
        assert_eq!(prune(&r, 100.5), Err(FeatureError::BadPercent(100.5)));
    }

    #[test]
    fn aggregation_examples() {
        let c = Array2::from_elem((3, 4), 0.7);
        let s = aggregate_heads(c.view(), None);
        assert_eq!(s.mean, vec![0.7; 3]);
        assert_eq!(s.std, vec![0.0; 3]);

        let m = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let one: BTreeSet<Component> = (0..3).map(|l| Component { layer: l, head: Some(1) }).collect();
        let s = aggregate_heads(m.view(), Some(&one));
        assert_eq!(s.mean, vec![2.0, 4.0, 6.0]);
        assert_eq!(s.std, vec![0.0; 3]);

        let partial = BTreeSet::from([Component { layer: 2, head: Some(0) }]);
        let s = aggregate_heads(m.view(), Some(&partial));
        assert_eq!(s.layers, vec![2]);
    }

    #[test]
    fn aggregation_matches_loop_on_random_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = Array2::from_shape_simple_fn((4, 4), || rng.random_range(-1.0..1.0));
        let mut all: Vec<Component> =
            (0..4).flat_map(|l| (0..4).map(move |h| Component { layer: l, head: Some(h) })).collect();
        for i in (1..all.len()).rev() {
            all.swap(i, rng.random_range(0..=i));
        }
        let mask: BTreeSet<Component> = all[..7].iter().copied().collect();
        let s = aggregate_heads(m.view(), Some(&mask));
        let mut at = 0;
        for l in 0..4 {
            let mut sum = 0.0f64;
            let mut cnt = 0.0f64;
            for h in 0..4 {
                if mask.contains(&Component { layer: l, head: Some(h) }) {
                    sum += m[[l, h]];
                    cnt += 1.0;
                }
            }
            if cnt == 0.0 {
                assert!(!s.layers.contains(&l));
                continue;
            }
            let mean = sum / cnt;
            let mut var = 0.0f64;
            for h in 0..4 {
                if mask.contains(&Component { layer: l, head: Some(h) }) {
                    var += (m[[l, h]] - mean).powi(2);
                }
            }
            assert_eq!(s.layers[at], l);
            assert!((s.mean[at] - mean).abs() < 1e-12);
            assert!((s.std[at] - (var / cnt).sqrt()).abs() < 1e-12);
            at += 1;
        }
    }

    #[test]
    fn summary_examples() {
        let s = layer_summaries(&[0, 1, 2, 3], &[1.0f64, 2.0, 3.0, 4.0], 1);
        assert!((s.slope - 1.0).abs() < 1e-12);
        let s = layer_summaries(&[0, 1, 2, 3], &[2.0; 4], 1);
        assert_eq!((s.slope, s.fft_mag), (0.0, 0.0));
        let layers: Vec<usize> = (0..8).collect();
        let cosine: Vec<f64> = layers.iter().map(|&l| (std::f64::consts::TAU * l as f64 / 8.0).cos()).collect();
        let s = layer_summaries(&layers, &cosine, 1);
        assert!((s.fft_mag - 4.0).abs() < 1e-12);
        let s = layer_summaries(&[3], &[5.0], 1);
        assert!(s.short);
        assert_eq!((s.slope, s.fft_mag, s.min, s.max), (0.0, 0.0, 5.0, 5.0));
    }

    #[test]
    fn selection_rules() {
        let labels = [false, false, true, true];
        let cands = vec![
            ("b.noise".to_string(), vec![0.2, 0.1, 0.1, 0.2]),
            ("a.perfect".to_string(), vec![0.0, 0.1, 0.8, 0.9]),
        ];
        assert_eq!(select_feature(&cands, &labels), Some(("a.perfect".to_string(), 1.0)));
        let twins = vec![("z".to_string(), vec![0.0, 0.1, 0.8, 0.9]), ("y".to_string(), vec![0.0, 0.1, 0.8, 0.9])];
        assert_eq!(select_feature(&twins, &labels).unwrap().0, "y");
    }

    fn scored(n: usize) -> Vec<ScoredCitation<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        (0..n)
            .map(|i| {
                let m = Array2::from_shape_simple_fn((3, 2), || rng.random_range(0.0..1.0));
                let mut s = set(3, 2, move |l, h| m[[l, h]]);
                s.pks = Some(Array1::from_elem(3, i as f64));
                ScoredCitation { key: keys(n)[i].clone(), hallucinated: i % 2 == 0, scores: s }
            })
            .collect()
    }

    #[test]
    fn assembled_shapes() {
        let rows = scored(30);
        let refs: Vec<&ScoredCitation<f64>> = rows.iter().collect();
        let cfg = FeatureConfig::default();
        let plan = fit_features(&refs, Variant::Factum, &cfg).unwrap();
        let m = assemble(&refs, &plan).unwrap();
        assert_eq!(m.values.dim(), (30, 4));
        assert_eq!(m.columns.iter().collect::<BTreeSet<_>>().len(), 4);
        let plan = fit_features(&refs, Variant::EcsPks, &cfg).unwrap();
        assert_eq!(assemble(&refs, &plan).unwrap().values.dim(), (30, 2));
        let plan = fit_features(&refs, Variant::Perplexity, &cfg).unwrap();
        assert_eq!(assemble(&refs, &plan).unwrap().values.dim(), (30, 1));
        assert_eq!(fit_selection(&refs, Variant::Factum, &[], &cfg), Err(FeatureError::EmptySelection));
    }

    #[test]
    fn missing_inputs_are_reported() {
        let mut rows = scored(8);
        rows[3].scores.pks = None;
        let refs: Vec<&ScoredCitation<f64>> = rows.iter().collect();
        let err = fit_features(&refs, Variant::EcsPks, &FeatureConfig::default()).unwrap_err();
        assert!(matches!(err, FeatureError::MissingScore(ScoreKind::Pks, _)));
        let plan = fit_features(&refs, Variant::PTrue, &FeatureConfig::default()).unwrap();
        assert!(matches!(assemble(&refs, &plan), Err(FeatureError::MissingConfidence("p_true", _))));
    }
}
