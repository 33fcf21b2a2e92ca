// SPDX-License-Identifier: MIT OR Apache-2.0

//! Cross-validated evaluation of one detector variant.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use super::{balance_train, evaluate, predict, train_logreg, ClassifyError, FoldPlan, LogRegConfig, Metrics};
use crate::features::{assemble, fit_features, ChosenFeature, ConfidenceKind, FeatureConfig, Variant};
use crate::numeric::{to_f64, Scalar};
use crate::scores::ScoredCitation;
use crate::stats::{bh_correct, t_test_two_tailed};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CvConfig {
    pub variant: Variant,
    pub features: FeatureConfig,
    pub logreg: LogRegConfig,
    pub n_folds: usize,
    pub seed: u64,
    /// Probability threshold for precision/recall/F1 of fitted models.
    pub threshold: f64,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Factum,
            features: FeatureConfig::default(),
            logreg: LogRegConfig::default(),
            n_folds: 10,
            seed: 0,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelSummary {
    pub columns: Vec<String>,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldResult {
    pub fold: usize,
    pub n_train: usize,
    pub n_train_balanced: usize,
    pub n_test: usize,
    pub test_hallucinated: usize,
    pub threshold: f64,
    pub metrics: Metrics,
    pub features: Vec<ChosenFeature>,
    pub model: Option<ModelSummary>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanMetrics {
    /// Mean over folds with a defined AUC.
    pub auc: Option<f64>,
    pub auc_folds: usize,
    pub pcc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvReport {
    pub config: CvConfig,
    pub positive_class: &'static str,
    pub threshold_rule: String,
    pub folds: Vec<FoldResult>,
    pub mean: MeanMetrics,
}

impl CvReport {
    pub fn fold_aucs(&self) -> Vec<Option<f64>> {
        self.folds.iter().map(|f| f.metrics.auc).collect()
    }
}

fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed ^ (fold as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Ranking score of a classifier-free baseline; larger means more likely hallucinated.
fn confidence_score<T: Scalar>(kind: ConfidenceKind, v: T) -> f64 {
    match kind {
        ConfidenceKind::PTrue => 1.0 - to_f64(v),
        _ => to_f64(v),
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn run_fold<T: Scalar>(
    rows: &[ScoredCitation<T>],
    plan: &FoldPlan,
    fold: usize,
    config: &CvConfig,
) -> Result<FoldResult, ClassifyError> {
    let train = plan.train_rows(fold);
    let test = plan.test_rows(fold);
    let train_reports: BTreeSet<&str> = train.iter().map(|&i| rows[i].key.report_id.as_str()).collect();
    if let Some(r) = test.iter().map(|&i| rows[i].key.report_id.as_str()).find(|r| train_reports.contains(r)) {
        return Err(ClassifyError::Leakage(r.to_string()));
    }
    let labels: Vec<bool> = rows.iter().map(|r| r.hallucinated).collect();
    let balanced = balance_train(&train, &labels, fold_seed(config.seed, fold))?;
    let train_refs: Vec<&ScoredCitation<T>> = balanced.iter().map(|&i| &rows[i]).collect();
    let test_refs: Vec<&ScoredCitation<T>> = test.iter().map(|&i| &rows[i]).collect();
    let test_labels: Vec<bool> = test.iter().map(|&i| labels[i]).collect();

    let features = fit_features(&train_refs, config.variant, &config.features)?;
    let train_m = assemble(&train_refs, &features)?;
    let test_m = assemble(&test_refs, &features)?;

    let (scores, threshold, model): (Vec<f64>, f64, Option<ModelSummary>) = if let Some(kind) = config.variant.confidence() {
        let mut train_scores: Vec<f64> = train_m.values.column(0).iter().map(|&v| confidence_score(kind, v)).collect();
        let threshold = median(&mut train_scores);
        let scores = test_m.values.column(0).iter().map(|&v| confidence_score(kind, v)).collect();
        (scores, threshold, None)
    } else {
        let model = train_logreg(train_m.values.view(), &train_m.columns, &train_m.labels, &config.logreg, config.seed)?;
        let probs = predict(&model, test_m.values.view(), &test_m.columns)?;
        let summary = ModelSummary {
            columns: model.columns.clone(),
            weights: model.weights.iter().map(|&w| to_f64(w)).collect(),
            bias: to_f64(model.bias),
            iterations: model.iterations,
            grad_norm: model.grad_norm,
            converged: model.converged,
        };
        (probs.iter().map(|&p| to_f64(p)).collect(), config.threshold, Some(summary))
    };
    let metrics = evaluate(&scores, &test_labels, threshold);
    let note = metrics.auc.is_none().then(|| "single-class test fold: AUC omitted".to_string());
    Ok(FoldResult {
        fold,
        n_train: train.len(),
        n_train_balanced: balanced.len(),
        n_test: test.len(),
        test_hallucinated: test_labels.iter().filter(|&&y| y).count(),
        threshold,
        metrics,
        features: features.chosen,
        model,
        note,
    })
}

/// Refits features and the detector inside every fold and evaluates on the
/// held-out reports.
pub fn run_cv<T: Scalar>(rows: &[ScoredCitation<T>], plan: &FoldPlan, config: &CvConfig) -> Result<CvReport, ClassifyError> {
    if plan.row_fold.len() != rows.len() {
        return Err(ClassifyError::Shape(format!("fold plan covers {} rows, dataset has {}", plan.row_fold.len(), rows.len())));
    }
    for (i, r) in rows.iter().enumerate() {
        if !plan.folds[plan.row_fold[i]].contains(&r.key.report_id) {
            return Err(ClassifyError::Shape(format!("row {} is not in its report's fold", r.key)));
        }
    }
    let folds = (0..plan.n_folds)
        .into_par_iter()
        .map(|f| run_fold(rows, plan, f, config))
        .collect::<Result<Vec<_>, _>>()?;

    let n = folds.len() as f64;
    let aucs: Vec<f64> = folds.iter().filter_map(|f| f.metrics.auc).collect();
    let mean_of = |g: fn(&Metrics) -> f64| folds.iter().map(|f| g(&f.metrics)).sum::<f64>() / n;
    let mean = MeanMetrics {
        auc: (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64),
        auc_folds: aucs.len(),
        pcc: mean_of(|m| m.pcc),
        precision: mean_of(|m| m.precision),
        recall: mean_of(|m| m.recall),
        f1: mean_of(|m| m.f1),
    };
    let threshold_rule = match config.variant.confidence() {
        Some(_) => "classifier-free: raw score ranked directly; P/R/F1 threshold = median score of the balanced training rows".into(),
        None => format!("logistic regression probability >= {}", config.threshold),
    };
    Ok(CvReport { config: *config, positive_class: "hallucinated", threshold_rule, folds, mean })
}

/// Paired two-tailed t-test of fold AUCs against a reference variant.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub variant: Variant,
    pub reference: Variant,
    pub n_pairs: usize,
    pub t: f64,
    pub p: f64,
    pub p_adjusted: f64,
    pub degenerate: bool,
}

/// Compares every report after the first against the first; p values are
/// BH-adjusted across comparisons. The test unit is the fold.
pub fn compare_variants(reports: &[CvReport]) -> Vec<Comparison> {
    let Some((reference, rest)) = reports.split_first() else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for other in rest {
        let pairs: Vec<(f64, f64)> = reference
            .fold_aucs()
            .into_iter()
            .zip(other.fold_aucs())
            .filter_map(|(a, b)| Some((a?, b?)))
            .collect();
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        let (t, p, degenerate) = match t_test_two_tailed(&a, &b) {
            Ok(r) => (r.t, r.p, r.degenerate),
            Err(_) => (0.0, 1.0, true),
        };
        out.push(Comparison {
            variant: other.config.variant,
            reference: reference.config.variant,
            n_pairs: pairs.len(),
            t,
            p,
            p_adjusted: p,
            degenerate,
        });
    }
    let ps: Vec<f64> = out.iter().map(|c| c.p).collect();
    if let Ok(bh) = bh_correct(&ps, 0.05) {
        for (c, adj) in out.iter_mut().zip(bh.adjusted) {
            c.p_adjusted = adj;
        }
    }
    out
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

/// One row per variant with mean metrics and, when several variants ran,
/// the paired fold-level t-test against the first one.
pub fn write_table1(path: &Path, reports: &[CvReport], comparisons: &[Comparison], header: &[String]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for line in header {
        writeln!(f, "# {line}")?;
    }
    writeln!(f, "# positive class: hallucinated; metrics are means over folds")?;
    if !comparisons.is_empty() {
        writeln!(f, "# significance: two-tailed paired t-test on fold AUCs vs first row, BH-adjusted; * marks p_adjusted < 0.05")?;
    }
    writeln!(f, "method,variant,auc,pcc,precision,recall,f1,p_value,p_adjusted,significant")?;
    for r in reports {
        let m = &r.mean;
        let cmp = comparisons.iter().find(|c| c.variant == r.config.variant && c.reference != r.config.variant);
        let (p, padj, sig) = match cmp {
            Some(c) => (format!("{:.6}", c.p), format!("{:.6}", c.p_adjusted), if c.p_adjusted < 0.05 { "*" } else { "" }),
            None => (String::new(), String::new(), ""),
        };
        writeln!(
            f,
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{p},{padj},{sig}",
            r.config.variant.display_name(),
            r.config.variant.name(),
            fmt_opt(m.auc),
            m.pcc,
            m.precision,
            m.recall,
            m.f1
        )?;
    }
    f.flush()
}

pub fn write_cv_report(path: &Path, reports: &[CvReport], comparisons: &[Comparison]) -> std::io::Result<()> {
    #[derive(Serialize)]
    struct Out<'a> {
        runs: &'a [CvReport],
        comparisons: &'a [Comparison],
        test_unit: &'static str,
    }
    let out = Out { runs: reports, comparisons, test_unit: "fold-level AUC pairs" };
    let text = serde_json::to_string_pretty(&out).map_err(std::io::Error::other)?;
    std::fs::write(path, text + "\n")
}
