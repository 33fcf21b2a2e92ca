// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-score signature table: direction and significance of the
//! correct-vs-hallucinated difference on each score's chosen feature.
//!
//! Choosing the feature and testing it on the same rows inflates
//! significance (the chosen feature is the one that looks most
//! discriminative), so by default reports are split in two: features are
//! chosen on one half and tested on the other.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classify::{make_folds, ClassifyError};
use crate::features::{assemble, fit_features, ChosenFeature, FeatureConfig, FeatureError, Variant};
use crate::numeric::{to_f64, Scalar};
use crate::scores::ScoredCitation;
use crate::stats::{signature_table, SignatureTable, StatsError};

#[derive(Debug, Error)]
pub enum SignatureError {
    #[error("no {0} citations: both classes are required for a signature table")]
    MissingClass(&'static str),
    #[error("held-out signatures need at least 2 reports, got {0}; use the in-sample split")]
    TooFewReports(usize),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Split(#[from] ClassifyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignatureSplit {
    /// Choose features on half of the reports, test on the rest.
    #[default]
    HeldOut,
    /// Choose and test on all rows.
    InSample,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SignatureConfig {
    pub features: FeatureConfig,
    pub split: SignatureSplit,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignatureRun {
    pub config: SignatureConfig,
    pub selection_reports: Vec<String>,
    pub test_reports: Vec<String>,
    pub n_selection: usize,
    pub n_test: usize,
    pub chosen: Vec<ChosenFeature>,
    pub table: SignatureTable,
}

fn require_both(labels: &[bool]) -> Result<(), SignatureError> {
    if !labels.iter().any(|&h| h) {
        return Err(SignatureError::MissingClass("hallucinated"));
    }
    if !labels.iter().any(|&h| !h) {
        return Err(SignatureError::MissingClass("correct"));
    }
    Ok(())
}

pub fn run_signatures<T: Scalar>(rows: &[ScoredCitation<T>], config: &SignatureConfig) -> Result<SignatureRun, SignatureError> {
    let labels: Vec<bool> = rows.iter().map(|r| r.hallucinated).collect();
    require_both(&labels)?;
    let (select, test, selection_reports, test_reports) = match config.split {
        SignatureSplit::InSample => {
            let all: Vec<usize> = (0..rows.len()).collect();
            let mut reports: Vec<String> = rows.iter().map(|r| r.key.report_id.clone()).collect();
            reports.dedup();
            (all.clone(), all, reports.clone(), reports)
        }
        SignatureSplit::HeldOut => {
            let groups: Vec<String> = rows.iter().map(|r| r.key.report_id.clone()).collect();
            let plan = match make_folds(&groups, &labels, 2, config.seed) {
                Err(ClassifyError::TooFewReports { reports, .. }) => return Err(SignatureError::TooFewReports(reports)),
                other => other?,
            };
            (plan.test_rows(0), plan.test_rows(1), plan.folds[0].clone(), plan.folds[1].clone())
        }
    };
    let select_refs: Vec<&ScoredCitation<T>> = select.iter().map(|&i| &rows[i]).collect();
    let test_refs: Vec<&ScoredCitation<T>> = test.iter().map(|&i| &rows[i]).collect();
    let test_labels: Vec<bool> = test.iter().map(|&i| labels[i]).collect();
    require_both(&test_labels)?;

    let plan = fit_features(&select_refs, Variant::Factum, &config.features)?;
    let m = assemble(&test_refs, &plan)?;
    let values: BTreeMap<_, _> = plan
        .chosen
        .iter()
        .enumerate()
        .map(|(j, c)| (c.score, (c.name.clone(), m.values.column(j).iter().map(|&v| to_f64(v)).collect())))
        .collect();
    let table = signature_table(&values, &test_labels)?;
    Ok(SignatureRun {
        config: *config,
        selection_reports,
        test_reports,
        n_selection: select.len(),
        n_test: test.len(),
        chosen: plan.chosen,
        table,
    })
}

/// Writes the table as CSV, preceded by `# `-prefixed header lines.
pub fn write_signature_csv(path: &Path, run: &SignatureRun, header: &[String]) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for h in header {
        writeln!(out, "# {h}")?;
    }
    writeln!(out, "score,feature,direction,arrow,tier,p_raw,p_adjusted,degenerate")?;
    for r in &run.table.rows {
        let dir = serde_json::to_value(r.direction).map_err(std::io::Error::other)?;
        writeln!(
            out,
            "{},{},{},{},{},{:e},{:e},{}",
            r.score,
            r.feature,
            dir.as_str().unwrap_or_default(),
            r.direction.arrow(),
            r.tier.label(),
            r.p_raw,
            r.p_adjusted,
            r.degenerate
        )?;
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{synth_dataset, PlantedSpec};
    use crate::scores::{score_dataset, ScoreKind};
    use crate::stats::{Direction, Tier};

    fn rows(seed: u64) -> Vec<ScoredCitation<f64>> {
        let ds = synth_dataset(&PlantedSpec::standard(seed)).unwrap();
        let traces: Vec<_> = ds.traces.iter().map(|t| t.cast::<f64>()).collect();
        score_dataset(&traces).unwrap()
    }

    #[test]
    fn held_out_split_is_disjoint() {
        let rows = rows(0);
        let run = run_signatures(&rows, &SignatureConfig::default()).unwrap();
        assert!(run.selection_reports.iter().all(|r| !run.test_reports.contains(r)));
        assert_eq!(run.n_selection + run.n_test, rows.len());
        let bas = run.table.row(ScoreKind::Bas).unwrap();
        assert_eq!((bas.direction, bas.tier), (Direction::CorrectHigher, Tier::P001));
    }

    #[test]
    fn single_class_names_the_missing_one() {
        let mut rows = rows(1);
        rows.iter_mut().for_each(|r| r.hallucinated = false);
        let err = run_signatures(&rows, &SignatureConfig::default()).unwrap_err();
        assert!(err.to_string().contains("no hallucinated citations"));
    }
}
