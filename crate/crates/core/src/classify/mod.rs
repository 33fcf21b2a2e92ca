// SPDX-License-Identifier: MIT OR Apache-2.0

//! Logistic-regression detector and report-grouped cross-validation.

mod cv;
mod folds;
mod logreg;
mod metrics;

pub use cv::{
    compare_variants, run_cv, write_cv_report, write_table1, Comparison, CvConfig, CvReport, FoldResult, MeanMetrics,
};
pub use folds::{balance_train, make_folds, FoldPlan};
pub use logreg::{loss_and_gradient, predict, train_logreg, LogRegConfig, LogRegModel};
pub use metrics::{evaluate, Metrics};

use thiserror::Error;

use crate::features::FeatureError;

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{reports} reports cannot fill {folds} folds")]
    TooFewReports { reports: usize, folds: usize },
    #[error("both classes are required")]
    SingleClass,
    #[error("need at least 2 rows per class, got {positives} hallucinated and {negatives} correct")]
    TooFewRows { positives: usize, negatives: usize },
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error("report {0} appears in both training and test rows")]
    Leakage(String),
    #[error(transparent)]
    Features(#[from] FeatureError),
}
