// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dataset manifests: one FTRC file per report plus a JSON index.
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "reports": [
//!     { "report_id": "report-0000", "path": "report-0000.ftrc", "citations": 10,
//!       "labels": { "correct": 5, "hallucinated": 5, "unlabeled": 0 } }
//!   ]
//! }
//! ```
//!
//! Paths are relative to the manifest's directory.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ftrc::{read_report, write_report, FtrcError};
use crate::trace::{LabelCounts, ReportTrace};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub report_id: String,
    pub path: String,
    pub citations: usize,
    pub labels: LabelCounts,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub reports: Vec<ManifestEntry>,
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read manifest {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed manifest {path}: {source}")]
    Parse { path: String, source: serde_json::Error },
    #[error("manifest format_version {0} is not supported (expected {MANIFEST_VERSION})")]
    Version(u32),
    #[error("manifest lists no reports")]
    Empty,
    #[error("duplicate report_id {0:?} in manifest")]
    DuplicateId(String),
    #[error("duplicate path {0:?} in manifest")]
    DuplicatePath(String),
    #[error("missing trace file {0}")]
    MissingFile(String),
    #[error("{path}: {source}")]
    Trace { path: String, source: FtrcError },
    #[error("{path}: file holds report {found:?} but the manifest says {expected:?}")]
    IdMismatch { path: String, expected: String, found: String },
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ManifestError::Io { path: path.display().to_string(), source })?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|source| ManifestError::Parse { path: path.display().to_string(), source })?;
        if m.format_version != MANIFEST_VERSION {
            return Err(ManifestError::Version(m.format_version));
        }
        m.check_unique()?;
        Ok(m)
    }

    fn check_unique(&self) -> Result<(), ManifestError> {
        let mut ids = BTreeSet::new();
        let mut paths = BTreeSet::new();
        for e in &self.reports {
            if !ids.insert(e.report_id.as_str()) {
                return Err(ManifestError::DuplicateId(e.report_id.clone()));
            }
            if !paths.insert(e.path.as_str()) {
                return Err(ManifestError::DuplicatePath(e.path.clone()));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(path, text + "\n")
    }
}

fn base_dir(manifest_path: &Path) -> PathBuf {
    manifest_path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Reads every trace listed in the manifest, in manifest order.
pub fn load_dataset(manifest_path: &Path) -> Result<Vec<ReportTrace<f32>>, ManifestError> {
    let manifest = Manifest::load(manifest_path)?;
    if manifest.reports.is_empty() {
        return Err(ManifestError::Empty);
    }
    let base = base_dir(manifest_path);
    manifest
        .reports
        .par_iter()
        .map(|e| {
            let path = base.join(&e.path);
            let shown = path.display().to_string();
            if !path.is_file() {
                return Err(ManifestError::MissingFile(shown));
            }
            let trace = read_report(&path).map_err(|source| ManifestError::Trace { path: shown.clone(), source })?;
            if trace.report_id != e.report_id {
                return Err(ManifestError::IdMismatch { path: shown, expected: e.report_id.clone(), found: trace.report_id });
            }
            Ok(trace)
        })
        .collect()
}

/// Writes one FTRC file per trace into `dir` and a `manifest.json` beside them.
pub fn write_dataset(dir: &Path, traces: &[ReportTrace<f32>]) -> Result<Manifest, ManifestError> {
    std::fs::create_dir_all(dir).map_err(|source| ManifestError::Io { path: dir.display().to_string(), source })?;
    let reports = traces
        .par_iter()
        .map(|t| {
            let file = format!("{}.ftrc", t.report_id);
            let path = dir.join(&file);
            write_report(t, &path).map_err(|source| ManifestError::Trace { path: path.display().to_string(), source })?;
            Ok(ManifestEntry {
                report_id: t.report_id.clone(),
                path: file,
                citations: t.citations.len(),
                labels: t.label_counts(),
            })
        })
        .collect::<Result<Vec<_>, ManifestError>>()?;
    let manifest = Manifest { format_version: MANIFEST_VERSION, reports };
    manifest.check_unique()?;
    let path = dir.join("manifest.json");
    manifest.save(&path).map_err(|source| ManifestError::Io { path: path.display().to_string(), source })?;
    Ok(manifest)
}
