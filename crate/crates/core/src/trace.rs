// SPDX-License-Identifier: MIT OR Apache-2.0

//! Captured transformer internals for one generated report.
//!
//! A [`ReportTrace`] holds the final-layer hidden states of every prompt
//! token plus one [`CitationRecord`] per citation token found in the
//! generated text. Sequence position 0 is the attention sink; it is kept
//! outside the prompt span and has its own attention column and hidden
//! state.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, IntoDimension};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::{lit, Scalar};

/// Slack allowed on the per-head attention budget.
pub const ATTENTION_SUM_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelGeometry {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub model_id: String,
}

impl ModelGeometry {
    pub fn new(num_layers: usize, num_heads: usize, hidden_dim: usize, model_id: impl Into<String>) -> Self {
        Self { num_layers, num_heads, hidden_dim, model_id: model_id.into() }
    }
}

/// Half-open token interval `[start, end)` in absolute sequence positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
}

impl TokenSpan {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains_span(&self, other: &TokenSpan) -> bool {
        self.start <= other.start && other.end <= self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Correct,
    Hallucinated,
    Unlabeled,
}

impl Label {
    /// `Some(true)` for the positive (hallucinated) class.
    pub fn as_positive(self) -> Option<bool> {
        match self {
            Label::Correct => Some(false),
            Label::Hallucinated => Some(true),
            Label::Unlabeled => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Correct => "correct",
            Label::Hallucinated => "hallucinated",
            Label::Unlabeled => "unlabeled",
        })
    }
}

/// Confidence-baseline inputs captured at the citation step.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineScalars<T> {
    pub token_logprob: T,
    /// Entropy in nats of the next-token distribution.
    pub dist_entropy: T,
    pub logit_logsumexp: T,
    pub p_true: Option<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CitationRecord<T> {
    /// Absolute position of the citation token in the full sequence.
    pub citation_pos: usize,
    pub cited_doc_id: u32,
    pub label: Label,
    /// `[L, H, n_prompt]` attention from the citation token to each prompt position.
    pub attn_prompt: Array3<T>,
    /// `[L, H]` attention from the citation token to sequence position 0.
    pub attn_sink: Array2<T>,
    /// `[d]` final-layer hidden state of the citation token.
    pub token_final_hidden: Array1<T>,
    /// `[L, d]` residual stream entering each layer.
    pub x_input: Array2<T>,
    /// `[L, d]` residual stream after the attention block.
    pub x_pre_ffn: Array2<T>,
    /// `[L, d]` residual stream after the FFN block.
    pub x_post_ffn: Array2<T>,
    pub baselines: BaselineScalars<T>,
    /// `[L, 2]` logit-lens log-prob of the citation token before/after each FFN.
    pub logitlens_lp: Option<Array2<T>>,
}

impl<T: Scalar> CitationRecord<T> {
    pub fn cast<U: Scalar>(&self) -> CitationRecord<U> {
        let c = |x: &T| lit::<U>(x.to_f64().unwrap());
        CitationRecord {
            citation_pos: self.citation_pos,
            cited_doc_id: self.cited_doc_id,
            label: self.label,
            attn_prompt: self.attn_prompt.map(c),
            attn_sink: self.attn_sink.map(c),
            token_final_hidden: self.token_final_hidden.map(c),
            x_input: self.x_input.map(c),
            x_pre_ffn: self.x_pre_ffn.map(c),
            x_post_ffn: self.x_post_ffn.map(c),
            baselines: BaselineScalars {
                token_logprob: c(&self.baselines.token_logprob),
                dist_entropy: c(&self.baselines.dist_entropy),
                logit_logsumexp: c(&self.baselines.logit_logsumexp),
                p_true: self.baselines.p_true.as_ref().map(c),
            },
            logitlens_lp: self.logitlens_lp.as_ref().map(|m| m.map(c)),
        }
    }

    /// Attention update `x_pre_ffn - x_input` at `layer`.
    pub fn attn_update(&self, layer: usize) -> Array1<T> {
        &self.x_pre_ffn.row(layer) - &self.x_input.row(layer)
    }

    /// FFN update `x_post_ffn - x_pre_ffn` at `layer`.
    pub fn ffn_update(&self, layer: usize) -> Array1<T> {
        &self.x_post_ffn.row(layer) - &self.x_pre_ffn.row(layer)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportTrace<T> {
    pub report_id: String,
    pub geometry: ModelGeometry,
    /// Source-document tokens.
    pub context_span: TokenSpan,
    /// All prompt tokens after the sink; a superset of `context_span`.
    pub prompt_span: TokenSpan,
    /// `[n_prompt, d]` final-layer hidden states, row `j` is position `prompt_span.start + j`.
    pub prompt_final_hidden: Array2<T>,
    /// `[d]` final-layer hidden state of the sink token at position 0.
    pub sink_final_hidden: Array1<T>,
    pub citations: Vec<CitationRecord<T>>,
}

impl<T: Scalar> ReportTrace<T> {
    pub fn n_prompt(&self) -> usize {
        self.prompt_span.len()
    }

    /// Rows of `prompt_final_hidden` (and columns of `attn_prompt`) that
    /// belong to the context span.
    pub fn context_rows(&self) -> std::ops::Range<usize> {
        let s = self.context_span.start - self.prompt_span.start;
        s..s + self.context_span.len()
    }

    pub fn cast<U: Scalar>(&self) -> ReportTrace<U> {
        let c = |x: &T| lit::<U>(x.to_f64().unwrap());
        ReportTrace {
            report_id: self.report_id.clone(),
            geometry: self.geometry.clone(),
            context_span: self.context_span,
            prompt_span: self.prompt_span,
            prompt_final_hidden: self.prompt_final_hidden.map(c),
            sink_final_hidden: self.sink_final_hidden.map(c),
            citations: self.citations.iter().map(CitationRecord::cast).collect(),
        }
    }

    pub fn label_counts(&self) -> LabelCounts {
        let mut counts = LabelCounts::default();
        for c in &self.citations {
            match c.label {
                Label::Correct => counts.correct += 1,
                Label::Hallucinated => counts.hallucinated += 1,
                Label::Unlabeled => counts.unlabeled += 1,
            }
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub correct: usize,
    pub hallucinated: usize,
    pub unlabeled: usize,
}

/// One invariant violation found by [`validate_report`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub index: Vec<usize>,
    pub reason: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.index.is_empty() {
            write!(f, "{}: {}", self.field, self.reason)
        } else {
            let idx: Vec<String> = self.index.iter().map(usize::to_string).collect();
            write!(f, "{}[{}]: {}", self.field, idx.join(","), self.reason)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, field: impl Into<String>, index: Vec<usize>, reason: impl Into<String>) {
        self.violations.push(Violation { field: field.into(), index, reason: reason.into() });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(f, "{v}")?;
        }
        Ok(())
    }
}

fn check_shape(report: &mut ValidationReport, field: String, actual: &[usize], expected: &[usize]) -> bool {
    if actual == expected {
        true
    } else {
        report.push(field, vec![], format!("shape {actual:?}, expected {expected:?}"));
        false
    }
}

fn check_finite<T: Scalar, D: ndarray::Dimension>(
    report: &mut ValidationReport,
    field: &str,
    prefix: &[usize],
    a: &ndarray::ArrayBase<ndarray::OwnedRepr<T>, D>,
) {
    if let Some((idx, _)) = a.indexed_iter().find(|(_, v)| !v.is_finite()) {
        let mut index = prefix.to_vec();
        index.extend(idx.into_dimension().slice().iter());
        report.push(field, index, "non-finite value");
    }
}

/// Checks every structural and numeric invariant of a trace.
///
/// Violations are returned as data; the trace is not modified.
pub fn validate_report<T: Scalar>(trace: &ReportTrace<T>) -> ValidationReport {
    let mut report = ValidationReport::default();
    let g = &trace.geometry;
    if g.num_layers == 0 || g.num_heads == 0 || g.hidden_dim == 0 {
        report.push("geometry", vec![], "num_layers, num_heads and hidden_dim must be positive");
        return report;
    }
    let (l, h, d) = (g.num_layers, g.num_heads, g.hidden_dim);

    let ps = trace.prompt_span;
    let cs = trace.context_span;
    if ps.is_empty() {
        report.push("prompt_span", vec![], format!("empty span {}..{}", ps.start, ps.end));
    }
    if ps.start == 0 {
        report.push("prompt_span", vec![], "position 0 is the sink and cannot be part of the prompt span");
    }
    if cs.is_empty() {
        report.push("context_span", vec![], format!("empty span {}..{}", cs.start, cs.end));
    }
    if !ps.contains_span(&cs) {
        report.push("context_span", vec![], "not contained in prompt_span");
    }
    let n_prompt = ps.len();

    if check_shape(&mut report, "prompt_final_hidden".into(), trace.prompt_final_hidden.shape(), &[n_prompt, d]) {
        check_finite(&mut report, "prompt_final_hidden", &[], &trace.prompt_final_hidden);
    }
    if check_shape(&mut report, "sink_final_hidden".into(), trace.sink_final_hidden.shape(), &[d]) {
        check_finite(&mut report, "sink_final_hidden", &[], &trace.sink_final_hidden);
    }

    for (ci, rec) in trace.citations.iter().enumerate() {
        let f = |name: &str| format!("citations[{ci}].{name}");
        if rec.citation_pos < ps.end {
            report.push(f("citation_pos"), vec![], format!("position {} lies inside the prompt", rec.citation_pos));
        }

        let prompt_ok = check_shape(&mut report, f("attn_rows"), rec.attn_prompt.shape(), &[l, h, n_prompt]);
        let sink_ok = check_shape(&mut report, f("attn_sink"), rec.attn_sink.shape(), &[l, h]);
        if prompt_ok {
            for ((li, hi, j), &w) in rec.attn_prompt.indexed_iter() {
                if !(w >= T::zero() && w <= T::one()) {
                    report.push("attn_rows", vec![ci, li, hi, j], format!("weight {w} outside [0, 1]"));
                }
            }
        }
        if sink_ok {
            for ((li, hi), &w) in rec.attn_sink.indexed_iter() {
                if !(w >= T::zero() && w <= T::one()) {
                    report.push("attn_sink", vec![ci, li, hi], format!("weight {w} outside [0, 1]"));
                }
            }
        }
        if prompt_ok && sink_ok {
            let budget = T::one() + lit::<T>(ATTENTION_SUM_TOL);
            for li in 0..l {
                for hi in 0..h {
                    let total = rec.attn_sink[[li, hi]] + rec.attn_prompt.slice(ndarray::s![li, hi, ..]).sum();
                    if total > budget {
                        report.push("attn_rows", vec![ci, li, hi], format!("sink + prompt mass {total} exceeds 1"));
                    }
                }
            }
        }

        if check_shape(&mut report, f("token_final_hidden"), rec.token_final_hidden.shape(), &[d]) {
            check_finite(&mut report, "token_final_hidden", &[ci], &rec.token_final_hidden);
        }
        for (name, m) in [("x_input", &rec.x_input), ("x_pre_ffn", &rec.x_pre_ffn), ("x_post_ffn", &rec.x_post_ffn)] {
            if check_shape(&mut report, f(name), m.shape(), &[l, d]) {
                check_finite(&mut report, name, &[ci], m);
            }
        }
        if let Some(lens) = &rec.logitlens_lp {
            if check_shape(&mut report, f("logitlens_lp"), lens.shape(), &[l, 2]) {
                check_finite(&mut report, "logitlens_lp", &[ci], lens);
                if let Some(((li, k), v)) = lens.indexed_iter().find(|(_, v)| **v > lit::<T>(ATTENTION_SUM_TOL)) {
                    report.push("logitlens_lp", vec![ci, li, k], format!("log-probability {v} > 0"));
                }
            }
        }

        let b = &rec.baselines;
        if !b.token_logprob.is_finite() || b.token_logprob > T::zero() {
            report.push(f("baselines.token_logprob"), vec![], format!("{} must be finite and <= 0", b.token_logprob));
        }
        if !b.dist_entropy.is_finite() || b.dist_entropy < T::zero() {
            report.push(f("baselines.dist_entropy"), vec![], format!("{} must be finite and >= 0", b.dist_entropy));
        }
        if !b.logit_logsumexp.is_finite() {
            report.push(f("baselines.logit_logsumexp"), vec![], "non-finite value");
        }
        if let Some(p) = b.p_true {
            if !(p >= T::zero() && p <= T::one()) {
                report.push(f("baselines.p_true"), vec![], format!("{p} outside [0, 1]"));
            }
        }
    }
    report
}

/// Verdict recorded in a label file. Files never carry `unlabeled`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Correct,
    Hallucinated,
}

impl From<Verdict> for Label {
    fn from(v: Verdict) -> Self {
        match v {
            Verdict::Correct => Label::Correct,
            Verdict::Hallucinated => Label::Hallucinated,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub report_id: String,
    /// Zero-based index into the report's citation list.
    pub ordinal: usize,
    pub label: Verdict,
}

/// Externally produced citation labels, keyed by `(report_id, ordinal)`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelFile {
    pub entries: Vec<LabelEntry>,
}

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("duplicate label for ({report_id}, {ordinal})")]
    DuplicateKey { report_id: String, ordinal: usize },
    #[error("label references unknown report {0:?}")]
    UnknownReport(String),
    #[error("label for ({report_id}, {ordinal}) but the report has {count} citations")]
    OrdinalOutOfRange { report_id: String, ordinal: usize, count: usize },
    #[error("cannot read label file {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed label file {path}: {source}")]
    Parse { path: String, source: serde_json::Error },
}

impl LabelFile {
    pub fn load(path: &Path) -> Result<Self, LabelError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| LabelError::Io { path: path.display().to_string(), source })?;
        serde_json::from_str(&text).map_err(|source| LabelError::Parse { path: path.display().to_string(), source })
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(path, text + "\n")
    }

    /// Entries for every labeled citation in `traces`.
    pub fn from_traces<T>(traces: &[ReportTrace<T>]) -> Self {
        let entries = traces
            .iter()
            .flat_map(|t| {
                t.citations.iter().enumerate().filter_map(|(ordinal, c)| {
                    let label = match c.label {
                        Label::Correct => Verdict::Correct,
                        Label::Hallucinated => Verdict::Hallucinated,
                        Label::Unlabeled => return None,
                    };
                    Some(LabelEntry { report_id: t.report_id.clone(), ordinal, label })
                })
            })
            .collect();
        Self { entries }
    }
}

/// Copies labels from `labels` onto matching citations.
///
/// The whole file is checked before any trace is touched, so an error
/// leaves `traces` unchanged. Citations without an entry keep their
/// current label. Returns the number of citations labeled.
pub fn attach_labels<T>(traces: &mut [ReportTrace<T>], labels: &LabelFile) -> Result<usize, LabelError> {
    let counts: BTreeMap<&str, usize> = traces.iter().map(|t| (t.report_id.as_str(), t.citations.len())).collect();
    let mut seen = BTreeSet::new();
    for e in &labels.entries {
        if !seen.insert((e.report_id.as_str(), e.ordinal)) {
            return Err(LabelError::DuplicateKey { report_id: e.report_id.clone(), ordinal: e.ordinal });
        }
        let count = *counts.get(e.report_id.as_str()).ok_or_else(|| LabelError::UnknownReport(e.report_id.clone()))?;
        if e.ordinal >= count {
            return Err(LabelError::OrdinalOutOfRange { report_id: e.report_id.clone(), ordinal: e.ordinal, count });
        }
    }
    let index: BTreeMap<&str, usize> = traces.iter().enumerate().map(|(i, t)| (t.report_id.as_str(), i)).collect();
    let updates: Vec<(usize, usize, Label)> =
        labels.entries.iter().map(|e| (index[e.report_id.as_str()], e.ordinal, e.label.into())).collect();
    for (ti, ord, label) in updates {
        traces[ti].citations[ord].label = label;
    }
    Ok(labels.entries.len())
}
