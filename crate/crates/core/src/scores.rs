// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-citation mechanistic scores and confidence baselines.
//!
//! Attention-pathway scores are `[L, H]` matrices, FFN-pathway scores are
//! `[L]` vectors:
//!
//! | score | definition |
//! |-------|------------|
//! | CAS   | cosine of the attention-weighted context vector with the citation token's final hidden state |
//! | BAS   | attention mass on the sink (position 0) |
//! | ECS   | CAS over the whole prompt including the sink |
//! | PFS   | L2 norm of the FFN update |
//! | PAS   | cosine between the attention and FFN updates |
//! | PKS   | absolute logit-lens log-prob change across the FFN |
//!
//! Cosines whose inputs have (near-)zero norm are reported as 0 and
//! recorded in [`ScoreSet::degenerate`].

use std::collections::BTreeSet;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::{guarded_cosine, lit, norm, to_f64, Scalar};
use crate::trace::{CitationRecord, ReportTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Cas,
    Bas,
    Ecs,
    Pfs,
    Pas,
    Pks,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 6] =
        [ScoreKind::Cas, ScoreKind::Bas, ScoreKind::Ecs, ScoreKind::Pfs, ScoreKind::Pas, ScoreKind::Pks];

    /// Head-level scores have one value per `(layer, head)`.
    pub fn is_head_level(self) -> bool {
        matches!(self, ScoreKind::Cas | ScoreKind::Bas | ScoreKind::Ecs)
    }

    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::Cas => "cas",
            ScoreKind::Bas => "bas",
            ScoreKind::Ecs => "ecs",
            ScoreKind::Pfs => "pfs",
            ScoreKind::Pas => "pas",
            ScoreKind::Pks => "pks",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s.to_ascii_lowercase())
    }
}

impl std::fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A score entry where the zero-norm cosine guard fired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DegenerateFlag {
    pub score: ScoreKind,
    pub layer: usize,
    pub head: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Confidence<T> {
    pub perplexity: T,
    pub ln_entropy: T,
    pub energy: T,
    pub p_true: Option<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet<T> {
    pub cas: Array2<T>,
    pub bas: Array2<T>,
    pub ecs: Array2<T>,
    pub pfs: Array1<T>,
    pub pas: Array1<T>,
    /// Absent when the trace was captured without the logit lens.
    pub pks: Option<Array1<T>>,
    pub confidence: Confidence<T>,
    pub degenerate: BTreeSet<DegenerateFlag>,
}

impl<T: Scalar> ScoreSet<T> {
    pub fn head(&self, kind: ScoreKind) -> Option<&Array2<T>> {
        match kind {
            ScoreKind::Cas => Some(&self.cas),
            ScoreKind::Bas => Some(&self.bas),
            ScoreKind::Ecs => Some(&self.ecs),
            _ => None,
        }
    }

    pub fn layer(&self, kind: ScoreKind) -> Option<&Array1<T>> {
        match kind {
            ScoreKind::Pfs => Some(&self.pfs),
            ScoreKind::Pas => Some(&self.pas),
            ScoreKind::Pks => self.pks.as_ref(),
            _ => None,
        }
    }

    /// Checks the documented value ranges; returns the first offence.
    pub fn check_invariants(&self) -> Result<(), String> {
        let unit = |name: &str, it: &mut dyn Iterator<Item = &T>, lo: T| -> Result<(), String> {
            for v in it {
                if !v.is_finite() || *v < lo || *v > T::one() {
                    return Err(format!("{name} value {v} outside [{lo}, 1]"));
                }
            }
            Ok(())
        };
        let nonneg = |name: &str, it: &mut dyn Iterator<Item = &T>| -> Result<(), String> {
            for v in it {
                if !v.is_finite() || *v < T::zero() {
                    return Err(format!("{name} value {v} is negative or non-finite"));
                }
            }
            Ok(())
        };
        unit("cas", &mut self.cas.iter(), -T::one())?;
        unit("ecs", &mut self.ecs.iter(), -T::one())?;
        unit("pas", &mut self.pas.iter(), -T::one())?;
        unit("bas", &mut self.bas.iter(), T::zero())?;
        nonneg("pfs", &mut self.pfs.iter())?;
        if let Some(pks) = &self.pks {
            nonneg("pks", &mut pks.iter())?;
        }
        let c = &self.confidence;
        if !(c.perplexity >= T::one()) {
            return Err(format!("perplexity {} < 1", c.perplexity));
        }
        if !c.ln_entropy.is_finite() || !c.energy.is_finite() {
            return Err("non-finite confidence baseline".into());
        }
        let (l, h) = self.cas.dim();
        for f in &self.degenerate {
            let in_range = f.layer < l && f.head.is_none_or(|hh| hh < h);
            if !in_range || f.head.is_some() != f.score.is_head_level() {
                return Err(format!("degenerate flag {f:?} does not name a computed entry"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("citation at position {citation_pos} has no logit-lens block; re-extract with the logit lens enabled")]
    MissingLogitLens { citation_pos: usize },
    #[error("no labeled citations in the dataset")]
    NoLabeledCitations,
}

/// Kernel output plus the entries where the cosine guard fired.
#[derive(Debug, Clone, PartialEq)]
pub struct Flagged<A> {
    pub values: A,
    pub flags: Vec<DegenerateFlag>,
}

fn check_attention(record: &CitationRecord<impl Scalar>, report: &ReportTrace<impl Scalar>) -> Result<(), ScoreError> {
    let g = &report.geometry;
    let n = report.n_prompt();
    if record.attn_prompt.dim() != (g.num_layers, g.num_heads, n) {
        return Err(ScoreError::ShapeMismatch(format!(
            "attn_rows {:?} vs geometry ({}, {}) and {} prompt positions",
            record.attn_prompt.shape(),
            g.num_layers,
            g.num_heads,
            n
        )));
    }
    if report.prompt_final_hidden.dim() != (n, g.hidden_dim) {
        return Err(ScoreError::ShapeMismatch(format!(
            "prompt_final_hidden {:?}, expected [{n}, {}]",
            report.prompt_final_hidden.shape(),
            g.hidden_dim
        )));
    }
    if record.token_final_hidden.len() != g.hidden_dim || report.sink_final_hidden.len() != g.hidden_dim {
        return Err(ScoreError::ShapeMismatch("final hidden state length differs from hidden_dim".into()));
    }
    if record.attn_sink.dim() != (g.num_layers, g.num_heads) {
        return Err(ScoreError::ShapeMismatch(format!("attn_sink {:?}", record.attn_sink.shape())));
    }
    Ok(())
}

/// `sum_j w[j] * rows[j]` with pairwise accumulation over rows.
fn weighted_row_sum<T: Scalar>(w: ArrayView1<'_, T>, rows: ArrayView2<'_, T>) -> Array1<T> {
    fn rec<T: Scalar>(w: ArrayView1<'_, T>, rows: ArrayView2<'_, T>, lo: usize, hi: usize) -> Array1<T> {
        if hi - lo <= 8 {
            let mut acc = Array1::zeros(rows.ncols());
            for j in lo..hi {
                acc.scaled_add(w[j], &rows.row(j));
            }
            acc
        } else {
            let mid = lo + (hi - lo) / 2;
            rec(w, rows, lo, mid) + rec(w, rows, mid, hi)
        }
    }
    rec(w, rows, 0, rows.nrows())
}

fn alignment<T: Scalar>(
    record: &CitationRecord<T>,
    report: &ReportTrace<T>,
    rows: Range<usize>,
    with_sink: bool,
    kind: ScoreKind,
) -> Flagged<Array2<T>> {
    let g = &report.geometry;
    let hidden = report.prompt_final_hidden.slice(s![rows.clone(), ..]);
    let mut values = Array2::zeros((g.num_layers, g.num_heads));
    let mut flags = Vec::new();
    for l in 0..g.num_layers {
        for h in 0..g.num_heads {
            let w = record.attn_prompt.slice(s![l, h, rows.clone()]);
            let mut ctx = weighted_row_sum(w, hidden);
            if with_sink {
                ctx.scaled_add(record.attn_sink[[l, h]], &report.sink_final_hidden);
            }
            let (c, degenerate) = guarded_cosine(ctx.view(), record.token_final_hidden.view());
            values[[l, h]] = c;
            if degenerate {
                flags.push(DegenerateFlag { score: kind, layer: l, head: Some(h) });
            }
        }
    }
    Flagged { values, flags }
}

/// Contextual alignment over the source-document span.
pub fn compute_cas<T: Scalar>(
    record: &CitationRecord<T>,
    report: &ReportTrace<T>,
) -> Result<Flagged<Array2<T>>, ScoreError> {
    check_attention(record, report)?;
    Ok(alignment(record, report, report.context_rows(), false, ScoreKind::Cas))
}

/// Same kernel as CAS, summed over every prompt position plus the sink.
pub fn compute_ecs<T: Scalar>(
    record: &CitationRecord<T>,
    report: &ReportTrace<T>,
) -> Result<Flagged<Array2<T>>, ScoreError> {
    check_attention(record, report)?;
    Ok(alignment(record, report, 0..report.n_prompt(), true, ScoreKind::Ecs))
}

/// Attention mass on the sink token, copied verbatim.
pub fn compute_bas<T: Scalar>(record: &CitationRecord<T>) -> Array2<T> {
    record.attn_sink.clone()
}

pub fn compute_pfs<T: Scalar>(record: &CitationRecord<T>) -> Array1<T> {
    Array1::from_shape_fn(record.x_post_ffn.nrows(), |l| norm(record.ffn_update(l).view()))
}

pub fn compute_pas<T: Scalar>(record: &CitationRecord<T>) -> Flagged<Array1<T>> {
    let n = record.x_post_ffn.nrows();
    let mut values = Array1::zeros(n);
    let mut flags = Vec::new();
    for l in 0..n {
        let (c, degenerate) = guarded_cosine(record.attn_update(l).view(), record.ffn_update(l).view());
        values[l] = c;
        if degenerate {
            flags.push(DegenerateFlag { score: ScoreKind::Pas, layer: l, head: None });
        }
    }
    Flagged { values, flags }
}

pub fn compute_pks<T: Scalar>(record: &CitationRecord<T>) -> Result<Array1<T>, ScoreError> {
    let lens = record
        .logitlens_lp
        .as_ref()
        .ok_or(ScoreError::MissingLogitLens { citation_pos: record.citation_pos })?;
    Ok(Array1::from_shape_fn(lens.nrows(), |l| (lens[[l, 1]] - lens[[l, 0]]).abs()))
}

pub fn derive_confidence<T: Scalar>(record: &CitationRecord<T>) -> Confidence<T> {
    let b = &record.baselines;
    Confidence {
        perplexity: (-b.token_logprob).exp(),
        ln_entropy: b.dist_entropy,
        energy: -b.logit_logsumexp,
        p_true: b.p_true,
    }
}

/// Every score for one citation. PKS is left empty when the lens block is missing.
pub fn score_citation<T: Scalar>(record: &CitationRecord<T>, report: &ReportTrace<T>) -> Result<ScoreSet<T>, ScoreError> {
    let cas = compute_cas(record, report)?;
    let ecs = compute_ecs(record, report)?;
    let pas = compute_pas(record);
    let pks = match compute_pks(record) {
        Ok(v) => Some(v),
        Err(ScoreError::MissingLogitLens { .. }) => None,
        Err(e) => return Err(e),
    };
    let degenerate = cas.flags.iter().chain(&ecs.flags).chain(&pas.flags).copied().collect();
    Ok(ScoreSet {
        cas: cas.values,
        bas: compute_bas(record),
        ecs: ecs.values,
        pfs: compute_pfs(record),
        pas: pas.values,
        pks,
        confidence: derive_confidence(record),
        degenerate,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CitationKey {
    pub report_id: String,
    pub ordinal: usize,
}

impl std::fmt::Display for CitationKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}#{}", self.report_id, self.ordinal)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCitation<T> {
    pub key: CitationKey,
    /// Positive class.
    pub hallucinated: bool,
    pub scores: ScoreSet<T>,
}

/// Scores every labeled citation, in trace order then citation ordinal.
pub fn score_dataset<T: Scalar>(traces: &[ReportTrace<T>]) -> Result<Vec<ScoredCitation<T>>, ScoreError> {
    let jobs: Vec<(&ReportTrace<T>, usize, bool)> = traces
        .iter()
        .flat_map(|t| {
            t.citations.iter().enumerate().filter_map(move |(i, c)| c.label.as_positive().map(|pos| (t, i, pos)))
        })
        .collect();
    if jobs.is_empty() {
        return Err(ScoreError::NoLabeledCitations);
    }
    jobs.into_par_iter()
        .map(|(t, i, hallucinated)| {
            Ok(ScoredCitation {
                key: CitationKey { report_id: t.report_id.clone(), ordinal: i },
                hallucinated,
                scores: score_citation(&t.citations[i], t)?,
            })
        })
        .collect()
}

/// One exported value: `head` is -1 for layer-level scores, and both
/// `layer` and `head` are -1 for confidence scalars.
#[derive(Debug, Clone, Serialize)]
pub struct ScoreRow {
    pub report_id: String,
    pub ordinal: usize,
    pub label: &'static str,
    pub score: String,
    pub layer: i64,
    pub head: i64,
    pub value: f64,
    pub flag: bool,
}

pub fn score_rows<T: Scalar>(rows: &[ScoredCitation<T>]) -> Vec<ScoreRow> {
    let mut out = Vec::new();
    for r in rows {
        let label = if r.hallucinated { "hallucinated" } else { "correct" };
        let mut push = |score: &str, layer: i64, head: i64, value: T, flag: bool| {
            out.push(ScoreRow {
                report_id: r.key.report_id.clone(),
                ordinal: r.key.ordinal,
                label,
                score: score.to_string(),
                layer,
                head,
                value: to_f64(value),
                flag,
            })
        };
        let s = &r.scores;
        for kind in ScoreKind::ALL {
            if let Some(m) = s.head(kind) {
                for ((l, h), &v) in m.indexed_iter() {
                    let flag = s.degenerate.contains(&DegenerateFlag { score: kind, layer: l, head: Some(h) });
                    push(kind.name(), l as i64, h as i64, v, flag);
                }
            } else if let Some(v) = s.layer(kind) {
                for (l, &x) in v.iter().enumerate() {
                    let flag = s.degenerate.contains(&DegenerateFlag { score: kind, layer: l, head: None });
                    push(kind.name(), l as i64, -1, x, flag);
                }
            }
        }
        let c = &s.confidence;
        push("perplexity", -1, -1, c.perplexity, false);
        push("ln_entropy", -1, -1, c.ln_entropy, false);
        push("energy", -1, -1, c.energy, false);
        if let Some(p) = c.p_true {
            push("p_true", -1, -1, p, false);
        }
    }
    out
}

pub fn write_scores_csv<T: Scalar>(path: &Path, rows: &[ScoredCitation<T>], header: &[String]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for line in header {
        writeln!(f, "# {line}")?;
    }
    writeln!(f, "# positive class: hallucinated")?;
    writeln!(f, "report_id,ordinal,label,score,layer,head,value,flag")?;
    for r in score_rows(rows) {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{}",
            r.report_id, r.ordinal, r.label, r.score, r.layer, r.head, r.value, r.flag as u8
        )?;
    }
    f.flush()
}

/// Writes `{"header": [...], "rows": [...]}`.
pub fn write_scores_json<T: Scalar>(path: &Path, rows: &[ScoredCitation<T>], header: &[String]) -> std::io::Result<()> {
    let out = serde_json::json!({ "header": header, "rows": score_rows(rows) });
    let text = serde_json::to_string(&out).map_err(std::io::Error::other)?;
    std::fs::write(path, text + "\n")
}

/// Convenience used by tests and the oracle: `lit` re-exported for kernels' callers.
#[doc(hidden)]
pub fn scalar<T: Scalar>(x: f64) -> T {
    lit(x)
}
