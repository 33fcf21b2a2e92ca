// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod classify;
pub mod cli;
pub mod features;
pub mod ftrc;
pub mod manifest;
pub mod numeric;
pub mod oracle;
pub mod scores;
pub mod signatures;
pub mod stats;
pub mod trace;

pub use numeric::Scalar;

/// Traces as stored on disk.
pub type Trace = trace::ReportTrace<f32>;
/// Traces as scored.
pub type TraceF64 = trace::ReportTrace<f64>;
pub type Scores = scores::ScoreSet<f64>;
pub type Scored = scores::ScoredCitation<f64>;
