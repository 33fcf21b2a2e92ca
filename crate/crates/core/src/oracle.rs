// SPDX-License-Identifier: MIT OR Apache-2.0

//! Ground truth at desk scale.
//!
//! * [`ToyTransformerWeights`] / [`toy_forward_trace`]: a seeded pre-norm
//!   decoder whose forward pass emits real traces.
//! * [`naive_scores`]: every score recomputed with plain scalar loops.
//! * [`random_trace`]: structurally valid traces with random contents,
//!   including degenerate rows, for range sweeps.
//! * [`synth_dataset`]: labeled toy datasets with class-conditional shifts
//!   planted in chosen scores.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{s, Array1, Array2, Array3, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::{lit, to_f64, Scalar};
use crate::scores::{compute_bas, compute_pfs, Confidence, DegenerateFlag, ScoreKind, ScoreSet};
use crate::trace::{
    BaselineScalars, CitationRecord, Label, LabelEntry, LabelFile, ModelGeometry, ReportTrace, TokenSpan, Verdict,
};

/// Sequence-initial token; position 0 always holds it.
pub const BOS_TOKEN: usize = 0;
pub const YES_TOKEN: usize = 1;
pub const NO_TOKEN: usize = 2;
/// Citation digit tokens `[1]`..`[10]` occupy ids `3..13`.
pub const FIRST_DIGIT_TOKEN: usize = 3;
pub const NUM_DIGIT_TOKENS: usize = 10;
const FIRST_ORDINARY_TOKEN: usize = FIRST_DIGIT_TOKEN + NUM_DIGIT_TOKENS;
const NORM_EPS: f64 = 1e-6;
/// Smallest fraction of an FFN update's norm that planting may leave.
const PFS_FLOOR: f64 = 0.01;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("geometry: {0}")]
    Geometry(String),
    #[error("citation positions: {0}")]
    Position(String),
    #[error("planted spec: {0}")]
    Spec(String),
    #[error("shift cannot preserve trace invariants: {0}; try a smaller shift")]
    Shift(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self { num_layers: 4, num_heads: 2, hidden_dim: 16, vocab_size: 64 }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<(), OracleError> {
        if self.num_layers == 0 || self.num_heads == 0 || self.hidden_dim == 0 {
            return Err(OracleError::Geometry(format!("all dimensions must be positive: {self:?}")));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(OracleError::Geometry(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.vocab_size <= FIRST_ORDINARY_TOKEN {
            return Err(OracleError::Geometry(format!("vocab_size must exceed {FIRST_ORDINARY_TOKEN}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyLayer<T> {
    pub attn_gain: Array1<T>,
    pub w_q: Array2<T>,
    pub w_k: Array2<T>,
    pub w_v: Array2<T>,
    pub w_o: Array2<T>,
    pub ffn_gain: Array1<T>,
    /// `[d, 4d]`
    pub w_in: Array2<T>,
    /// `[4d, d]`
    pub w_out: Array2<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTransformerWeights<T> {
    pub config: ToyConfig,
    /// `[V, d]`
    pub embedding: Array2<T>,
    pub layers: Vec<ToyLayer<T>>,
    pub final_gain: Array1<T>,
    /// `[d, V]`
    pub unembedding: Array2<T>,
}

fn normal_matrix<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        lit(z * std)
    })
}

fn gain_vector<T: Scalar>(rng: &mut ChaCha8Rng, d: usize) -> Array1<T> {
    Array1::from_shape_simple_fn(d, || {
        let z: f64 = StandardNormal.sample(rng);
        lit(1.0 + 0.1 * z)
    })
}

impl<T: Scalar> ToyTransformerWeights<T> {
    /// Seeded random weights. Panics if `config` is invalid.
    pub fn random(config: &ToyConfig, seed: u64) -> Self {
        Self::try_random(config, seed).expect("valid toy config")
    }

    pub fn try_random(config: &ToyConfig, seed: u64) -> Result<Self, OracleError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden_dim;
        let ff = 4 * d;
        let sd = 1.0 / (d as f64).sqrt();
        let embedding = normal_matrix(&mut rng, config.vocab_size, d, 1.0);
        let layers = (0..config.num_layers)
            .map(|_| ToyLayer {
                attn_gain: gain_vector(&mut rng, d),
                w_q: normal_matrix(&mut rng, d, d, sd),
                w_k: normal_matrix(&mut rng, d, d, sd),
                w_v: normal_matrix(&mut rng, d, d, sd),
                w_o: normal_matrix(&mut rng, d, d, sd),
                ffn_gain: gain_vector(&mut rng, d),
                w_in: normal_matrix(&mut rng, d, ff, sd),
                w_out: normal_matrix(&mut rng, ff, d, 1.0 / (ff as f64).sqrt()),
            })
            .collect();
        let final_gain = gain_vector(&mut rng, d);
        let unembedding = normal_matrix(&mut rng, d, config.vocab_size, sd);
        Ok(Self { config: config.clone(), embedding, layers, final_gain, unembedding })
    }

    /// Same weights with every FFN output matrix set to zero.
    pub fn zero_ffn(mut self) -> Self {
        for layer in &mut self.layers {
            layer.w_out.fill(T::zero());
        }
        self
    }

    pub fn geometry(&self) -> ModelGeometry {
        let c = &self.config;
        ModelGeometry::new(c.num_layers, c.num_heads, c.hidden_dim, "toy-decoder")
    }

    /// Final RMS norm followed by the unembedding: logits for one residual vector.
    pub fn project(&self, x: ArrayView1<'_, T>) -> Array1<T> {
        rms_norm_row(x, &self.final_gain).dot(&self.unembedding)
    }
}

fn rms_norm_row<T: Scalar>(x: ArrayView1<'_, T>, gain: &Array1<T>) -> Array1<T> {
    let ms = x.dot(&x) / lit::<T>(x.len() as f64);
    let inv = T::one() / (ms + lit(NORM_EPS)).sqrt();
    Array1::from_shape_fn(x.len(), |k| x[k] * inv * gain[k])
}

fn rms_norm<T: Scalar>(x: &Array2<T>, gain: &Array1<T>) -> Array2<T> {
    let mut out = Array2::zeros(x.raw_dim());
    for (i, row) in x.outer_iter().enumerate() {
        out.row_mut(i).assign(&rms_norm_row(row, gain));
    }
    out
}

fn gelu<T: Scalar>(x: T) -> T {
    let c: T = lit((2.0 / std::f64::consts::PI).sqrt());
    lit::<T>(0.5) * x * (T::one() + (c * (x + lit::<T>(0.044715) * x * x * x)).tanh())
}

fn log_softmax<T: Scalar>(logits: ArrayView1<'_, T>) -> (Array1<T>, T) {
    let m = logits.fold(T::neg_infinity(), |a, &b| a.max(b));
    let lse = m + logits.mapv(|z| (z - m).exp()).sum().ln();
    (logits.mapv(|z| z - lse), lse)
}

fn sinusoidal_positions<T: Scalar>(seq: usize, d: usize) -> Array2<T> {
    Array2::from_shape_fn((seq, d), |(p, k)| {
        let rate = 10000f64.powf((2 * (k / 2)) as f64 / d as f64);
        let angle = p as f64 / rate;
        lit(if k % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Everything a toy forward pass produced, beyond the trace itself.
#[derive(Debug, Clone)]
pub struct ToyRun<T> {
    pub trace: ReportTrace<T>,
    pub tokens: Vec<usize>,
    /// Per layer, `[H, seq, seq]` causal attention probabilities.
    pub attention: Vec<Array3<T>>,
}

/// Prompt layout for a given prompt length (sink included): instruction,
/// context, then query spans.
pub fn prompt_layout(prompt_length: usize) -> Result<(TokenSpan, TokenSpan), OracleError> {
    if prompt_length < 4 {
        return Err(OracleError::Position(format!("prompt_length {prompt_length} leaves no room for a context span")));
    }
    let n = prompt_length - 1;
    let side = (n / 6).max(1);
    Ok((TokenSpan::new(1 + side, prompt_length - side), TokenSpan::new(1, prompt_length)))
}

/// Runs the toy decoder over a seeded token sequence and captures a trace
/// for each citation position.
///
/// Position 0 is the sink, positions `1..prompt_length` form the prompt and
/// every citation position must lie at or after `prompt_length`.
pub fn toy_forward_trace<T: Scalar>(
    weights: &ToyTransformerWeights<T>,
    prompt_length: usize,
    citation_positions: &[usize],
    seed: u64,
) -> Result<ToyRun<T>, OracleError> {
    let cfg = &weights.config;
    cfg.validate()?;
    let (context_span, prompt_span) = prompt_layout(prompt_length)?;
    let distinct: BTreeSet<usize> = citation_positions.iter().copied().collect();
    if distinct.len() != citation_positions.len() {
        return Err(OracleError::Position("duplicate citation position".into()));
    }
    if let Some(&p) = citation_positions.iter().find(|&&p| p < prompt_length) {
        return Err(OracleError::Position(format!("citation at {p} falls inside the prompt (length {prompt_length})")));
    }
    let seq = citation_positions.iter().max().map_or(prompt_length, |&m| m + 1);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tokens: Vec<usize> = (0..seq).map(|_| rng.random_range(FIRST_ORDINARY_TOKEN..cfg.vocab_size)).collect();
    tokens[0] = BOS_TOKEN;
    let mut doc_ids = Vec::with_capacity(citation_positions.len());
    for &p in citation_positions {
        let doc = rng.random_range(0..NUM_DIGIT_TOKENS);
        tokens[p] = FIRST_DIGIT_TOKEN + doc;
        doc_ids.push(doc as u32 + 1);
    }

    let (l_n, h_n, d) = (cfg.num_layers, cfg.num_heads, cfg.hidden_dim);
    let dh = d / h_n;
    let scale: T = lit(1.0 / (dh as f64).sqrt());
    let mut x = sinusoidal_positions::<T>(seq, d);
    for (p, &tok) in tokens.iter().enumerate() {
        let mut row = x.row_mut(p);
        row += &weights.embedding.row(tok);
    }

    let mut x_input = Vec::with_capacity(l_n);
    let mut x_pre = Vec::with_capacity(l_n);
    let mut x_post = Vec::with_capacity(l_n);
    let mut attention = Vec::with_capacity(l_n);
    for layer in &weights.layers {
        x_input.push(x.clone());
        let a = rms_norm(&x, &layer.attn_gain);
        let (q, k, v) = (a.dot(&layer.w_q), a.dot(&layer.w_k), a.dot(&layer.w_v));
        let mut probs = Array3::<T>::zeros((h_n, seq, seq));
        let mut heads = Array2::<T>::zeros((seq, d));
        for h in 0..h_n {
            let cols = s![.., h * dh..(h + 1) * dh];
            let (qh, kh, vh) = (q.slice(cols), k.slice(cols), v.slice(cols));
            for i in 0..seq {
                let logits: Vec<T> = (0..=i).map(|j| qh.row(i).dot(&kh.row(j)) * scale).collect();
                let m = logits.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                let e: Vec<T> = logits.iter().map(|&z| (z - m).exp()).collect();
                let total = e.iter().fold(T::zero(), |a, &b| a + b);
                for j in 0..=i {
                    let p = e[j] / total;
                    probs[[h, i, j]] = p;
                    let mut out = heads.slice_mut(s![i, h * dh..(h + 1) * dh]);
                    out.scaled_add(p, &vh.row(j));
                }
            }
        }
        x = &x + &heads.dot(&layer.w_o);
        x_pre.push(x.clone());
        let f = rms_norm(&x, &layer.ffn_gain);
        let hidden = f.dot(&layer.w_in).mapv(gelu);
        x = &x + &hidden.dot(&layer.w_out);
        x_post.push(x.clone());
        attention.push(probs);
    }
    let final_hidden = rms_norm(&x, &weights.final_gain);
    let logits = final_hidden.dot(&weights.unembedding);

    let n_prompt = prompt_span.len();
    let mut citations = Vec::with_capacity(citation_positions.len());
    for (&pos, &doc) in citation_positions.iter().zip(&doc_ids) {
        let tok = tokens[pos];
        let capture = |snaps: &[Array2<T>]| Array2::from_shape_fn((l_n, d), |(l, k)| snaps[l][[pos, k]]);
        let x_in_c = capture(&x_input);
        let x_pre_c = capture(&x_pre);
        let x_post_c = capture(&x_post);
        let lens = Array2::from_shape_fn((l_n, 2), |(l, which)| {
            let snap = if which == 0 { x_pre_c.row(l) } else { x_post_c.row(l) };
            log_softmax(weights.project(snap).view()).0[tok]
        });
        let (prev_lp, prev_lse) = log_softmax(logits.row(pos - 1));
        let entropy = prev_lp.iter().fold(T::zero(), |acc, &lp| acc - lp.exp() * lp);
        let yes_no = logits[[pos, YES_TOKEN]] - logits[[pos, NO_TOKEN]];
        citations.push(CitationRecord {
            citation_pos: pos,
            cited_doc_id: doc,
            label: Label::Unlabeled,
            attn_prompt: Array3::from_shape_fn((l_n, h_n, n_prompt), |(l, h, j)| {
                attention[l][[h, pos, prompt_span.start + j]]
            }),
            attn_sink: Array2::from_shape_fn((l_n, h_n), |(l, h)| attention[l][[h, pos, 0]]),
            token_final_hidden: final_hidden.row(pos).to_owned(),
            x_input: x_in_c,
            x_pre_ffn: x_pre_c,
            x_post_ffn: x_post_c,
            baselines: BaselineScalars {
                token_logprob: prev_lp[tok].min(T::zero()),
                dist_entropy: entropy.max(T::zero()),
                logit_logsumexp: prev_lse,
                p_true: Some(T::one() / (T::one() + (-yes_no).exp())),
            },
            logitlens_lp: Some(lens.mapv(|v| v.min(T::zero()))),
        });
    }

    let trace = ReportTrace {
        report_id: format!("toy-{seed}"),
        geometry: weights.geometry(),
        context_span,
        prompt_span,
        prompt_final_hidden: final_hidden.slice(s![prompt_span.start..prompt_span.end, ..]).to_owned(),
        sink_final_hidden: final_hidden.row(0).to_owned(),
        citations,
    };
    Ok(ToyRun { trace, tokens, attention })
}

/// Logit-lens log-probability of `token` for one residual vector, computed
/// in `f64` with explicit loops straight from the toy weights.
pub fn lens_logprob_naive<T: Scalar>(weights: &ToyTransformerWeights<T>, x: ArrayView1<'_, T>, token: usize) -> f64 {
    let d = x.len();
    let mut ms = 0.0;
    for k in 0..d {
        let v = to_f64(x[k]);
        ms += v * v;
    }
    let inv = 1.0 / (ms / d as f64 + NORM_EPS).sqrt();
    let vocab = weights.config.vocab_size;
    let mut logits = vec![0.0; vocab];
    for (t, logit) in logits.iter_mut().enumerate() {
        for k in 0..d {
            *logit += to_f64(x[k]) * inv * to_f64(weights.final_gain[k]) * to_f64(weights.unembedding[[k, t]]);
        }
    }
    let mut m = f64::NEG_INFINITY;
    for &z in &logits {
        m = m.max(z);
    }
    let mut total = 0.0;
    for &z in &logits {
        total += (z - m).exp();
    }
    logits[token] - m - total.ln()
}

/// Relative error of rebuilding the last residual state from the first
/// input plus every captured attention and FFN update.
pub fn residual_reconstruction_error<T: Scalar>(record: &CitationRecord<T>) -> f64 {
    let (l_n, d) = record.x_input.dim();
    if l_n == 0 {
        return 0.0;
    }
    let mut err = 0.0;
    let mut reference = 0.0;
    for k in 0..d {
        let mut acc = to_f64(record.x_input[[0, k]]);
        for l in 0..l_n {
            let v_attn = to_f64(record.x_pre_ffn[[l, k]]) - to_f64(record.x_input[[l, k]]);
            let v_ffn = to_f64(record.x_post_ffn[[l, k]]) - to_f64(record.x_pre_ffn[[l, k]]);
            acc += v_attn + v_ffn;
        }
        let last = to_f64(record.x_post_ffn[[l_n - 1, k]]);
        err += (acc - last).powi(2);
        reference += last * last;
    }
    if reference > 0.0 {
        (err / reference).sqrt()
    } else {
        err.sqrt()
    }
}

fn naive_cosine(a: &[f64], b: &[f64]) -> (f64, bool) {
    let (mut dp, mut na, mut nb) = (0.0, 0.0, 0.0);
    for k in 0..a.len() {
        dp += a[k] * b[k];
        na += a[k] * a[k];
        nb += b[k] * b[k];
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    if na < crate::numeric::NORM_EPS || nb < crate::numeric::NORM_EPS {
        (0.0, true)
    } else {
        ((dp / (na * nb)).clamp(-1.0, 1.0), false)
    }
}

/// Every score recomputed with explicit scalar loops and naive summation.
pub fn naive_scores<T: Scalar>(record: &CitationRecord<T>, report: &ReportTrace<T>) -> ScoreSet<f64> {
    let g = &report.geometry;
    let (l_n, h_n, d) = (g.num_layers, g.num_heads, g.hidden_dim);
    let n = report.n_prompt();
    let ctx_lo = report.context_span.start - report.prompt_span.start;
    let ctx_hi = ctx_lo + report.context_span.len();
    let token: Vec<f64> = (0..d).map(|k| to_f64(record.token_final_hidden[k])).collect();
    let mut degenerate = BTreeSet::new();

    let mut cas = Array2::zeros((l_n, h_n));
    let mut ecs = Array2::zeros((l_n, h_n));
    let mut bas = Array2::zeros((l_n, h_n));
    for l in 0..l_n {
        for h in 0..h_n {
            let mut ctx = vec![0.0; d];
            for j in ctx_lo..ctx_hi {
                let w = to_f64(record.attn_prompt[[l, h, j]]);
                for k in 0..d {
                    ctx[k] += w * to_f64(report.prompt_final_hidden[[j, k]]);
                }
            }
            let (c, flag) = naive_cosine(&ctx, &token);
            cas[[l, h]] = c;
            if flag {
                degenerate.insert(DegenerateFlag { score: ScoreKind::Cas, layer: l, head: Some(h) });
            }

            let sink_w = to_f64(record.attn_sink[[l, h]]);
            let mut all = vec![0.0; d];
            for k in 0..d {
                all[k] = sink_w * to_f64(report.sink_final_hidden[k]);
            }
            for j in 0..n {
                let w = to_f64(record.attn_prompt[[l, h, j]]);
                for k in 0..d {
                    all[k] += w * to_f64(report.prompt_final_hidden[[j, k]]);
                }
            }
            let (c, flag) = naive_cosine(&all, &token);
            ecs[[l, h]] = c;
            if flag {
                degenerate.insert(DegenerateFlag { score: ScoreKind::Ecs, layer: l, head: Some(h) });
            }
            bas[[l, h]] = sink_w;
        }
    }

    let mut pfs = Array1::zeros(l_n);
    let mut pas = Array1::zeros(l_n);
    for l in 0..l_n {
        let mut v_attn = vec![0.0; d];
        let mut v_ffn = vec![0.0; d];
        let mut sq = 0.0;
        for k in 0..d {
            v_attn[k] = to_f64(record.x_pre_ffn[[l, k]]) - to_f64(record.x_input[[l, k]]);
            v_ffn[k] = to_f64(record.x_post_ffn[[l, k]]) - to_f64(record.x_pre_ffn[[l, k]]);
            sq += v_ffn[k] * v_ffn[k];
        }
        pfs[l] = sq.sqrt();
        let (c, flag) = naive_cosine(&v_attn, &v_ffn);
        pas[l] = c;
        if flag {
            degenerate.insert(DegenerateFlag { score: ScoreKind::Pas, layer: l, head: None });
        }
    }

    let pks = record.logitlens_lp.as_ref().map(|lens| {
        let mut out = Array1::zeros(l_n);
        for l in 0..l_n {
            out[l] = (to_f64(lens[[l, 1]]) - to_f64(lens[[l, 0]])).abs();
        }
        out
    });
    let b = &record.baselines;
    ScoreSet {
        cas,
        bas,
        ecs,
        pfs,
        pas,
        pks,
        confidence: Confidence {
            perplexity: (-to_f64(b.token_logprob)).exp(),
            ln_entropy: to_f64(b.dist_entropy),
            energy: -to_f64(b.logit_logsumexp),
            p_true: b.p_true.map(to_f64),
        },
        degenerate,
    }
}

/// A structurally valid trace with random contents.
///
/// Roughly one entry in eight of each kind is made degenerate (zero
/// attention rows, zero hidden states, zero updates) so that guard paths are
/// exercised.
pub fn random_trace(geometry: &ModelGeometry, prompt_len: usize, n_citations: usize, seed: u64) -> ReportTrace<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (l_n, h_n, d) = (geometry.num_layers, geometry.num_heads, geometry.hidden_dim);
    let n = prompt_len.max(1);
    let ctx_start = rng.random_range(0..n);
    let ctx_end = rng.random_range(ctx_start + 1..=n);
    let gauss = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let rare = |rng: &mut ChaCha8Rng| rng.random_bool(0.125);

    let mut prompt_final_hidden = Array2::from_shape_simple_fn((n, d), || 0.0);
    for mut row in prompt_final_hidden.outer_iter_mut() {
        if !rare(&mut rng) {
            row.mapv_inplace(|_| gauss(&mut rng) * 3.0);
        }
    }
    let sink_final_hidden = Array1::from_shape_simple_fn(d, || gauss(&mut rng));

    let citations = (0..n_citations)
        .map(|c| {
            let mut attn_prompt = Array3::zeros((l_n, h_n, n));
            let mut attn_sink = Array2::zeros((l_n, h_n));
            for l in 0..l_n {
                for h in 0..h_n {
                    let budget: f64 = if rare(&mut rng) { 1.0 } else { rng.random_range(0.0..=1.0) };
                    let raw: Vec<f64> = (0..=n)
                        .map(|_| if rare(&mut rng) { 0.0 } else { -rng.random_range(1e-9f64..1.0).ln() })
                        .collect();
                    let total: f64 = raw.iter().sum();
                    if total > 0.0 {
                        attn_sink[[l, h]] = (raw[0] / total * budget).min(1.0);
                        for j in 0..n {
                            attn_prompt[[l, h, j]] = raw[j + 1] / total * budget * (1.0 - 1e-9);
                        }
                    }
                }
            }
            let mut x_input = Array2::zeros((l_n, d));
            let mut x_pre_ffn = Array2::zeros((l_n, d));
            let mut x_post_ffn = Array2::zeros((l_n, d));
            let mut state = Array1::from_shape_simple_fn(d, || gauss(&mut rng));
            for l in 0..l_n {
                x_input.row_mut(l).assign(&state);
                if !rare(&mut rng) {
                    state.mapv_inplace(|v| v + gauss(&mut rng));
                }
                x_pre_ffn.row_mut(l).assign(&state);
                if !rare(&mut rng) {
                    let s = 10f64.powf(rng.random_range(-3.0..1.0));
                    state.mapv_inplace(|v| v + s * gauss(&mut rng));
                }
                x_post_ffn.row_mut(l).assign(&state);
            }
            let token_final_hidden = if rare(&mut rng) {
                Array1::zeros(d)
            } else {
                Array1::from_shape_simple_fn(d, || gauss(&mut rng))
            };
            let logitlens_lp = (!rare(&mut rng)).then(|| Array2::from_shape_simple_fn((l_n, 2), || -rng.random_range(0.0..12.0)));
            let label = match c % 3 {
                0 => Label::Correct,
                1 => Label::Hallucinated,
                _ => Label::Unlabeled,
            };
            CitationRecord {
                citation_pos: n + 1 + 2 * c,
                cited_doc_id: 1 + c as u32 % 5,
                label,
                attn_prompt,
                attn_sink,
                token_final_hidden,
                x_input,
                x_pre_ffn,
                x_post_ffn,
                baselines: BaselineScalars {
                    token_logprob: -rng.random_range(0.0..15.0),
                    dist_entropy: rng.random_range(0.0..6.0),
                    logit_logsumexp: rng.random_range(-20.0..20.0),
                    p_true: rng.random_bool(0.5).then(|| rng.random_range(0.0..=1.0)),
                },
                logitlens_lp,
            }
        })
        .collect();

    ReportTrace {
        report_id: format!("random-{seed}"),
        geometry: geometry.clone(),
        context_span: TokenSpan::new(1 + ctx_start, 1 + ctx_end),
        prompt_span: TokenSpan::new(1, 1 + n),
        prompt_final_hidden,
        sink_final_hidden,
        citations,
    }
}

/// Recipe for a labeled synthetic dataset with planted class differences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedSpec {
    pub n_reports: usize,
    pub n_correct: usize,
    pub n_hallucinated: usize,
    /// Prompt length including the sink.
    #[serde(default = "default_prompt_length")]
    pub prompt_length: usize,
    /// Shift applied to hallucinated citations, in pooled-std units of each
    /// score entry. Only `bas` and `pfs` can be planted.
    #[serde(default)]
    pub shifts: BTreeMap<ScoreKind, f64>,
    pub seed: u64,
    #[serde(default)]
    pub model: ToyConfig,
}

fn default_prompt_length() -> usize {
    24
}

impl PlantedSpec {
    /// 40 reports, 200 + 200 citations, BAS and PFS lower by 1.5 sd for
    /// hallucinated citations.
    pub fn standard(seed: u64) -> Self {
        Self {
            n_reports: 40,
            n_correct: 200,
            n_hallucinated: 200,
            prompt_length: default_prompt_length(),
            shifts: BTreeMap::from([(ScoreKind::Bas, -1.5), (ScoreKind::Pfs, -1.5)]),
            seed,
            model: ToyConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), OracleError> {
        if self.n_correct == 0 || self.n_hallucinated == 0 {
            return Err(OracleError::Spec("need at least one citation per class".into()));
        }
        if self.n_reports == 0 {
            return Err(OracleError::Spec("n_reports must be positive".into()));
        }
        if self.n_reports > self.n_correct + self.n_hallucinated {
            return Err(OracleError::Spec("more reports than citations".into()));
        }
        for (kind, shift) in &self.shifts {
            if !matches!(kind, ScoreKind::Bas | ScoreKind::Pfs) {
                return Err(OracleError::Spec(format!("planting {kind} is not supported (use bas or pfs)")));
            }
            if !shift.is_finite() {
                return Err(OracleError::Spec(format!("shift for {kind} is not finite")));
            }
        }
        self.model.validate()
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    /// Traces with labels already attached.
    pub traces: Vec<ReportTrace<f32>>,
    pub labels: LabelFile,
}

fn pooled_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Generates toy traces, assigns labels, and plants the requested shifts
/// in hallucinated citations.
///
/// Citations are spread over reports as evenly as possible and each report
/// receives as close to equal class counts as the totals allow.
pub fn synth_dataset(spec: &PlantedSpec) -> Result<SynthDataset, OracleError> {
    spec.validate()?;
    let weights = ToyTransformerWeights::<f32>::try_random(&spec.model, spec.seed)?;
    let total = spec.n_correct + spec.n_hallucinated;
    let base = total / spec.n_reports;
    let extra = total % spec.n_reports;
    let sizes: Vec<usize> = (0..spec.n_reports).map(|r| base + usize::from(r < extra)).collect();

    // Deal labels one report at a time, alternating classes while both remain.
    let mut remaining = [spec.n_correct, spec.n_hallucinated];
    let mut turn = 0usize;
    let mut report_labels: Vec<Vec<Label>> = Vec::with_capacity(spec.n_reports);
    for &size in &sizes {
        let mut labels = Vec::with_capacity(size);
        for _ in 0..size {
            let class = if remaining[turn % 2] > 0 { turn % 2 } else { (turn + 1) % 2 };
            remaining[class] -= 1;
            labels.push(if class == 0 { Label::Correct } else { Label::Hallucinated });
            turn += 1;
        }
        report_labels.push(labels);
    }

    let runs: Vec<Result<ReportTrace<f32>, OracleError>> = (0..spec.n_reports)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(r as u64 + 1);
            let report_seed: u64 = rng.random();
            let mut next = spec.prompt_length + 1;
            let positions: Vec<usize> = (0..sizes[r])
                .map(|_| {
                    let p = next + rng.random_range(0..3);
                    next = p + 2;
                    p
                })
                .collect();
            let mut trace = toy_forward_trace(&weights, spec.prompt_length, &positions, report_seed)?.trace;
            trace.report_id = format!("report-{r:04}");
            let mut labels = report_labels[r].clone();
            // shuffle so class order within a report carries no position signal
            for i in (1..labels.len()).rev() {
                labels.swap(i, rng.random_range(0..=i));
            }
            for (c, label) in trace.citations.iter_mut().zip(labels) {
                c.label = label;
            }
            Ok(trace)
        })
        .collect();
    let mut traces = runs.into_iter().collect::<Result<Vec<_>, _>>()?;

    for (&kind, &shift) in &spec.shifts {
        if shift != 0.0 {
            match kind {
                ScoreKind::Bas => plant_bas(&mut traces, shift)?,
                ScoreKind::Pfs => plant_pfs(&mut traces, shift)?,
                _ => unreachable!("rejected by validate"),
            }
        }
    }

    let entries = traces
        .iter()
        .flat_map(|t| {
            t.citations.iter().enumerate().map(|(i, c)| LabelEntry {
                report_id: t.report_id.clone(),
                ordinal: i,
                label: if c.label == Label::Hallucinated { Verdict::Hallucinated } else { Verdict::Correct },
            })
        })
        .collect();
    Ok(SynthDataset { traces, labels: LabelFile { entries } })
}

fn plant_bas(traces: &mut [ReportTrace<f32>], shift: f64) -> Result<(), OracleError> {
    let (l_n, h_n) = (traces[0].geometry.num_layers, traces[0].geometry.num_heads);
    let mut sd = Array2::<f64>::zeros((l_n, h_n));
    for l in 0..l_n {
        for h in 0..h_n {
            let values: Vec<f64> = traces
                .iter()
                .flat_map(|t| t.citations.iter().map(|c| compute_bas(c)[[l, h]] as f64))
                .collect();
            sd[[l, h]] = pooled_std(&values);
        }
    }
    for t in traces.iter_mut() {
        for c in t.citations.iter_mut().filter(|c| c.label == Label::Hallucinated) {
            for l in 0..l_n {
                for h in 0..h_n {
                    let target = (c.attn_sink[[l, h]] as f64 + shift * sd[[l, h]]).max(0.0);
                    if target > 1.0 {
                        return Err(OracleError::Shift(format!("sink weight at layer {l}, head {h} would be {target:.3}")));
                    }
                    let mut row = c.attn_prompt.slice_mut(s![l, h, ..]);
                    let prompt_mass: f64 = row.iter().map(|&v| v as f64).sum();
                    if target + prompt_mass > 1.0 {
                        let keep = ((1.0 - target) / prompt_mass) as f32;
                        row.mapv_inplace(|v| v * keep);
                    }
                    c.attn_sink[[l, h]] = target as f32;
                }
            }
        }
    }
    Ok(())
}

fn plant_pfs(traces: &mut [ReportTrace<f32>], shift: f64) -> Result<(), OracleError> {
    let l_n = traces[0].geometry.num_layers;
    let sd: Vec<f64> = (0..l_n)
        .map(|l| {
            let values: Vec<f64> =
                traces.iter().flat_map(|t| t.citations.iter().map(|c| compute_pfs(c)[l] as f64)).collect();
            pooled_std(&values)
        })
        .collect();
    for t in traces.iter_mut() {
        for c in t.citations.iter_mut().filter(|c| c.label == Label::Hallucinated) {
            for l in 0..l_n {
                let update = c.ffn_update(l).mapv(|v| v as f64);
                let norm = update.dot(&update).sqrt();
                if norm == 0.0 {
                    return Err(OracleError::Shift(format!("FFN update at layer {l} is zero and has no direction to scale")));
                }
                // Clip at a small fraction of the original norm: the direction,
                // and with it PAS, must survive.
                let target = (norm + shift * sd[l]).max(PFS_FLOOR * norm);
                let delta = update.mapv(|v| v * (target / norm - 1.0));
                // Move this layer's post-FFN state and every later snapshot by
                // the same delta, so all other updates stay as captured.
                for later in l..l_n {
                    for (k, dv) in delta.iter().enumerate() {
                        if later > l {
                            c.x_input[[later, k]] = (c.x_input[[later, k]] as f64 + dv) as f32;
                            c.x_pre_ffn[[later, k]] = (c.x_pre_ffn[[later, k]] as f64 + dv) as f32;
                        }
                        c.x_post_ffn[[later, k]] = (c.x_post_ffn[[later, k]] as f64 + dv) as f32;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Permutes labels within each report, leaving per-report class counts
/// intact. Used for null-distribution checks.
pub fn permute_labels_within_reports<T>(traces: &mut [ReportTrace<T>], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in traces.iter_mut() {
        let mut labels: Vec<Label> = t.citations.iter().map(|c| c.label).collect();
        for i in (1..labels.len()).rev() {
            labels.swap(i, rng.random_range(0..=i));
        }
        for (c, l) in t.citations.iter_mut().zip(labels) {
            c.label = l;
        }
    }
}
