// SPDX-License-Identifier: MIT OR Apache-2.0

//! FTRC: the on-disk format for one [`ReportTrace`].
//!
//! ```text
//! magic        4 bytes   "FTRC"
//! version      u16 LE    1
//! header_len   u32 LE
//! header       header_len bytes of UTF-8 JSON
//! blocks       blocks_total bytes (declared in the header)
//! trailer      u32 LE    CRC-32 (IEEE) of every preceding byte
//! ```
//!
//! Each block is `tag: u32, rank: u8, dims: rank x u32, payload`, where the
//! payload is row-major little-endian `f32`. Header block offsets are
//! relative to the first byte after the header. Per-citation blocks carry
//! `(ordinal + 1) << 8 | kind` as their tag; report-level blocks use the
//! bare kind.

use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{
    validate_report, BaselineScalars, CitationRecord, Label, ModelGeometry, ReportTrace, TokenSpan, ValidationReport,
};

pub const MAGIC: &[u8; 4] = b"FTRC";
pub const VERSION: u16 = 1;
const PREAMBLE_LEN: usize = 4 + 2 + 4;
const TRAILER_LEN: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FtrcErrorKind {
    Io,
    BadMagic,
    UnsupportedVersion,
    Truncated,
    CrcMismatch,
    Header,
    DimsMismatch,
    OffsetMismatch,
    Layout,
    NonFinite,
    Invalid,
}

#[derive(Debug, Error)]
pub enum FtrcError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("bad magic {0:?}, expected \"FTRC\"")]
    BadMagic([u8; 4]),
    #[error("unsupported FTRC version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated file: need {needed} bytes, have {available}")]
    Truncated { needed: u64, available: u64 },
    #[error("CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("block {block}: dims {dims:?} imply {implied} payload bytes, header declares {declared}")]
    DimsMismatch { block: String, dims: Vec<u32>, implied: u64, declared: u64 },
    #[error("block {block}: expected tag {expected:#x} at offset {offset}, found {found:#x}")]
    OffsetMismatch { block: String, offset: u64, expected: u32, found: u32 },
    #[error("layout error: {0}")]
    Layout(String),
    #[error("refusing to write non-finite value in block {block}")]
    NonFinite { block: String },
    #[error("trace fails validation:\n{0}")]
    Invalid(ValidationReport),
}

impl FtrcError {
    pub fn kind(&self) -> FtrcErrorKind {
        match self {
            FtrcError::Io { .. } => FtrcErrorKind::Io,
            FtrcError::BadMagic(_) => FtrcErrorKind::BadMagic,
            FtrcError::UnsupportedVersion(_) => FtrcErrorKind::UnsupportedVersion,
            FtrcError::Truncated { .. } => FtrcErrorKind::Truncated,
            FtrcError::CrcMismatch { .. } => FtrcErrorKind::CrcMismatch,
            FtrcError::Header(_) => FtrcErrorKind::Header,
            FtrcError::DimsMismatch { .. } => FtrcErrorKind::DimsMismatch,
            FtrcError::OffsetMismatch { .. } => FtrcErrorKind::OffsetMismatch,
            FtrcError::Layout(_) => FtrcErrorKind::Layout,
            FtrcError::NonFinite { .. } => FtrcErrorKind::NonFinite,
            FtrcError::Invalid(_) => FtrcErrorKind::Invalid,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
enum BlockKind {
    PromptFinalHidden = 1,
    SinkFinalHidden = 2,
    AttnPrompt = 3,
    AttnSink = 4,
    TokenFinalHidden = 5,
    XInput = 6,
    XPreFfn = 7,
    XPostFfn = 8,
    Baselines = 9,
    LogitLens = 10,
}

impl BlockKind {
    fn name(self) -> &'static str {
        match self {
            BlockKind::PromptFinalHidden => "prompt_final_hidden",
            BlockKind::SinkFinalHidden => "sink_final_hidden",
            BlockKind::AttnPrompt => "attn_rows",
            BlockKind::AttnSink => "attn_sink",
            BlockKind::TokenFinalHidden => "token_final_hidden",
            BlockKind::XInput => "x_input",
            BlockKind::XPreFfn => "x_pre_ffn",
            BlockKind::XPostFfn => "x_post_ffn",
            BlockKind::Baselines => "baselines",
            BlockKind::LogitLens => "logitlens_lp",
        }
    }

    fn tag(self, citation: Option<usize>) -> u32 {
        let ord = citation.map_or(0, |c| c as u32 + 1);
        (ord << 8) | self as u32
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CitationMeta {
    citation_pos: usize,
    cited_doc_id: u32,
    label: Label,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BlockEntry {
    name: String,
    tag: u32,
    citation: Option<usize>,
    offset: u64,
    payload_len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    report_id: String,
    geometry: ModelGeometry,
    context_span: TokenSpan,
    prompt_span: TokenSpan,
    citation_count: usize,
    citations: Vec<CitationMeta>,
    blocks_total: u64,
    blocks: Vec<BlockEntry>,
}

struct OutBlock<'a> {
    kind: BlockKind,
    citation: Option<usize>,
    dims: Vec<u32>,
    data: Box<dyn Iterator<Item = f32> + 'a>,
    numel: usize,
}

impl<'a> OutBlock<'a> {
    fn new<D: ndarray::Dimension>(
        kind: BlockKind,
        citation: Option<usize>,
        a: &'a ndarray::ArrayBase<ndarray::OwnedRepr<f32>, D>,
    ) -> Self {
        // `iter` walks logical (row-major) order regardless of memory layout
        Self {
            kind,
            citation,
            dims: a.shape().iter().map(|&d| d as u32).collect(),
            data: Box::new(a.iter().copied()),
            numel: a.len(),
        }
    }

    fn label(&self) -> String {
        match self.citation {
            Some(c) => format!("{}[citation {c}]", self.kind.name()),
            None => self.kind.name().to_string(),
        }
    }

    fn encoded_len(&self) -> u64 {
        (4 + 1 + 4 * self.dims.len() + 4 * self.numel) as u64
    }
}

/// Serializes a trace to FTRC bytes. Refuses any non-finite value.
pub fn encode(trace: &ReportTrace<f32>) -> Result<Vec<u8>, FtrcError> {
    let mut baselines = Vec::with_capacity(trace.citations.len());
    for c in &trace.citations {
        let b = &c.baselines;
        let mut v = vec![b.token_logprob, b.dist_entropy, b.logit_logsumexp];
        v.extend(b.p_true);
        baselines.push(Array1::from(v));
    }
    let mut blocks: Vec<OutBlock<'_>> = vec![
        OutBlock::new(BlockKind::PromptFinalHidden, None, &trace.prompt_final_hidden),
        OutBlock::new(BlockKind::SinkFinalHidden, None, &trace.sink_final_hidden),
    ];
    for (ci, c) in trace.citations.iter().enumerate() {
        let some = Some(ci);
        blocks.push(OutBlock::new(BlockKind::AttnPrompt, some, &c.attn_prompt));
        blocks.push(OutBlock::new(BlockKind::AttnSink, some, &c.attn_sink));
        blocks.push(OutBlock::new(BlockKind::TokenFinalHidden, some, &c.token_final_hidden));
        blocks.push(OutBlock::new(BlockKind::XInput, some, &c.x_input));
        blocks.push(OutBlock::new(BlockKind::XPreFfn, some, &c.x_pre_ffn));
        blocks.push(OutBlock::new(BlockKind::XPostFfn, some, &c.x_post_ffn));
        blocks.push(OutBlock::new(BlockKind::Baselines, some, &baselines[ci]));
        if let Some(lens) = &c.logitlens_lp {
            blocks.push(OutBlock::new(BlockKind::LogitLens, some, lens));
        }
    }

    let mut entries = Vec::with_capacity(blocks.len());
    let mut offset = 0u64;
    for b in &blocks {
        entries.push(BlockEntry {
            name: b.label(),
            tag: b.kind.tag(b.citation),
            citation: b.citation,
            offset,
            payload_len: 4 * b.numel as u64,
        });
        offset += b.encoded_len();
    }
    let header = Header {
        report_id: trace.report_id.clone(),
        geometry: trace.geometry.clone(),
        context_span: trace.context_span,
        prompt_span: trace.prompt_span,
        citation_count: trace.citations.len(),
        citations: trace
            .citations
            .iter()
            .map(|c| CitationMeta { citation_pos: c.citation_pos, cited_doc_id: c.cited_doc_id, label: c.label })
            .collect(),
        blocks_total: offset,
        blocks: entries,
    };
    let header_bytes = serde_json::to_vec(&header).map_err(|e| FtrcError::Header(e.to_string()))?;

    let total = PREAMBLE_LEN + header_bytes.len() + offset as usize + TRAILER_LEN;
    let mut out = Vec::with_capacity(total);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for b in blocks {
        let label = b.label();
        out.extend_from_slice(&b.kind.tag(b.citation).to_le_bytes());
        out.push(b.dims.len() as u8);
        for d in &b.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in b.data {
            if !v.is_finite() {
                return Err(FtrcError::NonFinite { block: label });
            }
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    debug_assert_eq!(out.len(), total);
    Ok(out)
}

/// Writes `trace` to `path`, returning the number of bytes written.
pub fn write_report(trace: &ReportTrace<f32>, path: &Path) -> Result<u64, FtrcError> {
    let bytes = encode(trace)?;
    std::fs::write(path, &bytes).map_err(|source| FtrcError::Io { path: path.display().to_string(), source })?;
    Ok(bytes.len() as u64)
}

pub fn read_report(path: &Path) -> Result<ReportTrace<f32>, FtrcError> {
    let bytes = std::fs::read(path).map_err(|source| FtrcError::Io { path: path.display().to_string(), source })?;
    decode(&bytes)
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

fn check_crc(bytes: &[u8]) -> Result<(), FtrcError> {
    let body = &bytes[..bytes.len() - TRAILER_LEN];
    let stored = le_u32(&bytes[bytes.len() - TRAILER_LEN..]);
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(FtrcError::CrcMismatch { stored, computed });
    }
    Ok(())
}

struct RawBlock {
    dims: Vec<usize>,
    data: Vec<f32>,
}

/// Parses and validates FTRC bytes.
///
/// Structural checks run in a fixed order (magic, version, lengths, CRC,
/// block table) so each corruption maps to one error kind.
pub fn decode(bytes: &[u8]) -> Result<ReportTrace<f32>, FtrcError> {
    let available = bytes.len() as u64;
    if bytes.len() < 4 {
        return Err(FtrcError::Truncated { needed: PREAMBLE_LEN as u64, available });
    }
    if &bytes[..4] != MAGIC {
        return Err(FtrcError::BadMagic([bytes[0], bytes[1], bytes[2], bytes[3]]));
    }
    if bytes.len() < PREAMBLE_LEN {
        return Err(FtrcError::Truncated { needed: PREAMBLE_LEN as u64, available });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(FtrcError::UnsupportedVersion(version));
    }
    let header_len = le_u32(&bytes[6..10]) as usize;
    let header_end = PREAMBLE_LEN + header_len;
    if header_end + TRAILER_LEN > bytes.len() {
        return Err(FtrcError::Truncated { needed: (header_end + TRAILER_LEN) as u64, available });
    }
    let header: Header = match serde_json::from_slice(&bytes[PREAMBLE_LEN..header_end]) {
        Ok(h) => h,
        Err(e) => {
            // a damaged header is reported as corruption when the checksum agrees
            check_crc(bytes)?;
            return Err(FtrcError::Header(e.to_string()));
        }
    };
    let needed = header_end as u64 + header.blocks_total + TRAILER_LEN as u64;
    if available < needed {
        return Err(FtrcError::Truncated { needed, available });
    }
    if available > needed {
        check_crc(bytes)?;
        return Err(FtrcError::Layout(format!("{} trailing bytes after declared blocks", available - needed)));
    }
    check_crc(bytes)?;

    if header.citation_count != header.citations.len() {
        return Err(FtrcError::Header(format!(
            "citation_count {} but {} citation entries",
            header.citation_count,
            header.citations.len()
        )));
    }

    let region = &bytes[header_end..header_end + header.blocks_total as usize];
    let mut raw: std::collections::BTreeMap<u32, RawBlock> = std::collections::BTreeMap::new();
    for entry in &header.blocks {
        let off = entry.offset;
        if off + 5 > header.blocks_total {
            return Err(FtrcError::Truncated { needed: off + 5, available: header.blocks_total });
        }
        let pos = off as usize;
        let tag = le_u32(&region[pos..pos + 4]);
        if tag != entry.tag {
            return Err(FtrcError::OffsetMismatch { block: entry.name.clone(), offset: off, expected: entry.tag, found: tag });
        }
        let rank = region[pos + 4] as usize;
        let dims_end = pos + 5 + 4 * rank;
        if dims_end as u64 > header.blocks_total {
            return Err(FtrcError::Truncated { needed: dims_end as u64, available: header.blocks_total });
        }
        let dims: Vec<u32> = (0..rank).map(|k| le_u32(&region[pos + 5 + 4 * k..])).collect();
        let implied = dims.iter().try_fold(4u64, |acc, &d| acc.checked_mul(d as u64));
        if implied != Some(entry.payload_len) {
            return Err(FtrcError::DimsMismatch {
                block: entry.name.clone(),
                dims,
                implied: implied.unwrap_or(u64::MAX),
                declared: entry.payload_len,
            });
        }
        // bound the allocation by what the header actually declares
        let payload_end = dims_end as u64 + entry.payload_len;
        if payload_end > header.blocks_total {
            return Err(FtrcError::Truncated { needed: payload_end, available: header.blocks_total });
        }
        let payload = &region[dims_end..payload_end as usize];
        let data: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        if raw.insert(entry.tag, RawBlock { dims: dims.iter().map(|&d| d as usize).collect(), data }).is_some() {
            return Err(FtrcError::Layout(format!("duplicate block {}", entry.name)));
        }
    }

    let trace = assemble(header, raw)?;
    let report = validate_report(&trace);
    if !report.is_valid() {
        return Err(FtrcError::Invalid(report));
    }
    Ok(trace)
}

fn take(
    raw: &mut std::collections::BTreeMap<u32, RawBlock>,
    kind: BlockKind,
    citation: Option<usize>,
    rank: usize,
) -> Result<Option<RawBlock>, FtrcError> {
    let Some(b) = raw.remove(&kind.tag(citation)) else { return Ok(None) };
    if b.dims.len() != rank {
        return Err(FtrcError::Layout(format!(
            "block {} has rank {}, expected {rank}",
            kind.name(),
            b.dims.len()
        )));
    }
    Ok(Some(b))
}

fn require(
    raw: &mut std::collections::BTreeMap<u32, RawBlock>,
    kind: BlockKind,
    citation: Option<usize>,
    rank: usize,
) -> Result<RawBlock, FtrcError> {
    take(raw, kind, citation, rank)?.ok_or_else(|| match citation {
        Some(c) => FtrcError::Layout(format!("missing block {} for citation {c}", kind.name())),
        None => FtrcError::Layout(format!("missing block {}", kind.name())),
    })
}

fn arr1(b: RawBlock) -> Array1<f32> {
    Array1::from(b.data)
}

fn arr2(b: RawBlock) -> Array2<f32> {
    Array2::from_shape_vec((b.dims[0], b.dims[1]), b.data).expect("dims checked against payload")
}

fn arr3(b: RawBlock) -> Array3<f32> {
    Array3::from_shape_vec((b.dims[0], b.dims[1], b.dims[2]), b.data).expect("dims checked against payload")
}

fn assemble(header: Header, mut raw: std::collections::BTreeMap<u32, RawBlock>) -> Result<ReportTrace<f32>, FtrcError> {
    let prompt_final_hidden = arr2(require(&mut raw, BlockKind::PromptFinalHidden, None, 2)?);
    let sink_final_hidden = arr1(require(&mut raw, BlockKind::SinkFinalHidden, None, 1)?);
    let mut citations = Vec::with_capacity(header.citations.len());
    for (ci, meta) in header.citations.iter().enumerate() {
        let c = Some(ci);
        let baselines = require(&mut raw, BlockKind::Baselines, c, 1)?.data;
        if !(3..=4).contains(&baselines.len()) {
            return Err(FtrcError::Layout(format!("baselines block of citation {ci} has {} values", baselines.len())));
        }
        citations.push(CitationRecord {
            citation_pos: meta.citation_pos,
            cited_doc_id: meta.cited_doc_id,
            label: meta.label,
            attn_prompt: arr3(require(&mut raw, BlockKind::AttnPrompt, c, 3)?),
            attn_sink: arr2(require(&mut raw, BlockKind::AttnSink, c, 2)?),
            token_final_hidden: arr1(require(&mut raw, BlockKind::TokenFinalHidden, c, 1)?),
            x_input: arr2(require(&mut raw, BlockKind::XInput, c, 2)?),
            x_pre_ffn: arr2(require(&mut raw, BlockKind::XPreFfn, c, 2)?),
            x_post_ffn: arr2(require(&mut raw, BlockKind::XPostFfn, c, 2)?),
            baselines: BaselineScalars {
                token_logprob: baselines[0],
                dist_entropy: baselines[1],
                logit_logsumexp: baselines[2],
                p_true: baselines.get(3).copied(),
            },
            logitlens_lp: take(&mut raw, BlockKind::LogitLens, c, 2)?.map(arr2),
        });
    }
    if let Some(tag) = raw.keys().next() {
        return Err(FtrcError::Layout(format!("unexpected block with tag {tag:#x}")));
    }
    Ok(ReportTrace {
        report_id: header.report_id,
        geometry: header.geometry,
        context_span: header.context_span,
        prompt_span: header.prompt_span,
        prompt_final_hidden,
        sink_final_hidden,
        citations,
    })
}
