//! Boundary-aware sequence packing: splits a document stream into fixed-length
//! training sequences, records provenance, and builds the attention masks that
//! keep (or deliberately do not keep) documents independent.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{EOD_ID, MASK_ID, PAD_ID, VOCAB_SIZE};

/// A tokenized source document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub tokens: Vec<u32>,
}

/// How documents are joined into fixed-length sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PackStrategy {
    /// Concatenate documents directly; attention spans the whole sequence.
    Direct,
    /// Insert an end-of-document token after every document; attention still
    /// spans the whole sequence but boundaries are marked in-band.
    Eod,
    /// Concatenate directly but attend block-diagonally per document fragment.
    #[default]
    Adaptive,
}

impl PackStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            PackStrategy::Direct => "direct",
            PackStrategy::Eod => "eod",
            PackStrategy::Adaptive => "adaptive",
        }
    }
}

impl std::fmt::Display for PackStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PackStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(PackStrategy::Direct),
            "eod" => Ok(PackStrategy::Eod),
            "adaptive" => Ok(PackStrategy::Adaptive),
            other => Err(Error::config(format!(
                "unknown pack strategy {other:?} (expected direct, eod, or adaptive)"
            ))),
        }
    }
}

/// Where a run of packed tokens came from: `tokens[dest_start ..]` holds
/// `source[source_start .. source_end]` of document `doc_id`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceSpan {
    pub doc_id: String,
    pub source_start: usize,
    pub source_end: usize,
    pub dest_start: usize,
}

impl ProvenanceSpan {
    pub fn len(&self) -> usize {
        self.source_end - self.source_start
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One fixed-length packed training sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedSequence {
    pub tokens: Vec<u32>,
    /// Fragment index per position: starts at 0, increments each time a new
    /// document fragment begins. End-of-document tokens share the segment of
    /// the fragment they terminate.
    pub segment_ids: Vec<u32>,
    pub strategy: PackStrategy,
    /// Ordered, disjoint spans covering every non-separator position.
    pub provenance: Vec<ProvenanceSpan>,
}

impl PackedSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// The attention-mask shape this sequence should be trained with.
    pub fn mask_spec(&self) -> MaskSpec {
        match self.strategy {
            PackStrategy::Adaptive => MaskSpec::SegmentBlockDiagonal(self.segment_ids.clone()),
            PackStrategy::Direct | PackStrategy::Eod => MaskSpec::FullBidirectional,
        }
    }
}

fn validate_doc(doc: &Document, strategy: PackStrategy) -> Result<()> {
    if doc.tokens.is_empty() {
        return Err(Error::input(format!("document {:?} is empty", doc.doc_id)));
    }
    for (i, &t) in doc.tokens.iter().enumerate() {
        if t as usize >= VOCAB_SIZE {
            return Err(Error::input(format!(
                "document {:?} token {i} has id {t} outside the vocabulary",
                doc.doc_id
            )));
        }
        if t == MASK_ID || t == PAD_ID {
            return Err(Error::input(format!(
                "document {:?} token {i} is the reserved {} id",
                doc.doc_id,
                if t == MASK_ID { "mask" } else { "pad" }
            )));
        }
        if t == EOD_ID && strategy == PackStrategy::Eod {
            return Err(Error::input(format!(
                "document {:?} token {i} is the end-of-document id, which the \
                 eod strategy inserts itself",
                doc.doc_id
            )));
        }
    }
    Ok(())
}

struct SeqBuilder {
    target_len: usize,
    tokens: Vec<u32>,
    segment_ids: Vec<u32>,
    provenance: Vec<ProvenanceSpan>,
    next_segment: u32,
}

impl SeqBuilder {
    fn new(target_len: usize) -> Self {
        SeqBuilder {
            target_len,
            tokens: Vec::with_capacity(target_len),
            segment_ids: Vec::with_capacity(target_len),
            provenance: Vec::new(),
            next_segment: 0,
        }
    }

    fn room(&self) -> usize {
        self.target_len - self.tokens.len()
    }

    /// Append `take` tokens of the virtual document (source tokens followed by
    /// an optional separator) starting at virtual offset `vstart`, as one new
    /// segment.
    fn push_chunk(&mut self, doc: &Document, vstart: usize, take: usize) {
        debug_assert!(take > 0 && take <= self.room());
        let seg = self.next_segment;
        self.next_segment += 1;
        let dest_start = self.tokens.len();
        let real_len = doc.tokens.len();
        for v in vstart..vstart + take {
            self.tokens.push(if v < real_len { doc.tokens[v] } else { EOD_ID });
            self.segment_ids.push(seg);
        }
        let source_end = (vstart + take).min(real_len);
        if source_end > vstart {
            self.provenance.push(ProvenanceSpan {
                doc_id: doc.doc_id.clone(),
                source_start: vstart,
                source_end,
                dest_start,
            });
        }
    }

    fn full(&self) -> bool {
        self.tokens.len() == self.target_len
    }

    fn finish(self, strategy: PackStrategy) -> PackedSequence {
        PackedSequence {
            tokens: self.tokens,
            segment_ids: self.segment_ids,
            strategy,
            provenance: self.provenance,
        }
    }
}

/// Pack a document stream into sequences of exactly `target_len` tokens.
///
/// Documents are concatenated in order and split wherever a sequence boundary
/// falls (split-and-carry); the final underfull sequence, if any, is dropped.
/// Under the `eod` strategy each document is extended by one end-of-document
/// token before chunking.
pub fn pack(
    docs: &[Document],
    target_len: usize,
    strategy: PackStrategy,
) -> Result<Vec<PackedSequence>> {
    if target_len < 2 {
        return Err(Error::config(format!(
            "target_len must be at least 2, got {target_len}"
        )));
    }
    if docs.is_empty() {
        return Err(Error::input("empty corpus: nothing to pack"));
    }
    let separator = if strategy == PackStrategy::Eod { 1 } else { 0 };

    let mut out = Vec::new();
    let mut cur = SeqBuilder::new(target_len);
    for doc in docs {
        validate_doc(doc, strategy)?;
        let virtual_len = doc.tokens.len() + separator;
        let mut v = 0;
        while v < virtual_len {
            let take = (virtual_len - v).min(cur.room());
            cur.push_chunk(doc, v, take);
            v += take;
            if cur.full() {
                out.push(cur.finish(strategy));
                cur = SeqBuilder::new(target_len);
            }
        }
    }
    // Underfull trailer is dropped: every emitted sequence is exactly full.
    Ok(out)
}

/// Recover `(doc_id, fragment)` pairs from a packed sequence, verifying the
/// provenance is well formed and covers every non-separator position.
pub fn unpack(seq: &PackedSequence) -> Result<Vec<(String, Vec<u32>)>> {
    let len = seq.tokens.len();
    if seq.segment_ids.len() != len {
        return Err(Error::format(format!(
            "segment_ids length {} does not match tokens length {len}",
            seq.segment_ids.len()
        )));
    }
    let mut covered = vec![false; len];
    let mut fragments = Vec::with_capacity(seq.provenance.len());
    let mut prev_end = 0;
    for span in &seq.provenance {
        if span.source_end <= span.source_start {
            return Err(Error::format(format!(
                "provenance span for {:?} is empty or inverted",
                span.doc_id
            )));
        }
        let n = span.len();
        if span.dest_start < prev_end || span.dest_start + n > len {
            return Err(Error::format(format!(
                "provenance span for {:?} at dest {} overlaps or exceeds the sequence",
                span.doc_id, span.dest_start
            )));
        }
        for c in &mut covered[span.dest_start..span.dest_start + n] {
            *c = true;
        }
        prev_end = span.dest_start + n;
        fragments.push((
            span.doc_id.clone(),
            seq.tokens[span.dest_start..span.dest_start + n].to_vec(),
        ));
    }
    for (i, c) in covered.iter().enumerate() {
        if !c && seq.tokens[i] != EOD_ID {
            return Err(Error::format(format!(
                "position {i} (token {}) is neither covered by provenance nor a separator",
                seq.tokens[i]
            )));
        }
    }
    Ok(fragments)
}

/// Declarative attention-mask shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskSpec {
    /// Position `i` attends to `j <= i`.
    Causal,
    /// Every position attends to every position.
    FullBidirectional,
    /// Position `i` attends to `j` iff they share a segment id.
    SegmentBlockDiagonal(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum MaskKind {
    Causal,
    Full,
    /// Disjoint `[start, end)` extents with full attention inside each.
    Blocks(Vec<(usize, usize)>),
}

/// Realized mask: per-row allowed column ranges.
///
/// All three shapes give every row one contiguous allowed range, which is what
/// lets the attention kernel stay dense per block and makes cross-segment
/// independence exact rather than approximate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    len: usize,
    kind: MaskKind,
    rows: Vec<(u32, u32)>,
}

impl AttentionMask {
    pub fn len(&self) -> usize {
        self.len
    }
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// May position `i` attend to position `j`?
    #[inline]
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        let (s, e) = self.rows[i];
        (j as u32) >= s && (j as u32) < e
    }

    /// Contiguous `[start, end)` of columns row `i` may attend to.
    #[inline]
    pub fn row_range(&self, i: usize) -> (usize, usize) {
        let (s, e) = self.rows[i];
        (s as usize, e as usize)
    }

    /// For full/block-diagonal masks: the disjoint position blocks, each with
    /// unrestricted attention inside. `None` for causal masks.
    pub fn blocks(&self) -> Option<&[(usize, usize)]> {
        match &self.kind {
            MaskKind::Blocks(b) => Some(b),
            MaskKind::Full => None,
            MaskKind::Causal => None,
        }
    }

    /// True when every position may attend to every position.
    pub fn is_full(&self) -> bool {
        matches!(self.kind, MaskKind::Full)
    }

    pub fn is_causal(&self) -> bool {
        matches!(self.kind, MaskKind::Causal)
    }

    /// Fraction of allowed (query, key) pairs, computed exactly in integer
    /// arithmetic before the final division.
    pub fn density(&self) -> f64 {
        let allowed: u128 = self
            .rows
            .iter()
            .map(|&(s, e)| (e - s) as u128)
            .sum();
        allowed as f64 / (self.len as u128 * self.len as u128) as f64
    }

    /// Dense boolean matrix (row-major), for tests and small inspections.
    pub fn to_dense(&self) -> Vec<bool> {
        let mut m = vec![false; self.len * self.len];
        for i in 0..self.len {
            let (s, e) = self.row_range(i);
            for j in s..e {
                m[i * self.len + j] = true;
            }
        }
        m
    }
}

/// Segment ids must be in canonical run form: start at 0, each step either
/// repeats or increments by one.
fn segment_runs(ids: &[u32]) -> Result<Vec<(usize, usize)>> {
    if ids[0] != 0 {
        return Err(Error::input(format!(
            "segment ids must start at 0, got {}",
            ids[0]
        )));
    }
    let mut runs = Vec::new();
    let mut start = 0;
    for i in 1..ids.len() {
        if ids[i] == ids[i - 1] {
            continue;
        }
        if ids[i] != ids[i - 1] + 1 {
            return Err(Error::input(format!(
                "segment ids must increase by 1 between runs, got {} after {}",
                ids[i],
                ids[i - 1]
            )));
        }
        runs.push((start, i));
        start = i;
    }
    runs.push((start, ids.len()));
    Ok(runs)
}

/// Materialize an [`AttentionMask`] for a sequence of `len` positions.
pub fn build_mask(spec: &MaskSpec, len: usize) -> Result<AttentionMask> {
    if len == 0 {
        return Err(Error::input("cannot build a mask for an empty sequence"));
    }
    match spec {
        MaskSpec::Causal => Ok(AttentionMask {
            len,
            kind: MaskKind::Causal,
            rows: (0..len).map(|i| (0, i as u32 + 1)).collect(),
        }),
        MaskSpec::FullBidirectional => Ok(AttentionMask {
            len,
            kind: MaskKind::Full,
            rows: vec![(0, len as u32); len],
        }),
        MaskSpec::SegmentBlockDiagonal(ids) => {
            if ids.len() != len {
                return Err(Error::input(format!(
                    "segment id list has length {}, expected {len}",
                    ids.len()
                )));
            }
            let runs = segment_runs(ids)?;
            let mut rows = vec![(0u32, 0u32); len];
            for &(s, e) in &runs {
                for r in &mut rows[s..e] {
                    *r = (s as u32, e as u32);
                }
            }
            Ok(AttentionMask {
                len,
                kind: MaskKind::Blocks(runs),
                rows,
            })
        }
    }
}

/// Density of a mask shape without materializing it.
pub fn mask_density(spec: &MaskSpec, len: usize) -> Result<f64> {
    Ok(build_mask(spec, len)?.density())
}
