//! Corpus ingestion and the three segment tiers.
//!
//! * I1 holds teacher-sized segments (up to 2048 tokens by default) used to
//!   sample passages for question synthesis.
//! * I2 holds generator-sized segments, the unit the generator conditions on.
//! * I3 holds the chunks of every I2 segment; the retriever scores chunks and
//!   aggregates them back to their parent segment.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PgtError, Result};
use crate::tokenizer::{TextTokenizer, TokenId, WordTokenizer};

pub const INDEX_FORMAT_VERSION: u32 = 1;
pub const MIN_SEGMENT_TOKENS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SegmentId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ChunkId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tier {
    I1,
    I2,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self { id: id.into(), text: text.into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub id: SegmentId,
    pub doc_id: String,
    pub tier: Tier,
    pub token_ids: Vec<TokenId>,
    /// Byte offsets `[start, end)` into the source document.
    pub char_span: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    pub id: ChunkId,
    pub parent_segment_id: SegmentId,
    pub ordinal: u32,
    /// Position of the first token within the parent segment.
    pub offset: usize,
    pub token_ids: Vec<TokenId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryPolicy {
    Sentence,
    Paragraph,
    Hard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IndexConfig {
    pub i1_max_tokens: usize,
    pub i2_max_tokens: usize,
    pub chunk_max_tokens: usize,
    pub chunk_overlap: usize,
    pub boundary_policy: BoundaryPolicy,
    pub max_vocab: usize,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            i1_max_tokens: 2048,
            i2_max_tokens: 512,
            chunk_max_tokens: 300,
            chunk_overlap: 0,
            boundary_policy: BoundaryPolicy::Paragraph,
            max_vocab: 50_000,
        }
    }
}

/// Token stream of a document with the structural boundaries it carries.
struct Tokenized {
    ids: Vec<TokenId>,
    spans: Vec<(usize, usize)>,
    /// `true` at token `i` when a paragraph starts there.
    paragraph_start: Vec<bool>,
    /// `true` at token `i` when a sentence ends there.
    sentence_end: Vec<bool>,
}

fn tokenize_doc(tok: &WordTokenizer, text: &str) -> Tokenized {
    let enc = tok.encode_with_spans(text);
    let mut prev_end = 0;
    let mut paragraph_start = Vec::with_capacity(enc.len());
    for (i, &(_, start, _)) in enc.iter().enumerate() {
        let gap = &text[prev_end..start];
        paragraph_start.push(i == 0 || gap.matches('\n').count() >= 2);
        prev_end = enc[i].2;
    }
    Tokenized {
        sentence_end: enc.iter().map(|&(id, _, _)| tok.is_sentence_end(id)).collect(),
        ids: enc.iter().map(|e| e.0).collect(),
        spans: enc.iter().map(|e| (e.1, e.2)).collect(),
        paragraph_start,
    }
}

/// Splits `[start, end)` at positions where `is_boundary_after(i)` holds.
fn split_units(start: usize, end: usize, is_boundary_after: impl Fn(usize) -> bool) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut s = start;
    for i in start..end {
        if is_boundary_after(i) || i + 1 == end {
            out.push((s, i + 1));
            s = i + 1;
        }
    }
    out
}

fn hard_split(start: usize, end: usize, max: usize) -> Vec<(usize, usize)> {
    (start..end).step_by(max).map(|s| (s, (s + max).min(end))).collect()
}

fn sentence_units(t: &Tokenized, start: usize, end: usize, max: usize) -> Vec<(usize, usize)> {
    split_units(start, end, |i| t.sentence_end[i])
        .into_iter()
        .flat_map(|(s, e)| if e - s > max { hard_split(s, e, max) } else { vec![(s, e)] })
        .collect()
}

/// Splits a document into segments of at most `max_tokens` tokens.
///
/// Units (paragraphs or sentences) are packed greedily; a unit larger than
/// the limit falls back to sentence splitting and then to fixed windows.
/// Returned segments carry placeholder ids; [`build_indexes`] renumbers them.
pub fn segment_document(
    tok: &WordTokenizer,
    doc: &Document,
    max_tokens: usize,
    policy: BoundaryPolicy,
    tier: Tier,
) -> Result<Vec<Segment>> {
    if max_tokens < MIN_SEGMENT_TOKENS {
        return Err(PgtError::Config(format!("max_tokens must be >= {MIN_SEGMENT_TOKENS}, got {max_tokens}")));
    }
    if doc.text.split_whitespace().next().is_none() {
        return Err(PgtError::Empty(format!("document `{}`", doc.id)));
    }
    let t = tokenize_doc(tok, &doc.text);
    let n = t.ids.len();
    let units: Vec<(usize, usize)> = match policy {
        BoundaryPolicy::Hard => hard_split(0, n, max_tokens),
        BoundaryPolicy::Sentence => sentence_units(&t, 0, n, max_tokens),
        BoundaryPolicy::Paragraph => split_units(0, n, |i| i + 1 < n && t.paragraph_start[i + 1])
            .into_iter()
            .flat_map(|(s, e)| if e - s > max_tokens { sentence_units(&t, s, e, max_tokens) } else { vec![(s, e)] })
            .collect(),
    };
    let mut ranges: Vec<(usize, usize)> = Vec::new();
    for (s, e) in units {
        match ranges.last_mut() {
            Some(last) if e - last.0 <= max_tokens && policy != BoundaryPolicy::Hard => last.1 = e,
            _ => ranges.push((s, e)),
        }
    }
    Ok(ranges
        .into_iter()
        .map(|(s, e)| Segment {
            id: SegmentId(0),
            doc_id: doc.id.clone(),
            tier,
            token_ids: t.ids[s..e].to_vec(),
            char_span: (t.spans[s].0, t.spans[e - 1].1),
        })
        .collect())
}

/// Greedy fixed-size partition of a segment's tokens; consecutive chunks
/// share `overlap` tokens.
pub fn chunk_segment(seg: &Segment, chunk_max: usize, overlap: usize) -> Result<Vec<Chunk>> {
    if chunk_max < MIN_SEGMENT_TOKENS {
        return Err(PgtError::Config(format!("chunk_max must be >= {MIN_SEGMENT_TOKENS}, got {chunk_max}")));
    }
    if overlap >= chunk_max {
        return Err(PgtError::Config(format!("chunk overlap {overlap} must be smaller than chunk_max {chunk_max}")));
    }
    let n = seg.token_ids.len();
    let stride = chunk_max - overlap;
    let mut chunks = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + chunk_max).min(n);
        chunks.push(Chunk {
            id: ChunkId(0),
            parent_segment_id: seg.id,
            ordinal: chunks.len() as u32,
            offset: start,
            token_ids: seg.token_ids[start..end].to_vec(),
        });
        if end >= n {
            break;
        }
        start += stride;
    }
    Ok(chunks)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexTriplet {
    pub format_version: u32,
    pub config: IndexConfig,
    pub tokenizer: WordTokenizer,
    pub i1: Vec<Segment>,
    pub i2: Vec<Segment>,
    pub i3: Vec<Chunk>,
    pub chunk_to_segment: BTreeMap<ChunkId, SegmentId>,
    pub segment_to_chunks: BTreeMap<SegmentId, Vec<ChunkId>>,
}

/// Builds tokenizer, I1, I2 and I3 from documents in the given order.
pub fn build_indexes(docs: &[Document], cfg: &IndexConfig) -> Result<IndexTriplet> {
    if docs.is_empty() {
        return Err(PgtError::Empty("document collection".into()));
    }
    let tokenizer = WordTokenizer::build(docs.iter().map(|d| (d.id.as_str(), d.text.as_str())), cfg.max_vocab)?;
    let mut i1 = Vec::new();
    let mut i2 = Vec::new();
    let mut i3 = Vec::new();
    let mut chunk_to_segment = BTreeMap::new();
    let mut segment_to_chunks = BTreeMap::new();
    for doc in docs {
        for mut seg in segment_document(&tokenizer, doc, cfg.i1_max_tokens, cfg.boundary_policy, Tier::I1)? {
            seg.id = SegmentId(i1.len() as u32);
            i1.push(seg);
        }
        for mut seg in segment_document(&tokenizer, doc, cfg.i2_max_tokens, cfg.boundary_policy, Tier::I2)? {
            seg.id = SegmentId(i2.len() as u32);
            let mut ids = Vec::new();
            for mut chunk in chunk_segment(&seg, cfg.chunk_max_tokens, cfg.chunk_overlap)? {
                chunk.id = ChunkId(i3.len() as u32);
                chunk_to_segment.insert(chunk.id, seg.id);
                ids.push(chunk.id);
                i3.push(chunk);
            }
            segment_to_chunks.insert(seg.id, ids);
            i2.push(seg);
        }
    }
    let index = IndexTriplet {
        format_version: INDEX_FORMAT_VERSION,
        config: cfg.clone(),
        tokenizer,
        i1,
        i2,
        i3,
        chunk_to_segment,
        segment_to_chunks,
    };
    index.check_invariants()?;
    Ok(index)
}

impl IndexTriplet {
    pub fn tier(&self, tier: Tier) -> &[Segment] {
        match tier {
            Tier::I1 => &self.i1,
            Tier::I2 => &self.i2,
        }
    }

    pub fn segment(&self, tier: Tier, id: SegmentId) -> &Segment {
        &self.tier(tier)[id.0 as usize]
    }

    pub fn i2_segment(&self, id: SegmentId) -> &Segment {
        &self.i2[id.0 as usize]
    }

    pub fn chunk(&self, id: ChunkId) -> &Chunk {
        &self.i3[id.0 as usize]
    }

    pub fn chunks_of(&self, seg: SegmentId) -> &[ChunkId] {
        self.segment_to_chunks.get(&seg).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn text(&self, ids: &[TokenId]) -> String {
        self.tokenizer.decode(ids)
    }

    /// I2 segments of the same document whose byte span intersects `span`.
    pub fn i2_overlapping(&self, doc_id: &str, span: (usize, usize)) -> Vec<SegmentId> {
        self.i2
            .iter()
            .filter(|s| s.doc_id == doc_id && s.char_span.0 < span.1 && span.0 < s.char_span.1)
            .map(|s| s.id)
            .collect()
    }

    /// Size bounds and map consistency.
    pub fn check_invariants(&self) -> Result<()> {
        let bad = |m: String| Err(PgtError::InvalidInput(m));
        if let Some(s) = self.i1.iter().find(|s| s.token_ids.len() > self.config.i1_max_tokens) {
            return bad(format!("I1 segment {:?} exceeds {} tokens", s.id, self.config.i1_max_tokens));
        }
        if let Some(s) = self.i2.iter().find(|s| s.token_ids.len() > self.config.i2_max_tokens) {
            return bad(format!("I2 segment {:?} exceeds {} tokens", s.id, self.config.i2_max_tokens));
        }
        if let Some(c) = self.i3.iter().find(|c| c.token_ids.len() > self.config.chunk_max_tokens) {
            return bad(format!("chunk {:?} exceeds {} tokens", c.id, self.config.chunk_max_tokens));
        }
        for seg in &self.i2 {
            let chunks = self.chunks_of(seg.id);
            if chunks.is_empty() {
                return bad(format!("I2 segment {:?} has no chunks", seg.id));
            }
            for cid in chunks {
                if self.chunk_to_segment.get(cid) != Some(&seg.id) {
                    return bad(format!("chunk {cid:?} parent map disagrees with segment {:?}", seg.id));
                }
            }
        }
        if self.chunk_to_segment.len() != self.i3.len() {
            return bad("chunk map does not cover I3".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| PgtError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| PgtError::io(path, e))?;
        let index: IndexTriplet = serde_json::from_str(&s)?;
        if index.format_version != INDEX_FORMAT_VERSION {
            return Err(PgtError::InvalidInput(format!(
                "index format version {} (expected {INDEX_FORMAT_VERSION})",
                index.format_version
            )));
        }
        Ok(index)
    }
}

/// Uniform draw from a tier.
pub fn sample_segment<'a>(index: &'a IndexTriplet, tier: Tier, rng: &mut impl Rng) -> Result<&'a Segment> {
    let segs = index.tier(tier);
    if segs.is_empty() {
        return Err(PgtError::Empty(format!("{tier:?} index")));
    }
    Ok(&segs[rng.gen_range(0..segs.len())])
}

/// Reads every regular file in `dir` as one document, sorted by file name.
pub fn read_corpus_dir(dir: &Path) -> Result<Vec<Document>> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| PgtError::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .collect();
    entries.sort_by_key(|e| e.file_name());
    entries
        .into_iter()
        .map(|e| {
            let path = e.path();
            let text = fs::read_to_string(&path).map_err(|err| PgtError::io(&path, err))?;
            Ok(Document::new(e.file_name().to_string_lossy().into_owned(), text))
        })
        .collect()
}
