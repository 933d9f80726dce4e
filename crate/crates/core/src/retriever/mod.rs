//! Late-interaction retrieval over I3 chunks with segment-level aggregation.
//!
//! A chunk's score is the MaxSim sum over query tokens plus an optional BM25
//! term. A segment's score is the maximum over its chunks, and segment
//! probabilities are a softmax of those maxima over the candidate set.

mod bm25;
pub mod ict;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use bm25::{Bm25, Bm25Params};

use crate::autodiff::{Graph, Var};
use crate::corpus::{ChunkId, IndexTriplet, SegmentId};
use crate::error::{PgtError, Result};
use crate::params::ParamSet;
use crate::tensor::{dot, softmax, Tensor};
use crate::tokenizer::{TextTokenizer, TokenId, WordTokenizer, UNK};

pub const EMBEDDING: &str = "emb";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Retriever parameters η: one unit-norm embedding per vocabulary entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrieverParams {
    pub dim: usize,
    pub params: ParamSet,
}

impl RetrieverParams {
    pub fn init(vocab_size: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut emb = ParamSet::uniform(vocab_size, dim, 1.0, &mut rng);
        emb.normalize_rows();
        let mut params = ParamSet::new();
        params.insert(EMBEDDING, emb);
        Self { dim, params }
    }

    pub fn embeddings(&self) -> &Tensor {
        self.params.get(EMBEDDING)
    }

    pub fn vocab_size(&self) -> usize {
        self.embeddings().rows()
    }

    /// Re-projects every embedding onto the unit sphere.
    pub fn normalize(&mut self) {
        self.params.get_mut(EMBEDDING).normalize_rows();
    }

    fn row(&self, id: TokenId) -> &[f64] {
        let emb = self.embeddings();
        let id = if (id as usize) < emb.rows() { id } else { UNK };
        emb.row(id as usize)
    }

    pub fn clamp_ids(&self, ids: &[TokenId]) -> Vec<usize> {
        let v = self.vocab_size();
        ids.iter().map(|&i| if (i as usize) < v { i as usize } else { UNK as usize }).collect()
    }
}

/// Σ over query tokens of the max dot product against chunk tokens.
/// Query tokens are the outer loop, chunk tokens the inner max, and the
/// outer sum runs left to right.
pub fn maxsim(params: &RetrieverParams, query: &[TokenId], chunk: &[TokenId]) -> f64 {
    let mut total = 0.0;
    for &q in query {
        let qv = params.row(q);
        let mut best = f64::NEG_INFINITY;
        for &c in chunk {
            let s = dot(qv, params.row(c));
            if s > best {
                best = s;
            }
        }
        total += best;
    }
    total
}

/// Differentiable MaxSim of `query` against `chunk` w.r.t. the embedding
/// table `emb`; numerically identical to [`maxsim`].
pub fn graph_maxsim(g: &mut Graph, emb: Var, params: &RetrieverParams, query: &[TokenId], chunk: &[TokenId]) -> Var {
    let q = g.gather(emb, &params.clamp_ids(query));
    let c = g.gather(emb, &params.clamp_ids(chunk));
    let sims = g.matmul_t(q, c);
    let best = g.row_max(sims);
    g.sum(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrieverConfig {
    pub dim: usize,
    /// Weight of the BM25 term; 0 disables it.
    pub lexical_weight: f64,
    pub bm25: Bm25Params,
}

impl Default for RetrieverConfig {
    fn default() -> Self {
        Self { dim: 32, lexical_weight: 0.0, bm25: Bm25Params::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub chunk_id: ChunkId,
    pub parent_segment_id: SegmentId,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopChunks {
    pub results: Vec<RetrievalResult>,
    /// Set when fewer than the requested K chunks were available.
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentHit {
    pub segment_id: SegmentId,
    /// Maximum chunk score within the segment.
    pub score: f64,
    pub best_chunk: ChunkId,
    /// Probability renormalized over the returned hits.
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopSegments {
    pub hits: Vec<SegmentHit>,
    pub truncated: bool,
}

/// Which I2 segments may be returned.
#[derive(Clone, Copy, Debug)]
pub enum Scope<'a> {
    All,
    Only(&'a BTreeSet<SegmentId>),
}

impl Scope<'_> {
    fn admits(&self, seg: SegmentId) -> bool {
        match self {
            Scope::All => true,
            Scope::Only(set) => set.contains(&seg),
        }
    }
}

/// Exhaustive scorer bound to an index and a parameter snapshot.
pub struct Retriever<'a> {
    pub index: &'a IndexTriplet,
    pub params: &'a RetrieverParams,
    lexical_weight: f64,
    bm25: Option<Bm25>,
}

impl<'a> Retriever<'a> {
    pub fn new(index: &'a IndexTriplet, params: &'a RetrieverParams, cfg: &RetrieverConfig) -> Self {
        let bm25 = (cfg.lexical_weight > 0.0).then(|| Bm25::from_index(index, cfg.bm25.clone()));
        Self { index, params, lexical_weight: cfg.lexical_weight, bm25 }
    }

    pub fn lexical_weight(&self) -> f64 {
        self.lexical_weight
    }

    /// Lexical contribution (already weighted), 0 when disabled.
    pub fn lexical_term(&self, query: &[TokenId], chunk: &[TokenId]) -> f64 {
        match &self.bm25 {
            Some(bm) => self.lexical_weight * bm.score(query, chunk),
            None => 0.0,
        }
    }

    pub fn score_tokens(&self, query: &[TokenId], chunk: &[TokenId]) -> Result<f64> {
        if query.is_empty() || chunk.is_empty() {
            return Err(PgtError::InvalidInput("score_chunk needs a non-empty query and chunk".into()));
        }
        let s = maxsim(self.params, query, chunk);
        Ok(if self.bm25.is_some() { s + self.lexical_term(query, chunk) } else { s })
    }

    pub fn score_chunk(&self, query: &[TokenId], chunk: ChunkId) -> Result<f64> {
        self.score_tokens(query, &self.index.chunk(chunk).token_ids)
    }

    /// Differentiable version of [`Self::score_chunk`] (the lexical term is a
    /// constant w.r.t. η).
    pub fn graph_score_chunk(&self, g: &mut Graph, emb: Var, query: &[TokenId], chunk: ChunkId) -> Var {
        let tokens = &self.index.chunk(chunk).token_ids;
        let s = graph_maxsim(g, emb, self.params, query, tokens);
        if self.bm25.is_some() {
            g.add_scalar(s, self.lexical_term(query, tokens))
        } else {
            s
        }
    }

    /// Best chunk and its score for a segment.
    pub fn segment_score(&self, query: &[TokenId], seg: SegmentId) -> Result<(f64, ChunkId)> {
        let chunks = self.index.chunks_of(seg);
        if chunks.is_empty() {
            return Err(PgtError::InvalidInput(format!("segment {seg:?} has no chunks in I3")));
        }
        let mut best = (f64::NEG_INFINITY, chunks[0]);
        for &c in chunks {
            let s = self.score_chunk(query, c)?;
            if s > best.0 {
                best = (s, c);
            }
        }
        Ok(best)
    }

    /// Softmax over candidates of their max chunk score.
    pub fn segment_probability(&self, query: &[TokenId], candidates: &[SegmentId]) -> Result<BTreeMap<SegmentId, f64>> {
        if candidates.is_empty() {
            return Err(PgtError::Empty("candidate segment set".into()));
        }
        let scores = candidates.iter().map(|&s| self.segment_score(query, s).map(|x| x.0)).collect::<Result<Vec<_>>>()?;
        Ok(candidates.iter().copied().zip(softmax(&scores)).collect())
    }

    fn scored_chunks(&self, query: &[TokenId], scope: Scope) -> Result<Vec<RetrievalResult>> {
        let mut out = Vec::new();
        for chunk in &self.index.i3 {
            if !scope.admits(chunk.parent_segment_id) {
                continue;
            }
            out.push(RetrievalResult {
                chunk_id: chunk.id,
                parent_segment_id: chunk.parent_segment_id,
                score: self.score_tokens(query, &chunk.token_ids)?,
                rank: 0,
            });
        }
        out.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.chunk_id.cmp(&b.chunk_id)));
        Ok(out)
    }

    /// The `k` best chunks by exhaustive scan.
    pub fn retrieve_top_chunks(&self, query: &[TokenId], k: usize, scope: Scope) -> Result<TopChunks> {
        if k == 0 {
            return Err(PgtError::Config("retrieval depth K must be >= 1".into()));
        }
        let mut all = self.scored_chunks(query, scope)?;
        let truncated = all.len() < k;
        all.truncate(k);
        for (i, r) in all.iter_mut().enumerate() {
            r.rank = i + 1;
        }
        Ok(TopChunks { results: all, truncated })
    }

    /// The `k` best I2 segments with probabilities renormalized over them.
    pub fn retrieve_top_segments(&self, query: &[TokenId], k: usize, scope: Scope) -> Result<TopSegments> {
        if k == 0 {
            return Err(PgtError::Config("retrieval depth K must be >= 1".into()));
        }
        let mut best: BTreeMap<SegmentId, (f64, ChunkId)> = BTreeMap::new();
        for r in self.scored_chunks(query, scope)? {
            // chunks arrive best-first, so the first hit per segment is its max
            best.entry(r.parent_segment_id).or_insert((r.score, r.chunk_id));
        }
        let mut segs: Vec<(SegmentId, f64, ChunkId)> = best.into_iter().map(|(s, (sc, c))| (s, sc, c)).collect();
        segs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        if segs.is_empty() {
            return Err(PgtError::Empty("retrieval scope".into()));
        }
        let truncated = segs.len() < k;
        segs.truncate(k);
        let probs = softmax(&segs.iter().map(|s| s.1).collect::<Vec<_>>());
        Ok(TopSegments {
            hits: segs
                .into_iter()
                .zip(probs)
                .map(|((segment_id, score, best_chunk), probability)| SegmentHit { segment_id, score, best_chunk, probability })
                .collect(),
            truncated,
        })
    }
}

/// One retrieval trace line: query hash, top ids, scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub query_hash: String,
    pub ids: Vec<u32>,
    pub scores: Vec<f64>,
}

impl TraceLine {
    pub fn from_chunks(query: &[TokenId], top: &TopChunks) -> Self {
        Self {
            query_hash: query_hash(query),
            ids: top.results.iter().map(|r| r.chunk_id.0).collect(),
            scores: top.results.iter().map(|r| r.score).collect(),
        }
    }
}

pub fn query_hash(query: &[TokenId]) -> String {
    let mut h = Sha256::new();
    for t in query {
        h.update(t.to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrieverCheckpoint {
    pub format_version: u32,
    pub tokenizer_fingerprint: String,
    pub params: RetrieverParams,
}

impl RetrieverCheckpoint {
    pub fn new(params: RetrieverParams, tokenizer: &WordTokenizer) -> Self {
        Self { format_version: CHECKPOINT_VERSION, tokenizer_fingerprint: tokenizer.fingerprint(), params }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?).map_err(|e| PgtError::io(path, e))
    }

    /// Loads and checks the tokenizer matches `index`.
    pub fn load(path: &Path, index: &IndexTriplet) -> Result<RetrieverParams> {
        let s = fs::read_to_string(path).map_err(|e| PgtError::io(path, e))?;
        let ck: RetrieverCheckpoint = serde_json::from_str(&s)?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(PgtError::InvalidInput(format!("retriever checkpoint version {}", ck.format_version)));
        }
        if ck.tokenizer_fingerprint != index.tokenizer.fingerprint() {
            return Err(PgtError::InvalidInput(format!("{}: tokenizer does not match the index", path.display())));
        }
        Ok(ck.params)
    }
}

/// Convenience: fresh η sized for `index`.
pub fn init_for_index(index: &IndexTriplet, cfg: &RetrieverConfig, seed: u64) -> RetrieverParams {
    RetrieverParams::init(index.tokenizer.vocab_size(), cfg.dim, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_indexes, Document, IndexConfig};
    use rand::Rng;

    fn params_from(rows: Vec<Vec<f64>>) -> RetrieverParams {
        let dim = rows[0].len();
        let n = rows.len();
        let mut p = ParamSet::new();
        p.insert(EMBEDDING, Tensor::from_vec(n, dim, rows.into_iter().flatten().collect()));
        RetrieverParams { dim, params: p }
    }

    /// Independent nested-loop MaxSim written against raw vectors.
    fn oracle_maxsim(emb: &[Vec<f64>], q: &[usize], c: &[usize]) -> f64 {
        let mut total = 0.0;
        for &qi in q {
            let mut best = f64::NEG_INFINITY;
            for &cj in c {
                let mut s = 0.0;
                for k in 0..emb[qi].len() {
                    s += emb[qi][k] * emb[cj][k];
                }
                best = best.max(s);
            }
            total += best;
        }
        total
    }

    #[test]
    fn self_similarity_and_orthogonality() {
        let p = params_from(vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0], vec![0.0, 0.0]]);
        assert_eq!(maxsim(&p, &[1], &[1]), 1.0);
        assert_eq!(maxsim(&p, &[1], &[2]), 0.0);
    }

    #[test]
    fn maxsim_matches_nested_loop_oracle_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let emb: Vec<Vec<f64>> = (0..10).map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
        let p = params_from(emb.clone());
        for _ in 0..50 {
            let q: Vec<usize> = (0..3).map(|_| rng.gen_range(0..10)).collect();
            let c: Vec<usize> = (0..5).map(|_| rng.gen_range(0..10)).collect();
            let qt: Vec<TokenId> = q.iter().map(|&x| x as TokenId).collect();
            let ct: Vec<TokenId> = c.iter().map(|&x| x as TokenId).collect();
            let expected = oracle_maxsim(&emb, &q, &c);
            assert_eq!(maxsim(&p, &qt, &ct).to_bits(), expected.to_bits());
            let mut g = Graph::new();
            let e = g.param(p.embeddings().clone());
            let v = graph_maxsim(&mut g, e, &p, &qt, &ct);
            assert_eq!(g.scalar(v).to_bits(), expected.to_bits());
        }
    }

    #[test]
    fn out_of_vocabulary_ids_score_as_unk() {
        let p = RetrieverParams::init(10, 4, 1);
        assert_eq!(maxsim(&p, &[999], &[3]), maxsim(&p, &[UNK], &[3]));
    }

    fn toy_index() -> IndexTriplet {
        let docs: Vec<Document> = (0..10)
            .map(|i| Document::new(format!("d{i:02}"), format!("alpha{i} beta{i} gamma{i} delta{i}. shared words here.")))
            .collect();
        build_indexes(&docs, &IndexConfig::default()).unwrap()
    }

    #[test]
    fn segment_probabilities_are_softmax_of_max_scores() {
        let idx = toy_index();
        let p = RetrieverParams::init(idx.tokenizer.vocab_size(), 8, 3);
        let r = Retriever::new(&idx, &p, &RetrieverConfig::default());
        let q = idx.tokenizer.encode("alpha3 gamma7 words");
        let cands = [SegmentId(1), SegmentId(3), SegmentId(7)];
        let probs = r.segment_probability(&q, &cands).unwrap();
        // oracle: direct formula
        let w: Vec<f64> = cands
            .iter()
            .map(|s| idx.chunks_of(*s).iter().map(|c| maxsim(&p, &q, &idx.chunk(*c).token_ids)).fold(f64::NEG_INFINITY, f64::max).exp())
            .collect();
        let z: f64 = w.iter().sum();
        for (s, wi) in cands.iter().zip(&w) {
            assert!((probs[s] - wi / z).abs() < 1e-9);
        }
        assert!((probs.values().sum::<f64>() - 1.0).abs() < 1e-9);
        let single = r.segment_probability(&q, &[SegmentId(2)]).unwrap();
        assert_eq!(single[&SegmentId(2)], 1.0);
        assert!(r.segment_probability(&q, &[]).is_err());
    }

    #[test]
    fn equal_scores_split_evenly_and_ties_break_by_id() {
        let idx = toy_index();
        let p = RetrieverParams::init(idx.tokenizer.vocab_size(), 8, 3);
        let r = Retriever::new(&idx, &p, &RetrieverConfig::default());
        // every document shares this sentence, so chunks differ; use a token
        // that appears identically in two chunks
        let q = idx.tokenizer.encode("shared");
        let top = r.retrieve_top_chunks(&q, 10, Scope::All).unwrap();
        assert!(top.results.windows(2).all(|w| w[0].score > w[1].score || (w[0].score == w[1].score && w[0].chunk_id < w[1].chunk_id)));
        let probs = r.segment_probability(&q, &[SegmentId(0), SegmentId(1)]).unwrap();
        assert!((probs[&SegmentId(0)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn top_segments_contains_global_best_chunk_first() {
        let idx = toy_index();
        let p = RetrieverParams::init(idx.tokenizer.vocab_size(), 8, 5);
        let r = Retriever::new(&idx, &p, &RetrieverConfig::default());
        let q = idx.tokenizer.encode("beta4 delta4");
        let chunks = r.retrieve_top_chunks(&q, 1, Scope::All).unwrap();
        let segs = r.retrieve_top_segments(&q, 3, Scope::All).unwrap();
        assert_eq!(segs.hits[0].segment_id, chunks.results[0].parent_segment_id);
        assert_eq!(segs.hits[0].segment_id, SegmentId(4));
        let one = r.retrieve_top_segments(&q, 1, Scope::All).unwrap();
        assert_eq!(one.hits[0].probability, 1.0);
        let all = r.retrieve_top_chunks(&q, 100, Scope::All).unwrap();
        assert!(all.truncated);
        assert_eq!(all.results.len(), idx.i3.len());
    }

    #[test]
    fn zero_lexical_weight_is_bit_identical_and_bm25_adds() {
        let idx = toy_index();
        let p = RetrieverParams::init(idx.tokenizer.vocab_size(), 8, 5);
        let q = idx.tokenizer.encode("beta4 delta4");
        let plain = Retriever::new(&idx, &p, &RetrieverConfig::default());
        for c in &idx.i3 {
            assert_eq!(plain.score_chunk(&q, c.id).unwrap().to_bits(), maxsim(&p, &q, &c.token_ids).to_bits());
        }
        let lex = Retriever::new(&idx, &p, &RetrieverConfig { lexical_weight: 0.5, ..Default::default() });
        let c4 = idx.chunks_of(SegmentId(4))[0];
        assert!(lex.score_chunk(&q, c4).unwrap() > plain.score_chunk(&q, c4).unwrap());
    }

    #[test]
    fn scope_restricts_candidates() {
        let idx = toy_index();
        let p = RetrieverParams::init(idx.tokenizer.vocab_size(), 8, 5);
        let r = Retriever::new(&idx, &p, &RetrieverConfig::default());
        let q = idx.tokenizer.encode("beta4 delta4");
        let allowed: BTreeSet<_> = [SegmentId(1), SegmentId(2)].into_iter().collect();
        let top = r.retrieve_top_segments(&q, 5, Scope::Only(&allowed)).unwrap();
        assert!(top.truncated);
        assert!(top.hits.iter().all(|h| allowed.contains(&h.segment_id)));
    }
}
