//! Inverse Cloze Task pretraining of the retriever embeddings.
//!
//! One sentence is removed from a chunk and used as the query; the rest of
//! the chunk is its positive document. Every other document in the batch is
//! a negative under an in-batch softmax.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{graph_maxsim, maxsim, RetrieverParams, EMBEDDING};
use crate::autodiff::{Graph, Var};
use crate::corpus::{ChunkId, IndexTriplet};
use crate::error::{PgtError, Result};
use crate::params::{Adam, AdamConfig};
use crate::tokenizer::{TokenId, WordTokenizer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IctConfig {
    pub enabled: bool,
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for IctConfig {
    fn default() -> Self {
        Self { enabled: true, batch: 8, steps: 200, lr: 5e-3, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IctPair {
    pub chunk: ChunkId,
    pub query: Vec<TokenId>,
    pub doc: Vec<TokenId>,
}

#[derive(Clone, Debug)]
pub struct IctOutcome {
    pub params: RetrieverParams,
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
    /// Chunks skipped for having fewer than two sentences.
    pub skipped: usize,
}

/// Sentence ranges of a token sequence (a trailing fragment counts).
pub fn sentence_ranges(tok: &WordTokenizer, ids: &[TokenId]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, &id) in ids.iter().enumerate() {
        if tok.is_sentence_end(id) {
            out.push((start, i + 1));
            start = i + 1;
        }
    }
    if start < ids.len() {
        out.push((start, ids.len()));
    }
    out
}

pub fn usable_chunks(index: &IndexTriplet) -> Vec<ChunkId> {
    index.i3.iter().filter(|c| sentence_ranges(&index.tokenizer, &c.token_ids).len() >= 2).map(|c| c.id).collect()
}

/// Removes one random sentence from `chunk`.
pub fn make_pair(index: &IndexTriplet, chunk: ChunkId, rng: &mut impl Rng) -> Option<IctPair> {
    let ids = &index.chunk(chunk).token_ids;
    let sents = sentence_ranges(&index.tokenizer, ids);
    if sents.len() < 2 {
        return None;
    }
    let (s, e) = sents[rng.gen_range(0..sents.len())];
    let mut doc = ids[..s].to_vec();
    doc.extend_from_slice(&ids[e..]);
    Some(IctPair { chunk, query: ids[s..e].to_vec(), doc })
}

/// Mean in-batch softmax cross-entropy.
pub fn ict_loss(g: &mut Graph, emb: Var, params: &RetrieverParams, batch: &[IctPair]) -> Var {
    let mut terms = Vec::with_capacity(batch.len());
    for (i, pair) in batch.iter().enumerate() {
        let scores: Vec<Var> = batch.iter().map(|other| graph_maxsim(g, emb, params, &pair.query, &other.doc)).collect();
        let col = g.concat_rows(&scores);
        let lse = g.log_sum_exp(col);
        let nll = g.sub(lse, scores[i]);
        terms.push(nll);
    }
    let all = g.concat_rows(&terms);
    g.mean(all)
}

pub fn ict_pretrain(index: &IndexTriplet, init: RetrieverParams, cfg: &IctConfig) -> Result<IctOutcome> {
    let usable = usable_chunks(index);
    let skipped = index.i3.len() - usable.len();
    ict_pretrain_on(index, &usable, init, cfg).map(|mut o| {
        o.skipped = skipped;
        o
    })
}

/// ICT over a given chunk subset (held-out evaluation trains on a subset).
pub fn ict_pretrain_on(index: &IndexTriplet, chunks: &[ChunkId], init: RetrieverParams, cfg: &IctConfig) -> Result<IctOutcome> {
    if cfg.batch == 0 {
        return Err(PgtError::Config("ICT batch must be >= 1".into()));
    }
    if chunks.is_empty() {
        return Err(PgtError::Empty("ICT training set (no chunk has two or more sentences)".into()));
    }
    if chunks.len() < cfg.batch {
        return Err(PgtError::InvalidInput(format!("ICT needs at least {} usable chunks, found {}", cfg.batch, chunks.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init;
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, ..Default::default() }, &params.params);
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let picks = sample(&mut rng, chunks.len(), cfg.batch);
        let batch: Vec<IctPair> = picks.iter().filter_map(|i| make_pair(index, chunks[i], &mut rng)).collect();
        let mut g = Graph::new();
        let bound = params.params.bind(&mut g);
        let loss = ict_loss(&mut g, bound.var(EMBEDDING), &params, &batch);
        losses.push(g.scalar(loss));
        let grads = bound.gradients(&g.backward(loss), &params.params);
        opt.step(&mut params.params, &grads);
        params.normalize();
    }
    Ok(IctOutcome { params, losses, skipped: 0 })
}

/// Fraction of pairs whose own document outscores every other document.
pub fn ict_accuracy(params: &RetrieverParams, pairs: &[IctPair]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let hits = pairs
        .iter()
        .enumerate()
        .filter(|(i, p)| {
            let own = maxsim(params, &p.query, &p.doc);
            pairs.iter().enumerate().all(|(j, o)| j == *i || maxsim(params, &p.query, &o.doc) < own)
        })
        .count();
    hits as f64 / pairs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_indexes, Document, IndexConfig};
    use crate::params::finite_difference_check;
    use crate::tokenizer::TextTokenizer;

    fn corpus(n: usize) -> IndexTriplet {
        let docs: Vec<Document> = (0..n)
            .map(|i| Document::new(format!("d{i:03}"), format!("a{i} b{i} c{i}. d{i} e{i} a{i}. f{i} b{i} g{i}.")))
            .collect();
        build_indexes(&docs, &IndexConfig::default()).unwrap()
    }

    #[test]
    fn single_item_batch_has_zero_loss() {
        let idx = corpus(2);
        let p = RetrieverParams::init(idx.tokenizer.vocab_size(), 4, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pair = make_pair(&idx, ChunkId(0), &mut rng).unwrap();
        let mut g = Graph::new();
        let e = g.param(p.embeddings().clone());
        let loss = ict_loss(&mut g, e, &p, &[pair]);
        assert_eq!(g.scalar(loss), 0.0);
    }

    #[test]
    fn short_chunks_are_skipped() {
        let docs = vec![Document::new("one", "only one sentence here")];
        let idx = build_indexes(&docs, &IndexConfig::default()).unwrap();
        let p = RetrieverParams::init(idx.tokenizer.vocab_size(), 4, 0);
        let err = ict_pretrain(&idx, p, &IctConfig { batch: 1, ..Default::default() }).unwrap_err();
        assert!(matches!(err, PgtError::Empty(_)));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let idx = corpus(3);
        let p = RetrieverParams::init(idx.tokenizer.vocab_size(), 3, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch: Vec<IctPair> = (0..3).map(|i| make_pair(&idx, ChunkId(i), &mut rng).unwrap()).collect();
        let err = finite_difference_check(&p.params, |ps, g, b| {
            let rp = RetrieverParams { dim: 3, params: ps.clone() };
            ict_loss(g, b.var(EMBEDDING), &rp, &batch)
        });
        assert!(err < 1e-4, "relative error {err}");
    }
}
