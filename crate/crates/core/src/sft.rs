//! Supervised fine-tuning under the stride-marginalized RAG-token likelihood,
//! and the matching beam decoder.
//!
//! Answer positions are grouped into strides of `stride` tokens. Stride `i`
//! retrieves the top-`k` I2 segments for `q` followed by the last
//! `min(lookback, stride * i)` answer tokens before the stride, and every
//! token in the stride is scored under the mixture
//! `Σ_k P(d_k | query) P(a_t | q, d_k, a_<t)`.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::corpus::{IndexTriplet, SegmentId};
use crate::error::{PgtError, Result};
use crate::generator::{graph_token_logprobs, source_tokens, GeneratorParams, Stepper};
use crate::params::{Adam, AdamConfig, Bound, ParamSet};
use crate::retriever::{Retriever, RetrieverConfig, RetrieverParams, Scope, TopSegments, EMBEDDING};
use crate::synthgen::QATuple;
use crate::tensor::log_sum_exp;
use crate::tokenizer::{TextTokenizer, TokenId, EOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    /// Tokens per retrieval refresh (S).
    pub stride: usize,
    /// Answer tokens appended to the retrieval query (L).
    pub lookback: usize,
    /// Segments marginalized per stride (K).
    pub k: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub update_retriever: bool,
    pub beam: usize,
    pub finish_policy: FinishPolicy,
    pub max_answer_tokens: usize,
    /// Worker threads for per-example gradients.
    pub threads: usize,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            stride: 4,
            lookback: 2,
            k: 2,
            lr: 1e-3,
            epochs: 3,
            batch: 8,
            seed: 0,
            update_retriever: true,
            beam: 2,
            finish_policy: FinishPolicy::All,
            max_answer_tokens: 24,
            threads: 4,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.k == 0 || self.batch == 0 || self.beam == 0 {
            return Err(PgtError::Config("sft: stride, k, batch and beam must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(PgtError::Config("sft.lr must be a positive finite number".into()));
        }
        Ok(())
    }
}

/// Which completed candidates the beam decoder keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishPolicy {
    /// Every candidate ending in EOS or reaching the length cap.
    All,
    /// Only completed candidates ranked within the beam width; with width 1
    /// this is greedy decoding.
    Ranked,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrideRecord {
    /// First answer position covered by the stride.
    pub start: usize,
    pub query: Vec<TokenId>,
    pub segments: Vec<SegmentId>,
    pub probabilities: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StrideTrace {
    pub strides: Vec<StrideRecord>,
}

/// Retrieval query for the stride starting at answer position `start`.
pub fn stride_query(q: &[TokenId], prefix: &[TokenId], start: usize, lookback: usize) -> Vec<TokenId> {
    let lb = lookback.min(start);
    let mut query = q.to_vec();
    query.extend_from_slice(&prefix[start - lb..start]);
    query
}

/// Differentiable `log P(segment)` over `segs` (a `k x 1` column): softmax of
/// each segment's best chunk score.
pub fn graph_segment_logprobs(g: &mut Graph, emb: Var, retriever: &Retriever, query: &[TokenId], segs: &[SegmentId]) -> Var {
    let mut seg_scores = Vec::with_capacity(segs.len());
    for &s in segs {
        let chunks: Vec<Var> = retriever.index.chunks_of(s).iter().map(|&c| retriever.graph_score_chunk(g, emb, query, c)).collect();
        let col = g.concat_rows(&chunks);
        let row = g.transpose(col);
        seg_scores.push(g.row_max(row));
    }
    let col = g.concat_rows(&seg_scores);
    let row = g.transpose(col);
    let lp = g.log_softmax_rows(row);
    g.transpose(lp)
}

/// Graph form of the stride likelihood. `emb` is the retriever embedding
/// table (trainable or constant), `phi` the bound generator parameters.
#[allow(clippy::too_many_arguments)]
pub fn graph_incontext_rag_loglik(
    g: &mut Graph,
    emb: Var,
    phi: &Bound,
    retriever: &Retriever,
    gp: &GeneratorParams,
    q: &[TokenId],
    a: &[TokenId],
    cfg: &SftConfig,
    scope: Scope,
) -> Result<(Var, StrideTrace)> {
    if a.is_empty() {
        return Err(PgtError::InvalidInput("answer must have at least one token".into()));
    }
    if cfg.stride == 0 || cfg.k == 0 {
        return Err(PgtError::Config("stride and k must be >= 1".into()));
    }
    let n = a.len();
    let mut columns: BTreeMap<SegmentId, Var> = BTreeMap::new();
    let mut trace = StrideTrace::default();
    let mut terms = Vec::with_capacity(n);
    for i in 0..n.div_ceil(cfg.stride) {
        let start = cfg.stride * i;
        let end = start.saturating_add(cfg.stride).min(n);
        let query = stride_query(q, a, start, cfg.lookback);
        let top = retriever.retrieve_top_segments(&query, cfg.k, scope)?;
        let segs: Vec<SegmentId> = top.hits.iter().map(|h| h.segment_id).collect();
        let seg_lp = graph_segment_logprobs(g, emb, retriever, &query, &segs);
        for &s in &segs {
            if !columns.contains_key(&s) {
                let d = &retriever.index.i2_segment(s).token_ids;
                columns.insert(s, graph_token_logprobs(g, phi, gp, q, d, a)?);
            }
        }
        for t in start..end {
            let parts: Vec<Var> = segs.iter().map(|s| g.pick(columns[s], &[(t, 0)])).collect();
            let tok = g.concat_rows(&parts);
            let joint = g.add(tok, seg_lp);
            terms.push(g.log_sum_exp(joint));
        }
        trace.strides.push(StrideRecord {
            start,
            query,
            probabilities: g.value(seg_lp).data().iter().map(|x| x.exp()).collect(),
            segments: segs,
        });
    }
    let all = g.concat_rows(&terms);
    Ok((g.sum(all), trace))
}

/// `Σ_t log Σ_k P(d_k | ·) P(a_t | q, d_k, a_<t)` with its stride trace.
pub fn incontext_rag_loglik(
    q: &[TokenId],
    a: &[TokenId],
    retriever: &Retriever,
    gp: &GeneratorParams,
    cfg: &SftConfig,
    scope: Scope,
) -> Result<(f64, StrideTrace)> {
    let mut g = Graph::new();
    let eta = retriever.params.params.bind_frozen(&mut g);
    let phi = gp.params.bind_frozen(&mut g);
    let (v, trace) = graph_incontext_rag_loglik(&mut g, eta.var(EMBEDDING), &phi, retriever, gp, q, a, cfg, scope)?;
    Ok((g.scalar(v), trace))
}

/// One supervised example: question tokens, answer tokens ending in EOS and
/// an optional retrieval restriction.
#[derive(Clone, Debug, PartialEq)]
pub struct SftExample {
    pub id: String,
    pub question: Vec<TokenId>,
    pub answer: Vec<TokenId>,
    pub scope: Option<BTreeSet<SegmentId>>,
}

impl SftExample {
    pub fn from_tuple(t: &QATuple, index: &IndexTriplet) -> Self {
        let mut answer = index.tokenizer.encode(&t.answer);
        answer.push(EOS);
        Self { id: t.id.clone(), question: index.tokenizer.encode(&t.question), answer, scope: t.retrieval_scope(index) }
    }

    pub fn scope(&self) -> Scope<'_> {
        match &self.scope {
            Some(s) => Scope::Only(s),
            None => Scope::All,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub mean_nll: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SftTrainer {
    pub cfg: SftConfig,
    opt_eta: Adam,
    opt_phi: Adam,
    pub steps: u64,
}

struct ExampleGrads {
    nll: f64,
    eta: Option<ParamSet>,
    phi: ParamSet,
}

fn example_grads(ex: &SftExample, retriever: &Retriever, gp: &GeneratorParams, cfg: &SftConfig) -> Result<ExampleGrads> {
    let mut g = Graph::new();
    let eta = if cfg.update_retriever { retriever.params.params.bind(&mut g) } else { retriever.params.params.bind_frozen(&mut g) };
    let phi = gp.params.bind(&mut g);
    let (ll, _) = graph_incontext_rag_loglik(&mut g, eta.var(EMBEDDING), &phi, retriever, gp, &ex.question, &ex.answer, cfg, ex.scope())?;
    let nll = -g.scalar(ll);
    if !nll.is_finite() {
        return Err(PgtError::NonFinite { what: "sft loss".into(), item: ex.id.clone() });
    }
    let loss = g.neg(ll);
    let grads = g.backward(loss);
    Ok(ExampleGrads {
        nll,
        eta: cfg.update_retriever.then(|| eta.gradients(&grads, &retriever.params.params)),
        phi: phi.gradients(&grads, &gp.params),
    })
}

/// Runs `f` over `items` on up to `threads` workers, keeping input order.
pub(crate) fn parallel_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let per = items.len().div_ceil(threads);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(per).map(|part| s.spawn(move || part.iter().map(f).collect::<Vec<R>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

impl SftTrainer {
    pub fn new(cfg: SftConfig, eta: &RetrieverParams, phi: &GeneratorParams) -> Self {
        let adam = AdamConfig { lr: cfg.lr, ..Default::default() };
        Self { opt_eta: Adam::new(adam.clone(), &eta.params), opt_phi: Adam::new(adam, &phi.params), cfg, steps: 0 }
    }

    /// One update on the batch mean of `−loglik`.
    pub fn step(&mut self, batch: &[SftExample], index: &IndexTriplet, ret_cfg: &RetrieverConfig, eta: &mut RetrieverParams, phi: &mut GeneratorParams) -> Result<StepLog> {
        if batch.is_empty() {
            return Err(PgtError::Empty("sft batch".into()));
        }
        let results = {
            let retriever = Retriever::new(index, eta, ret_cfg);
            parallel_map(batch, self.cfg.threads, |ex| example_grads(ex, &retriever, phi, &self.cfg))
        };
        let scale = 1.0 / batch.len() as f64;
        let mut nll = 0.0;
        let mut g_phi = phi.params.zeros_like();
        let mut g_eta = eta.params.zeros_like();
        for r in results {
            let r = r?;
            nll += r.nll;
            g_phi.add_scaled(&r.phi, scale);
            if let Some(e) = &r.eta {
                g_eta.add_scaled(e, scale);
            }
        }
        let n_phi = self.opt_phi.step(&mut phi.params, &g_phi);
        let mut norm = n_phi * n_phi;
        if self.cfg.update_retriever {
            let n_eta = self.opt_eta.step(&mut eta.params, &g_eta);
            eta.normalize();
            norm += n_eta * n_eta;
        }
        self.steps += 1;
        Ok(StepLog { step: self.steps, mean_nll: nll * scale, grad_norm: norm.sqrt(), lr: self.cfg.lr })
    }

    /// `epochs` shuffled passes over `examples`.
    pub fn train(&mut self, examples: &[SftExample], index: &IndexTriplet, ret_cfg: &RetrieverConfig, eta: &mut RetrieverParams, phi: &mut GeneratorParams) -> Result<Vec<StepLog>> {
        self.cfg.validate()?;
        if examples.is_empty() {
            return Err(PgtError::Empty("sft training set".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut log = Vec::new();
        for _ in 0..self.cfg.epochs {
            order.shuffle(&mut rng);
            for idx in order.chunks(self.cfg.batch) {
                let batch: Vec<SftExample> = idx.iter().map(|&i| examples[i].clone()).collect();
                log.push(self.step(&batch, index, ret_cfg, eta, phi)?);
            }
        }
        Ok(log)
    }
}

/// Mean `−loglik` over examples.
pub fn mean_nll(examples: &[SftExample], retriever: &Retriever, gp: &GeneratorParams, cfg: &SftConfig) -> Result<f64> {
    let lls = parallel_map(examples, cfg.threads, |ex| incontext_rag_loglik(&ex.question, &ex.answer, retriever, gp, cfg, ex.scope()).map(|r| r.0));
    let mut total = 0.0;
    for l in lls {
        total -= l?;
    }
    Ok(total / examples.len().max(1) as f64)
}

/// Next-token mixture distributions with per-decode caches for retrieval
/// results and encoder memories.
pub struct MixtureStepper<'a> {
    retriever: &'a Retriever<'a>,
    gp: &'a GeneratorParams,
    q: Vec<TokenId>,
    cfg: SftConfig,
    scope: Scope<'a>,
    retrievals: HashMap<Vec<TokenId>, TopSegments>,
    steppers: HashMap<SegmentId, Stepper<'a>>,
}

impl<'a> MixtureStepper<'a> {
    pub fn new(retriever: &'a Retriever<'a>, gp: &'a GeneratorParams, q: &[TokenId], cfg: &SftConfig, scope: Scope<'a>) -> Self {
        Self { retriever, gp, q: q.to_vec(), cfg: cfg.clone(), scope, retrievals: HashMap::new(), steppers: HashMap::new() }
    }

    fn retrieve(&mut self, query: Vec<TokenId>) -> Result<TopSegments> {
        if let Some(hit) = self.retrievals.get(&query) {
            return Ok(hit.clone());
        }
        let top = self.retriever.retrieve_top_segments(&query, self.cfg.k, self.scope)?;
        self.retrievals.insert(query, top.clone());
        Ok(top)
    }

    /// Retrieval for the stride containing position `prefix.len()`.
    pub fn stride_retrieval(&mut self, prefix: &[TokenId]) -> Result<(usize, Vec<TokenId>, TopSegments)> {
        let start = prefix.len() / self.cfg.stride * self.cfg.stride;
        let query = stride_query(&self.q, prefix, start, self.cfg.lookback);
        let top = self.retrieve(query.clone())?;
        Ok((start, query, top))
    }

    /// `log p(· | a_<t)` under the mixture.
    pub fn next(&mut self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let (_, _, top) = self.stride_retrieval(prefix)?;
        let mut per_seg = Vec::with_capacity(top.hits.len());
        for h in &top.hits {
            if !self.steppers.contains_key(&h.segment_id) {
                let d = &self.retriever.index.i2_segment(h.segment_id).token_ids;
                self.steppers.insert(h.segment_id, Stepper::new(self.gp, &source_tokens(&self.q, d))?);
            }
            let lp = self.steppers.get_mut(&h.segment_id).expect("inserted").next(prefix)?;
            per_seg.push((h.probability.ln(), lp));
        }
        let v = per_seg[0].1.len();
        Ok((0..v)
            .map(|tok| {
                let xs: Vec<f64> = per_seg.iter().map(|(lw, lp)| lw + lp[tok]).collect();
                log_sum_exp(&xs)
            })
            .collect())
    }

    /// Stride records for a finished sequence.
    pub fn trace(&mut self, tokens: &[TokenId]) -> Result<StrideTrace> {
        let mut trace = StrideTrace::default();
        let mut start = 0;
        while start < tokens.len().max(1) {
            let (s, query, top) = self.stride_retrieval(&tokens[..start])?;
            trace.strides.push(StrideRecord {
                start: s,
                query,
                segments: top.hits.iter().map(|h| h.segment_id).collect(),
                probabilities: top.hits.iter().map(|h| h.probability).collect(),
            });
            start = start.saturating_add(self.cfg.stride);
        }
        Ok(trace)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    /// Includes the final EOS when one was produced.
    pub tokens: Vec<TokenId>,
    pub score: f64,
    pub trace: StrideTrace,
}

impl Decoded {
    pub fn answer(&self) -> &[TokenId] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

/// Beam search over the mixture distribution. Candidates are ranked by
/// total log-probability, ties broken by token ids; a hypothesis ends at EOS
/// or after `max_len` tokens. Under [`FinishPolicy::All`] every completed
/// candidate enters the finished pool and the width bounds only the live
/// hypotheses. Search stops once the best finished score is
/// at least every live score, since extensions only lose probability.
pub fn beam_decode(q: &[TokenId], retriever: &Retriever, gp: &GeneratorParams, cfg: &SftConfig, beam: usize, max_len: usize, scope: Scope) -> Result<Decoded> {
    if beam == 0 {
        return Err(PgtError::Config("beam width must be >= 1".into()));
    }
    if max_len == 0 {
        return Err(PgtError::Config("max answer length must be >= 1".into()));
    }
    let mut stepper = MixtureStepper::new(retriever, gp, q, cfg, scope);
    let mut live: Vec<(Vec<TokenId>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<(Vec<TokenId>, f64)> = Vec::new();
    let better = |a: &(Vec<TokenId>, f64), b: &(Vec<TokenId>, f64)| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0));
    while !live.is_empty() {
        let mut cands = Vec::new();
        for (prefix, score) in &live {
            let dist = stepper.next(prefix)?;
            for (tok, lp) in dist.iter().enumerate() {
                let mut seq = prefix.clone();
                seq.push(tok as TokenId);
                cands.push((seq, score + lp));
            }
        }
        cands.sort_by(better);
        live.clear();
        for c in cands {
            if cfg.finish_policy == FinishPolicy::Ranked && live.len() == beam {
                break;
            }
            if c.0.last() == Some(&EOS) || c.0.len() >= max_len {
                finished.push(c);
            } else if live.len() < beam {
                live.push(c);
            }
        }
        finished.sort_by(better);
        finished.truncate(beam);
        if let (Some(best), Some(top_live)) = (finished.first(), live.first()) {
            if best.1 >= top_live.1 {
                break;
            }
        }
    }
    let (tokens, score) = finished.into_iter().next().expect("search always finishes a hypothesis");
    let trace = stepper.trace(&tokens)?;
    Ok(Decoded { tokens, score, trace })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SftCheckpoint {
    pub format_version: u32,
    pub config_hash: String,
    pub trainer: SftTrainer,
    pub retriever: RetrieverParams,
    pub generator: GeneratorParams,
}
