//! Stride likelihood against a from-scratch RAG-token computation, and
//! normalization of the retrieval and next-token distributions.

use pgt::corpus::{build_indexes, BoundaryPolicy, Document, IndexConfig, IndexTriplet};
use pgt::generator::{answer_loglikelihood, token_logprobs, GeneratorParams};
use pgt::nn::Arch;
use pgt::params::ParamSet;
use pgt::retriever::{Retriever, RetrieverConfig, RetrieverParams, Scope};
use pgt::sft::{incontext_rag_loglik, MixtureStepper, SftConfig};
use pgt::tokenizer::{TokenId, EOS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Fifteen words whose ids are 5..=19 in every vocabulary.
const LOW_WORDS: [&str; 15] =
    ["cannot", "answer", "this", "question", "based", "on", "given", "information", "correct", "wrong", "evidence", "proposed", "is", "the", "or"];
pub const VOCAB: usize = 20;

pub struct Instance {
    pub index: IndexTriplet,
    pub eta: RetrieverParams,
    pub gp: GeneratorParams,
    pub q: Vec<TokenId>,
    pub a: Vec<TokenId>,
    pub k: usize,
}

fn scrambled(rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> pgt::tensor::Tensor {
    ParamSet::uniform(rows, cols, bound, rng)
}

pub fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_docs = rng.gen_range(2..5);
    let docs: Vec<Document> = (0..n_docs)
        .map(|i| {
            let len = rng.gen_range(20..48);
            let body: Vec<&str> = (0..len).map(|_| LOW_WORDS[rng.gen_range(0..LOW_WORDS.len())]).collect();
            Document::new(format!("d{i}"), body.join(" "))
        })
        .collect();
    let cfg = IndexConfig { i1_max_tokens: 64, i2_max_tokens: 32, chunk_max_tokens: 16, boundary_policy: BoundaryPolicy::Hard, ..Default::default() };
    let index = build_indexes(&docs, &cfg).unwrap();
    let mut eta = RetrieverParams::init(VOCAB, 4, seed);
    for (_, t) in eta.params.iter_mut() {
        *t = scrambled(t.rows(), t.cols(), 0.8, &mut rng);
    }
    let mut gp = GeneratorParams::init(VOCAB, &Arch { dim: 8, ffn: 12, enc_layers: 1, dec_layers: 1, context: 128 }, seed);
    for (_, t) in gp.params.iter_mut() {
        *t = scrambled(t.rows(), t.cols(), 0.4, &mut rng);
    }
    let q: Vec<TokenId> = (0..rng.gen_range(1..5)).map(|_| rng.gen_range(5..VOCAB as TokenId)).collect();
    let a: Vec<TokenId> = (0..rng.gen_range(1..9)).map(|_| rng.gen_range(2..VOCAB as TokenId)).collect();
    let k = rng.gen_range(1..4);
    Instance { index, eta, gp, q, a, k }
}

/// Nested-loop late-interaction score.
fn late_interaction(emb: &pgt::tensor::Tensor, q: &[TokenId], c: &[TokenId]) -> f64 {
    let mut total = 0.0;
    for &qt in q {
        let mut best = f64::NEG_INFINITY;
        for &ct in c {
            let mut s = 0.0;
            for (x, y) in emb.row(qt as usize).iter().zip(emb.row(ct as usize)) {
                s += x * y;
            }
            best = best.max(s);
        }
        total += best;
    }
    total
}

/// RAG-token log-likelihood with one retrieval on the question:
/// `Σ_t log Σ_k p(d_k | q) p(a_t | q, d_k, a_<t)`, plus the top segment.
pub fn oracle(inst: &Instance) -> (f64, Vec<TokenId>) {
    let emb = inst.eta.embeddings();
    let mut segs: Vec<(f64, usize)> = inst
        .index
        .i2
        .iter()
        .map(|s| {
            let best = inst.index.chunks_of(s.id).iter().map(|&c| late_interaction(emb, &inst.q, &inst.index.chunk(c).token_ids)).fold(f64::NEG_INFINITY, f64::max);
            (best, s.id.0 as usize)
        })
        .collect();
    segs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    segs.truncate(inst.k);
    let m = segs[0].0;
    let z: f64 = segs.iter().map(|s| (s.0 - m).exp()).sum();
    let weights: Vec<f64> = segs.iter().map(|s| (s.0 - m).exp() / z).collect();
    let per_doc: Vec<Vec<f64>> = segs.iter().map(|s| token_logprobs(&inst.gp, &inst.q, &inst.index.i2[s.1].token_ids, &inst.a).unwrap()).collect();
    let mut ll = 0.0;
    for t in 0..inst.a.len() {
        let p: f64 = weights.iter().zip(&per_doc).map(|(w, lp)| w * lp[t].exp()).sum();
        ll += p.ln();
    }
    (ll, inst.index.i2[segs[0].1].token_ids.clone())
}

fn run_degeneration(n: u64) -> (f64, f64) {
    let rc = RetrieverConfig { dim: 4, ..Default::default() };
    let mut worst_rag: f64 = 0.0;
    let mut worst_k1: f64 = 0.0;
    for seed in 0..n {
        let inst = instance(seed);
        let r = Retriever::new(&inst.index, &inst.eta, &rc);
        let cfg = SftConfig { stride: 1, lookback: 0, k: inst.k, ..Default::default() };
        let (ll, _) = incontext_rag_loglik(&inst.q, &inst.a, &r, &inst.gp, &cfg, Scope::All).unwrap();
        let (want, top) = oracle(&inst);
        worst_rag = worst_rag.max((ll - want).abs());
        let k1 = SftConfig { k: 1, ..cfg };
        let (ll1, _) = incontext_rag_loglik(&inst.q, &inst.a, &r, &inst.gp, &k1, Scope::All).unwrap();
        worst_k1 = worst_k1.max((ll1 - answer_loglikelihood(&inst.gp, &inst.q, &top, &inst.a).unwrap()).abs());
    }
    (worst_rag, worst_k1)
}

pub fn check_degeneration() -> Result<String, String> {
    let (rag, k1) = run_degeneration(100);
    let detail = format!("100 instances, max |diff| {rag:.2e} vs RAG-token oracle, {k1:.2e} for K=1 vs plain product");
    if rag <= 1e-9 && k1 <= 1e-9 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Worst segment-probability and next-token-distribution deviations from 1.
fn run_normalization(n_decodes: u64) -> (f64, f64, usize) {
    let rc = RetrieverConfig { dim: 4, ..Default::default() };
    let mut worst_seg: f64 = 0.0;
    let mut worst_step: f64 = 0.0;
    let mut steps = 0;
    for seed in 0..n_decodes {
        let inst = instance(1000 + seed);
        let r = Retriever::new(&inst.index, &inst.eta, &rc);
        let all: Vec<_> = inst.index.i2.iter().map(|s| s.id).collect();
        let p = r.segment_probability(&inst.q, &all).unwrap();
        worst_seg = worst_seg.max((p.values().sum::<f64>() - 1.0).abs());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = SftConfig { stride: rng.gen_range(1..4), lookback: rng.gen_range(0..3), k: inst.k, ..Default::default() };
        let mut st = MixtureStepper::new(&r, &inst.gp, &inst.q, &cfg, Scope::All);
        let mut prefix: Vec<TokenId> = Vec::new();
        for _ in 0..8 {
            let (_, _, top) = st.stride_retrieval(&prefix).unwrap();
            worst_seg = worst_seg.max((top.hits.iter().map(|h| h.probability).sum::<f64>() - 1.0).abs());
            let lp = st.next(&prefix).unwrap();
            let probs: Vec<f64> = lp.iter().map(|x| x.exp()).collect();
            worst_step = worst_step.max((probs.iter().sum::<f64>() - 1.0).abs());
            steps += 1;
            let mut u = rng.gen::<f64>();
            let mut tok = probs.len() - 1;
            for (i, p) in probs.iter().enumerate() {
                if u < *p {
                    tok = i;
                    break;
                }
                u -= p;
            }
            prefix.push(tok as TokenId);
            if tok as TokenId == EOS {
                break;
            }
        }
    }
    (worst_seg, worst_step, steps)
}

pub fn check_normalization() -> Result<String, String> {
    let (seg, step, steps) = run_normalization(50);
    let detail = format!("segment sums off by <= {seg:.2e}, {steps} decode steps over 50 decodes off by <= {step:.2e}");
    if seg <= 1e-9 && step <= 1e-6 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

#[test]
fn single_retrieval_stride_is_rag_token() {
    let (rag, k1) = run_degeneration(100);
    assert!(rag <= 1e-9, "{rag}");
    assert!(k1 <= 1e-9, "{k1}");
}

#[test]
fn retrieval_and_transition_distributions_normalize() {
    let (seg, step, steps) = run_normalization(50);
    assert!(steps >= 50);
    assert!(seg <= 1e-9, "{seg}");
    assert!(step <= 1e-6, "{step}");
}
