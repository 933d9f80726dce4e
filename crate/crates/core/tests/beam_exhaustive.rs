//! Width-2 beam search against brute-force enumeration of every complete
//! answer over a six-token vocabulary.

use pgt::corpus::{build_indexes, BoundaryPolicy, Document, IndexConfig};
use pgt::generator::GeneratorParams;
use pgt::nn::Arch;
use pgt::params::ParamSet;
use pgt::retriever::{Retriever, RetrieverConfig, RetrieverParams, Scope};
use pgt::sft::{beam_decode, incontext_rag_loglik, SftConfig};
use pgt::tokenizer::{TokenId, EOS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VOCAB: usize = 6;
const MAX_LEN: usize = 3;
pub const FIXTURES: u64 = 25;

/// Every sequence that ends at EOS or reaches `MAX_LEN`.
fn complete_sequences() -> Vec<Vec<TokenId>> {
    let mut out = Vec::new();
    let mut frontier: Vec<Vec<TokenId>> = vec![vec![]];
    while let Some(p) = frontier.pop() {
        for t in 0..VOCAB as TokenId {
            let mut s = p.clone();
            s.push(t);
            if t == EOS || s.len() == MAX_LEN {
                out.push(s);
            } else {
                frontier.push(s);
            }
        }
    }
    out
}

pub struct BeamReport {
    pub fixtures: u64,
    pub candidates: usize,
    pub mismatches: Vec<u64>,
    pub worst_score_gap: f64,
}

pub fn run() -> BeamReport {
    // words that map to ids below six
    let surface = ["cannot", "sep", "<unk>"];
    let all = complete_sequences();
    let mut rep = BeamReport { fixtures: FIXTURES, candidates: all.len(), mismatches: Vec::new(), worst_score_gap: 0.0 };
    for seed in 0..FIXTURES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let docs: Vec<Document> = (0..3)
            .map(|i| Document::new(format!("d{i}"), (0..rng.gen_range(16..40)).map(|_| surface[rng.gen_range(0..3)]).collect::<Vec<_>>().join(" ")))
            .collect();
        let cfg = IndexConfig { i1_max_tokens: 64, i2_max_tokens: 16, chunk_max_tokens: 16, boundary_policy: BoundaryPolicy::Hard, ..Default::default() };
        let index = build_indexes(&docs, &cfg).unwrap();
        let mut eta = RetrieverParams::init(VOCAB, 3, seed);
        let mut gp = GeneratorParams::init(VOCAB, &Arch { dim: 8, ffn: 12, enc_layers: 1, dec_layers: 1, context: 64 }, seed);
        for (_, t) in eta.params.iter_mut().chain(gp.params.iter_mut()) {
            *t = ParamSet::uniform(t.rows(), t.cols(), 1.0, &mut rng);
        }
        let r = Retriever::new(&index, &eta, &RetrieverConfig { dim: 3, ..Default::default() });
        let sft = SftConfig { stride: rng.gen_range(1..3), lookback: rng.gen_range(0..2), k: rng.gen_range(1..3), ..Default::default() };
        let q: Vec<TokenId> = (0..2).map(|_| rng.gen_range(3..VOCAB as TokenId)).collect();
        let mut best: Option<(f64, Vec<TokenId>)> = None;
        for s in &all {
            let (ll, _) = incontext_rag_loglik(&q, s, &r, &gp, &sft, Scope::All).unwrap();
            let better = match &best {
                None => true,
                Some((b, bs)) => ll > *b || (ll == *b && s < bs),
            };
            if better {
                best = Some((ll, s.clone()));
            }
        }
        let (want_score, want) = best.unwrap();
        let got = beam_decode(&q, &r, &gp, &sft, 2, MAX_LEN, Scope::All).unwrap();
        rep.worst_score_gap = rep.worst_score_gap.max((got.score - want_score).abs());
        if got.tokens != want {
            rep.mismatches.push(seed);
        }
    }
    rep
}

pub fn check() -> Result<String, String> {
    let r = run();
    let detail = format!(
        "{} fixtures, {} candidate answers each: {} mismatches {:?}, worst score gap {:.2e}",
        r.fixtures,
        r.candidates,
        r.mismatches.len(),
        r.mismatches,
        r.worst_score_gap
    );
    if r.mismatches.is_empty() && r.fixtures >= 20 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

#[test]
fn width_two_beam_finds_the_best_answer() {
    let r = run();
    assert_eq!(r.candidates, 1 + 5 + 5 * 5 * 6);
    assert!(r.mismatches.is_empty(), "fixtures {:?}", r.mismatches);
}
