//! Analytic gradients of every training loss against central differences.

use std::time::Instant;

use pgt::align::{graph_surrogate, Rollout};
use pgt::calibrate::{graph_calibration_loss, CalibExample, Label};
use pgt::corpus::{build_indexes, ChunkId, Document, IndexConfig, IndexTriplet};
use pgt::generator::GeneratorParams;
use pgt::nn::Arch;
use pgt::params::{finite_difference_check, ParamSet};
use pgt::retriever::ict::{ict_loss, make_pair, IctPair};
use pgt::retriever::{Retriever, RetrieverConfig, RetrieverParams, Scope, EMBEDDING};
use pgt::reward::{graph_contrastive_loss, Composite, OrderingSet, RewardParams, Triple};
use pgt::sft::{graph_incontext_rag_loglik, SftConfig};
use pgt::tokenizer::{TextTokenizer, TokenId, WordTokenizer, EOS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOLERANCE: f64 = 1e-4;

/// Replaces every tensor with uniform noise so no gradient is trivially zero.
pub fn scramble(p: &mut ParamSet, bound: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in p.iter_mut() {
        *t = ParamSet::uniform(t.rows(), t.cols(), bound, &mut rng);
    }
}

fn small_index() -> IndexTriplet {
    let words = ["alpha", "bravo", "carbon", "delta", "ember", "fjord", "gale", "hinge", "iris", "jade"];
    let docs: Vec<Document> = (0..3)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(i);
            let body: Vec<&str> = (0..14).map(|_| words[rng.gen_range(0..words.len())]).collect();
            Document::new(format!("d{i}"), format!("{} .", body.join(" ")))
        })
        .collect();
    build_indexes(&docs, &IndexConfig { i1_max_tokens: 32, i2_max_tokens: 20, chunk_max_tokens: 16, ..Default::default() }).unwrap()
}

fn tiny_generator(vocab: usize, seed: u64) -> GeneratorParams {
    let mut gp = GeneratorParams::init(vocab, &Arch { dim: 6, ffn: 8, enc_layers: 1, dec_layers: 1, context: 64 }, seed);
    scramble(&mut gp.params, 0.5, seed + 1);
    gp
}

pub struct GradReport {
    pub name: &'static str,
    pub params: usize,
    pub rel_err: f64,
}

fn sft_checks() -> Vec<GradReport> {
    let index = small_index();
    let v = index.tokenizer.vocab_size();
    let mut eta = RetrieverParams::init(v, 3, 5);
    scramble(&mut eta.params, 0.6, 6);
    let gp = tiny_generator(v, 7);
    let q = index.tokenizer.encode("delta alpha");
    let a = index.tokenizer.encode("ember bravo carbon");
    let c = SftConfig { stride: 2, lookback: 1, k: 2, ..Default::default() };
    let rc = RetrieverConfig::default();
    let phi = finite_difference_check(&gp.params, |p, g, b| {
        let gp2 = GeneratorParams { params: p.clone(), ..gp.clone() };
        let r = Retriever::new(&index, &eta, &rc);
        let e = eta.params.bind_frozen(g);
        graph_incontext_rag_loglik(g, e.var(EMBEDDING), b, &r, &gp2, &q, &a, &c, Scope::All).unwrap().0
    });
    let eta_err = finite_difference_check(&eta.params, |p, g, b| {
        let eta2 = RetrieverParams { dim: eta.dim, params: p.clone() };
        let r = Retriever::new(&index, &eta2, &rc);
        let phi = gp.params.bind_frozen(g);
        graph_incontext_rag_loglik(g, b.var(EMBEDDING), &phi, &r, &gp, &q, &a, &c, Scope::All).unwrap().0
    });
    vec![
        GradReport { name: "sft loss wrt generator", params: gp.params.num_scalars(), rel_err: phi },
        GradReport { name: "sft loss wrt retriever", params: eta.params.num_scalars(), rel_err: eta_err },
    ]
}

fn reward_check() -> GradReport {
    let vocab = 16;
    let arch = Arch { dim: 6, ffn: 8, enc_layers: 1, dec_layers: 0, context: 40 };
    let mut rp = RewardParams::init(vocab, &arch, 3);
    scramble(&mut rp.params, 0.5, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut draw = |len: usize| -> Vec<TokenId> { (0..len).map(|_| rng.gen_range(5..vocab as TokenId)).collect() };
    let batch: Vec<Composite> = (0..2)
        .map(|i| {
            let (p, pp, q, a, ap) = (draw(5), draw(5), draw(3), draw(2), draw(2));
            let t = |p: &Vec<TokenId>, a: &Vec<TokenId>| Triple { passage: p.clone(), question: q.clone(), answer: a.clone() };
            Composite {
                matched_id: format!("c{i}"),
                nonmatched_id: format!("c{i}-nm"),
                question: String::new(),
                passage: String::new(),
                passage_prime: String::new(),
                answer: String::new(),
                answer_prime: String::new(),
                passage_chunks: vec![],
                passage_prime_chunks: vec![],
                variants: [t(&p, &a), t(&pp, &ap), t(&pp, &a), t(&p, &ap)],
            }
        })
        .collect();
    let err = finite_difference_check(&rp.params, |p, g, b| {
        let r = RewardParams { params: p.clone(), ..rp.clone() };
        graph_contrastive_loss(g, b, &r, &batch, &OrderingSet::default_set()).unwrap()
    });
    GradReport { name: "reward contrastive loss", params: rp.params.num_scalars(), rel_err: err }
}

fn surrogate_check() -> GradReport {
    let gp = tiny_generator(8, 9);
    let rollouts = [
        Rollout {
            source_id: "x".into(),
            passage: vec![5, 6, 7],
            question: vec![4, 6],
            answer: vec![5, 7, EOS],
            logp_old: vec![-1.9, -2.2, -2.0],
            logp_ref: vec![-2.0, -2.1, -2.1],
            rm_score: 1.0,
            kl: 0.0,
            reward: 1.0,
        },
        Rollout {
            source_id: "y".into(),
            passage: vec![6, 6],
            question: vec![7],
            answer: vec![6, EOS],
            logp_old: vec![-2.1, -1.8],
            logp_ref: vec![-2.1, -1.8],
            rm_score: 0.0,
            kl: 0.0,
            reward: 0.0,
        },
    ];
    let refs: Vec<&Rollout> = rollouts.iter().collect();
    // a wide clip keeps the check away from the kinks of the clipped objective
    let err = finite_difference_check(&gp.params, |p, g, b| {
        let pol = GeneratorParams { params: p.clone(), ..gp.clone() };
        graph_surrogate(g, b, &pol, &refs, &[0.8, -0.5], 10.0).unwrap().0
    });
    GradReport { name: "ppo surrogate", params: gp.params.num_scalars(), rel_err: err }
}

fn calibration_check() -> GradReport {
    let tok = WordTokenizer::build([("d", "amber birch cedar delta")], 100).unwrap();
    let v = tok.vocab_size();
    let gp = tiny_generator(v, 11);
    let w = tok.encode("amber birch cedar delta");
    let ex = |i: usize, a: TokenId, label: Label| CalibExample {
        id: format!("c{i}"),
        question: String::new(),
        reference: String::new(),
        answer: String::new(),
        evidence_segments: vec![],
        evidence: vec![],
        question_ids: vec![w[i % 4]],
        answer_ids: vec![a],
        evidence_ids: vec![vec![w[0], w[2]]],
        label,
        confidence: 0.5,
    };
    let batch = vec![ex(0, w[0], Label::Correct), ex(1, w[3], Label::Wrong), ex(2, w[2], Label::Correct)];
    let err = finite_difference_check(&gp.params, |p, g, b| {
        let gp2 = GeneratorParams { params: p.clone(), ..gp.clone() };
        graph_calibration_loss(g, b, &gp2, &tok, &batch).unwrap()
    });
    GradReport { name: "calibration cross-entropy", params: gp.params.num_scalars(), rel_err: err }
}

fn ict_check() -> GradReport {
    let docs: Vec<Document> = (0..3).map(|i| Document::new(format!("d{i}"), format!("a{i} b{i} c{i}. d{i} e{i} a{i}. f{i} b{i} g{i}."))).collect();
    let idx = build_indexes(&docs, &IndexConfig::default()).unwrap();
    let p = RetrieverParams::init(idx.tokenizer.vocab_size(), 3, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let batch: Vec<IctPair> = (0..3).map(|i| make_pair(&idx, ChunkId(i), &mut rng).unwrap()).collect();
    let err = finite_difference_check(&p.params, |ps, g, b| {
        let rp = RetrieverParams { dim: 3, params: ps.clone() };
        ict_loss(g, b.var(EMBEDDING), &rp, &batch)
    });
    GradReport { name: "ict contrastive loss", params: p.params.num_scalars(), rel_err: err }
}

/// Every check, then the whole suite's wall time in seconds.
pub fn run_all() -> (Vec<GradReport>, f64) {
    let t0 = Instant::now();
    let mut out = sft_checks();
    out.push(reward_check());
    out.push(surrogate_check());
    out.push(calibration_check());
    out.push(ict_check());
    (out, t0.elapsed().as_secs_f64())
}

pub fn check() -> Result<String, String> {
    let (reports, secs) = run_all();
    let worst = reports.iter().map(|r| r.rel_err).fold(0.0, f64::max);
    let biggest = reports.iter().map(|r| r.params).max().unwrap_or(0);
    let detail = format!("{} losses, worst rel err {worst:.2e}, largest model {biggest} params, {secs:.1}s", reports.len());
    let bad: Vec<String> =
        reports.iter().filter(|r| !(r.rel_err < TOLERANCE) || r.params >= 10_000).map(|r| format!("{} ({:.2e}, {} params)", r.name, r.rel_err, r.params)).collect();
    if bad.is_empty() && secs < 120.0 {
        Ok(detail)
    } else {
        Err(format!("{detail}; failing: {}", bad.join(", ")))
    }
}

#[test]
fn all_losses_match_finite_differences() {
    let (reports, secs) = run_all();
    for r in &reports {
        println!("{:<28} {:>6} params  rel err {:.3e}", r.name, r.params, r.rel_err);
        assert!(r.rel_err < TOLERANCE, "{}", r.name);
        assert!(r.params < 10_000);
    }
    assert!(secs < 120.0, "{secs}s");
}
