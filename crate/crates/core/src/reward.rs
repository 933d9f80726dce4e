//! Reward model: composite tuples built from matching / non-matching pairs,
//! an encoder scoring `[p sep q sep a]`, and a pairwise logistic loss over
//! relevance orderings.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_sigmoid, Graph, Var};
use crate::corpus::{ChunkId, IndexTriplet};
use crate::error::{PgtError, Result};
use crate::nn::{self, Arch};
use crate::params::{Adam, AdamConfig, Bound, ParamSet};
use crate::synthgen::QATuple;
use crate::tensor::Tensor;
use crate::tokenizer::{TextTokenizer, TokenId, SEP, UNK};

pub const EMBEDDING: &str = "emb";
pub const HEAD_HIDDEN: &str = "head.w1";
pub const HEAD_HIDDEN_B: &str = "head.b1";
pub const HEAD_OUT: &str = "head.w2";
pub const HEAD_OUT_B: &str = "head.b2";

/// Token triple `(passage, question, answer)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Triple {
    pub passage: Vec<TokenId>,
    pub question: Vec<TokenId>,
    pub answer: Vec<TokenId>,
}

/// The four variants `(p,q,a) (p′,q,a′) (p′,q,a) (p,q,a′)` of one
/// matching / non-matching pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Composite {
    pub matched_id: String,
    pub nonmatched_id: String,
    pub question: String,
    pub passage: String,
    pub passage_prime: String,
    pub answer: String,
    pub answer_prime: String,
    pub passage_chunks: Vec<ChunkId>,
    pub passage_prime_chunks: Vec<ChunkId>,
    /// Variants 1..4 in order.
    pub variants: [Triple; 4],
}

/// Pairs every matching tuple with its `-nm` partner, in matching order.
pub fn pair_by_id<'a>(matching: &'a [QATuple], nonmatching: &'a [QATuple]) -> (Vec<&'a QATuple>, Vec<&'a QATuple>) {
    let by_id: BTreeMap<&str, &QATuple> = nonmatching.iter().map(|t| (t.id.as_str(), t)).collect();
    matching.iter().filter_map(|m| by_id.get(format!("{}-nm", m.id).as_str()).map(|nm| (m, *nm))).unzip()
}

pub fn assemble_composites(matched: &[&QATuple], nonmatched: &[&QATuple], index: &IndexTriplet) -> Result<Vec<Composite>> {
    if matched.len() != nonmatched.len() {
        return Err(PgtError::InvalidInput(format!("{} matching tuples but {} non-matching", matched.len(), nonmatched.len())));
    }
    let tok = &index.tokenizer;
    matched
        .iter()
        .zip(nonmatched)
        .map(|(m, nm)| {
            if m.question != nm.question {
                return Err(PgtError::InvalidInput(format!("question mismatch between {} and {}", m.id, nm.id)));
            }
            if !m.matching || nm.matching {
                return Err(PgtError::InvalidInput(format!("pair ({}, {}) must be (matching, non-matching)", m.id, nm.id)));
            }
            let p = m.passage_tokens(index);
            let pp = nm.passage_tokens(index);
            let q = tok.encode(&m.question);
            let a = tok.encode(&m.answer);
            let ap = tok.encode(&nm.answer);
            let t = |passage: &Vec<TokenId>, answer: &Vec<TokenId>| Triple { passage: passage.clone(), question: q.clone(), answer: answer.clone() };
            Ok(Composite {
                matched_id: m.id.clone(),
                nonmatched_id: nm.id.clone(),
                question: m.question.clone(),
                passage: index.text(&p),
                passage_prime: index.text(&pp),
                answer: m.answer.clone(),
                answer_prime: nm.answer.clone(),
                passage_chunks: m.passage_chunks(index),
                passage_prime_chunks: nm.passage_chunks(index),
                variants: [t(&p, &a), t(&pp, &ap), t(&pp, &a), t(&p, &ap)],
            })
        })
        .collect()
}

/// Ordered pairs `(i, j)` (1-based) meaning variant `i` should outscore `j`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderingSet(pub Vec<(usize, usize)>);

impl OrderingSet {
    pub fn default_set() -> Self {
        OrderingSet(vec![(1, 3), (1, 4), (2, 3), (2, 4)])
    }

    /// Older term set ending in `(2, 1)` instead of `(2, 4)`.
    pub fn legacy() -> Self {
        OrderingSet(vec![(1, 3), (1, 4), (2, 3), (2, 1)])
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(PgtError::Config("ordering set is empty".into()));
        }
        for &(i, j) in &self.0 {
            if !(1..=4).contains(&i) || !(1..=4).contains(&j) || i == j {
                return Err(PgtError::Config(format!("invalid ordering ({i}, {j})")));
            }
            if self.0.contains(&(j, i)) {
                return Err(PgtError::Config(format!("ordering ({i}, {j}) appears with its reverse")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardParams {
    pub arch: Arch,
    pub vocab_size: usize,
    pub params: ParamSet,
}

impl RewardParams {
    /// Random encoder, zero output layer (every score starts at 0).
    pub fn init(vocab_size: usize, arch: &Arch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        p.insert(EMBEDDING, ParamSet::uniform(vocab_size, arch.dim, 0.5, &mut rng));
        nn::init_stack(&mut p, "enc", arch.enc_layers, arch, false, &mut rng);
        let bound = (1.0 / arch.dim as f64).sqrt();
        p.insert(HEAD_HIDDEN, ParamSet::uniform(arch.dim, arch.dim, bound, &mut rng));
        p.insert(HEAD_HIDDEN_B, Tensor::zeros(1, arch.dim));
        p.insert(HEAD_OUT, Tensor::zeros(arch.dim, 1));
        p.insert(HEAD_OUT_B, Tensor::zeros(1, 1));
        Self { arch: arch.clone(), vocab_size, params: p }
    }

    /// `p sep q sep a`, dropping passage tokens from the end on overflow.
    pub fn input(&self, t: &Triple) -> Result<Vec<usize>> {
        let fixed = t.question.len() + t.answer.len() + 2;
        if fixed > self.arch.context {
            return Err(PgtError::ContextOverflow { what: "reward input (question + answer)".into(), needed: fixed, limit: self.arch.context });
        }
        let keep = t.passage.len().min(self.arch.context - fixed);
        let mut ids = Vec::with_capacity(keep + fixed);
        ids.extend_from_slice(&t.passage[..keep]);
        ids.push(SEP);
        ids.extend_from_slice(&t.question);
        ids.push(SEP);
        ids.extend_from_slice(&t.answer);
        Ok(ids.into_iter().map(|i| if (i as usize) < self.vocab_size { i as usize } else { UNK as usize }).collect())
    }
}

/// Scalar score: mean-pooled encoder states through a one-hidden-layer head.
pub fn graph_reward(g: &mut Graph, b: &Bound, rp: &RewardParams, t: &Triple) -> Result<Var> {
    let ids = rp.input(t)?;
    let x = nn::embed(g, b.var(EMBEDDING), &ids);
    let h = nn::encoder(g, b, "enc", rp.arch.enc_layers, x);
    let pooled = g.mean_rows(h);
    let z = g.matmul(pooled, b.var(HEAD_HIDDEN));
    let z = g.add_row(z, b.var(HEAD_HIDDEN_B));
    let z = g.tanh(z);
    let s = g.matmul(z, b.var(HEAD_OUT));
    Ok(g.add_row(s, b.var(HEAD_OUT_B)))
}

pub fn reward_score(rp: &RewardParams, t: &Triple) -> Result<f64> {
    let mut g = Graph::new();
    let b = rp.params.bind_frozen(&mut g);
    let s = graph_reward(&mut g, &b, rp, t)?;
    Ok(g.scalar(s))
}

/// Anything that scores `(p, q, a)`.
pub trait RewardModel: Sync {
    fn score(&self, t: &Triple) -> Result<f64>;
}

impl RewardModel for RewardParams {
    fn score(&self, t: &Triple) -> Result<f64> {
        reward_score(self, t)
    }
}

/// `−(1/|O|) · mean_batch Σ_(i,j) log σ(s_i − s_j)` from precomputed scores.
pub fn contrastive_loss_from_scores(scores: &[[f64; 4]], orderings: &OrderingSet) -> f64 {
    let per: Vec<f64> = scores.iter().map(|s| orderings.0.iter().map(|&(i, j)| log_sigmoid(s[i - 1] - s[j - 1])).sum::<f64>()).collect();
    -(per.iter().sum::<f64>() / per.len() as f64) / orderings.0.len() as f64
}

pub fn graph_contrastive_loss(g: &mut Graph, b: &Bound, rp: &RewardParams, batch: &[Composite], orderings: &OrderingSet) -> Result<Var> {
    let mut terms = Vec::new();
    for c in batch {
        let s: Vec<Var> = c.variants.iter().map(|t| graph_reward(g, b, rp, t)).collect::<Result<_>>()?;
        for &(i, j) in &orderings.0 {
            let d = g.sub(s[i - 1], s[j - 1]);
            terms.push(g.log_sigmoid(d));
        }
    }
    let all = g.concat_rows(&terms);
    let total = g.sum(all);
    Ok(g.scale(total, -1.0 / (batch.len() * orderings.0.len()) as f64))
}

pub fn contrastive_loss(rp: &RewardParams, batch: &[Composite], orderings: &OrderingSet) -> Result<f64> {
    orderings.validate()?;
    let mut g = Graph::new();
    let b = rp.params.bind_frozen(&mut g);
    let l = graph_contrastive_loss(&mut g, &b, rp, batch, orderings)?;
    Ok(g.scalar(l))
}

/// Fraction of ordered pairs scored in the right direction; ties count half.
pub fn pairwise_accuracy(model: &dyn RewardModel, data: &[Composite], orderings: &OrderingSet) -> Result<f64> {
    let mut hits = 0.0;
    let mut total = 0usize;
    for c in data {
        let s: Vec<f64> = c.variants.iter().map(|t| model.score(t)).collect::<Result<_>>()?;
        for &(i, j) in &orderings.0 {
            let d = s[i - 1] - s[j - 1];
            hits += if d > 0.0 {
                1.0
            } else if d == 0.0 {
                0.5
            } else {
                0.0
            };
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { hits / total as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub arch: Arch,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// Held-out share of T*.
    pub holdout: f64,
    /// Use `OrderingSet::legacy` instead of the default set.
    pub legacy_orderings: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            arch: Arch { dim: 16, ffn: 32, enc_layers: 1, dec_layers: 0, context: 160 },
            lr: 3e-3,
            epochs: 20,
            batch: 16,
            seed: 0,
            holdout: 0.2,
            legacy_orderings: false,
        }
    }
}

impl RewardConfig {
    pub fn orderings(&self) -> OrderingSet {
        if self.legacy_orderings {
            OrderingSet::legacy()
        } else {
            OrderingSet::default_set()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardOutcome {
    pub params: RewardParams,
    pub losses: Vec<f64>,
    pub initial_accuracy: f64,
    pub heldout_accuracy: f64,
    pub train_size: usize,
    pub heldout_size: usize,
}

/// Shuffled train / held-out split.
pub fn split_composites(data: &[Composite], holdout: f64, seed: u64) -> (Vec<Composite>, Vec<Composite>) {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x4e1d));
    let n_held = ((data.len() as f64 * holdout).round() as usize).clamp(1, data.len() - 1);
    let held = idx[..n_held].iter().map(|&i| data[i].clone()).collect();
    let train = idx[n_held..].iter().map(|&i| data[i].clone()).collect();
    (train, held)
}

pub fn train_reward(data: &[Composite], init: RewardParams, cfg: &RewardConfig) -> Result<RewardOutcome> {
    if data.len() < 2 {
        return Err(PgtError::InvalidInput(format!("reward training needs at least 2 composites, found {}", data.len())));
    }
    if cfg.batch == 0 {
        return Err(PgtError::Config("reward.batch must be >= 1".into()));
    }
    let orderings = cfg.orderings();
    orderings.validate()?;
    let (train, held) = split_composites(data, cfg.holdout, cfg.seed);
    let mut params = init;
    let initial_accuracy = pairwise_accuracy(&params, &held, &orderings)?;
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, ..Default::default() }, &params.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut losses = Vec::new();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch) {
            let batch: Vec<Composite> = idx.iter().map(|&i| train[i].clone()).collect();
            let mut g = Graph::new();
            let b = params.params.bind(&mut g);
            let loss = graph_contrastive_loss(&mut g, &b, &params, &batch, &orderings)?;
            let l = g.scalar(loss);
            if !l.is_finite() {
                return Err(PgtError::NonFinite { what: "reward loss".into(), item: batch[0].matched_id.clone() });
            }
            losses.push(l);
            let grads = b.gradients(&g.backward(loss), &params.params);
            opt.step(&mut params.params, &grads);
        }
    }
    let heldout_accuracy = pairwise_accuracy(&params, &held, &orderings)?;
    Ok(RewardOutcome { params, losses, initial_accuracy, heldout_accuracy, train_size: train.len(), heldout_size: held.len() })
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RewardCheckpoint {
    pub format_version: u32,
    pub tokenizer_fingerprint: String,
    pub params: RewardParams,
}
