//! PPO fine-tuning of the generator against a reward model, anchored by a
//! KL penalty to the generator as it was when the phase started.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::corpus::IndexTriplet;
use crate::error::{PgtError, Result};
use crate::filter::{evaluate_candidate, Answerer, FilterConfig};
use crate::generator::{generate, graph_token_logprobs, token_logprobs, DecodeMode, GenerationConfig, GeneratorParams};
use crate::lmclient::LmClient;
use crate::params::{Adam, AdamConfig, Bound};
use crate::retriever::{Retriever, Scope};
use crate::reward::{RewardModel, Triple};
use crate::sft::parallel_map;
use crate::synthgen::{generate_seed_set, Format, QATuple};
use crate::tokenizer::{starts_with_refusal, TextTokenizer, TokenId, WordTokenizer, EOS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptSource {
    /// Fresh teacher-generated pairs that pass the filter.
    Pipeline,
    /// Uniform draws from the training tuples.
    Dataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub beta: f64,
    pub clip_eps: f64,
    pub iterations: usize,
    pub rollouts_per_iter: usize,
    /// Gradient steps per batch of rollouts.
    pub ppo_epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub prompt_source: PromptSource,
    /// Condition on the top retrieved segment instead of the sampled passage.
    pub retrieve_instead: bool,
    pub baseline_decay: f64,
    pub max_answer_tokens: usize,
    pub temperature: f64,
    pub threads: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.05,
            clip_eps: 0.2,
            iterations: 50,
            rollouts_per_iter: 16,
            ppo_epochs: 2,
            lr: 1e-3,
            seed: 0,
            prompt_source: PromptSource::Dataset,
            retrieve_instead: false,
            baseline_decay: 0.9,
            max_answer_tokens: 16,
            temperature: 1.0,
            threads: 4,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) {
            return Err(PgtError::Config(format!("align.beta must be >= 0, got {}", self.beta)));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps <= 1.0) {
            return Err(PgtError::Config(format!("align.clip_eps must be in (0, 1], got {}", self.clip_eps)));
        }
        if self.rollouts_per_iter == 0 || self.ppo_epochs == 0 {
            return Err(PgtError::Config("align.rollouts_per_iter and align.ppo_epochs must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return Err(PgtError::Config(format!("align.baseline_decay must be in [0, 1), got {}", self.baseline_decay)));
        }
        self.generation(0).validate()
    }

    fn generation(&self, seed: u64) -> GenerationConfig {
        GenerationConfig { max_answer_tokens: self.max_answer_tokens, mode: DecodeMode::Sample, temperature: self.temperature, seed }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignPrompt {
    pub source_id: String,
    pub passage: Vec<TokenId>,
    pub question: Vec<TokenId>,
}

pub trait PromptSampler {
    fn sample(&self, seed: u64) -> Result<AlignPrompt>;
}

pub struct DatasetPrompts<'a> {
    pub index: &'a IndexTriplet,
    pub tuples: &'a [QATuple],
}

impl PromptSampler for DatasetPrompts<'_> {
    fn sample(&self, seed: u64) -> Result<AlignPrompt> {
        if self.tuples.is_empty() {
            return Err(PgtError::Empty("alignment prompt dataset".into()));
        }
        let t = &self.tuples[ChaCha8Rng::seed_from_u64(seed).gen_range(0..self.tuples.len())];
        Ok(AlignPrompt { source_id: t.id.clone(), passage: t.passage_tokens(self.index), question: self.index.tokenizer.encode(&t.question) })
    }
}

/// One fresh seed-teacher question per draw, kept only if the filter accepts it.
pub struct PipelinePrompts<'a> {
    pub index: &'a IndexTriplet,
    pub teacher: &'a LmClient,
    pub retriever: &'a Retriever<'a>,
    pub answerer: &'a dyn Answerer,
    pub filter: &'a FilterConfig,
    pub max_attempts: usize,
}

impl PipelinePrompts<'_> {
    /// The accepted tuple behind a draw.
    pub fn sample_tuple(&self, seed: u64) -> Result<QATuple> {
        for attempt in 0..self.max_attempts as u64 {
            let s = seed.wrapping_add(attempt.wrapping_mul(0x9e37_79b9));
            let format = if s % 2 == 0 { Format::EX } else { Format::AB };
            let Some(t) = generate_seed_set(self.index, self.teacher, 1, format, s)?.tuples.pop() else { continue };
            if evaluate_candidate(&t, self.filter, self.retriever, self.answerer, s)?.accepted {
                return Ok(t);
            }
        }
        Err(PgtError::Empty(format!("no filter-accepted prompt after {} attempts", self.max_attempts)))
    }
}

impl PromptSampler for PipelinePrompts<'_> {
    fn sample(&self, seed: u64) -> Result<AlignPrompt> {
        let t = self.sample_tuple(seed)?;
        Ok(AlignPrompt { source_id: t.id.clone(), passage: t.passage_tokens(self.index), question: self.index.tokenizer.encode(&t.question) })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub source_id: String,
    pub passage: Vec<TokenId>,
    pub question: Vec<TokenId>,
    /// Sampled tokens, `<eos>` included when emitted.
    pub answer: Vec<TokenId>,
    pub logp_old: Vec<f64>,
    pub logp_ref: Vec<f64>,
    pub rm_score: f64,
    pub kl: f64,
    pub reward: f64,
}

impl Rollout {
    pub fn answer_text(&self) -> &[TokenId] {
        match self.answer.last() {
            Some(&EOS) => &self.answer[..self.answer.len() - 1],
            _ => &self.answer,
        }
    }
}

fn left_sum(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0, |a, &x| a + x)
}

/// Samples an answer from `policy` and scores it.
pub fn rollout(
    prompt: &AlignPrompt,
    policy: &GeneratorParams,
    reference: &GeneratorParams,
    rm: &dyn RewardModel,
    cfg: &PpoConfig,
    seed: u64,
    retriever: Option<&Retriever>,
) -> Result<Rollout> {
    let passage = match (cfg.retrieve_instead, retriever) {
        (true, Some(r)) => {
            let top = r.retrieve_top_segments(&prompt.question, 1, Scope::All)?;
            let hit = top.hits.first().ok_or_else(|| PgtError::Empty("retrieval for alignment prompt".into()))?;
            r.index.i2_segment(hit.segment_id).token_ids.clone()
        }
        (true, None) => return Err(PgtError::Config("align.retrieve_instead needs a retriever".into())),
        (false, _) => prompt.passage.clone(),
    };
    let gen = generate(policy, &prompt.question, &passage, &cfg.generation(seed))?;
    let logp_ref = token_logprobs(reference, &prompt.question, &passage, &gen.tokens)?;
    let kl = left_sum(&gen.logprobs) - left_sum(&logp_ref);
    let answer = gen.answer().to_vec();
    let rm_score = rm.score(&Triple { passage: passage.clone(), question: prompt.question.clone(), answer })?;
    Ok(Rollout {
        source_id: prompt.source_id.clone(),
        passage,
        question: prompt.question.clone(),
        answer: gen.tokens,
        logp_old: gen.logprobs,
        logp_ref,
        rm_score,
        kl,
        reward: rm_score - cfg.beta * kl,
    })
}

/// Exponential moving average of batch-mean rewards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub value: Option<f64>,
    pub decay: f64,
}

impl Baseline {
    pub fn new(decay: f64) -> Self {
        Self { value: None, decay }
    }

    /// Current value, seeded with `batch_mean` on first use.
    pub fn current(&self, batch_mean: f64) -> f64 {
        self.value.unwrap_or(batch_mean)
    }

    pub fn update(&mut self, batch_mean: f64) {
        self.value = Some(match self.value {
            None => batch_mean,
            Some(v) => self.decay * v + (1.0 - self.decay) * batch_mean,
        });
    }
}

/// Clipped surrogate `mean_t min(r_t A, clip(r_t, 1±ε) A)` over all tokens
/// of all rollouts. Returns the objective and the number of clipped tokens.
pub fn graph_surrogate(
    g: &mut Graph,
    b: &Bound,
    policy: &GeneratorParams,
    rollouts: &[&Rollout],
    advantages: &[f64],
    clip_eps: f64,
) -> Result<(Var, usize)> {
    let mut terms = Vec::with_capacity(rollouts.len());
    let mut clipped = 0;
    for (r, &adv) in rollouts.iter().zip(advantages) {
        let lp = graph_token_logprobs(g, b, policy, &r.question, &r.passage, &r.answer)?;
        let old = g.constant(crate::tensor::Tensor::column(r.logp_old.clone()));
        let diff = g.sub(lp, old);
        let ratio = g.exp(diff);
        clipped += g.value(ratio).data().iter().filter(|&&x| x < 1.0 - clip_eps || x > 1.0 + clip_eps).count();
        let bounded = g.clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps);
        let plain = g.scale(ratio, adv);
        let capped = g.scale(bounded, adv);
        terms.push(g.minimum(plain, capped));
    }
    let n: usize = rollouts.iter().map(|r| r.answer.len()).sum();
    let all = g.concat_rows(&terms);
    let total = g.sum(all);
    Ok((g.scale(total, 1.0 / n as f64), clipped))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoStats {
    pub mean_reward: f64,
    pub mean_rm: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub discarded: usize,
}

/// Ascends the clipped surrogate w.r.t. the generator only.
pub fn ppo_update(batch: &[Rollout], policy: &mut GeneratorParams, opt: &mut Adam, baseline: &mut Baseline, cfg: &PpoConfig) -> Result<PpoStats> {
    if batch.is_empty() {
        return Err(PgtError::Empty("ppo batch".into()));
    }
    let ok = |r: &Rollout| r.reward.is_finite() && r.logp_old.iter().chain(&r.logp_ref).all(|x| x.is_finite()) && !r.answer.is_empty();
    let mut kept: Vec<&Rollout> = batch.iter().filter(|r| ok(r)).collect();
    let mut discarded = batch.len() - kept.len();
    let mut stats = PpoStats::default();
    if kept.is_empty() {
        stats.discarded = discarded;
        return Ok(stats);
    }
    let n = kept.len() as f64;
    let mean_reward = kept.iter().map(|r| r.reward).sum::<f64>() / n;
    let base = baseline.current(mean_reward);
    baseline.update(mean_reward);
    stats.mean_reward = mean_reward;
    stats.mean_rm = kept.iter().map(|r| r.rm_score).sum::<f64>() / n;
    stats.mean_kl = kept.iter().map(|r| r.kl).sum::<f64>() / n;
    for _ in 0..cfg.ppo_epochs {
        let mut g = Graph::new();
        let b = policy.params.bind(&mut g);
        // Drop rollouts whose current log-probabilities went non-finite.
        let mut checked = Vec::with_capacity(kept.len());
        for r in kept {
            let lp = token_logprobs(policy, &r.question, &r.passage, &r.answer)?;
            if lp.iter().all(|x| x.is_finite()) {
                checked.push(r);
            } else {
                discarded += 1;
            }
        }
        kept = checked;
        if kept.is_empty() {
            break;
        }
        let adv: Vec<f64> = kept.iter().map(|r| r.reward - base).collect();
        let (obj, clipped) = graph_surrogate(&mut g, &b, policy, &kept, &adv, cfg.clip_eps)?;
        let tokens: usize = kept.iter().map(|r| r.answer.len()).sum();
        stats.clip_fraction = clipped as f64 / tokens as f64;
        let loss = g.neg(obj);
        let grads = b.gradients(&g.backward(loss), &policy.params);
        opt.step(&mut policy.params, &grads);
    }
    stats.discarded = discarded;
    Ok(stats)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignLogLine {
    pub iter: usize,
    pub mean_reward: f64,
    pub mean_rm: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub refusal_rate: f64,
    pub discarded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignOutcome {
    pub policy: GeneratorParams,
    pub reference_hash: String,
    pub log: Vec<AlignLogLine>,
}

/// Runs `cfg.iterations` rounds of rollouts and PPO updates.
pub fn align(
    start: &GeneratorParams,
    sampler: &dyn PromptSampler,
    rm: &dyn RewardModel,
    tok: &WordTokenizer,
    retriever: Option<&Retriever>,
    cfg: &PpoConfig,
) -> Result<AlignOutcome> {
    cfg.validate()?;
    let reference = start.clone();
    let mut policy = start.clone();
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, ..Default::default() }, &policy.params);
    let mut baseline = Baseline::new(cfg.baseline_decay);
    let mut log = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let base = cfg.seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ (iter as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let jobs: Vec<(AlignPrompt, u64)> = (0..cfg.rollouts_per_iter as u64)
            .map(|i| Ok((sampler.sample(base.wrapping_add(2 * i))?, base.wrapping_add(2 * i + 1))))
            .collect::<Result<_>>()?;
        let frozen = &policy;
        let batch: Vec<Rollout> =
            parallel_map(&jobs, cfg.threads, |(p, s)| rollout(p, frozen, &reference, rm, cfg, *s, retriever)).into_iter().collect::<Result<_>>()?;
        let refusal_rate = batch.iter().filter(|r| starts_with_refusal(tok, r.answer_text())).count() as f64 / batch.len() as f64;
        let stats = ppo_update(&batch, &mut policy, &mut opt, &mut baseline, cfg)?;
        log.push(AlignLogLine {
            iter,
            mean_reward: stats.mean_reward,
            mean_rm: stats.mean_rm,
            mean_kl: stats.mean_kl,
            clip_fraction: stats.clip_fraction,
            refusal_rate,
            discarded: stats.discarded,
        });
    }
    Ok(AlignOutcome { policy, reference_hash: reference.params.fingerprint(), log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::tests::tiny_random;
    use crate::params::finite_difference_check;

    struct ConstRm(f64);

    impl RewardModel for ConstRm {
        fn score(&self, _: &Triple) -> Result<f64> {
            Ok(self.0)
        }
    }

    /// +1 when the answer starts with token 7.
    struct StartsWithSeven;

    impl RewardModel for StartsWithSeven {
        fn score(&self, t: &Triple) -> Result<f64> {
            Ok(if t.answer.first() == Some(&7) { 1.0 } else { 0.0 })
        }
    }

    fn prompt() -> AlignPrompt {
        AlignPrompt { source_id: "x".into(), passage: vec![5, 6, 7, 8], question: vec![9, 5] }
    }

    #[test]
    fn same_policy_has_zero_kl() {
        let gp = tiny_random(12, 1);
        let cfg = PpoConfig::default();
        for s in 0..5 {
            let r = rollout(&prompt(), &gp, &gp, &ConstRm(0.7), &cfg, s, None).unwrap();
            assert_eq!(r.kl, 0.0);
            assert_eq!(r.reward, 0.7);
        }
    }

    #[test]
    fn zero_beta_reward_is_rm_score() {
        let gp = tiny_random(12, 1);
        let other = tiny_random(12, 2);
        let cfg = PpoConfig { beta: 0.0, ..Default::default() };
        let r = rollout(&prompt(), &gp, &other, &StartsWithSeven, &cfg, 3, None).unwrap();
        assert_ne!(r.kl, 0.0);
        assert_eq!(r.reward, r.rm_score);
        let cfg = PpoConfig::default();
        for s in 0..20 {
            let r = rollout(&prompt(), &gp, &other, &StartsWithSeven, &cfg, s, None).unwrap();
            let want = if r.answer.first() == Some(&7) { 1.0 } else { 0.0 } - 0.05 * r.kl;
            assert_eq!(r.reward, want);
        }
    }

    #[test]
    fn kl_estimate_is_nonnegative_on_average() {
        let pi = tiny_random(8, 3);
        let reference = tiny_random(8, 4);
        let cfg = PpoConfig { max_answer_tokens: 3, ..Default::default() };
        let kls: Vec<f64> = (0..1000).map(|s| rollout(&prompt(), &pi, &reference, &ConstRm(0.0), &cfg, s, None).unwrap().kl).collect();
        let m = kls.iter().sum::<f64>() / kls.len() as f64;
        let sd = (kls.iter().map(|k| (k - m).powi(2)).sum::<f64>() / (kls.len() - 1) as f64).sqrt();
        assert!(m > -3.0 * sd / (kls.len() as f64).sqrt(), "mean {m} sd {sd}");
    }

    #[test]
    fn zero_advantage_leaves_policy_unchanged() {
        let mut gp = tiny_random(12, 5);
        let before = gp.clone();
        let cfg = PpoConfig::default();
        let batch: Vec<Rollout> = (0..4).map(|s| rollout(&prompt(), &gp, &gp, &ConstRm(1.0), &cfg, s, None).unwrap()).collect();
        let mut opt = Adam::new(AdamConfig::default(), &gp.params);
        let mut baseline = Baseline::new(0.9);
        let stats = ppo_update(&batch, &mut gp, &mut opt, &mut baseline, &cfg).unwrap();
        assert_eq!(stats.mean_reward, 1.0);
        assert_eq!(gp, before);
    }

    #[test]
    fn surrogate_at_old_policy_is_unclipped() {
        let gp = tiny_random(12, 6);
        let cfg = PpoConfig::default();
        let batch: Vec<Rollout> = (0..3).map(|s| rollout(&prompt(), &gp, &gp, &StartsWithSeven, &cfg, s, None).unwrap()).collect();
        let refs: Vec<&Rollout> = batch.iter().collect();
        let adv = [0.5, -1.0, 2.0];
        let mut g = Graph::new();
        let b = gp.params.bind_frozen(&mut g);
        let (obj, clipped) = graph_surrogate(&mut g, &b, &gp, &refs, &adv, 0.2).unwrap();
        assert_eq!(clipped, 0);
        let n: usize = batch.iter().map(|r| r.answer.len()).sum();
        let want = batch.iter().zip(adv).map(|(r, a)| r.answer.len() as f64 * a).sum::<f64>() / n as f64;
        assert!((g.scalar(obj) - want).abs() < 1e-12);
    }

    #[test]
    fn surrogate_gradient_matches_finite_differences() {
        let gp = tiny_random(6, 7);
        let r = Rollout {
            source_id: "x".into(),
            passage: vec![5],
            question: vec![4],
            answer: vec![5, 2],
            logp_old: vec![-1.6, -1.9],
            logp_ref: vec![-1.7, -1.8],
            rm_score: 1.0,
            kl: 0.0,
            reward: 1.0,
        };
        let err = finite_difference_check(&gp.params, |p, g, b| {
            let pol = GeneratorParams { params: p.clone(), ..gp.clone() };
            graph_surrogate(g, b, &pol, &[&r], &[0.8], 10.0).unwrap().0
        });
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn dataset_prompts_are_reproducible() {
        let index = crate::synthgen::tests::toy_index();
        let t = QATuple {
            id: "only".into(),
            passage_segment_ids: vec![crate::synthgen::PassageRef::I2(index.i2[0].id)],
            question: "what is it ?".into(),
            answer: "it".into(),
            format: Format::AB,
            matching: true,
            rationale: None,
            provenance: crate::synthgen::Provenance::SeedTeacher,
            gen_logprob: None,
            filter_scores: Default::default(),
        };
        let tuples = vec![t.clone()];
        let s = DatasetPrompts { index: &index, tuples: &tuples };
        let p = s.sample(3).unwrap();
        assert_eq!(p.passage, t.passage_tokens(&index));
        assert_eq!(p.question, index.tokenizer.encode("what is it ?"));
        assert!(DatasetPrompts { index: &index, tuples: &[] }.sample(0).is_err());
    }

    #[test]
    fn reward_rises_on_toy_policy() {
        let gp = tiny_random(10, 8);
        let tok = WordTokenizer::base();
        let sampler = FixedPrompt(prompt());
        let cfg = PpoConfig { iterations: 30, lr: 1e-2, max_answer_tokens: 3, threads: 1, ..Default::default() };
        let out = align(&gp, &sampler, &StartsWithSeven, &tok, None, &cfg).unwrap();
        let head: f64 = out.log[..5].iter().map(|l| l.mean_rm).sum::<f64>() / 5.0;
        let tail: f64 = out.log[25..].iter().map(|l| l.mean_rm).sum::<f64>() / 5.0;
        assert!(tail > head + 0.2, "{head} -> {tail}");
        assert_eq!(out.reference_hash, gp.params.fingerprint());
    }

    struct FixedPrompt(AlignPrompt);

    impl PromptSampler for FixedPrompt {
        fn sample(&self, _: u64) -> Result<AlignPrompt> {
            Ok(self.0.clone())
        }
    }
}
