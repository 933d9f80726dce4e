//! Small encoder-decoder generator φ.
//!
//! The encoder reads `q sep d`; the decoder reads `<bos> a_1 .. a_{n-1}` and
//! predicts `a_1 .. a_n`. The output projection starts at zero, so an
//! untrained model is uniform over the vocabulary.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{PgtError, Result};
use crate::jsonio::{read_json, write_json};
use crate::nn::{self, Arch};
use crate::params::{Bound, ParamSet};
use crate::tensor::{softmax, Tensor};
use crate::tokenizer::{TextTokenizer, TokenId, WordTokenizer, BOS, EOS, SEP, UNK};

pub const EMBEDDING: &str = "emb";
pub const OUT_W: &str = "out.w";
pub const OUT_B: &str = "out.b";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub arch: Arch,
    pub vocab_size: usize,
    pub params: ParamSet,
}

impl GeneratorParams {
    pub fn init(vocab_size: usize, arch: &Arch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        p.insert(EMBEDDING, ParamSet::uniform(vocab_size, arch.dim, 0.5, &mut rng));
        nn::init_stack(&mut p, "enc", arch.enc_layers, arch, false, &mut rng);
        nn::init_stack(&mut p, "dec", arch.dec_layers, arch, true, &mut rng);
        p.insert(OUT_W, Tensor::zeros(arch.dim, vocab_size));
        p.insert(OUT_B, Tensor::zeros(1, vocab_size));
        Self { arch: arch.clone(), vocab_size, params: p }
    }

    fn clamp(&self, ids: &[TokenId]) -> Vec<usize> {
        ids.iter().map(|&i| if (i as usize) < self.vocab_size { i as usize } else { UNK as usize }).collect()
    }

    fn check(&self, what: &str, len: usize) -> Result<()> {
        if len > self.arch.context {
            return Err(PgtError::ContextOverflow { what: what.to_string(), needed: len, limit: self.arch.context });
        }
        Ok(())
    }
}

/// Encoder input `q sep d`.
pub fn source_tokens(q: &[TokenId], d: &[TokenId]) -> Vec<TokenId> {
    let mut s = Vec::with_capacity(q.len() + d.len() + 1);
    s.extend_from_slice(q);
    s.push(SEP);
    s.extend_from_slice(d);
    s
}

/// Decoder input `<bos> a_1 .. a_{n-1}`.
pub fn decoder_input(a: &[TokenId]) -> Vec<TokenId> {
    let mut s = Vec::with_capacity(a.len());
    s.push(BOS);
    s.extend_from_slice(&a[..a.len().saturating_sub(1)]);
    s
}

pub fn graph_encode(g: &mut Graph, b: &Bound, gp: &GeneratorParams, src: &[TokenId]) -> Result<Var> {
    gp.check("encoder input (question + sep + document)", src.len())?;
    let x = nn::embed(g, b.var(EMBEDDING), &gp.clamp(src));
    Ok(nn::encoder(g, b, "enc", gp.arch.enc_layers, x))
}

/// Log-softmax over the vocabulary for every decoder position.
pub fn graph_decode(g: &mut Graph, b: &Bound, gp: &GeneratorParams, memory: Var, dec_in: &[TokenId]) -> Result<Var> {
    gp.check("decoder input", dec_in.len())?;
    let x = nn::embed(g, b.var(EMBEDDING), &gp.clamp(dec_in));
    let h = nn::decoder(g, b, "dec", gp.arch.dec_layers, x, memory);
    let logits = g.matmul(h, b.var(OUT_W));
    let logits = g.add_row(logits, b.var(OUT_B));
    Ok(g.log_softmax_rows(logits))
}

/// Teacher-forced `log P(a_t | q, d, a_<t)` as an `n x 1` column.
pub fn graph_token_logprobs(g: &mut Graph, b: &Bound, gp: &GeneratorParams, q: &[TokenId], d: &[TokenId], a: &[TokenId]) -> Result<Var> {
    if a.is_empty() {
        return Err(PgtError::InvalidInput("answer must have at least one token".into()));
    }
    let memory = graph_encode(g, b, gp, &source_tokens(q, d))?;
    graph_answer_logprobs(g, b, gp, memory, a)
}

/// Like [`graph_token_logprobs`] with a precomputed encoder memory.
pub fn graph_answer_logprobs(g: &mut Graph, b: &Bound, gp: &GeneratorParams, memory: Var, a: &[TokenId]) -> Result<Var> {
    let lp = graph_decode(g, b, gp, memory, &decoder_input(a))?;
    let idx: Vec<(usize, usize)> = gp.clamp(a).into_iter().enumerate().collect();
    Ok(g.pick(lp, &idx))
}

fn left_sum(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0, |acc, &x| acc + x)
}

pub fn token_logprobs(gp: &GeneratorParams, q: &[TokenId], d: &[TokenId], a: &[TokenId]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let b = gp.params.bind_frozen(&mut g);
    let col = graph_token_logprobs(&mut g, &b, gp, q, d, a)?;
    Ok(g.value(col).data().to_vec())
}

/// `Σ_t log P(a_t | q, d, a_<t)`, summed left to right.
pub fn answer_loglikelihood(gp: &GeneratorParams, q: &[TokenId], d: &[TokenId], a: &[TokenId]) -> Result<f64> {
    Ok(left_sum(&token_logprobs(gp, q, d, a)?))
}

/// Full next-token log-distribution after `prefix`.
pub fn next_token_logprobs(gp: &GeneratorParams, q: &[TokenId], d: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f64>> {
    let mut s = Stepper::new(gp, &source_tokens(q, d))?;
    s.next(prefix)
}

/// Incremental decoding against one encoded source.
pub struct Stepper<'a> {
    gp: &'a GeneratorParams,
    g: Graph,
    b: Bound,
    memory: Var,
    base_len: usize,
}

impl<'a> Stepper<'a> {
    pub fn new(gp: &'a GeneratorParams, src: &[TokenId]) -> Result<Self> {
        let mut g = Graph::new();
        let b = gp.params.bind_frozen(&mut g);
        let memory = graph_encode(&mut g, &b, gp, src)?;
        let base_len = g.len();
        Ok(Self { gp, g, b, memory, base_len })
    }

    /// Log-distribution of the token following `prefix`.
    pub fn next(&mut self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let mut dec_in = Vec::with_capacity(prefix.len() + 1);
        dec_in.push(BOS);
        dec_in.extend_from_slice(prefix);
        let lp = graph_decode(&mut self.g, &self.b, self.gp, self.memory, &dec_in)?;
        let row = self.g.value(lp).row(prefix.len()).to_vec();
        self.truncate();
        Ok(row)
    }

    fn truncate(&mut self) {
        self.g.truncate(self.base_len);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Sample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub max_answer_tokens: usize,
    pub mode: DecodeMode,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self { max_answer_tokens: 24, mode: DecodeMode::Greedy, temperature: 1.0, seed: 0 }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mode == DecodeMode::Sample && !(self.temperature > 0.0) {
            return Err(PgtError::Config("sampling temperature must be > 0".into()));
        }
        if self.max_answer_tokens == 0 {
            return Err(PgtError::Config("max_answer_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    /// Emitted tokens, including a final `<eos>` when one was produced.
    pub tokens: Vec<TokenId>,
    /// Model log-probabilities (temperature 1) of each emitted token.
    pub logprobs: Vec<f64>,
}

impl Generation {
    /// Tokens without the trailing `<eos>`.
    pub fn answer(&self) -> &[TokenId] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }

    pub fn total_logprob(&self) -> f64 {
        left_sum(&self.logprobs)
    }
}

/// Lowest-id argmax.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Draws from `softmax(logprobs / temperature)`.
pub fn sample_index(logprobs: &[f64], temperature: f64, rng: &mut impl Rng) -> usize {
    let scaled: Vec<f64> = logprobs.iter().map(|&l| l / temperature).collect();
    let p = softmax(&scaled);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    argmax(&p)
}

pub fn generate(gp: &GeneratorParams, q: &[TokenId], d: &[TokenId], cfg: &GenerationConfig) -> Result<Generation> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stepper = Stepper::new(gp, &source_tokens(q, d))?;
    let mut out = Generation { tokens: Vec::new(), logprobs: Vec::new() };
    while out.tokens.len() < cfg.max_answer_tokens {
        let lp = stepper.next(&out.tokens)?;
        let t = match cfg.mode {
            DecodeMode::Greedy => argmax(&lp),
            DecodeMode::Sample => sample_index(&lp, cfg.temperature, &mut rng),
        };
        out.tokens.push(t as TokenId);
        out.logprobs.push(lp[t]);
        if t as TokenId == EOS {
            break;
        }
    }
    Ok(out)
}

/// The correctness-judging prompt as text.
pub fn judging_prompt(q: &str, docs: &[String], a: &str) -> String {
    format!("question: {q} sep evidence: {} sep proposed answer: {a} sep is the proposed answer correct or wrong:", docs.join(" sep "))
}

/// Token form of [`judging_prompt`], built without a text round trip.
pub fn judging_prompt_ids(tok: &WordTokenizer, q: &[TokenId], docs: &[Vec<TokenId>], a: &[TokenId]) -> Vec<TokenId> {
    let mut s = tok.encode("question:");
    s.extend_from_slice(q);
    s.push(SEP);
    s.extend(tok.encode("evidence:"));
    for (i, d) in docs.iter().enumerate() {
        if i > 0 {
            s.push(SEP);
        }
        s.extend_from_slice(d);
    }
    s.push(SEP);
    s.extend(tok.encode("proposed answer:"));
    s.extend_from_slice(a);
    s.push(SEP);
    s.extend(tok.encode("is the proposed answer correct or wrong:"));
    s
}

/// Two-way log-probabilities `(log p_correct, log p_wrong)` renormalized over
/// the two label tokens, each `1 x 1`.
pub fn graph_indirect(g: &mut Graph, b: &Bound, gp: &GeneratorParams, tok: &WordTokenizer, prompt: &[TokenId]) -> Result<(Var, Var)> {
    gp.check("correctness-judging prompt", prompt.len())?;
    let memory = graph_encode(g, b, gp, prompt)?;
    let lp = graph_decode(g, b, gp, memory, &[BOS])?;
    let pair = g.pick(lp, &[(0, tok.correct_id() as usize), (0, tok.wrong_id() as usize)]);
    let norm = g.log_sum_exp(pair);
    let c = g.pick(lp, &[(0, tok.correct_id() as usize)]);
    let w = g.pick(lp, &[(0, tok.wrong_id() as usize)]);
    Ok((g.sub(c, norm), g.sub(w, norm)))
}

/// `p(correct) / (p(correct) + p(wrong))` for the judging prompt.
pub fn indirect_correct_probability(gp: &GeneratorParams, tok: &WordTokenizer, q: &[TokenId], docs: &[Vec<TokenId>], a: &[TokenId]) -> Result<f64> {
    let prompt = judging_prompt_ids(tok, q, docs, a);
    let mut g = Graph::new();
    let b = gp.params.bind_frozen(&mut g);
    let (c, w) = graph_indirect(&mut g, &b, gp, tok, &prompt)?;
    Ok(1.0 / (1.0 + (g.scalar(w) - g.scalar(c)).exp()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorCheckpoint {
    pub format_version: u32,
    pub tokenizer_fingerprint: String,
    pub params: GeneratorParams,
}

impl GeneratorCheckpoint {
    pub fn save(params: &GeneratorParams, tok: &WordTokenizer, path: &Path) -> Result<()> {
        let ck = GeneratorCheckpoint { format_version: CHECKPOINT_VERSION, tokenizer_fingerprint: tok.fingerprint(), params: params.clone() };
        write_json(path, &ck)
    }

    pub fn load(path: &Path, tok: &WordTokenizer) -> Result<GeneratorParams> {
        let ck: GeneratorCheckpoint = read_json(path)?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(PgtError::InvalidInput(format!("generator checkpoint version {}", ck.format_version)));
        }
        if ck.tokenizer_fingerprint != tok.fingerprint() {
            return Err(PgtError::InvalidInput(format!("{}: tokenizer does not match the index", path.display())));
        }
        Ok(ck.params)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::params::{finite_difference_check, Adam, AdamConfig};
    use crate::tensor::log_sum_exp;

    pub(crate) fn tiny_arch() -> Arch {
        Arch { dim: 8, ffn: 12, enc_layers: 1, dec_layers: 1, context: 64 }
    }

    /// Random output head so gradients reach every parameter.
    pub(crate) fn tiny_random(vocab: usize, seed: u64) -> GeneratorParams {
        let mut gp = GeneratorParams::init(vocab, &tiny_arch(), seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        *gp.params.get_mut(OUT_W) = ParamSet::uniform(8, vocab, 0.8, &mut rng);
        *gp.params.get_mut(OUT_B) = ParamSet::uniform(1, vocab, 0.3, &mut rng);
        gp
    }

    #[test]
    fn uniform_at_init() {
        let gp = GeneratorParams::init(20, &tiny_arch(), 0);
        let ll = answer_loglikelihood(&gp, &[5, 6], &[7, 8, 9], &[10]).unwrap();
        assert!((ll - (1.0f64 / 20.0).ln()).abs() < 0.01);
    }

    #[test]
    fn single_token_answers_sum_to_one() {
        let gp = tiny_random(15, 1);
        let probs: Vec<f64> = (0..15).map(|t| answer_loglikelihood(&gp, &[5], &[6, 7], &[t]).unwrap()).collect();
        assert!((log_sum_exp(&probs)).abs() < 1e-6);
    }

    #[test]
    fn loglik_is_sum_of_step_logprobs() {
        let gp = tiny_random(15, 2);
        let a = [7, 8, 9, 2];
        let total = answer_loglikelihood(&gp, &[5], &[6, 11], &a).unwrap();
        let mut sum = 0.0;
        for t in 0..a.len() {
            sum += next_token_logprobs(&gp, &[5], &[6, 11], &a[..t]).unwrap()[a[t] as usize];
        }
        assert_eq!(total, sum);
    }

    #[test]
    fn greedy_generation_matches_teacher_forcing_bitwise() {
        let gp = tiny_random(15, 3);
        let cfg = GenerationConfig { max_answer_tokens: 6, ..Default::default() };
        let gen = generate(&gp, &[5, 6], &[7, 8], &cfg).unwrap();
        let tf = answer_loglikelihood(&gp, &[5, 6], &[7, 8], &gen.tokens).unwrap();
        assert_eq!(tf.to_bits(), gen.total_logprob().to_bits());
    }

    #[test]
    fn sampling_is_seeded_and_cold_sampling_is_greedy() {
        let gp = tiny_random(15, 4);
        let s = GenerationConfig { max_answer_tokens: 5, mode: DecodeMode::Sample, temperature: 1.0, seed: 9 };
        assert_eq!(generate(&gp, &[5], &[6], &s).unwrap(), generate(&gp, &[5], &[6], &s).unwrap());
        let cold = GenerationConfig { temperature: 1e-6, ..s };
        let greedy = GenerationConfig { max_answer_tokens: 5, ..Default::default() };
        assert_eq!(generate(&gp, &[5], &[6], &cold).unwrap().tokens, generate(&gp, &[5], &[6], &greedy).unwrap().tokens);
    }

    #[test]
    fn context_overflow_names_lengths() {
        let gp = GeneratorParams::init(10, &tiny_arch(), 0);
        let d = vec![5; 70];
        match answer_loglikelihood(&gp, &[5], &d, &[6]) {
            Err(PgtError::ContextOverflow { needed, limit, .. }) => assert_eq!((needed, limit), (72, 64)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn loglik_gradient_matches_finite_differences() {
        let gp = tiny_random(12, 5);
        assert!(gp.params.num_scalars() < 10_000);
        let a: Vec<TokenId> = (0..10).map(|i| 5 + (i % 7)).collect();
        let arch = gp.arch.clone();
        let err = finite_difference_check(&gp.params, |p, g, b| {
            let gp = GeneratorParams { arch: arch.clone(), vocab_size: 12, params: p.clone() };
            let col = graph_token_logprobs(g, b, &gp, &[5, 6], &[7, 8, 9], &a).unwrap();
            g.sum(col)
        });
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn overfits_a_memorized_answer() {
        let mut gp = GeneratorParams::init(12, &tiny_arch(), 6);
        let (q, d) = (vec![5, 6], vec![7, 8]);
        let a: Vec<TokenId> = vec![9, 10, 11, EOS];
        let mut opt = Adam::new(AdamConfig { lr: 1e-2, ..Default::default() }, &gp.params);
        let mut loss = f64::INFINITY;
        for _ in 0..1000 {
            let mut g = Graph::new();
            let b = gp.params.bind(&mut g);
            let col = graph_token_logprobs(&mut g, &b, &gp, &q, &d, &a).unwrap();
            let s = g.sum(col);
            let l = g.neg(s);
            loss = g.scalar(l);
            if loss < 0.01 {
                break;
            }
            let grads = b.gradients(&g.backward(l), &gp.params);
            opt.step(&mut gp.params, &grads);
        }
        assert!(loss < 0.01, "loss {loss}");
        let gen = generate(&gp, &q, &d, &GenerationConfig::default()).unwrap();
        assert_eq!(gen.answer(), &[9, 10, 11]);
    }

    #[test]
    fn untrained_judge_is_symmetric() {
        let tok = WordTokenizer::base();
        let gp = GeneratorParams::init(tok.vocab_size(), &tiny_arch(), 0);
        let p = indirect_correct_probability(&gp, &tok, &[5], &[vec![6, 7], vec![8]], &[9]).unwrap();
        assert_eq!(p, 0.5);
    }

    #[test]
    fn judging_prompt_ids_match_text_template() {
        let tok = WordTokenizer::build([("d", "who wrote it ? the cat . a dog")], 1000).unwrap();
        let q = tok.encode("who wrote it ?");
        let docs = vec![tok.encode("the cat ."), tok.encode("a dog")];
        let a = tok.encode("the cat");
        let text = judging_prompt("who wrote it ?", &["the cat .".into(), "a dog".into()], "the cat");
        assert_eq!(judging_prompt_ids(&tok, &q, &docs, &a), tok.encode(&text));
        assert_eq!(
            text,
            "question: who wrote it ? sep evidence: the cat . sep a dog sep proposed answer: the cat sep is the proposed answer correct or wrong:"
        );
    }

    #[test]
    fn judge_probability_in_unit_interval() {
        let tok = WordTokenizer::base();
        let mut gp = GeneratorParams::init(tok.vocab_size(), &tiny_arch(), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        *gp.params.get_mut(OUT_W) = ParamSet::uniform(8, tok.vocab_size(), 2.0, &mut rng);
        let p = indirect_correct_probability(&gp, &tok, &[5], &[vec![6]], &[9]).unwrap();
        assert!((0.0..=1.0).contains(&p));
        let mut g = Graph::new();
        let b = gp.params.bind_frozen(&mut g);
        let prompt = judging_prompt_ids(&tok, &[5], &[vec![6]], &[9]);
        let (c, w) = graph_indirect(&mut g, &b, &gp, &tok, &prompt).unwrap();
        assert!((g.scalar(c).exp() + g.scalar(w).exp() - 1.0).abs() < 1e-12);
    }
}
