//! Correctness labels, indirect-logit fine-tuning and expected calibration error.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::corpus::SegmentId;
use crate::error::{PgtError, Result};
use crate::generator::{graph_indirect, indirect_correct_probability, judging_prompt_ids, GeneratorParams};
use crate::metrics::{normalized, token_f1};
use crate::params::{Adam, AdamConfig, Bound};
use crate::retriever::{Retriever, Scope};
use crate::sft::{beam_decode, parallel_map, SftConfig};
use crate::synthgen::{Format, QATuple};
use crate::tokenizer::{TextTokenizer, TokenId, WordTokenizer};

pub const ECE_BINS: usize = 10;
pub const SPAN_F1_MIN: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Correct,
    Wrong,
}

impl Label {
    pub fn is_correct(self) -> bool {
        self == Label::Correct
    }
}

/// Yes/no references need an exact normalized match; spans also pass at
/// token F1 of at least 0.8.
pub fn truth_label(answer: &str, reference: &str) -> Label {
    let (a, r) = (normalized(answer), normalized(reference));
    let ok = if r == "yes" || r == "no" { a == r } else { a == r || token_f1(reference, answer) >= SPAN_F1_MIN };
    if ok {
        Label::Correct
    } else {
        Label::Wrong
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibExample {
    pub id: String,
    pub question: String,
    pub reference: String,
    pub answer: String,
    pub evidence_segments: Vec<SegmentId>,
    pub evidence: Vec<String>,
    pub question_ids: Vec<TokenId>,
    pub answer_ids: Vec<TokenId>,
    pub evidence_ids: Vec<Vec<TokenId>>,
    pub label: Label,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSet {
    pub examples: Vec<CalibExample>,
    /// Examples dropped on context overflow.
    pub skipped: usize,
    /// Abstractive tuples left out.
    pub non_extractive: usize,
    /// Set when fewer than M segments exist.
    pub m_clipped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibConfig {
    /// Evidence segments per example.
    pub m: usize,
    pub beam: usize,
    pub max_answer_tokens: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub threads: usize,
    /// Share of the calibration split held out for ECE measurement.
    pub holdout: f64,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self { m: 3, beam: 2, max_answer_tokens: 12, lr: 1e-3, epochs: 5, batch: 8, seed: 0, threads: 4, holdout: 0.3 }
    }
}

impl CalibConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.beam == 0 || self.batch == 0 || self.max_answer_tokens == 0 {
            return Err(PgtError::Config("calibrate.m, beam, batch and max_answer_tokens must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(PgtError::Config(format!("calibrate.holdout must be in [0, 1), got {}", self.holdout)));
        }
        Ok(())
    }
}

/// Decodes each extractive question, gathers top-M evidence for `[q; a]`,
/// labels the answer against the reference and records the model's
/// confidence that it is correct.
pub fn build_calibration_set(tuples: &[QATuple], retriever: &Retriever, gp: &GeneratorParams, sft: &SftConfig, cfg: &CalibConfig) -> Result<CalibrationSet> {
    cfg.validate()?;
    let index = retriever.index;
    let tok = &index.tokenizer;
    let ex: Vec<&QATuple> = tuples.iter().filter(|t| t.format == Format::EX).collect();
    let m_clipped = cfg.m > index.i2.len();
    let built = parallel_map(&ex, cfg.threads, |t| -> Result<Option<CalibExample>> {
        let q = tok.encode(&t.question);
        let decoded = match beam_decode(&q, retriever, gp, sft, cfg.beam, cfg.max_answer_tokens, Scope::All) {
            Err(PgtError::ContextOverflow { .. }) => return Ok(None),
            r => r?,
        };
        let a = decoded.answer().to_vec();
        let mut query = q.clone();
        query.extend_from_slice(&a);
        let top = retriever.retrieve_top_segments(&query, cfg.m, Scope::All)?;
        let segs: Vec<SegmentId> = top.hits.iter().map(|h| h.segment_id).collect();
        let docs: Vec<Vec<TokenId>> = segs.iter().map(|s| index.i2_segment(*s).token_ids.clone()).collect();
        let confidence = match indirect_correct_probability(gp, tok, &q, &docs, &a) {
            Err(PgtError::ContextOverflow { .. }) => return Ok(None),
            r => r?,
        };
        let answer = tok.decode(&a);
        Ok(Some(CalibExample {
            id: t.id.clone(),
            question: t.question.clone(),
            reference: t.answer.clone(),
            label: truth_label(&answer, &t.answer),
            answer,
            evidence_segments: segs,
            evidence: docs.iter().map(|d| index.text(d)).collect(),
            question_ids: q,
            answer_ids: a,
            evidence_ids: docs,
            confidence,
        }))
    });
    let mut examples = Vec::new();
    let mut skipped = 0;
    for b in built {
        match b? {
            Some(e) => examples.push(e),
            None => skipped += 1,
        }
    }
    Ok(CalibrationSet { examples, skipped, non_extractive: tuples.len() - ex.len(), m_clipped })
}

/// `−mean log p(ŷ)` under the two-way indirect logit.
pub fn graph_calibration_loss(g: &mut Graph, b: &Bound, gp: &GeneratorParams, tok: &WordTokenizer, batch: &[CalibExample]) -> Result<Var> {
    let mut terms = Vec::with_capacity(batch.len());
    for e in batch {
        let prompt = judging_prompt_ids(tok, &e.question_ids, &e.evidence_ids, &e.answer_ids);
        let (c, w) = graph_indirect(g, b, gp, tok, &prompt)?;
        terms.push(if e.label.is_correct() { c } else { w });
    }
    let all = g.concat_rows(&terms);
    let s = g.sum(all);
    Ok(g.scale(s, -1.0 / batch.len() as f64))
}

/// Fine-tunes the generator's indirect logit; returns per-step losses.
pub fn train_calibration(examples: &[CalibExample], gp: &mut GeneratorParams, tok: &WordTokenizer, cfg: &CalibConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let correct = examples.iter().filter(|e| e.label.is_correct()).count();
    if correct == 0 || correct == examples.len() {
        return Err(PgtError::InvalidInput(format!("calibration data must contain both labels ({correct} correct of {})", examples.len())));
    }
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, ..Default::default() }, &gp.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut losses = Vec::new();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch) {
            let batch: Vec<CalibExample> = idx.iter().map(|&i| examples[i].clone()).collect();
            let mut g = Graph::new();
            let b = gp.params.bind(&mut g);
            let loss = graph_calibration_loss(&mut g, &b, gp, tok, &batch)?;
            let l = g.scalar(loss);
            if !l.is_finite() {
                return Err(PgtError::NonFinite { what: "calibration loss".into(), item: batch[0].id.clone() });
            }
            losses.push(l);
            let grads = b.gradients(&g.backward(loss), &gp.params);
            opt.step(&mut gp.params, &grads);
        }
    }
    Ok(losses)
}

/// Recomputes each example's confidence under `gp`.
pub fn rescore(examples: &mut [CalibExample], gp: &GeneratorParams, tok: &WordTokenizer) -> Result<()> {
    for e in examples {
        e.confidence = indirect_correct_probability(gp, tok, &e.question_ids, &e.evidence_ids, &e.answer_ids)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityReport {
    pub bins: Vec<Bin>,
    pub n: usize,
    pub ece: f64,
}

impl ReliabilityReport {
    pub fn table(&self) -> String {
        let mut s = String::from("bin          count  confidence  accuracy\n");
        for b in &self.bins {
            let _ = writeln!(s, "[{:.1}, {:.1}{}  {:>5}  {:>10.4}  {:>8.4}", b.lo, b.hi, if b.hi == 1.0 { "]" } else { ")" }, b.count, b.mean_confidence, b.accuracy);
        }
        let _ = writeln!(s, "n = {}  ece = {:.6}", self.n, self.ece);
        s
    }
}

/// Ten equal-width bins over `[0, 1]`; a confidence of exactly 1 falls in the last.
pub fn measure_ece(items: &[(f64, bool)]) -> Result<ReliabilityReport> {
    if items.is_empty() {
        return Err(PgtError::Empty("ece input".into()));
    }
    let mut sums = vec![(0usize, 0.0f64, 0usize); ECE_BINS];
    for &(c, ok) in items {
        if !(0.0..=1.0).contains(&c) {
            return Err(PgtError::InvalidInput(format!("confidence {c} outside [0, 1]")));
        }
        let k = ((c * ECE_BINS as f64).floor() as usize).min(ECE_BINS - 1);
        sums[k].0 += 1;
        sums[k].1 += c;
        sums[k].2 += ok as usize;
    }
    let n = items.len();
    let mut ece = 0.0;
    let bins = sums
        .iter()
        .enumerate()
        .map(|(k, &(count, conf, hits))| {
            let (mc, acc) = if count == 0 { (0.0, 0.0) } else { (conf / count as f64, hits as f64 / count as f64) };
            ece += count as f64 / n as f64 * (acc - mc).abs();
            Bin { lo: k as f64 / ECE_BINS as f64, hi: (k + 1) as f64 / ECE_BINS as f64, count, mean_confidence: mc, accuracy: acc }
        })
        .collect();
    Ok(ReliabilityReport { bins, n, ece })
}

pub fn ece_of(examples: &[CalibExample]) -> Result<ReliabilityReport> {
    measure_ece(&examples.iter().map(|e| (e.confidence, e.label.is_correct())).collect::<Vec<_>>())
}
