//! Four-stage consistency filter for synthetic candidates: retrieval span
//! coverage, round-trip answer overlap, generation confidence and (optional)
//! answer uncertainty.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::ChunkId;
use crate::error::{PgtError, Result};
use crate::generator::{generate, DecodeMode, GenerationConfig, GeneratorParams};
use crate::jsonio::write_jsonl;
use crate::lmclient::{CompletionRequest, LmClient, ModelTag};
use crate::metrics::token_f1;
use crate::retriever::{Retriever, Scope};
use crate::synthgen::prompts::{parse_tagged, Prompt};
use crate::synthgen::QATuple;
use crate::tokenizer::{TextTokenizer, TokenId, WordTokenizer};

pub const STAGE_SPAN: &str = "span_coverage";
pub const STAGE_ROUNDTRIP: &str = "roundtrip_f1";
pub const STAGE_CONFIDENCE: &str = "norm_logprob";
pub const STAGE_UNCERTAINTY: &str = "uncertainty";

/// Stage thresholds; `None` disables a stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub k: usize,
    pub span_coverage_min: Option<f64>,
    pub overlap_min: Option<f64>,
    pub conf_min: Option<f64>,
    pub uncertainty_max: Option<f64>,
    pub n_uncertainty_samples: usize,
    /// Worker threads for [`filter_candidates`].
    pub threads: usize,
    /// Model answering the round-trip question.
    pub answerer: AnswererChoice,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswererChoice {
    Teacher,
    Rag,
    /// Teacher in the first outer iteration, the current RAG model afterwards.
    Auto,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            k: 5,
            span_coverage_min: Some(1.0),
            overlap_min: Some(0.6),
            conf_min: Some(-1.5),
            uncertainty_max: None,
            n_uncertainty_samples: 4,
            threads: 4,
            answerer: AnswererChoice::Auto,
        }
    }
}

impl FilterConfig {
    pub fn disabled() -> Self {
        Self { span_coverage_min: None, overlap_min: None, conf_min: None, uncertainty_max: None, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |x: Option<f64>| x.map_or(true, f64::is_finite);
        if ![self.span_coverage_min, self.overlap_min, self.conf_min, self.uncertainty_max].into_iter().all(finite) {
            return Err(PgtError::Config("filter thresholds must be finite".into()));
        }
        if let Some(s) = self.span_coverage_min {
            if !(s > 0.0 && s <= 1.0) {
                return Err(PgtError::Config("filter.span_coverage_min must lie in (0, 1]".into()));
            }
        }
        if let Some(o) = self.overlap_min {
            if !(0.0..=1.0).contains(&o) {
                return Err(PgtError::Config("filter.overlap_min must lie in [0, 1]".into()));
            }
        }
        if self.k == 0 {
            return Err(PgtError::Config("filter.k must be >= 1".into()));
        }
        if self.uncertainty_max.is_some() && self.n_uncertainty_samples < 2 {
            return Err(PgtError::Config("filter.n_uncertainty_samples must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub accepted: bool,
    pub stage_scores: BTreeMap<String, f64>,
    pub reject_stage: Option<String>,
}

/// Regenerates answers from retrieved passages.
pub trait Answerer: Sync {
    fn answer(&self, question: &str, passages: &[String]) -> Result<String>;
    /// `n` answers sampled at temperature 1.
    fn sample(&self, question: &str, passages: &[String], n: usize, seed: u64) -> Result<Vec<String>>;
}

/// Teacher model as answerer.
pub struct TeacherAnswerer<'a> {
    pub client: &'a LmClient,
    pub model_tag: ModelTag,
}

impl Answerer for TeacherAnswerer<'_> {
    fn answer(&self, question: &str, passages: &[String]) -> Result<String> {
        let prompt = Prompt::Answer { passages: passages.to_vec(), question: question.to_string() }.render();
        let c = self.client.complete(&CompletionRequest::new(prompt, self.model_tag))?;
        parse_tagged(&c.text).answer.ok_or_else(|| PgtError::InvalidInput("answerer reply has no ANSWER line".into()))
    }

    fn sample(&self, _: &str, _: &[String], _: usize, _: u64) -> Result<Vec<String>> {
        Err(PgtError::Config("the uncertainty stage needs the rag answerer (teacher replies are cached per prompt)".into()))
    }
}

/// The current generator, conditioned on the concatenated passages.
pub struct RagAnswerer<'a> {
    pub params: &'a GeneratorParams,
    pub tokenizer: &'a WordTokenizer,
    pub max_answer_tokens: usize,
}

impl RagAnswerer<'_> {
    fn inputs(&self, question: &str, passages: &[String]) -> (Vec<TokenId>, Vec<TokenId>) {
        let q = self.tokenizer.encode(question);
        let mut d: Vec<TokenId> = passages.iter().flat_map(|p| self.tokenizer.encode(p)).collect();
        let room = self.params.arch.context.saturating_sub(q.len() + 1);
        d.truncate(room);
        (q, d)
    }

    fn run(&self, question: &str, passages: &[String], mode: DecodeMode, seed: u64) -> Result<String> {
        let (q, d) = self.inputs(question, passages);
        let cfg = GenerationConfig { max_answer_tokens: self.max_answer_tokens, mode, temperature: 1.0, seed };
        let g = generate(self.params, &q, &d, &cfg)?;
        Ok(self.tokenizer.decode(g.answer()))
    }
}

impl Answerer for RagAnswerer<'_> {
    fn answer(&self, question: &str, passages: &[String]) -> Result<String> {
        self.run(question, passages, DecodeMode::Greedy, 0)
    }

    fn sample(&self, question: &str, passages: &[String], n: usize, seed: u64) -> Result<Vec<String>> {
        (0..n as u64).map(|i| self.run(question, passages, DecodeMode::Sample, seed.wrapping_add(i))).collect()
    }
}

/// Fraction of the passage's chunks among `top`.
pub fn coverage(passage: &[ChunkId], top: &[ChunkId]) -> f64 {
    if passage.is_empty() {
        return 0.0;
    }
    let top: BTreeSet<&ChunkId> = top.iter().collect();
    let want: BTreeSet<&ChunkId> = passage.iter().collect();
    want.iter().filter(|c| top.contains(*c)).count() as f64 / want.len() as f64
}

fn top_chunks(question: &str, retriever: &Retriever, k: usize) -> Result<Vec<ChunkId>> {
    let q = retriever.index.tokenizer.encode(question);
    Ok(retriever.retrieve_top_chunks(&q, k, Scope::All)?.results.iter().map(|r| r.chunk_id).collect())
}

pub fn span_coverage(t: &QATuple, retriever: &Retriever, k: usize) -> Result<f64> {
    let passage = t.passage_chunks(retriever.index);
    if passage.is_empty() {
        return Err(PgtError::InvalidInput(format!("tuple {} has no passage chunks", t.id)));
    }
    Ok(coverage(&passage, &top_chunks(&t.question, retriever, k)?))
}

fn chunk_texts(retriever: &Retriever, chunks: &[ChunkId]) -> Vec<String> {
    chunks.iter().map(|c| retriever.index.text(&retriever.index.chunk(*c).token_ids)).collect()
}

/// Token F1 between the candidate answer and a regenerated one; −1 when the
/// answerer fails.
pub fn roundtrip_overlap(t: &QATuple, retriever: &Retriever, k: usize, answerer: &dyn Answerer) -> Result<f64> {
    let passages = chunk_texts(retriever, &top_chunks(&t.question, retriever, k)?);
    Ok(match answerer.answer(&t.question, &passages) {
        Ok(a) => token_f1(&t.answer, &a),
        Err(_) => -1.0,
    })
}

/// 1 − mean pairwise token F1.
pub fn dispersion(samples: &[String]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            total += token_f1(&samples[i], &samples[j]);
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        1.0 - total / pairs as f64
    }
}

/// Runs the enabled stages in order and stops at the first failure.
pub fn evaluate_candidate(t: &QATuple, cfg: &FilterConfig, retriever: &Retriever, answerer: &dyn Answerer, seed: u64) -> Result<FilterVerdict> {
    if cfg.conf_min.is_some() && t.gen_logprob.is_none() {
        return Err(PgtError::Config(format!("tuple {} has no gen_logprob but the confidence stage is enabled", t.id)));
    }
    let mut scores = BTreeMap::new();
    let reject = |scores: BTreeMap<String, f64>, stage: &str| FilterVerdict { accepted: false, stage_scores: scores, reject_stage: Some(stage.to_string()) };
    let needs_top = cfg.span_coverage_min.is_some() || cfg.overlap_min.is_some() || cfg.uncertainty_max.is_some();
    let top = if needs_top { top_chunks(&t.question, retriever, cfg.k)? } else { Vec::new() };
    if let Some(min) = cfg.span_coverage_min {
        let passage = t.passage_chunks(retriever.index);
        let s = coverage(&passage, &top);
        scores.insert(STAGE_SPAN.to_string(), s);
        if s < min {
            return Ok(reject(scores, STAGE_SPAN));
        }
    }
    if let Some(min) = cfg.overlap_min {
        let passages = chunk_texts(retriever, &top);
        let s = match answerer.answer(&t.question, &passages) {
            Ok(a) => token_f1(&t.answer, &a),
            Err(_) => -1.0,
        };
        scores.insert(STAGE_ROUNDTRIP.to_string(), s);
        if s < min {
            return Ok(reject(scores, STAGE_ROUNDTRIP));
        }
    }
    if let Some(min) = cfg.conf_min {
        let s = t.gen_logprob.expect("checked above");
        scores.insert(STAGE_CONFIDENCE.to_string(), s);
        if s < min {
            return Ok(reject(scores, STAGE_CONFIDENCE));
        }
    }
    if let Some(max) = cfg.uncertainty_max {
        let passages = chunk_texts(retriever, &top);
        let s = match answerer.sample(&t.question, &passages, cfg.n_uncertainty_samples, seed) {
            Ok(samples) => dispersion(&samples),
            Err(_) => f64::INFINITY,
        };
        scores.insert(STAGE_UNCERTAINTY.to_string(), if s.is_finite() { s } else { -1.0 });
        if !(s <= max) {
            return Ok(reject(scores, STAGE_UNCERTAINTY));
        }
    }
    Ok(FilterVerdict { accepted: true, stage_scores: scores, reject_stage: None })
}

/// Evaluates candidates on `cfg.threads` workers; per-candidate seeds are
/// `seed + position`. Verdicts keep input order.
pub fn filter_candidates(candidates: &[QATuple], cfg: &FilterConfig, retriever: &Retriever, answerer: &dyn Answerer, seed: u64) -> Result<Vec<FilterVerdict>> {
    cfg.validate()?;
    let threads = cfg.threads.max(1).min(candidates.len().max(1));
    let per = candidates.len().div_ceil(threads).max(1);
    let parts: Vec<Result<Vec<FilterVerdict>>> = std::thread::scope(|s| {
        let handles: Vec<_> = candidates
            .chunks(per)
            .enumerate()
            .map(|(w, part)| {
                s.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(i, t)| evaluate_candidate(t, cfg, retriever, answerer, seed.wrapping_add((w * per + i) as u64)))
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("filter worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(candidates.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportLine {
    pub id: String,
    pub accepted: bool,
    pub reject_stage: Option<String>,
    pub stage_scores: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub total: usize,
    pub accepted: usize,
    pub rejected_by_stage: BTreeMap<String, usize>,
    /// Candidates whose normalized question repeats an earlier one.
    pub duplicate_questions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub lines: Vec<ReportLine>,
    pub summary: ReportSummary,
}

impl FilterReport {
    pub fn new(candidates: &[QATuple], verdicts: &[FilterVerdict]) -> Self {
        let mut rejected_by_stage: BTreeMap<String, usize> =
            [STAGE_SPAN, STAGE_ROUNDTRIP, STAGE_CONFIDENCE, STAGE_UNCERTAINTY].iter().map(|s| (s.to_string(), 0)).collect();
        let mut seen = BTreeSet::new();
        let mut duplicate_questions = 0;
        let lines = candidates
            .iter()
            .zip(verdicts)
            .map(|(t, v)| {
                if let Some(s) = &v.reject_stage {
                    *rejected_by_stage.entry(s.clone()).or_default() += 1;
                }
                if !seen.insert(crate::metrics::normalized(&t.question)) {
                    duplicate_questions += 1;
                }
                ReportLine { id: t.id.clone(), accepted: v.accepted, reject_stage: v.reject_stage.clone(), stage_scores: v.stage_scores.clone() }
            })
            .collect();
        let accepted = verdicts.iter().filter(|v| v.accepted).count();
        FilterReport { lines, summary: ReportSummary { total: candidates.len(), accepted, rejected_by_stage, duplicate_questions } }
    }

    /// One JSON line per candidate, then the summary as the last line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for l in &self.lines {
            s.push_str(&serde_json::to_string(l)?);
            s.push('\n');
        }
        s.push_str(&serde_json::to_string(&serde_json::json!({ "summary": &self.summary }))?);
        s.push('\n');
        Ok(s)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_jsonl::<(), _>(path, None, &self.lines)?;
        crate::jsonio::append_line(path, &serde_json::json!({ "summary": &self.summary }))
    }
}

/// Accepted candidates with their stage scores recorded.
pub fn accepted_tuples(candidates: &[QATuple], verdicts: &[FilterVerdict]) -> Vec<QATuple> {
    candidates
        .iter()
        .zip(verdicts)
        .filter(|(_, v)| v.accepted)
        .map(|(t, v)| {
            let mut t = t.clone();
            t.filter_scores = v.stage_scores.clone();
            t
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_indexes, Document, IndexConfig, IndexTriplet};
    use crate::lmclient::{Cache, ClientConfig, Fallback, ScriptedStub};
    use crate::retriever::{RetrieverConfig, RetrieverParams};
    use crate::synthgen::{refs_for_i1, Format, Provenance};

    fn index() -> IndexTriplet {
        let docs = vec![
            Document::new("a", "the color of zorvath is amber . the mascot of zorvath is otter . the river of zorvath is lune ."),
            Document::new("b", "the color of kelmira is teal . the mascot of kelmira is heron . the river of kelmira is sava ."),
        ];
        build_indexes(&docs, &IndexConfig { i1_max_tokens: 64, i2_max_tokens: 32, chunk_max_tokens: 16, ..Default::default() }).unwrap()
    }

    fn tuple(index: &IndexTriplet, q: &str, a: &str, lp: Option<f64>) -> QATuple {
        QATuple {
            id: "c".into(),
            passage_segment_ids: refs_for_i1(index, &index.i1[0]),
            question: q.into(),
            answer: a.into(),
            format: Format::EX,
            matching: true,
            rationale: None,
            provenance: Provenance::Bootstrap,
            gen_logprob: lp,
            filter_scores: BTreeMap::new(),
        }
    }

    struct Fixed(&'static str);
    impl Answerer for Fixed {
        fn answer(&self, _: &str, _: &[String]) -> Result<String> {
            Ok(self.0.into())
        }
        fn sample(&self, _: &str, _: &[String], n: usize, _: u64) -> Result<Vec<String>> {
            Ok(vec![self.0.into(); n])
        }
    }

    #[test]
    fn coverage_arithmetic() {
        let c = |i| ChunkId(i);
        assert_eq!(coverage(&[c(0)], &[c(0), c(5)]), 1.0);
        assert_eq!(coverage(&[c(0), c(1)], &[c(1), c(5)]), 0.5);
        assert_eq!(coverage(&[c(0), c(1)], &[c(7)]), 0.0);
    }

    #[test]
    fn vacuous_filter_accepts() {
        let index = index();
        let params = RetrieverParams::init(index.tokenizer.vocab_size(), 8, 0);
        let r = Retriever::new(&index, &params, &RetrieverConfig::default());
        let v = evaluate_candidate(&tuple(&index, "anything ?", "x", None), &FilterConfig::disabled(), &r, &Fixed("y"), 0).unwrap();
        assert!(v.accepted);
        assert!(v.stage_scores.is_empty());
    }

    #[test]
    fn short_circuits_at_first_failure() {
        let index = index();
        let params = RetrieverParams::init(index.tokenizer.vocab_size(), 8, 0);
        let r = Retriever::new(&index, &params, &RetrieverConfig::default());
        let cfg = FilterConfig { k: 1, ..Default::default() };
        let t = tuple(&index, "what is the color of zorvath ?", "amber", Some(-0.2));
        let v = evaluate_candidate(&t, &cfg, &r, &Fixed("amber"), 0).unwrap();
        if v.reject_stage.as_deref() == Some(STAGE_SPAN) {
            assert_eq!(v.stage_scores.len(), 1);
        }
        let cfg = FilterConfig { span_coverage_min: None, ..Default::default() };
        let v = evaluate_candidate(&t, &cfg, &r, &Fixed("teal"), 0).unwrap();
        assert_eq!(v.reject_stage.as_deref(), Some(STAGE_ROUNDTRIP));
        assert!(!v.stage_scores.contains_key(STAGE_CONFIDENCE));
        let v = evaluate_candidate(&t, &cfg, &r, &Fixed("amber"), 0).unwrap();
        assert!(v.accepted);
        assert_eq!(v.stage_scores.len(), 2);
    }

    #[test]
    fn missing_logprob_is_a_config_error() {
        let index = index();
        let params = RetrieverParams::init(index.tokenizer.vocab_size(), 8, 0);
        let r = Retriever::new(&index, &params, &RetrieverConfig::default());
        let t = tuple(&index, "q ?", "a", None);
        let cfg = FilterConfig { span_coverage_min: None, overlap_min: None, ..Default::default() };
        assert!(matches!(evaluate_candidate(&t, &cfg, &r, &Fixed("a"), 0), Err(PgtError::Config(_))));
    }

    #[test]
    fn lower_thresholds_never_reject_more() {
        let index = index();
        let params = RetrieverParams::init(index.tokenizer.vocab_size(), 8, 3);
        let r = Retriever::new(&index, &params, &RetrieverConfig::default());
        let answers = ["amber", "amber otter", "teal"];
        for (i, a) in answers.iter().enumerate() {
            let t = tuple(&index, "what is the color of zorvath ?", "amber", Some(-0.5 - i as f64 * 0.4));
            let strict = FilterConfig { k: 4, span_coverage_min: Some(0.5), overlap_min: Some(0.7), conf_min: Some(-0.8), ..Default::default() };
            let loose = FilterConfig { span_coverage_min: Some(0.25), overlap_min: Some(0.3), conf_min: Some(-2.0), ..strict.clone() };
            let ans: &'static str = a;
            if evaluate_candidate(&t, &strict, &r, &Fixed(ans), 0).unwrap().accepted {
                assert!(evaluate_candidate(&t, &loose, &r, &Fixed(ans), 0).unwrap().accepted);
            }
        }
    }

    #[test]
    fn teacher_answerer_failure_scores_minus_one() {
        let index = index();
        let params = RetrieverParams::init(index.tokenizer.vocab_size(), 8, 0);
        let r = Retriever::new(&index, &params, &RetrieverConfig::default());
        let client = LmClient::new(Box::new(ScriptedStub::new(Fallback::Error)), Cache::in_memory(), ClientConfig::default());
        let answerer = TeacherAnswerer { client: &client, model_tag: ModelTag::SeedTeacher };
        let t = tuple(&index, "what is the color of zorvath ?", "amber", None);
        assert_eq!(roundtrip_overlap(&t, &r, 2, &answerer).unwrap(), -1.0);
    }

    #[test]
    fn dispersion_of_identical_samples_is_zero() {
        assert_eq!(dispersion(&["a b".into(), "a b".into(), "a b".into()]), 0.0);
        assert_eq!(dispersion(&["a".into(), "b".into()]), 1.0);
    }

    #[test]
    fn report_counts_stages() {
        let index = index();
        let t = tuple(&index, "q ?", "a", None);
        let v_ok = FilterVerdict { accepted: true, stage_scores: BTreeMap::new(), reject_stage: None };
        let v_bad = FilterVerdict { accepted: false, stage_scores: BTreeMap::new(), reject_stage: Some(STAGE_SPAN.into()) };
        let rep = FilterReport::new(&[t.clone(), t], &[v_ok, v_bad]);
        assert_eq!(rep.summary.accepted, 1);
        assert_eq!(rep.summary.rejected_by_stage[STAGE_SPAN], 1);
        assert_eq!(rep.summary.duplicate_questions, 1);
        assert!(rep.to_jsonl().unwrap().lines().last().unwrap().starts_with("{\"summary\""));
    }
}
