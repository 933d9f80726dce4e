//! Filter verdicts against a golden report written by a standalone
//! implementation of the four acceptance rules (fixtures/oracles/filter_rules.py).
//! Retrieval is lexical only (zero embeddings) so the script can rank chunks
//! with its own BM25.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use pgt::corpus::{build_indexes, read_corpus_dir, BoundaryPolicy, IndexConfig, IndexTriplet};
use pgt::error::{PgtError, Result};
use pgt::filter::{evaluate_candidate, Answerer, FilterConfig, FilterVerdict};
use pgt::jsonio::read_lines;
use pgt::params::ParamSet;
use pgt::retriever::{Retriever, RetrieverConfig, RetrieverParams, EMBEDDING};
use pgt::synthgen::QATuple;
use pgt::tensor::Tensor;
use pgt::tokenizer::TextTokenizer;
use serde::Deserialize;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn index() -> IndexTriplet {
    let mut docs = read_corpus_dir(&fixtures().join("toy_corpus")).unwrap();
    docs.truncate(16);
    let cfg = IndexConfig { i1_max_tokens: 64, i2_max_tokens: 32, chunk_max_tokens: 16, boundary_policy: BoundaryPolicy::Sentence, ..Default::default() };
    build_indexes(&docs, &cfg).unwrap()
}

fn chunk_dump(index: &IndexTriplet) -> serde_json::Value {
    serde_json::Value::Array(
        index.i3.iter().map(|c| serde_json::json!({ "id": c.id.0, "segment": c.parent_segment_id.0, "tokens": c.token_ids.iter().map(|&t| index.tokenizer.token(t)).collect::<Vec<_>>() })).collect(),
    )
}

#[derive(Deserialize)]
struct Scripted {
    answer: Option<String>,
    samples: Option<Vec<String>>,
}

/// Replies looked up by question.
struct ScriptedAnswerer(BTreeMap<String, Scripted>);

impl Answerer for ScriptedAnswerer {
    fn answer(&self, question: &str, _: &[String]) -> Result<String> {
        self.0.get(question).and_then(|s| s.answer.clone()).ok_or_else(|| PgtError::Backend("no scripted answer".into()))
    }

    fn sample(&self, question: &str, _: &[String], n: usize, _: u64) -> Result<Vec<String>> {
        let s = self.0.get(question).and_then(|s| s.samples.clone()).ok_or_else(|| PgtError::Backend("no scripted samples".into()))?;
        Ok(s.into_iter().take(n).collect())
    }
}

fn golden_config() -> FilterConfig {
    FilterConfig {
        k: 4,
        span_coverage_min: Some(0.5),
        overlap_min: Some(0.6),
        conf_min: Some(-1.5),
        uncertainty_max: Some(0.5),
        n_uncertainty_samples: 3,
        threads: 1,
        ..Default::default()
    }
}

#[derive(Deserialize, Debug)]
struct GoldenLine {
    id: String,
    accepted: bool,
    reject_stage: Option<String>,
    stage_scores: BTreeMap<String, f64>,
}

#[test]
fn chunk_dump_is_current() {
    let want: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(fixtures().join("filter_golden/chunks.json")).unwrap()).unwrap();
    assert_eq!(chunk_dump(&index()), want, "index layout changed; rerun `cargo test --test filter_golden -- --ignored` and the oracle script");
}

/// Mismatching candidate ids and the per-outcome tally.
pub fn run() -> (usize, Vec<String>, BTreeMap<String, usize>) {
    let dir = fixtures().join("filter_golden");
    let index = index();
    let mut params = ParamSet::new();
    params.insert(EMBEDDING, Tensor::zeros(index.tokenizer.vocab_size(), 4));
    let eta = RetrieverParams { dim: 4, params };
    let retriever = Retriever::new(&index, &eta, &RetrieverConfig { dim: 4, lexical_weight: 1.0, ..Default::default() });
    let answers: BTreeMap<String, Scripted> = serde_json::from_str(&std::fs::read_to_string(dir.join("answers.json")).unwrap()).unwrap();
    let answerer = ScriptedAnswerer(answers);
    let candidates: Vec<QATuple> = read_lines(&dir.join("candidates.jsonl")).unwrap().iter().map(|l| serde_json::from_str(l).unwrap()).collect();
    let golden: Vec<GoldenLine> = read_lines(&dir.join("report.jsonl")).unwrap().iter().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(candidates.len(), golden.len());
    let cfg = golden_config();
    let mut bad = Vec::new();
    let mut stages = BTreeMap::new();
    for (t, g) in candidates.iter().zip(&golden) {
        let v: FilterVerdict = evaluate_candidate(t, &cfg, &retriever, &answerer, 0).unwrap();
        let same_scores = v.stage_scores.len() == g.stage_scores.len()
            && v.stage_scores.iter().all(|(k, s)| g.stage_scores.get(k).is_some_and(|w| (s - w).abs() < 1e-12));
        if t.id != g.id || v.accepted != g.accepted || v.reject_stage != g.reject_stage || !same_scores {
            bad.push(t.id.clone());
        }
        *stages.entry(g.reject_stage.clone().unwrap_or_else(|| "accepted".into())).or_insert(0) += 1;
    }
    (candidates.len(), bad, stages)
}

pub fn check() -> Result<String, String> {
    let (n, bad, stages) = run();
    let detail = format!("{n} candidates, {} disagreements {bad:?}; outcomes {stages:?}", bad.len());
    if n == 50 && bad.is_empty() {
        Ok(detail)
    } else {
        Err(detail)
    }
}

#[test]
fn verdicts_match_golden_report() {
    let (n, bad, stages) = run();
    assert_eq!(n, 50);
    assert!(bad.is_empty(), "{bad:?}");
    // the fixture exercises every outcome
    assert_eq!(stages.len(), 5, "{stages:?}");
}

/// Regenerates chunks.json for the oracle script.
#[test]
#[ignore]
fn dump_chunks() {
    let p = fixtures().join("filter_golden/chunks.json");
    std::fs::write(&p, serde_json::to_string_pretty(&chunk_dump(&index())).unwrap() + "\n").unwrap();
}
