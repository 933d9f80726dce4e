//! Held-out evaluation: answer quality, retrieval recall, refusal behaviour
//! and calibration.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::calibrate::{measure_ece, truth_label, CalibConfig};
use crate::error::{PgtError, Result};
use crate::generator::{indirect_correct_probability, GeneratorParams};
use crate::metrics::{mean, token_f1};
use crate::retriever::{Retriever, Scope};
use crate::sft::{beam_decode, parallel_map, SftConfig};
use crate::synthgen::{Format, QATuple};
use crate::tokenizer::{text_starts_with_refusal, TextTokenizer, TokenId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub matching: bool,
    pub format: Format,
    pub reference: String,
    pub answer: String,
    /// Whether a source segment was among the top K (matching tuples only).
    pub source_retrieved: Option<bool>,
    /// Indirect-logit confidence (matching extractive tuples only).
    pub confidence: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub n_matching: usize,
    pub n_nonmatching: usize,
    pub token_f1: f64,
    pub retrieval_recall_at_k: f64,
    pub refusal_rate_on_nonmatching: f64,
    pub false_refusal_rate_on_matching: f64,
    /// `None` when no prediction carries a confidence.
    pub ece: Option<f64>,
}

fn rate(flags: impl Iterator<Item = bool>) -> f64 {
    let v: Vec<f64> = flags.map(|b| b as u8 as f64).collect();
    mean(&v)
}

pub fn score_predictions(preds: &[Prediction]) -> Result<EvalMetrics> {
    let m: Vec<&Prediction> = preds.iter().filter(|p| p.matching).collect();
    let nm: Vec<&Prediction> = preds.iter().filter(|p| !p.matching).collect();
    let calib: Vec<(f64, bool)> =
        m.iter().filter_map(|p| p.confidence.map(|c| (c, truth_label(&p.answer, &p.reference).is_correct()))).collect();
    Ok(EvalMetrics {
        n_matching: m.len(),
        n_nonmatching: nm.len(),
        token_f1: mean(&m.iter().map(|p| token_f1(&p.reference, &p.answer)).collect::<Vec<_>>()),
        retrieval_recall_at_k: rate(m.iter().filter_map(|p| p.source_retrieved)),
        refusal_rate_on_nonmatching: rate(nm.iter().map(|p| text_starts_with_refusal(&p.answer))),
        false_refusal_rate_on_matching: rate(m.iter().map(|p| text_starts_with_refusal(&p.answer))),
        ece: if calib.is_empty() { None } else { Some(measure_ece(&calib)?.ece) },
    })
}

/// Fails when an evaluation id also names a training tuple.
pub fn check_disjoint(eval: &[QATuple], train_ids: &BTreeSet<String>) -> Result<()> {
    let clash: Vec<&str> = eval.iter().filter(|t| train_ids.contains(&t.id)).map(|t| t.id.as_str()).collect();
    if !clash.is_empty() {
        return Err(PgtError::InvalidInput(format!("{} evaluation tuples also appear in training data (first: {})", clash.len(), clash[0])));
    }
    Ok(())
}

pub struct EvalContext<'a> {
    pub retriever: &'a Retriever<'a>,
    pub generator: &'a GeneratorParams,
    pub sft: &'a SftConfig,
    pub calib: &'a CalibConfig,
    /// Recall depth.
    pub k: usize,
}

/// Decodes every tuple. Non-matching tuples retrieve only from their own
/// passage segments.
pub fn predict(eval: &[QATuple], ctx: &EvalContext) -> Result<Vec<Prediction>> {
    let index = ctx.retriever.index;
    let tok = &index.tokenizer;
    parallel_map(eval, ctx.sft.threads, |t| -> Result<Prediction> {
        let q = tok.encode(&t.question);
        let scope_set = t.retrieval_scope(index);
        let scope = scope_set.as_ref().map_or(Scope::All, Scope::Only);
        let decoded = beam_decode(&q, ctx.retriever, ctx.generator, ctx.sft, ctx.sft.beam, ctx.sft.max_answer_tokens, scope)?;
        let a = decoded.answer().to_vec();
        let mut source_retrieved = None;
        let mut confidence = None;
        if t.matching {
            let source = t.passage_segments(index);
            let top = ctx.retriever.retrieve_top_segments(&q, ctx.k, Scope::All)?;
            source_retrieved = Some(top.hits.iter().any(|h| source.contains(&h.segment_id)));
            if t.format == Format::EX {
                let mut query = q.clone();
                query.extend_from_slice(&a);
                let ev = ctx.retriever.retrieve_top_segments(&query, ctx.calib.m, Scope::All)?;
                let docs: Vec<Vec<TokenId>> = ev.hits.iter().map(|h| index.i2_segment(h.segment_id).token_ids.clone()).collect();
                confidence = match indirect_correct_probability(ctx.generator, tok, &q, &docs, &a) {
                    Err(PgtError::ContextOverflow { .. }) => None,
                    r => Some(r?),
                };
            }
        }
        Ok(Prediction {
            id: t.id.clone(),
            matching: t.matching,
            format: t.format,
            reference: t.answer.clone(),
            answer: tok.decode(&a),
            source_retrieved,
            confidence,
        })
    })
    .into_iter()
    .collect()
}

pub fn evaluate(eval: &[QATuple], train_ids: &BTreeSet<String>, ctx: &EvalContext) -> Result<(EvalMetrics, Vec<Prediction>)> {
    check_disjoint(eval, train_ids)?;
    let preds = predict(eval, ctx)?;
    Ok((score_predictions(&preds)?, preds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::REFUSAL;

    fn p(matching: bool, reference: &str, answer: &str) -> Prediction {
        Prediction {
            id: answer.into(),
            matching,
            format: Format::EX,
            reference: reference.into(),
            answer: answer.into(),
            source_retrieved: matching.then_some(true),
            confidence: None,
        }
    }

    #[test]
    fn always_refusing_model() {
        let preds = vec![p(true, "amber", REFUSAL), p(true, "the otter", REFUSAL), p(false, REFUSAL, REFUSAL)];
        let m = score_predictions(&preds).unwrap();
        assert_eq!(m.refusal_rate_on_nonmatching, 1.0);
        assert_eq!(m.false_refusal_rate_on_matching, 1.0);
        assert_eq!(m.token_f1, 0.0);
    }

    #[test]
    fn memorizer_scores_one() {
        let preds = vec![p(true, "amber", "amber"), p(true, "the otter", "the otter")];
        assert_eq!(score_predictions(&preds).unwrap().token_f1, 1.0);
    }

    #[test]
    fn overlap_is_rejected() {
        let ids: BTreeSet<String> = ["a".to_string()].into();
        let tuple = QATuple {
            id: "a".into(),
            passage_segment_ids: vec![],
            question: "q".into(),
            answer: "a".into(),
            format: Format::EX,
            matching: true,
            rationale: None,
            provenance: crate::synthgen::Provenance::SeedTeacher,
            gen_logprob: None,
            filter_scores: Default::default(),
        };
        assert!(check_disjoint(&[tuple], &ids).is_err());
    }
}
