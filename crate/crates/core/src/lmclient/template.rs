//! Rule-based stand-in teacher used as the stub's `template` fallback.
//!
//! It understands the prompt kinds in `synthgen::prompts` and passages made
//! of `the <attr> of <entity> is <value> .` sentences. Choices are derived
//! from the prompt fingerprint, so replies are deterministic; a small share
//! of replies is malformed or deliberately wrong so downstream filtering has
//! something to reject.

use super::{fingerprint, BackendReply};
use crate::synthgen::prompts::Prompt;
use crate::synthgen::Format;
use crate::tokenizer::REFUSAL;

#[derive(Clone, Debug, PartialEq)]
pub struct Fact {
    pub attr: String,
    pub entity: String,
    pub value: String,
}

/// Every `the X of E is V .` sentence in `text`.
pub fn facts(text: &str) -> Vec<Fact> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let mut out = Vec::new();
    for sent in words.split(|w| *w == "." || *w == "?" || *w == "!") {
        if sent.len() >= 6 && sent[0] == "the" && sent[2] == "of" && sent[4] == "is" {
            out.push(Fact { attr: sent[1].into(), entity: sent[3].into(), value: sent[5..].join(" ") });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub enum Ask {
    /// `what is the X of E ?`
    Span { attr: String, entity: String },
    /// `is the X of E V ?`
    YesNo { attr: String, entity: String, value: String },
    /// `what can you say about the X of E ?`
    Statement { attr: String, entity: String },
}

pub fn parse_question(q: &str) -> Option<Ask> {
    let w: Vec<&str> = q.split_whitespace().filter(|t| *t != "?").collect();
    let i = (0..w.len().saturating_sub(3)).find(|&i| w[i] == "the" && w[i + 2] == "of")?;
    let (attr, entity) = (w[i + 1].to_string(), w[i + 3].to_string());
    if w.first() == Some(&"is") {
        let value = w[i + 4..].join(" ");
        return (!value.is_empty()).then_some(Ask::YesNo { attr, entity, value });
    }
    if w.starts_with(&["what", "can", "you", "say"]) {
        return Some(Ask::Statement { attr, entity });
    }
    Some(Ask::Span { attr, entity })
}

/// Answers `q` from `text`, or refuses when no sentence supports it.
pub fn answer_from(text: &str, q: &str) -> String {
    let facts = facts(text);
    let lookup = |attr: &str, entity: &str| facts.iter().find(|f| f.attr == attr && f.entity == entity).map(|f| f.value.clone());
    let found = match parse_question(q) {
        Some(Ask::Span { attr, entity }) => lookup(&attr, &entity),
        Some(Ask::YesNo { attr, entity, value }) => lookup(&attr, &entity).map(|v| if v == value { "yes".into() } else { "no".into() }),
        Some(Ask::Statement { attr, entity }) => lookup(&attr, &entity).map(|v| format!("the {attr} of {entity} is {v}")),
        None => None,
    };
    found.unwrap_or_else(|| REFUSAL.to_string())
}

fn hash64(prompt: &str) -> u64 {
    u64::from_str_radix(&fingerprint(prompt)[..16], 16).expect("hex digest")
}

fn write_pair(format: Format, passage: &str, h: u64) -> Option<(String, String, String)> {
    let fs = facts(passage);
    if fs.is_empty() || h % 29 == 0 {
        return None;
    }
    let f = &fs[(h / 29) as usize % fs.len()];
    let other = fs.iter().map(|o| &o.value).find(|v| **v != f.value).cloned();
    let (q, mut a) = match format {
        Format::EX if (h >> 8) % 4 == 0 => match (&other, (h >> 10) % 2) {
            (Some(v), 1) => (format!("is the {} of {} {} ?", f.attr, f.entity, v), "no".to_string()),
            _ => (format!("is the {} of {} {} ?", f.attr, f.entity, f.value), "yes".to_string()),
        },
        Format::EX => (format!("what is the {} of {} ?", f.attr, f.entity), f.value.clone()),
        Format::AB => (format!("what can you say about the {} of {} ?", f.attr, f.entity), format!("the {} of {} is {}", f.attr, f.entity, f.value)),
    };
    if (h >> 16) % 10 == 0 {
        if let Some(v) = &other {
            a = match format {
                Format::EX if a == "yes" => "no".into(),
                Format::EX if a == "no" => "yes".into(),
                Format::EX => v.clone(),
                Format::AB => format!("the {} of {} is {}", f.attr, f.entity, v),
            };
        }
    }
    Some((q, a, format!("the passage states that the {} of {} is {} .", f.attr, f.entity, f.value)))
}

/// Teacher reply to a rendered prompt. Nonzero temperatures perturb the
/// choices so a resampled request can differ from the greedy one.
pub fn respond(prompt: &str, temperature: f64) -> BackendReply {
    let mut h = hash64(prompt);
    if temperature != 0.0 {
        h = h.rotate_left(29) ^ temperature.to_bits().wrapping_mul(0x9e37_79b9_7f4a_7c15);
    }
    let logprob = Some(-(0.1 + ((h >> 24) % 1000) as f64 / 1000.0 * 1.7));
    let qa = |format: Format, passage: &str| match write_pair(format, passage, h) {
        Some((q, a, r)) => BackendReply { text: format!("QUESTION: {q}\nANSWER: {a}\nRATIONALE: {r}"), logprob },
        None => BackendReply { text: "i could not think of a good question for this passage".into(), logprob },
    };
    match Prompt::parse(prompt) {
        Some(Prompt::Seed { format, passage }) => qa(format, &passage),
        Some(Prompt::Bootstrap { format, passage, .. }) => qa(format, &passage),
        Some(Prompt::NonMatching { passage, question }) => {
            let a = answer_from(&passage, &question);
            let who = match parse_question(&question) {
                Some(Ask::Span { entity, .. } | Ask::YesNo { entity, .. } | Ask::Statement { entity, .. }) => entity,
                None => "the subject of the question".into(),
            };
            let text = if a == REFUSAL {
                format!("ANSWER: {REFUSAL}\nRATIONALE: the passage does not mention {who} .")
            } else {
                format!("ANSWER: {a}\nRATIONALE: the passage states it .")
            };
            BackendReply { text, logprob }
        }
        Some(Prompt::Answer { passages, question }) => {
            BackendReply { text: format!("ANSWER: {}", answer_from(&passages.join(" "), &question)), logprob }
        }
        None => BackendReply { text: "unrecognized request".into(), logprob: None },
    }
}
