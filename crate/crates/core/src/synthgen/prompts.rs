//! Teacher prompt templates and their parsers.
//!
//! Every prompt opens with a fixed instruction line that identifies its
//! kind, followed by `PASSAGE:` / `QUESTION:` / `ANSWER:` tagged lines. The
//! parsers recover the structured inputs from prompt text (the stub teacher
//! and template tests rely on this).

use super::Format;

const SEED_EX: &str = "Write one extractive question about the passage below. The answer must be a span copied from the passage, or yes or no.";
const SEED_AB: &str = "Write one abstractive question about the passage below. The answer must be a short statement in your own words that the passage supports.";
const BOOT_EX: &str = "Following the examples, write one extractive question and answer for the last passage.";
const BOOT_AB: &str = "Following the examples, write one abstractive question and answer for the last passage.";
const NONMATCH: &str = "Answer the question from the passage. If the passage does not contain the answer, reply with the exact answer line below and explain why in a rationale line.";
const ANSWERER: &str = "Answer the question using only the passages below.";
const TAGS_QA: &str = "Reply with the tagged lines QUESTION:, ANSWER: and RATIONALE:.";
const TAGS_A: &str = "Reply with the tagged lines ANSWER: and RATIONALE:.";

#[derive(Clone, Debug, PartialEq)]
pub struct Exemplar {
    pub passage: String,
    pub question: String,
    pub answer: String,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Prompt {
    Seed { format: Format, passage: String },
    Bootstrap { format: Format, exemplars: Vec<Exemplar>, passage: String },
    NonMatching { passage: String, question: String },
    Answer { passages: Vec<String>, question: String },
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl Prompt {
    pub fn render(&self) -> String {
        match self {
            Prompt::Seed { format, passage } => {
                let head = if *format == Format::EX { SEED_EX } else { SEED_AB };
                format!("{head}\n{TAGS_QA}\n\nPASSAGE: {}\n", one_line(passage))
            }
            Prompt::Bootstrap { format, exemplars, passage } => {
                let head = if *format == Format::EX { BOOT_EX } else { BOOT_AB };
                let mut s = format!("{head}\n{TAGS_QA}\n\n");
                for e in exemplars {
                    s.push_str(&format!("PASSAGE: {}\nQUESTION: {}\nANSWER: {}\n\n", one_line(&e.passage), one_line(&e.question), one_line(&e.answer)));
                }
                s.push_str(&format!("PASSAGE: {}\n", one_line(passage)));
                s
            }
            Prompt::NonMatching { passage, question } => format!(
                "{NONMATCH}\nANSWER: {}\n{TAGS_A}\n\nPASSAGE: {}\nQUESTION: {}\n",
                crate::tokenizer::REFUSAL,
                one_line(passage),
                one_line(question)
            ),
            Prompt::Answer { passages, question } => {
                let mut s = format!("{ANSWERER}\n{TAGS_A}\n\n");
                for p in passages {
                    s.push_str(&format!("PASSAGE: {}\n", one_line(p)));
                }
                s.push_str(&format!("QUESTION: {}\n", one_line(question)));
                s
            }
        }
    }

    /// Inverse of [`Prompt::render`].
    pub fn parse(text: &str) -> Option<Prompt> {
        let mut lines = text.lines();
        let head = lines.next()?.trim();
        let body: Vec<&str> = lines.collect();
        let tagged = |tag: &str| -> Vec<String> { body.iter().filter_map(|l| l.strip_prefix(tag)).map(|v| v.trim().to_string()).collect() };
        match head {
            SEED_EX | SEED_AB => {
                let format = if head == SEED_EX { Format::EX } else { Format::AB };
                Some(Prompt::Seed { format, passage: tagged("PASSAGE:").pop()? })
            }
            BOOT_EX | BOOT_AB => {
                let format = if head == BOOT_EX { Format::EX } else { Format::AB };
                let mut passages = tagged("PASSAGE:");
                let questions = tagged("QUESTION:");
                let answers = tagged("ANSWER:");
                let passage = passages.pop()?;
                if passages.len() != questions.len() || questions.len() != answers.len() {
                    return None;
                }
                let exemplars = passages
                    .into_iter()
                    .zip(questions)
                    .zip(answers)
                    .map(|((passage, question), answer)| Exemplar { passage, question, answer })
                    .collect();
                Some(Prompt::Bootstrap { format, exemplars, passage })
            }
            NONMATCH => Some(Prompt::NonMatching { passage: tagged("PASSAGE:").pop()?, question: tagged("QUESTION:").pop()? }),
            ANSWERER => Some(Prompt::Answer { passages: tagged("PASSAGE:"), question: tagged("QUESTION:").pop()? }),
            _ => None,
        }
    }
}

/// Fields of a tagged teacher completion.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Tagged {
    pub question: Option<String>,
    pub answer: Option<String>,
    pub rationale: Option<String>,
}

/// Reads `QUESTION:` / `ANSWER:` / `RATIONALE:` lines (first of each wins).
pub fn parse_tagged(completion: &str) -> Tagged {
    let mut t = Tagged::default();
    for line in completion.lines() {
        let line = line.trim();
        let take = |slot: &mut Option<String>, tag: &str| {
            if let Some(v) = line.strip_prefix(tag) {
                let v = v.trim();
                if slot.is_none() && !v.is_empty() {
                    *slot = Some(v.to_string());
                }
            }
        };
        take(&mut t.question, "QUESTION:");
        take(&mut t.answer, "ANSWER:");
        take(&mut t.rationale, "RATIONALE:");
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_prompt_kind_parses_back() {
        let ex = |i: usize| Exemplar { passage: format!("p{i} text ."), question: format!("q{i} ?"), answer: format!("a{i}") };
        let prompts = vec![
            Prompt::Seed { format: Format::EX, passage: "the river of x is y .".into() },
            Prompt::Seed { format: Format::AB, passage: "z".into() },
            Prompt::Bootstrap { format: Format::AB, exemplars: vec![ex(1), ex(2), ex(3)], passage: "last".into() },
            Prompt::NonMatching { passage: "other text".into(), question: "what ?".into() },
            Prompt::Answer { passages: vec!["one".into(), "two".into()], question: "who ?".into() },
        ];
        for p in prompts {
            assert_eq!(Prompt::parse(&p.render()), Some(p));
        }
    }

    #[test]
    fn tagged_lines() {
        let t = parse_tagged("QUESTION: what is it ?\nANSWER: blue\nRATIONALE: stated.\nANSWER: ignored");
        assert_eq!(t.question.as_deref(), Some("what is it ?"));
        assert_eq!(t.answer.as_deref(), Some("blue"));
        assert_eq!(t.rationale.as_deref(), Some("stated."));
        assert_eq!(parse_tagged("no tags here"), Tagged::default());
    }
}
