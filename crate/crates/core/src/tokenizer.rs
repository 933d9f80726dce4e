//! Deterministic lowercasing word tokenizer with a corpus-built vocabulary.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PgtError, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const SEP: TokenId = 3;
pub const UNK: TokenId = 4;

const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "sep", "<unk>"];

/// Canonical refusal answer. Every word is reserved in the vocabulary so a
/// refusal is always exactly representable.
pub const REFUSAL: &str = "cannot answer this question based on given information";
pub const LABEL_CORRECT: &str = "correct";
pub const LABEL_WRONG: &str = "wrong";

/// Words reserved right after the specials: refusal and judging-prompt
/// vocabulary plus the handful of function words teacher questions use.
const RESERVED: &[&str] = &[
    "cannot", "answer", "this", "question", "based", "on", "given", "information", "correct", "wrong", "evidence",
    "proposed", "is", "the", "or", ":", ".", "?", "!", ",", "what", "which", "who", "yes", "no", "of", "a", "in",
    "do", "we", "know", "about", "does", "not", "mention", "passages", "passage", "can", "you", "say", "states",
    "that",
];

/// Pluggable text → id mapping.
pub trait TextTokenizer {
    fn encode(&self, text: &str) -> Vec<TokenId>;
    fn decode(&self, ids: &[TokenId]) -> String;
    fn vocab_size(&self) -> usize;
}

/// A pre-token with its byte span in the source text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Piece {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Splits on whitespace, emits each punctuation character as its own piece,
/// lowercases everything. Special surface forms (`<unk>` etc.) stay whole.
pub fn split_pieces(text: &str) -> Vec<Piece> {
    let mut out = Vec::new();
    let mut word_start: Option<usize> = None;
    let mut iter = text.char_indices().peekable();
    let flush = |out: &mut Vec<Piece>, start: &mut Option<usize>, end: usize| {
        if let Some(s) = start.take() {
            out.push(Piece { text: text[s..end].to_lowercase(), start: s, end });
        }
    };
    while let Some((i, ch)) = iter.next() {
        if ch == '<' {
            if let Some(sp) = SPECIALS.iter().find(|sp| sp.starts_with('<') && text[i..].starts_with(**sp)) {
                flush(&mut out, &mut word_start, i);
                out.push(Piece { text: sp.to_string(), start: i, end: i + sp.len() });
                for _ in 1..sp.chars().count() {
                    iter.next();
                }
                continue;
            }
        }
        if ch.is_whitespace() {
            flush(&mut out, &mut word_start, i);
        } else if ch.is_ascii_punctuation() || (!ch.is_alphanumeric() && !ch.is_whitespace()) {
            flush(&mut out, &mut word_start, i);
            out.push(Piece { text: ch.to_lowercase().collect(), start: i, end: i + ch.len_utf8() });
        } else if word_start.is_none() {
            word_start = Some(i);
        }
    }
    flush(&mut out, &mut word_start, text.len());
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordTokenizer {
    vocab: BTreeMap<String, TokenId>,
    id_to_token: Vec<String>,
}

impl WordTokenizer {
    /// Vocabulary of specials and reserved words only.
    pub fn base() -> Self {
        let mut tok = WordTokenizer { vocab: BTreeMap::new(), id_to_token: Vec::new() };
        for w in SPECIALS.iter().chain(RESERVED) {
            tok.add(w);
        }
        tok
    }

    /// Builds the vocabulary from documents in order; new words get ids in
    /// order of first appearance.
    pub fn build<'a>(docs: impl IntoIterator<Item = (&'a str, &'a str)>, max_vocab: usize) -> Result<Self> {
        let mut tok = Self::base();
        for (doc_id, text) in docs {
            for piece in split_pieces(text) {
                if !tok.vocab.contains_key(&piece.text) {
                    if tok.id_to_token.len() >= max_vocab {
                        return Err(PgtError::VocabularyOverflow { doc_id: doc_id.to_string(), limit: max_vocab });
                    }
                    tok.add(&piece.text);
                }
            }
        }
        Ok(tok)
    }

    fn add(&mut self, w: &str) -> TokenId {
        if let Some(&id) = self.vocab.get(w) {
            return id;
        }
        let id = self.id_to_token.len() as TokenId;
        self.vocab.insert(w.to_string(), id);
        self.id_to_token.push(w.to_string());
        id
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.vocab.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.id_to_token.get(id as usize).map(String::as_str).unwrap_or("<unk>")
    }

    /// Encodes with byte spans retained.
    pub fn encode_with_spans(&self, text: &str) -> Vec<(TokenId, usize, usize)> {
        split_pieces(text).into_iter().map(|p| (self.id(&p.text), p.start, p.end)).collect()
    }

    pub fn is_sentence_end(&self, id: TokenId) -> bool {
        matches!(self.token(id), "." | "!" | "?")
    }

    pub fn refusal_ids(&self) -> Vec<TokenId> {
        self.encode(REFUSAL)
    }

    pub fn correct_id(&self) -> TokenId {
        self.id(LABEL_CORRECT)
    }

    pub fn wrong_id(&self) -> TokenId {
        self.id(LABEL_WRONG)
    }

    /// SHA-256 over the vocabulary in id order.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.id_to_token {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }
}

impl TextTokenizer for WordTokenizer {
    fn encode(&self, text: &str) -> Vec<TokenId> {
        split_pieces(text).iter().map(|p| self.id(&p.text)).collect()
    }

    fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&id| self.token(id)).collect::<Vec<_>>().join(" ")
    }

    fn vocab_size(&self) -> usize {
        self.id_to_token.len()
    }
}

/// True when `answer` begins with the refusal token sequence.
pub fn starts_with_refusal(tok: &WordTokenizer, answer: &[TokenId]) -> bool {
    let r = tok.refusal_ids();
    answer.len() >= r.len() && answer[..r.len()] == r[..]
}

/// Text-level refusal check on normalized text.
pub fn text_starts_with_refusal(answer: &str) -> bool {
    let norm: Vec<String> = split_pieces(answer).into_iter().map(|p| p.text).collect();
    let refusal: Vec<String> = split_pieces(REFUSAL).into_iter().map(|p| p.text).collect();
    norm.len() >= refusal.len() && norm[..refusal.len()] == refusal[..]
}
