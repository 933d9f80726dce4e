//! Okapi BM25 over I3 chunks.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::IndexTriplet;
use crate::tokenizer::TokenId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

/// Corpus statistics over every chunk of I3.
#[derive(Clone, Debug)]
pub struct Bm25 {
    params: Bm25Params,
    doc_freq: HashMap<TokenId, usize>,
    num_docs: usize,
    avg_len: f64,
}

impl Bm25 {
    pub fn from_index(index: &IndexTriplet, params: Bm25Params) -> Self {
        Self::from_docs(index.i3.iter().map(|c| c.token_ids.as_slice()), params)
    }

    pub fn from_docs<'a>(docs: impl IntoIterator<Item = &'a [TokenId]>, params: Bm25Params) -> Self {
        let mut doc_freq = HashMap::new();
        let mut num_docs = 0;
        let mut total_len = 0;
        for doc in docs {
            num_docs += 1;
            total_len += doc.len();
            let mut seen: Vec<TokenId> = doc.to_vec();
            seen.sort_unstable();
            seen.dedup();
            for t in seen {
                *doc_freq.entry(t).or_insert(0) += 1;
            }
        }
        let avg_len = if num_docs == 0 { 0.0 } else { total_len as f64 / num_docs as f64 };
        Self { params, doc_freq, num_docs, avg_len }
    }

    /// Non-negative idf variant `ln(1 + (N - df + 0.5) / (df + 0.5))`.
    pub fn idf(&self, token: TokenId) -> f64 {
        let df = self.doc_freq.get(&token).copied().unwrap_or(0) as f64;
        let n = self.num_docs as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// Sums the term weight for each query token occurrence.
    pub fn score(&self, query: &[TokenId], doc: &[TokenId]) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let len_norm = if self.avg_len > 0.0 { doc.len() as f64 / self.avg_len } else { 1.0 };
        let mut total = 0.0;
        for &q in query {
            let tf = doc.iter().filter(|&&t| t == q).count() as f64;
            if tf == 0.0 {
                continue;
            }
            total += self.idf(q) * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * len_norm));
        }
        total
    }
}
