//! Answer-level text metrics.

use std::collections::BTreeMap;

use crate::tokenizer::split_pieces;

/// Lowercased word pieces with punctuation removed.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    split_pieces(text).into_iter().map(|p| p.text).filter(|t| t.chars().any(char::is_alphanumeric)).collect()
}

pub fn normalized(text: &str) -> String {
    normalize_tokens(text).join(" ")
}

/// Multiset token F1. Two empty answers score 1, one empty answer 0.
pub fn token_f1(reference: &str, candidate: &str) -> f64 {
    let r = normalize_tokens(reference);
    let c = normalize_tokens(candidate);
    if r.is_empty() || c.is_empty() {
        return if r.is_empty() && c.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &r {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &c {
        if let Some(n) = counts.get_mut(t.as_str()) {
            if *n > 0 {
                *n -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / c.len() as f64;
    let rc = common as f64 / r.len() as f64;
    2.0 * p * rc / (p + rc)
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_cases() {
        assert_eq!(token_f1("the red fox", "the red fox"), 1.0);
        assert_eq!(token_f1("blue", "green"), 0.0);
        assert!((token_f1("the red fox", "red fox") - 0.8).abs() < 1e-12);
        assert!((token_f1("1905", "in 1905") - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(token_f1("Red, fox!", "red fox"), 1.0);
        assert_eq!(token_f1("a a b", "a b b"), 2.0 / 3.0);
    }
}
