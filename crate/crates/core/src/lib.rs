//! Prompt-generate-train pipeline for small retrieval-augmented QA models.
//!
//! The crate synthesizes question/answer data over a text corpus with
//! teacher language models, filters it for consistency, fine-tunes a
//! late-interaction retriever and a small encoder-decoder generator under a
//! stride-marginalized likelihood, trains a reward model from synthetic
//! relevance orderings, aligns the generator with PPO and calibrates its
//! confidence.

pub mod align;
pub mod autodiff;
pub mod calibrate;
pub mod corpus;
pub mod error;
pub mod generator;
pub mod jsonio;
pub mod filter;
pub mod lmclient;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod retriever;
pub mod reward;
pub mod sft;
pub mod synthgen;
pub mod tensor;
pub mod tokenizer;

pub use error::{PgtError, Result};
