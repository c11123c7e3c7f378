//! Perplexity-guided curation of (query, response) instruction datasets.
//!
//! The pipeline iteratively revises responses to lower their perplexity
//! under a language-model backend while holding readability and helpfulness
//! above a quality floor, and ships the surrounding tooling: JSONL dataset
//! handling, dataset mixing, perplexity profiling, and a safety evaluation
//! harness (refusal-based attack success rate plus judge-scored harmfulness
//! and helpfulness).

pub mod backend;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod eval;
pub mod helpfulness;
pub mod parallel;
pub mod perplexity;
pub mod readability;
pub mod rng;

pub use error::{Error, Result};
