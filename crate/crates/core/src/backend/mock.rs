//! Deterministic offline backend: a word-level bigram model.
//!
//! The mock exists so the whole pipeline can run and be tested without a
//! model server. Its behaviour is documented exactly so tests can compute
//! expectations independently:
//!
//! * Tokenization is whitespace splitting; nothing else.
//! * Scoring conditions each continuation token on the previous token.
//!   The initial state is the last context token that is in the
//!   vocabulary, scanning from the end, or the start symbol if none is.
//! * `generate` samples `min(max_tokens, 12)` tokens from the chain,
//!   starting from the same conditioning state, under temperature scaling
//!   then nucleus truncation. The RNG is
//!   `SplitMix64::new(derive_seed(fnv1a64(context), &[seed]))` where
//!   `seed` is `config.seed` (0 when unset), so output is a pure function
//!   of `(context, config)`.
//! * `judge` replies with the single digit `fnv1a64(prompt) % 6`.
//!
//! The builtin table (`data/bigram_model.json`) is dense (every row
//! assigns positive probability to every vocabulary token) and uses only
//! dyadic probabilities so row sums are exact in binary floating point.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, fnv1a64, SplitMix64};

use super::{LmBackend, SamplingConfig, TokenLogProb};

const BUILTIN_TABLE: &str = include_str!("../../data/bigram_model.json");

/// Number of tokens `generate` emits (capped by `max_tokens`).
const GENERATION_LENGTH: usize = 12;

/// Token names used by the synthetic `uniform(n)` vocabulary.
const UNIFORM_WORDS: [&str; 12] = [
    "alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta", "iota", "kappa",
    "lambda", "mu",
];

/// A bigram transition table. `rows` maps a conditioning token (or the
/// start symbol) to its next-token distribution. The vocabulary is the set
/// of row keys other than `start`.
#[derive(Debug, Clone, Deserialize)]
pub struct BigramTable {
    pub name: String,
    pub start: String,
    pub rows: BTreeMap<String, BTreeMap<String, f64>>,
}

impl BigramTable {
    pub fn from_json(text: &str) -> Result<Self> {
        let table: BigramTable = serde_json::from_str(text)
            .map_err(|e| Error::invalid_argument(format!("bad bigram table: {}", e)))?;
        table.validate()?;
        Ok(table)
    }

    fn validate(&self) -> Result<()> {
        if !self.rows.contains_key(&self.start) {
            return Err(Error::invalid_argument(format!(
                "bigram table lacks a row for start symbol {:?}",
                self.start
            )));
        }
        for (state, row) in &self.rows {
            if row.is_empty() {
                return Err(Error::invalid_argument(format!("empty row for {:?}", state)));
            }
            let mut sum = 0.0;
            for (token, &p) in row {
                if p.is_nan() || !p.is_finite() || p < 0.0 {
                    return Err(Error::invalid_argument(format!(
                        "bad probability {} for {:?} -> {:?}",
                        p, state, token
                    )));
                }
                if token == &self.start {
                    return Err(Error::invalid_argument(
                        "start symbol cannot be a transition target",
                    ));
                }
                if !self.rows.contains_key(token) {
                    return Err(Error::invalid_argument(format!(
                        "transition target {:?} has no row of its own",
                        token
                    )));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::invalid_argument(format!(
                    "row for {:?} sums to {}, not 1",
                    state, sum
                )));
            }
        }
        Ok(())
    }

    pub fn vocab(&self) -> impl Iterator<Item = &str> {
        self.rows.keys().filter(|k| **k != self.start).map(String::as_str)
    }

    fn contains(&self, token: &str) -> bool {
        token != self.start && self.rows.contains_key(token)
    }

    fn transition(&self, state: &str, token: &str) -> f64 {
        self.rows
            .get(state)
            .and_then(|row| row.get(token))
            .copied()
            .unwrap_or(0.0)
    }

    /// Samples `len` tokens by walking the raw chain with a seeded RNG.
    /// Every emitted transition has positive probability, so walks are
    /// always scoreable by the same table.
    pub fn random_walk(&self, seed: u64, len: usize) -> String {
        let mut rng = SplitMix64::new(seed);
        let mut state = self.start.clone();
        let mut tokens = Vec::with_capacity(len);
        for _ in 0..len {
            let row = &self.rows[&state];
            let u = rng.next_f64();
            let mut cumulative = 0.0;
            let mut chosen = None;
            for (token, &p) in row {
                cumulative += p;
                if u < cumulative {
                    chosen = Some(token.clone());
                    break;
                }
            }
            let token = chosen.unwrap_or_else(|| row.keys().next_back().unwrap().clone());
            state = token.clone();
            tokens.push(token);
        }
        tokens.join(" ")
    }
}

/// Applies temperature scaling then nucleus truncation to a next-token
/// distribution, returning the renormalized support sorted by descending
/// probability with ties broken by token string ascending.
///
/// Scaling raises each probability to `1/T` and renormalizes; `T == 1` is
/// the identity. The nucleus is the smallest prefix of the descending
/// order whose cumulative mass is `>= top_p`.
pub fn scale_and_truncate(
    dist: &[(String, f64)],
    temperature: f64,
    top_p: f64,
) -> Vec<(String, f64)> {
    let mut scaled: Vec<(String, f64)> = if temperature == 1.0 {
        dist.to_vec()
    } else {
        dist.iter()
            .map(|(t, p)| (t.clone(), p.powf(1.0 / temperature)))
            .collect()
    };
    let total: f64 = scaled.iter().map(|(_, p)| p).sum();
    if total <= 0.0 {
        // All mass underflowed (tiny T); collapse to the raw argmax.
        let argmax = dist
            .iter()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)))
            .expect("non-empty distribution");
        return vec![(argmax.0.clone(), 1.0)];
    }
    for (_, p) in &mut scaled {
        *p /= total;
    }
    scaled.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));

    let mut kept = 0;
    let mut cumulative = 0.0;
    for (_, p) in &scaled {
        cumulative += p;
        kept += 1;
        if cumulative >= top_p {
            break;
        }
    }
    scaled.truncate(kept.max(1));
    let mass: f64 = scaled.iter().map(|(_, p)| p).sum();
    for (_, p) in &mut scaled {
        *p /= mass;
    }
    scaled
}

pub struct MockLm {
    table: BigramTable,
    model: String,
}

impl MockLm {
    pub fn new(table: BigramTable) -> Self {
        let model = format!("mock:{}", table.name);
        Self { table, model }
    }

    /// The bundled dense 8-token table.
    pub fn builtin() -> Self {
        Self::new(BigramTable::from_json(BUILTIN_TABLE).expect("builtin table is valid"))
    }

    pub fn from_table_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::new(BigramTable::from_json(&text)?))
    }

    /// Uniform model over `n` word-tokens: every transition (including
    /// from the start symbol) has probability `1/n`.
    pub fn uniform(n: usize) -> Self {
        assert!(n >= 1, "uniform vocabulary needs at least one token");
        let vocab: Vec<String> = (0..n)
            .map(|i| {
                UNIFORM_WORDS
                    .get(i)
                    .map(|w| w.to_string())
                    .unwrap_or_else(|| format!("w{}", i))
            })
            .collect();
        let p = 1.0 / n as f64;
        let row: BTreeMap<String, f64> = vocab.iter().map(|t| (t.clone(), p)).collect();
        let mut rows = BTreeMap::new();
        rows.insert("<s>".to_string(), row.clone());
        for token in &vocab {
            rows.insert(token.clone(), row.clone());
        }
        Self::new(BigramTable {
            name: format!("uniform-{}", n),
            start: "<s>".to_string(),
            rows,
        })
    }

    /// A model where every state shares one next-token distribution, for
    /// driving the sampling math with hand-picked probabilities.
    pub fn from_unigram(dist: &[(&str, f64)]) -> Self {
        let row: BTreeMap<String, f64> =
            dist.iter().map(|(t, p)| (t.to_string(), *p)).collect();
        let mut rows = BTreeMap::new();
        rows.insert("<s>".to_string(), row.clone());
        for (token, _) in dist {
            rows.insert(token.to_string(), row.clone());
        }
        let table = BigramTable {
            name: "unigram".to_string(),
            start: "<s>".to_string(),
            rows,
        };
        table.validate().expect("unigram distribution must sum to 1");
        Self::new(table)
    }

    pub fn table(&self) -> &BigramTable {
        &self.table
    }

    /// The conditioning state for a context: the last whitespace token
    /// that is in the vocabulary, or the start symbol.
    pub fn conditioning_state(&self, context: &str) -> &str {
        for token in context.split_whitespace().rev() {
            if self.table.contains(token) {
                return self
                    .table
                    .rows
                    .get_key_value(token)
                    .map(|(k, _)| k.as_str())
                    .unwrap();
            }
        }
        &self.table.start
    }

    /// The post-(temperature, nucleus) next-token distribution for a
    /// state. Exposed so tests and analyses can inspect the exact support.
    pub fn next_token_distribution(
        &self,
        state: &str,
        config: &SamplingConfig,
    ) -> Result<Vec<(String, f64)>> {
        config.validate()?;
        let row = self
            .table
            .rows
            .get(state)
            .ok_or_else(|| Error::OovToken { token: state.to_string() })?;
        let dist: Vec<(String, f64)> =
            row.iter().filter(|(_, &p)| p > 0.0).map(|(t, &p)| (t.clone(), p)).collect();
        Ok(scale_and_truncate(&dist, config.temperature, config.top_p))
    }
}

impl LmBackend for MockLm {
    fn score_tokens(&self, context: &str, continuation: &str) -> Result<Vec<TokenLogProb>> {
        if continuation.trim().is_empty() {
            return Err(Error::empty("continuation"));
        }
        let mut state = self.conditioning_state(context).to_string();
        let mut out = Vec::new();
        for (position, token) in continuation.split_whitespace().enumerate() {
            if !self.table.contains(token) {
                return Err(Error::OovToken { token: token.to_string() });
            }
            let p = self.table.transition(&state, token);
            if p <= 0.0 {
                return Err(Error::ImpossibleTransition {
                    from: state.clone(),
                    to: token.to_string(),
                });
            }
            out.push(TokenLogProb { token: token.to_string(), logprob: p.ln(), position });
            state = token.to_string();
        }
        Ok(out)
    }

    fn generate(&self, context: &str, config: &SamplingConfig) -> Result<String> {
        if context.trim().is_empty() {
            return Err(Error::empty("context"));
        }
        config.validate()?;
        let len = config.max_tokens.clamp(1, GENERATION_LENGTH);
        let seed = config.seed.unwrap_or(0);
        let mut rng = SplitMix64::new(derive_seed(fnv1a64(context.as_bytes()), &[seed]));
        let mut state = self.conditioning_state(context).to_string();
        let mut tokens = Vec::with_capacity(len);
        for _ in 0..len {
            let dist = self.next_token_distribution(&state, config)?;
            let u = rng.next_f64();
            let mut cumulative = 0.0;
            let mut chosen = None;
            for (token, p) in &dist {
                cumulative += p;
                if u < cumulative {
                    chosen = Some(token.clone());
                    break;
                }
            }
            let token = chosen.unwrap_or_else(|| dist.last().unwrap().0.clone());
            state = token.clone();
            tokens.push(token);
        }
        Ok(tokens.join(" "))
    }

    fn judge(&self, prompt: &str) -> Result<String> {
        if prompt.trim().is_empty() {
            return Err(Error::empty("prompt"));
        }
        Ok(format!("{}", fnv1a64(prompt.as_bytes()) % 6))
    }

    fn model_name(&self) -> &str {
        &self.model
    }
}
