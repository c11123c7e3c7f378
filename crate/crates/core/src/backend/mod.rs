//! Language-model backends: token scoring, sampled generation, judging.
//!
//! Two implementations sit behind [`LmBackend`]: an HTTP client for any
//! service speaking the `/v1/completions` + `/v1/chat/completions` wire
//! protocol, and a deterministic offline mock used for tests and dry runs.
//! Scoring, generation, and judging may be served by different backends;
//! the pipeline wires them independently.

mod http;
mod mock;

pub use http::HttpLm;
pub use mock::{BigramTable, MockLm};

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One decoding configuration: temperature scaling followed by nucleus
/// (top-p) truncation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl SamplingConfig {
    pub fn new(temperature: f64, top_p: f64) -> Self {
        Self { temperature, top_p, max_tokens: 256, seed: None }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_max_tokens(mut self, max_tokens: usize) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(Error::invalid_argument(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if self.top_p.is_nan() || self.top_p <= 0.0 || self.top_p > 1.0 {
            return Err(Error::invalid_argument(format!(
                "top_p {} outside (0, 1]",
                self.top_p
            )));
        }
        if self.max_tokens == 0 {
            return Err(Error::invalid_argument("max_tokens must be positive"));
        }
        Ok(())
    }
}

/// One continuation token with its conditional natural-log probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogProb {
    pub token: String,
    pub logprob: f64,
    pub position: usize,
}

/// The three capabilities the pipeline needs from a model. Implementations
/// must be shareable across threads; concurrent calls are bounded by the
/// backend's own in-flight limit.
pub trait LmBackend: Send + Sync {
    /// Log-probability of each `continuation` token conditioned on
    /// `context` plus the preceding continuation tokens. Tokenization is
    /// the backend's own.
    fn score_tokens(&self, context: &str, continuation: &str) -> Result<Vec<TokenLogProb>>;

    /// A completion of `context` sampled under `config`.
    fn generate(&self, context: &str, config: &SamplingConfig) -> Result<String>;

    /// Free-form reply to a judging prompt.
    fn judge(&self, prompt: &str) -> Result<String>;

    /// Model identifier recorded in output metadata.
    fn model_name(&self) -> &str;
}

/// Wrapper counting every call that reaches the inner backend, including
/// retries issued by callers. Used for trace accounting.
pub struct CountingLm {
    inner: Arc<dyn LmBackend>,
    calls: std::sync::atomic::AtomicUsize,
}

impl CountingLm {
    pub fn new(inner: Arc<dyn LmBackend>) -> Self {
        Self { inner, calls: std::sync::atomic::AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(std::sync::atomic::Ordering::Relaxed)
    }

    fn tick(&self) {
        self.calls.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
    }
}

impl LmBackend for CountingLm {
    fn score_tokens(&self, context: &str, continuation: &str) -> Result<Vec<TokenLogProb>> {
        self.tick();
        self.inner.score_tokens(context, continuation)
    }

    fn generate(&self, context: &str, config: &SamplingConfig) -> Result<String> {
        self.tick();
        self.inner.generate(context, config)
    }

    fn judge(&self, prompt: &str) -> Result<String> {
        self.tick();
        self.inner.judge(prompt)
    }

    fn model_name(&self) -> &str {
        self.inner.model_name()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Mock,
}

/// Everything needed to construct a backend. `endpoint` is required for
/// (and only for) HTTP backends; the API key is read from the environment
/// variable named in `api_key_env`, never from configuration values.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    pub model: String,
    pub api_key_env: Option<String>,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub max_in_flight: usize,
    /// Mock only: path to a transition-table JSON overriding the builtin.
    pub mock_table: Option<PathBuf>,
}

impl Default for BackendDescriptor {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            endpoint: None,
            model: String::new(),
            api_key_env: None,
            timeout_secs: 60,
            max_retries: 3,
            max_in_flight: 8,
            mock_table: None,
        }
    }
}

impl BackendDescriptor {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            BackendKind::Http if self.endpoint.is_none() => Err(Error::invalid_argument(
                "http backend requires an endpoint",
            )),
            BackendKind::Mock if self.endpoint.is_some() => Err(Error::invalid_argument(
                "mock backend must not set an endpoint",
            )),
            _ => Ok(()),
        }
    }

    pub fn build(&self) -> Result<Arc<dyn LmBackend>> {
        self.validate()?;
        match self.kind {
            BackendKind::Mock => {
                let mock = match &self.mock_table {
                    Some(path) => MockLm::from_table_file(path)?,
                    None => MockLm::builtin(),
                };
                Ok(Arc::new(mock))
            }
            BackendKind::Http => {
                let endpoint = self.endpoint.clone().unwrap();
                let api_key = match &self.api_key_env {
                    Some(var) => match std::env::var(var) {
                        Ok(value) => Some(value),
                        Err(_) => {
                            return Err(Error::invalid_argument(format!(
                                "environment variable {} is not set",
                                var
                            )))
                        }
                    },
                    None => None,
                };
                Ok(Arc::new(HttpLm::new(
                    endpoint,
                    self.model.clone(),
                    api_key,
                    Duration::from_secs(self.timeout_secs),
                    self.max_retries,
                    self.max_in_flight,
                )?))
            }
        }
    }
}
