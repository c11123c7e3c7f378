//! HTTP backend for services speaking the standard completions protocol.
//!
//! Token scoring POSTs `/v1/completions` with the full text echoed back and
//! `max_tokens: 0`, then keeps the logprobs whose text offset falls inside
//! the continuation. Generation and judging POST `/v1/chat/completions`.
//! Transport errors and 429/5xx responses are retried with exponential
//! backoff up to `max_retries`; other statuses fail immediately. Request
//! and response bodies are logged at debug level; the bearer token lives
//! only in the `Authorization` header, which is never logged.

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use crate::error::{Error, Result};
use crate::parallel::Semaphore;

use super::{LmBackend, SamplingConfig, TokenLogProb};

pub struct HttpLm {
    client: reqwest::blocking::Client,
    endpoint: String,
    model: String,
    api_key: Option<String>,
    max_retries: u32,
    backoff_ms: u64,
    in_flight: Semaphore,
}

#[derive(Debug, Deserialize)]
struct CompletionsResponse {
    choices: Vec<CompletionChoice>,
}

#[derive(Debug, Deserialize)]
struct CompletionChoice {
    #[serde(default)]
    logprobs: Option<LogProbs>,
}

#[derive(Debug, Deserialize)]
struct LogProbs {
    #[serde(default)]
    tokens: Vec<String>,
    #[serde(default)]
    token_logprobs: Vec<Option<f64>>,
    #[serde(default)]
    text_offset: Vec<usize>,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Debug, Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: String,
}

impl HttpLm {
    pub fn new(
        endpoint: String,
        model: String,
        api_key: Option<String>,
        timeout: Duration,
        max_retries: u32,
        max_in_flight: usize,
    ) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::backend(format!("building http client: {}", e)))?;
        Ok(Self {
            client,
            endpoint: endpoint.trim_end_matches('/').to_string(),
            model,
            api_key,
            max_retries,
            backoff_ms: 200,
            in_flight: Semaphore::new(max_in_flight),
        })
    }

    /// Shrinks the retry backoff; integration tests use this to keep
    /// retry storms fast.
    pub fn with_backoff_ms(mut self, ms: u64) -> Self {
        self.backoff_ms = ms;
        self
    }

    fn post(&self, path: &str, body: &serde_json::Value) -> Result<String> {
        let url = format!("{}{}", self.endpoint, path);
        let payload = body.to_string();
        let mut attempt = 0u32;
        loop {
            let _permit = self.in_flight.acquire();
            log::debug!("POST {} body={}", url, payload);
            let mut request = self
                .client
                .post(&url)
                .header("Content-Type", "application/json")
                .body(payload.clone());
            if let Some(key) = &self.api_key {
                request = request.bearer_auth(key);
            }
            let outcome = request.send();
            let retryable = match &outcome {
                Ok(response) => {
                    let status = response.status();
                    status.as_u16() == 429 || status.is_server_error()
                }
                Err(_) => true,
            };
            match outcome {
                Ok(response) if response.status().is_success() => {
                    let text = response
                        .text()
                        .map_err(|e| Error::backend(format!("reading response: {}", e)))?;
                    log::debug!("{} -> {}", url, text);
                    return Ok(text);
                }
                Ok(response) if !retryable => {
                    let status = response.status();
                    let text = response.text().unwrap_or_default();
                    return Err(Error::backend(format!(
                        "{} returned {}: {}",
                        url, status, text
                    )));
                }
                _ if attempt >= self.max_retries => {
                    let detail = match outcome {
                        Ok(response) => format!("status {}", response.status()),
                        Err(e) => e.to_string(),
                    };
                    return Err(Error::backend(format!(
                        "{} unreachable after {} attempts: {}",
                        url,
                        attempt + 1,
                        detail
                    )));
                }
                _ => {
                    let delay = self.backoff_ms.saturating_mul(1 << attempt.min(4));
                    log::debug!("retrying {} in {}ms", url, delay);
                    std::thread::sleep(Duration::from_millis(delay));
                    attempt += 1;
                }
            }
        }
    }

    fn chat(&self, content: &str, config: Option<&SamplingConfig>) -> Result<String> {
        let mut body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": content}],
        });
        if let Some(config) = config {
            body["temperature"] = json!(config.temperature);
            body["top_p"] = json!(config.top_p);
            body["max_tokens"] = json!(config.max_tokens);
            if let Some(seed) = config.seed {
                body["seed"] = json!(seed);
            }
        } else {
            // Judging wants the most deterministic reply the service can give.
            body["temperature"] = json!(0.0);
        }
        let text = self.post("/v1/chat/completions", &body)?;
        let parsed: ChatResponse = serde_json::from_str(&text)
            .map_err(|e| Error::backend(format!("bad chat response: {}", e)))?;
        let reply = parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .unwrap_or_default();
        Ok(reply)
    }
}

impl LmBackend for HttpLm {
    fn score_tokens(&self, context: &str, continuation: &str) -> Result<Vec<TokenLogProb>> {
        if continuation.trim().is_empty() {
            return Err(Error::empty("continuation"));
        }
        let full = format!("{}{}", context, continuation);
        let body = json!({
            "model": self.model,
            "prompt": full,
            "max_tokens": 0,
            "echo": true,
            "logprobs": 0,
        });
        let text = self.post("/v1/completions", &body)?;
        let parsed: CompletionsResponse = serde_json::from_str(&text)
            .map_err(|e| Error::backend(format!("bad completions response: {}", e)))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| Error::backend("completions response has no choices"))?;
        let lp = choice
            .logprobs
            .ok_or_else(|| Error::backend("backend returned no log-probabilities"))?;
        if lp.tokens.len() != lp.token_logprobs.len() || lp.tokens.len() != lp.text_offset.len() {
            return Err(Error::backend(format!(
                "mismatched logprob arrays: {} tokens, {} logprobs, {} offsets",
                lp.tokens.len(),
                lp.token_logprobs.len(),
                lp.text_offset.len()
            )));
        }

        let boundary = context.len();
        let mut out = Vec::new();
        for ((token, logprob), offset) in lp
            .tokens
            .into_iter()
            .zip(lp.token_logprobs)
            .zip(lp.text_offset)
        {
            if offset < boundary {
                continue;
            }
            let position = out.len();
            let value = logprob.ok_or_else(|| {
                Error::backend(format!(
                    "backend returned no log-probability for continuation token {:?}",
                    token
                ))
            })?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLogProb { position, value });
            }
            // A positive log-probability is an improper distribution;
            // reject rather than clamp so rankings stay trustworthy.
            if value > 0.0 {
                return Err(Error::backend(format!(
                    "backend reported positive log-probability {} for token {:?}",
                    value, token
                )));
            }
            out.push(TokenLogProb { token, logprob: value, position });
        }
        if out.is_empty() {
            return Err(Error::backend(format!(
                "no continuation tokens scored (context {} chars, continuation {} chars; \
                 the continuation may exceed the backend context window)",
                context.len(),
                continuation.len()
            )));
        }
        Ok(out)
    }

    fn generate(&self, context: &str, config: &SamplingConfig) -> Result<String> {
        if context.trim().is_empty() {
            return Err(Error::empty("context"));
        }
        config.validate()?;
        let reply = self.chat(context, Some(config))?;
        if reply.trim().is_empty() {
            let retry = self.chat(context, Some(config))?;
            if retry.trim().is_empty() {
                return Err(Error::backend("empty completion after retry"));
            }
            return Ok(retry);
        }
        Ok(reply)
    }

    fn judge(&self, prompt: &str) -> Result<String> {
        if prompt.trim().is_empty() {
            return Err(Error::empty("prompt"));
        }
        self.chat(prompt, None)
    }

    fn model_name(&self) -> &str {
        &self.model
    }
}
