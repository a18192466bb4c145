//! HTTP client for OpenAI-compatible chat-completion endpoints with
//! retry, exponential backoff with jitter, and a concurrency ceiling.

use std::sync::Mutex;
use std::time::Duration;

use serde::Deserialize;

use super::{cache_key, ChatProvider, ChatRequest, ChatResponse, Gate, ProviderError};
use crate::records::TokenUsage;

/// Environment variable holding the API key for the http provider.
pub const API_KEY_ENV: &str = "DEMORECON_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay_ms: 1_000,
            max_delay_ms: 60_000,
        }
    }
}

/// Pre-jitter delay before retry number `attempt` (0-based): doubles
/// from the base and saturates at the cap, so the sequence is
/// non-decreasing.
pub fn backoff_delay(policy: &RetryPolicy, attempt: u32) -> Duration {
    let factor = 1u64.checked_shl(attempt).unwrap_or(u64::MAX);
    let ms = policy
        .base_delay_ms
        .saturating_mul(factor)
        .min(policy.max_delay_ms);
    Duration::from_millis(ms)
}

pub struct HttpProvider {
    agent: ureq::Agent,
    base_url: String,
    api_key: String,
    policy: RetryPolicy,
    gate: Gate,
    // xorshift state for retry jitter; determinism is not needed on
    // the live path.
    jitter_state: Mutex<u64>,
}

impl HttpProvider {
    /// Reads the API key from `DEMORECON_API_KEY`.
    pub fn from_env(
        base_url: impl Into<String>,
        policy: RetryPolicy,
        max_concurrency: usize,
    ) -> Result<Self, ProviderError> {
        let api_key = std::env::var(API_KEY_ENV).map_err(|_| ProviderError::MissingApiKey)?;
        Ok(Self::new(base_url, api_key, policy, max_concurrency))
    }

    pub fn new(
        base_url: impl Into<String>,
        api_key: impl Into<String>,
        policy: RetryPolicy,
        max_concurrency: usize,
    ) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(120))
            .build();
        let seed = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_nanos() as u64)
            .unwrap_or(0x9e3779b97f4a7c15)
            | 1;
        Self {
            agent,
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key: api_key.into(),
            policy,
            gate: Gate::new(max_concurrency),
            jitter_state: Mutex::new(seed),
        }
    }

    fn jittered(&self, delay: Duration) -> Duration {
        let mut state = self.jitter_state.lock().unwrap();
        *state ^= *state << 13;
        *state ^= *state >> 7;
        *state ^= *state << 17;
        // Uniform multiplier in [0.5, 1.0).
        let frac = (*state >> 11) as f64 / (1u64 << 53) as f64;
        delay.mul_f64(0.5 + 0.5 * frac)
    }

    fn attempt(&self, request: &ChatRequest) -> Result<ChatResponse, AttemptError> {
        let url = format!("{}/chat/completions", self.base_url);
        let mut body = serde_json::json!({
            "model": request.model,
            "messages": request.messages,
            "temperature": request.temperature,
        });
        if let Some(max_tokens) = request.max_tokens {
            body["max_tokens"] = max_tokens.into();
        }
        let result = self
            .agent
            .post(&url)
            .set("Authorization", &format!("Bearer {}", self.api_key))
            .set("Content-Type", "application/json")
            .send_json(body);
        match result {
            Ok(response) => {
                let parsed: CompletionBody = response
                    .into_json()
                    .map_err(|e| AttemptError::Fatal(ProviderError::BadResponse(e.to_string())))?;
                let choice = parsed.choices.into_iter().next().ok_or_else(|| {
                    AttemptError::Fatal(ProviderError::BadResponse("no choices".into()))
                })?;
                Ok(ChatResponse {
                    text: choice.message.content,
                    usage: parsed.usage.map(|u| TokenUsage {
                        prompt_tokens: u.prompt_tokens,
                        completion_tokens: u.completion_tokens,
                    }),
                    cached: false,
                })
            }
            Err(ureq::Error::Status(status, response)) => {
                if status == 429 || status >= 500 {
                    Err(AttemptError::Transient { status })
                } else {
                    let detail = response.into_string().unwrap_or_default();
                    Err(AttemptError::Fatal(ProviderError::Permanent {
                        status,
                        detail,
                    }))
                }
            }
            Err(ureq::Error::Transport(t)) => Err(AttemptError::Timeout(t.to_string())),
        }
    }
}

enum AttemptError {
    Transient { status: u16 },
    Timeout(String),
    Fatal(ProviderError),
}

impl ChatProvider for HttpProvider {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        request.validate()?;
        let _slot = self.gate.acquire();
        let mut last_status = 0u16;
        let mut last_transport = String::new();
        for attempt in 0..self.policy.max_attempts {
            if attempt > 0 {
                std::thread::sleep(self.jittered(backoff_delay(&self.policy, attempt - 1)));
            }
            match self.attempt(request) {
                Ok(response) => return Ok(response),
                Err(AttemptError::Transient { status }) => {
                    last_status = status;
                    log::warn!(
                        "transient status {status} for {} (attempt {}/{})",
                        cache_key(request),
                        attempt + 1,
                        self.policy.max_attempts
                    );
                }
                Err(AttemptError::Timeout(detail)) => {
                    last_status = 0;
                    last_transport = detail;
                }
                Err(AttemptError::Fatal(e)) => return Err(e),
            }
        }
        if last_status == 0 && !last_transport.is_empty() {
            return Err(ProviderError::Transport(last_transport));
        }
        Err(ProviderError::RetryExhausted {
            attempts: self.policy.max_attempts,
            last_status,
        })
    }
}

/// OpenAI-compatible embeddings endpoint client.
pub struct HttpEmbedder {
    agent: ureq::Agent,
    base_url: String,
    api_key: String,
    model: String,
}

impl HttpEmbedder {
    pub fn from_env(base_url: impl Into<String>, model: impl Into<String>) -> Result<Self, ProviderError> {
        let api_key = std::env::var(API_KEY_ENV).map_err(|_| ProviderError::MissingApiKey)?;
        Ok(Self {
            agent: ureq::AgentBuilder::new()
                .timeout(Duration::from_secs(120))
                .build(),
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
            model: model.into(),
        })
    }
}

impl crate::metrics::EmbeddingProvider for HttpEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        let url = format!("{}/embeddings", self.base_url);
        let response = self
            .agent
            .post(&url)
            .set("Authorization", &format!("Bearer {}", self.api_key))
            .set("Content-Type", "application/json")
            .send_json(serde_json::json!({ "model": self.model, "input": texts }))
            .map_err(|e| match e {
                ureq::Error::Status(status, response) => ProviderError::Permanent {
                    status,
                    detail: response.into_string().unwrap_or_default(),
                },
                ureq::Error::Transport(t) => ProviderError::Transport(t.to_string()),
            })?;
        let body: EmbeddingsBody = response
            .into_json()
            .map_err(|e| ProviderError::BadResponse(e.to_string()))?;
        if body.data.len() != texts.len() {
            return Err(ProviderError::BadResponse(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                body.data.len()
            )));
        }
        Ok(body.data.into_iter().map(|d| d.embedding).collect())
    }
}

#[derive(Deserialize)]
struct EmbeddingsBody {
    data: Vec<EmbeddingRow>,
}

#[derive(Deserialize)]
struct EmbeddingRow {
    embedding: Vec<f64>,
}

#[derive(Deserialize)]
struct CompletionBody {
    choices: Vec<Choice>,
    usage: Option<UsageBody>,
}

#[derive(Deserialize)]
struct Choice {
    message: MessageBody,
}

#[derive(Deserialize)]
struct MessageBody {
    content: String,
}

#[derive(Deserialize)]
struct UsageBody {
    prompt_tokens: u64,
    completion_tokens: u64,
}
