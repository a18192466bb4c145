//! Chat-completion providers.
//!
//! One trait, several implementations: an HTTP client for
//! OpenAI-compatible endpoints, a persistent per-key response cache,
//! a record/replay pair for deterministic offline runs, and a counting
//! wrapper that feeds hit-rate numbers into reports. The replay
//! provider errors on a miss instead of falling through to the
//! network, so offline runs can never silently go online.

mod cache;
mod gate;
mod http;
mod replay;

pub use cache::CacheProvider;
pub use gate::Gate;
pub use http::{backoff_delay, HttpEmbedder, HttpProvider, RetryPolicy, API_KEY_ENV};
pub use replay::{record_fixture, FixtureEntry, FixtureSink, RecordingProvider, ReplayProvider};

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::records::TokenUsage;

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("retries exhausted after {attempts} attempts; last status {last_status}")]
    RetryExhausted { attempts: u32, last_status: u16 },
    #[error("permanent provider error (status {status}): {detail}")]
    Permanent { status: u16, detail: String },
    #[error("replay miss for request key {key}")]
    ReplayMiss { key: String },
    #[error("DEMORECON_API_KEY is not set; required for the http provider")]
    MissingApiKey,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed provider response: {0}")]
    BadResponse(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

/// A chat-completion request. Temperature defaults to 0 (greedy);
/// the last message must be a user turn.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

impl ChatRequest {
    /// Single user-message request at the given temperature.
    pub fn user(model: impl Into<String>, content: impl Into<String>, temperature: f64) -> Self {
        Self {
            model: model.into(),
            messages: vec![ChatMessage {
                role: Role::User,
                content: content.into(),
            }],
            temperature,
            max_tokens: None,
        }
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.messages.is_empty() {
            return Err(ProviderError::InvalidRequest("messages are empty".into()));
        }
        if self.messages.last().map(|m| m.role) != Some(Role::User) {
            return Err(ProviderError::InvalidRequest(
                "last message must have role user".into(),
            ));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(ProviderError::InvalidRequest(
                "temperature must be >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Content of the final user message.
    pub fn last_user_content(&self) -> &str {
        self.messages
            .last()
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub text: String,
    pub usage: Option<TokenUsage>,
    /// True when served from the cache or a replay fixture.
    pub cached: bool,
}

/// Deterministic identity of a request: SHA-256 over the canonical
/// JSON of (model, messages, temperature, max_tokens). Two requests
/// differing in any of these never share a key.
pub fn cache_key(request: &ChatRequest) -> String {
    use sha2::{Digest, Sha256};
    let canonical = serde_json::to_string(request).expect("request serializes");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

pub trait ChatProvider: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError>;
}

impl<T: ChatProvider + ?Sized> ChatProvider for Arc<T> {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        (**self).chat(request)
    }
}

impl<T: ChatProvider + ?Sized> ChatProvider for &T {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        (**self).chat(request)
    }
}

impl<T: ChatProvider + ?Sized> ChatProvider for Box<T> {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        (**self).chat(request)
    }
}

/// Wraps a provider stack and counts requests and cache/replay hits.
pub struct CountingProvider<P> {
    inner: P,
    requests: AtomicU64,
    cached: AtomicU64,
}

impl<P: ChatProvider> CountingProvider<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            requests: AtomicU64::new(0),
            cached: AtomicU64::new(0),
        }
    }

    /// (total requests, served-from-cache-or-fixture count)
    pub fn stats(&self) -> (u64, u64) {
        (
            self.requests.load(Ordering::Relaxed),
            self.cached.load(Ordering::Relaxed),
        )
    }
}

impl<P: ChatProvider> ChatProvider for CountingProvider<P> {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let response = self.inner.chat(request)?;
        self.requests.fetch_add(1, Ordering::Relaxed);
        if response.cached {
            self.cached.fetch_add(1, Ordering::Relaxed);
        }
        Ok(response)
    }
}
