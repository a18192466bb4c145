//! Record/replay fixtures for deterministic offline runs.
//!
//! A fixture is a JSONL file of `{key, text, usage}` rows keyed by
//! [`cache_key`](super::cache_key). The recording wrapper captures
//! every response that flows through it; the replay provider serves
//! exactly those and errors on anything else.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{cache_key, ChatProvider, ChatRequest, ChatResponse, ProviderError};
use crate::records::{load_records, save_records, RecordError, TokenUsage};

/// One recorded exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureEntry {
    pub key: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<TokenUsage>,
}

/// Serves recorded responses; a request without a fixture entry is a
/// [`ProviderError::ReplayMiss`].
pub struct ReplayProvider {
    entries: HashMap<String, FixtureEntry>,
}

impl ReplayProvider {
    pub fn from_path(path: &Path) -> Result<Self, RecordError> {
        let rows: Vec<FixtureEntry> = load_records(path)?;
        Ok(Self::from_entries(rows))
    }

    pub fn from_entries(rows: Vec<FixtureEntry>) -> Self {
        let entries = rows.into_iter().map(|e| (e.key.clone(), e)).collect();
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl ChatProvider for ReplayProvider {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        request.validate()?;
        let key = cache_key(request);
        match self.entries.get(&key) {
            Some(entry) => Ok(ChatResponse {
                text: entry.text.clone(),
                usage: entry.usage,
                cached: true,
            }),
            None => Err(ProviderError::ReplayMiss { key }),
        }
    }
}

/// Shared collector behind one or more [`RecordingProvider`]s, so a
/// whole provider stack (pipeline, judge, candidate) can record into a
/// single fixture file. Entries flush sorted by key, so recording is
/// deterministic regardless of call order.
#[derive(Default)]
pub struct FixtureSink {
    entries: Mutex<BTreeMap<String, FixtureEntry>>,
}

impl FixtureSink {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn flush(&self, path: &Path) -> Result<usize, RecordError> {
        let entries = self.entries.lock().unwrap();
        let rows: Vec<FixtureEntry> = entries.values().cloned().collect();
        save_records(&rows, path)
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Pass-through wrapper that copies every exchange into its sink.
pub struct RecordingProvider<P> {
    inner: P,
    sink: Arc<FixtureSink>,
}

impl<P: ChatProvider> RecordingProvider<P> {
    pub fn new(inner: P, sink: Arc<FixtureSink>) -> Self {
        Self { inner, sink }
    }
}

impl<P: ChatProvider> ChatProvider for RecordingProvider<P> {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let response = self.inner.chat(request)?;
        let key = cache_key(request);
        self.sink.entries.lock().unwrap().insert(
            key.clone(),
            FixtureEntry {
                key,
                text: response.text.clone(),
                usage: response.usage,
            },
        );
        Ok(response)
    }
}

/// Runs the given requests against a live provider and writes the
/// replay fixture. Returns the number of distinct entries written.
pub fn record_fixture(
    requests: &[ChatRequest],
    provider: &dyn ChatProvider,
    path: &Path,
) -> Result<usize, ProviderError> {
    let sink = FixtureSink::new();
    let recorder = RecordingProvider::new(provider, Arc::clone(&sink));
    for request in requests {
        recorder.chat(request)?;
    }
    sink.flush(path).map_err(|e| ProviderError::Io {
        path: PathBuf::from(path),
        source: std::io::Error::other(e.to_string()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Upper;

    impl ChatProvider for Upper {
        fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
            Ok(ChatResponse {
                text: request.last_user_content().to_uppercase(),
                usage: None,
                cached: false,
            })
        }
    }

    #[test]
    fn record_then_replay_reproduces_texts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.jsonl");
        let requests = vec![
            ChatRequest::user("m", "alpha", 0.0),
            ChatRequest::user("m", "beta", 0.0),
        ];
        let written = record_fixture(&requests, &Upper, &path).unwrap();
        assert_eq!(written, 2);

        let replay = ReplayProvider::from_path(&path).unwrap();
        let response = replay.chat(&requests[0]).unwrap();
        assert_eq!(response.text, "ALPHA");
        assert!(response.cached);
    }

    #[test]
    fn replay_miss_names_the_request_key() {
        let replay = ReplayProvider::from_entries(vec![]);
        let request = ChatRequest::user("m", "unseen", 0.0);
        let err = replay.chat(&request).unwrap_err();
        match err {
            ProviderError::ReplayMiss { key } => assert_eq!(key, cache_key(&request)),
            other => panic!("unexpected error {other:?}"),
        }
    }
}
