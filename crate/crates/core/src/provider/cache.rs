//! Persistent per-key response cache.
//!
//! One JSON file per cache key, written atomically (temp + rename).
//! Keys are [`cache_key`](super::cache_key) digests, so a cache
//! survives across runs and processes; identical requests re-issue
//! zero network calls.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{cache_key, ChatProvider, ChatRequest, ChatResponse, ProviderError};
use crate::records::TokenUsage;

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    usage: Option<TokenUsage>,
}

pub struct CacheProvider<P> {
    inner: P,
    dir: PathBuf,
}

impl<P: ChatProvider> CacheProvider<P> {
    pub fn new(inner: P, dir: impl Into<PathBuf>) -> Result<Self, ProviderError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|source| ProviderError::Io {
            path: dir.clone(),
            source,
        })?;
        Ok(Self { inner, dir })
    }

    fn entry_path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    fn read(&self, path: &Path) -> Option<CacheEntry> {
        let bytes = fs::read(path).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    fn write(&self, path: &Path, entry: &CacheEntry) -> Result<(), ProviderError> {
        let tmp = path.with_extension("json.tmp");
        let body = serde_json::to_vec(entry).expect("cache entry serializes");
        fs::write(&tmp, body).map_err(|source| ProviderError::Io {
            path: tmp.clone(),
            source,
        })?;
        fs::rename(&tmp, path).map_err(|source| ProviderError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

impl<P: ChatProvider> ChatProvider for CacheProvider<P> {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let key = cache_key(request);
        let path = self.entry_path(&key);
        if let Some(entry) = self.read(&path) {
            return Ok(ChatResponse {
                text: entry.text,
                usage: entry.usage,
                cached: true,
            });
        }
        let response = self.inner.chat(request)?;
        self.write(
            &path,
            &CacheEntry {
                text: response.text.clone(),
                usage: response.usage,
            },
        )?;
        Ok(response)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU64, Ordering};

    struct FlakyCounter {
        calls: AtomicU64,
    }

    impl ChatProvider for FlakyCounter {
        fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            Ok(ChatResponse {
                text: format!("answer {n} to {}", request.last_user_content()),
                usage: None,
                cached: false,
            })
        }
    }

    #[test]
    fn second_identical_request_is_served_from_cache() {
        let dir = tempfile::tempdir().unwrap();
        let counter = FlakyCounter {
            calls: AtomicU64::new(0),
        };
        let cache = CacheProvider::new(counter, dir.path().join("cache")).unwrap();
        let request = ChatRequest::user("m", "Ping?", 0.0);
        let first = cache.chat(&request).unwrap();
        assert!(!first.cached);
        let second = cache.chat(&request).unwrap();
        assert!(second.cached);
        assert_eq!(second.text, first.text);
        assert_eq!(cache.inner.calls.load(Ordering::SeqCst), 1);

        let other = ChatRequest::user("m", "Pong?", 0.0);
        assert!(!cache.chat(&other).unwrap().cached);
    }
}
