use std::collections::HashMap;
use std::path::Path;

use super::cache::read_entries;
use super::{CacheEntry, CompletionBackend, CompletionRequest, CompletionResponse, LlmError};

/// Answers only from recorded responses; anything unrecorded is an error.
///
/// Fixtures use the cache entry format, so any cache directory filled by a
/// live run can be replayed.
#[derive(Debug, Clone, Default)]
pub struct ReplayBackend {
    script: HashMap<String, String>,
}

impl ReplayBackend {
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self, LlmError> {
        Ok(Self::from_entries(read_entries(dir.as_ref())?))
    }

    pub fn from_entries(entries: impl IntoIterator<Item = CacheEntry>) -> Self {
        ReplayBackend {
            script: entries.into_iter().map(|e| (e.key, e.text)).collect(),
        }
    }

    pub fn insert(&mut self, request: &CompletionRequest, text: impl Into<String>) {
        self.script.insert(request.key(), text.into());
    }

    pub fn len(&self) -> usize {
        self.script.len()
    }

    pub fn is_empty(&self) -> bool {
        self.script.is_empty()
    }
}

impl CompletionBackend for ReplayBackend {
    fn backend_id(&self) -> String {
        "replay".to_string()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        request.validate()?;
        let key = request.key();
        let text = self.script.get(&key).ok_or(LlmError::ReplayMiss { key })?;
        Ok(CompletionResponse {
            text: text.clone(),
            backend_id: self.backend_id(),
            cached: false,
            latency_ms: 0,
        })
    }
}
