use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{CompletionBackend, CompletionRequest, CompletionResponse, LlmError};

/// One content-addressed cache file, `<key>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub request: CompletionRequest,
    pub text: String,
    pub backend_id: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub entries: usize,
    pub bytes: u64,
}

fn cache_err(path: &Path) -> impl FnOnce(std::io::Error) -> LlmError + '_ {
    move |source| LlmError::Cache {
        path: path.display().to_string(),
        source,
    }
}

fn entry_paths(dir: &Path) -> Result<Vec<PathBuf>, LlmError> {
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir).map_err(cache_err(dir))? {
        let path = entry.map_err(cache_err(dir))?.path();
        if path.extension().is_some_and(|e| e == "json") && path.is_file() {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

fn read_entry(path: &Path) -> Result<CacheEntry, LlmError> {
    let bytes = fs::read(path).map_err(cache_err(path))?;
    let entry: CacheEntry = serde_json::from_slice(&bytes).map_err(|e| LlmError::CorruptEntry {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    if entry.key != entry.request.key() {
        return Err(LlmError::CorruptEntry {
            path: path.display().to_string(),
            reason: "stored key does not match the request hash".into(),
        });
    }
    Ok(entry)
}

pub(super) fn read_entries(dir: &Path) -> Result<Vec<CacheEntry>, LlmError> {
    entry_paths(dir)?.iter().map(|p| read_entry(p)).collect()
}

pub fn cache_stats(dir: impl AsRef<Path>) -> Result<CacheStats, LlmError> {
    let mut stats = CacheStats::default();
    for path in entry_paths(dir.as_ref())? {
        stats.entries += 1;
        stats.bytes += fs::metadata(&path).map_err(cache_err(&path))?.len();
    }
    Ok(stats)
}

/// Deletes every cache entry in `dir` and returns how many were removed.
pub fn cache_clear(dir: impl AsRef<Path>) -> Result<usize, LlmError> {
    let paths = entry_paths(dir.as_ref())?;
    for path in &paths {
        fs::remove_file(path).map_err(cache_err(path))?;
    }
    Ok(paths.len())
}

/// Read-through cache in front of another backend.
pub struct CachedBackend<B> {
    inner: B,
    dir: PathBuf,
    key_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl<B: CompletionBackend> CachedBackend<B> {
    pub fn new(inner: B, dir: impl Into<PathBuf>) -> Result<Self, LlmError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(cache_err(&dir))?;
        Ok(CachedBackend {
            inner,
            dir,
            key_locks: Mutex::new(HashMap::new()),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        })
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    fn lock_for(&self, key: &str) -> Arc<Mutex<()>> {
        let mut locks = self.key_locks.lock().expect("cache lock table poisoned");
        locks.entry(key.to_string()).or_default().clone()
    }

    fn store(&self, path: &Path, entry: &CacheEntry) -> Result<(), LlmError> {
        let tmp = path.with_extension("json.tmp");
        let mut body = serde_json::to_vec_pretty(entry).expect("cache entry serializes");
        body.push(b'\n');
        let mut file = fs::File::create(&tmp).map_err(cache_err(&tmp))?;
        file.write_all(&body).map_err(cache_err(&tmp))?;
        file.sync_all().map_err(cache_err(&tmp))?;
        fs::rename(&tmp, path).map_err(cache_err(path))
    }
}

impl<B: CompletionBackend> CompletionBackend for CachedBackend<B> {
    fn backend_id(&self) -> String {
        format!("cached({})", self.inner.backend_id())
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        request.validate()?;
        let key = request.key();
        let path = self.dir.join(format!("{key}.json"));
        let lock = self.lock_for(&key);
        let _guard = lock.lock().expect("cache key lock poisoned");

        if path.exists() {
            let entry = read_entry(&path)?;
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(CompletionResponse {
                text: entry.text,
                backend_id: entry.backend_id,
                cached: true,
                latency_ms: 0,
            });
        }

        let response = self.inner.complete(request)?;
        self.misses.fetch_add(1, Ordering::Relaxed);
        let timestamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let entry = CacheEntry {
            key,
            request: request.clone(),
            text: response.text.clone(),
            backend_id: response.backend_id.clone(),
            timestamp,
        };
        self.store(&path, &entry)?;
        Ok(response)
    }
}
