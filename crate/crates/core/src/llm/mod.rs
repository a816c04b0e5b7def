//! Backend-agnostic completion interface.
//!
//! The search engine only sees [`CompletionBackend`]. Four implementations
//! exist: a chat-completions HTTP client, a replay backend reading recorded
//! fixtures, a ground-truth oracle for simulations, and a caching wrapper that
//! can sit in front of any of them.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

mod cache;
mod http;
mod oracle;
mod replay;

pub use cache::{cache_clear, cache_stats, CacheEntry, CacheStats, CachedBackend};
pub use http::{HttpBackend, HttpConfig};
pub use oracle::{OracleBackend, OracleConfig};
pub use replay::ReplayBackend;

#[derive(Error, Debug)]
pub enum LlmError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("authentication rejected (HTTP {status}): {body}")]
    Auth { status: u16, body: String },
    #[error("HTTP {status} after {attempts} attempt(s): {body}")]
    Http { status: u16, attempts: u32, body: String },
    #[error("rate limited on all {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("could not decode completion payload: {0}")]
    Decode(String),
    #[error("no recorded response for request {key}")]
    ReplayMiss { key: String },
    #[error("oracle has no gold labels for document {0}")]
    UnknownDocument(String),
    #[error("oracle needs the prompt context (document id and candidate codes)")]
    MissingContext,
    #[error("cache I/O on {path}: {source}")]
    Cache {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt cache entry {path}: {reason}")]
    CorruptEntry { path: String, reason: String },
}

/// Side-channel metadata about what a prompt asks. Never sent on the wire and
/// not part of the cache key; the oracle backend reads it instead of parsing
/// the prompt text.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PromptContext {
    pub doc_id: String,
    pub candidate_codes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system_text: Option<String>,
    pub user_text: String,
    pub model_id: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    #[serde(skip)]
    pub context: Option<PromptContext>,
}

impl CompletionRequest {
    pub fn new(model_id: impl Into<String>, user_text: impl Into<String>) -> Self {
        CompletionRequest {
            system_text: None,
            user_text: user_text.into(),
            model_id: model_id.into(),
            temperature: 0.0,
            max_output_tokens: 1024,
            context: None,
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.user_text.is_empty() {
            return Err(LlmError::InvalidRequest("empty user text".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(LlmError::InvalidRequest(format!(
                "temperature must be a non-negative number, got {}",
                self.temperature
            )));
        }
        if self.max_output_tokens == 0 {
            return Err(LlmError::InvalidRequest("max_output_tokens must be positive".into()));
        }
        Ok(())
    }

    /// Content hash over model, temperature, system text and user text.
    pub fn key(&self) -> String {
        let material = serde_json::to_vec(&(&self.model_id, self.temperature, &self.system_text, &self.user_text))
            .expect("request fields serialize");
        hex::encode(Sha256::digest(material))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    pub backend_id: String,
    pub cached: bool,
    pub latency_ms: u64,
}

pub trait CompletionBackend: Send + Sync {
    /// Stable identifier recorded in run manifests.
    fn backend_id(&self) -> String;

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError>;
}

impl<T: CompletionBackend + ?Sized> CompletionBackend for Arc<T> {
    fn backend_id(&self) -> String {
        (**self).backend_id()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        (**self).complete(request)
    }
}

impl<T: CompletionBackend + ?Sized> CompletionBackend for Box<T> {
    fn backend_id(&self) -> String {
        (**self).backend_id()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        (**self).complete(request)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_depends_on_temperature_and_text() {
        let a = CompletionRequest::new("m", "hello");
        let mut b = a.clone();
        b.temperature = 0.001;
        assert_ne!(a.key(), b.key());
        let mut c = a.clone();
        c.context = Some(PromptContext {
            doc_id: "d".into(),
            candidate_codes: vec!["X".into()],
        });
        assert_eq!(a.key(), c.key());
        let mut d = a.clone();
        d.system_text = Some("sys".into());
        assert_ne!(a.key(), d.key());
        assert_eq!(a.key().len(), 64);
    }

    #[test]
    fn request_validation() {
        let mut r = CompletionRequest::new("m", "");
        assert!(r.validate().is_err());
        r.user_text = "x".into();
        assert!(r.validate().is_ok());
        r.temperature = -0.5;
        assert!(r.validate().is_err());
        r.temperature = 0.0;
        r.max_output_tokens = 0;
        assert!(r.validate().is_err());
    }
}
