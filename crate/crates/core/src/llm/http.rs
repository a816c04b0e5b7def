use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{CompletionBackend, CompletionRequest, CompletionResponse, LlmError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    /// Full chat-completions URL, e.g. `https://api.openai.com/v1/chat/completions`.
    pub endpoint: String,
    /// Bearer token. Read from an environment variable by the caller, never
    /// from a config file.
    #[serde(skip)]
    pub api_key: Option<String>,
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
}

impl HttpConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        HttpConfig {
            endpoint: endpoint.into(),
            api_key: None,
            max_attempts: 5,
            base_delay_ms: 500,
            max_delay_ms: 30_000,
            timeout_secs: 120,
            max_in_flight: 4,
        }
    }
}

/// Counting semaphore bounding concurrent requests.
struct InFlight {
    slots: Mutex<usize>,
    freed: Condvar,
}

impl InFlight {
    fn acquire(&self) -> InFlightGuard<'_> {
        let mut free = self.slots.lock().expect("in-flight lock poisoned");
        while *free == 0 {
            free = self.freed.wait(free).expect("in-flight lock poisoned");
        }
        *free -= 1;
        InFlightGuard { owner: self }
    }
}

struct InFlightGuard<'a> {
    owner: &'a InFlight,
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.owner.slots.lock().expect("in-flight lock poisoned") += 1;
        self.owner.freed.notify_one();
    }
}

enum Attempt {
    Done(String),
    Retry {
        status: Option<u16>,
        message: String,
        retry_after: Option<u64>,
    },
    Fatal(LlmError),
}

/// Blocking chat-completions client with retry and exponential backoff.
pub struct HttpBackend {
    config: HttpConfig,
    agent: ureq::Agent,
    in_flight: InFlight,
    requests: AtomicU64,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, LlmError> {
        if config.endpoint.is_empty() {
            return Err(LlmError::Config("HTTP endpoint is empty".into()));
        }
        if config.max_attempts == 0 || config.max_in_flight == 0 {
            return Err(LlmError::Config(
                "max_attempts and max_in_flight must be positive".into(),
            ));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        let in_flight = InFlight {
            slots: Mutex::new(config.max_in_flight),
            freed: Condvar::new(),
        };
        Ok(HttpBackend {
            config,
            agent,
            in_flight,
            requests: AtomicU64::new(0),
        })
    }

    /// Number of HTTP requests sent so far, retries included.
    pub fn request_count(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }

    fn payload(request: &CompletionRequest) -> Value {
        let mut messages = Vec::new();
        if let Some(system) = &request.system_text {
            messages.push(json!({"role": "system", "content": system}));
        }
        messages.push(json!({"role": "user", "content": request.user_text}));
        json!({
            "model": request.model_id,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
            "messages": messages,
        })
    }

    fn attempt(&self, payload: &Value) -> Attempt {
        self.requests.fetch_add(1, Ordering::Relaxed);
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = match req.send_json(payload) {
            Ok(r) => r,
            Err(e) => {
                return Attempt::Retry {
                    status: None,
                    message: e.to_string(),
                    retry_after: None,
                }
            }
        };
        let status = response.status().as_u16();
        let retry_after = response
            .headers()
            .get("retry-after")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<u64>().ok());
        let body = match response.body_mut().read_to_string() {
            Ok(b) => b,
            Err(e) => {
                return Attempt::Retry {
                    status: Some(status),
                    message: e.to_string(),
                    retry_after,
                }
            }
        };
        match status {
            200..=299 => match extract_content(&body) {
                Ok(text) => Attempt::Done(text),
                Err(e) => Attempt::Fatal(e),
            },
            401 | 403 => Attempt::Fatal(LlmError::Auth { status, body }),
            408 | 429 | 500..=599 => Attempt::Retry {
                status: Some(status),
                message: body,
                retry_after,
            },
            _ => Attempt::Fatal(LlmError::Http {
                status,
                attempts: 1,
                body,
            }),
        }
    }

    fn backoff(&self, attempt: u32, retry_after: Option<u64>) -> Duration {
        let exp = self
            .config
            .base_delay_ms
            .saturating_mul(1u64 << attempt.min(20))
            .min(self.config.max_delay_ms);
        let jitter = if exp > 1 {
            rand::rng().random_range(0..=exp / 2)
        } else {
            0
        };
        let hinted = retry_after
            .map_or(0, |s| s.saturating_mul(1000))
            .min(self.config.max_delay_ms);
        Duration::from_millis((exp + jitter).max(hinted))
    }
}

fn extract_content(body: &str) -> Result<String, LlmError> {
    let value: Value = serde_json::from_str(body).map_err(|e| LlmError::Decode(e.to_string()))?;
    let message = value
        .get("choices")
        .and_then(|c| c.get(0))
        .and_then(|c| c.get("message"))
        .ok_or_else(|| LlmError::Decode("response has no choices[0].message".into()))?;
    match message.get("content") {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(Value::Null) | None => Ok(String::new()),
        Some(other) => Err(LlmError::Decode(format!("unexpected content type: {other}"))),
    }
}

impl CompletionBackend for HttpBackend {
    fn backend_id(&self) -> String {
        format!("http({})", self.config.endpoint)
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        request.validate()?;
        let payload = Self::payload(request);
        let _slot = self.in_flight.acquire();
        let started = Instant::now();
        let mut last_status = None;
        let mut last_message = String::new();
        for attempt in 0..self.config.max_attempts {
            match self.attempt(&payload) {
                Attempt::Done(text) => {
                    return Ok(CompletionResponse {
                        text,
                        backend_id: self.backend_id(),
                        cached: false,
                        latency_ms: started.elapsed().as_millis() as u64,
                    })
                }
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry {
                    status,
                    message,
                    retry_after,
                } => {
                    log::warn!(
                        "completion attempt {} of {} failed ({}): {}",
                        attempt + 1,
                        self.config.max_attempts,
                        status.map_or("transport".to_string(), |s| s.to_string()),
                        message.chars().take(200).collect::<String>()
                    );
                    last_status = status;
                    last_message = message;
                    if attempt + 1 < self.config.max_attempts {
                        thread::sleep(self.backoff(attempt, retry_after));
                    }
                }
            }
        }
        let attempts = self.config.max_attempts;
        Err(match last_status {
            Some(429) => LlmError::RateLimited { attempts },
            Some(status) => LlmError::Http {
                status,
                attempts,
                body: last_message,
            },
            None => LlmError::Transport {
                attempts,
                message: last_message,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::Arc;

    type Seen = Arc<Mutex<Vec<(String, Option<String>)>>>;

    /// Serves one scripted (status, body) per connection and records request
    /// bodies and authorization headers.
    fn serve(script: Vec<(u16, String)>) -> (String, Seen) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&seen);
        thread::spawn(move || {
            for (status, body) in script {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut length = 0usize;
                let mut auth = None;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let line = line.trim_end();
                    if line.is_empty() {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        length = v.trim().parse().unwrap();
                    }
                    if lower.starts_with("authorization:") {
                        auth = Some(line["authorization:".len()..].trim().to_string());
                    }
                }
                let mut buf = vec![0u8; length];
                reader.read_exact(&mut buf).unwrap();
                log.lock().unwrap().push((String::from_utf8(buf).unwrap(), auth));
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        (url, seen)
    }

    fn ok_body(text: &str) -> String {
        json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": text}}]}).to_string()
    }

    fn fast(url: String) -> HttpConfig {
        HttpConfig {
            base_delay_ms: 1,
            max_delay_ms: 5,
            timeout_secs: 10,
            ..HttpConfig::new(url)
        }
    }

    #[test]
    fn sends_chat_payload_with_zero_temperature() {
        let (url, seen) = serve(vec![(200, ok_body("- Asthma: relevant"))]);
        let mut config = fast(url);
        config.api_key = Some("sk-test".into());
        let backend = HttpBackend::new(config).unwrap();
        let mut req = CompletionRequest::new("gpt-4-0613", "the prompt");
        req.system_text = Some("be terse".into());
        let resp = backend.complete(&req).unwrap();
        assert_eq!(resp.text, "- Asthma: relevant");
        assert!(!resp.cached);

        let seen = seen.lock().unwrap();
        let body: Value = serde_json::from_str(&seen[0].0).unwrap();
        assert_eq!(body["temperature"].as_f64(), Some(0.0));
        assert_eq!(body["model"], "gpt-4-0613");
        assert_eq!(body["max_tokens"], 1024);
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["content"], "the prompt");
        assert_eq!(seen[0].1.as_deref(), Some("Bearer sk-test"));
    }

    #[test]
    fn retries_transient_failures() {
        let (url, seen) = serve(vec![(500, "{}".into()), (429, "{}".into()), (200, ok_body("done"))]);
        let backend = HttpBackend::new(fast(url)).unwrap();
        let resp = backend.complete(&CompletionRequest::new("m", "p")).unwrap();
        assert_eq!(resp.text, "done");
        assert_eq!(backend.request_count(), 3);
        assert_eq!(seen.lock().unwrap().len(), 3);
    }

    #[test]
    fn gives_up_after_max_attempts() {
        let (url, _) = serve(vec![(429, "{}".into()); 5]);
        let backend = HttpBackend::new(fast(url)).unwrap();
        let err = backend.complete(&CompletionRequest::new("m", "p")).unwrap_err();
        assert!(matches!(err, LlmError::RateLimited { attempts: 5 }));

        let (url, _) = serve(vec![(503, "down".into()); 2]);
        let mut config = fast(url);
        config.max_attempts = 2;
        let err = HttpBackend::new(config)
            .unwrap()
            .complete(&CompletionRequest::new("m", "p"))
            .unwrap_err();
        assert!(matches!(
            err,
            LlmError::Http {
                status: 503,
                attempts: 2,
                ..
            }
        ));
    }

    #[test]
    fn auth_and_client_errors_are_not_retried() {
        let (url, seen) = serve(vec![(401, "bad key".into())]);
        let backend = HttpBackend::new(fast(url)).unwrap();
        let err = backend.complete(&CompletionRequest::new("m", "p")).unwrap_err();
        assert!(matches!(err, LlmError::Auth { status: 401, .. }));
        assert_eq!(seen.lock().unwrap().len(), 1);

        let (url, _) = serve(vec![(400, "bad request".into())]);
        let err = HttpBackend::new(fast(url))
            .unwrap()
            .complete(&CompletionRequest::new("m", "p"))
            .unwrap_err();
        assert!(matches!(err, LlmError::Http { status: 400, .. }));
    }

    #[test]
    fn transport_failure_after_retries() {
        // Bind then drop to get a port nobody listens on.
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let mut config = fast(format!("http://127.0.0.1:{port}/v1/chat/completions"));
        config.max_attempts = 2;
        let err = HttpBackend::new(config)
            .unwrap()
            .complete(&CompletionRequest::new("m", "p"))
            .unwrap_err();
        assert!(matches!(err, LlmError::Transport { attempts: 2, .. }));
    }

    #[test]
    fn content_extraction() {
        assert_eq!(extract_content(&ok_body("x")).unwrap(), "x");
        let null = json!({"choices": [{"message": {"role": "assistant", "content": null}}]}).to_string();
        assert_eq!(extract_content(&null).unwrap(), "");
        assert!(extract_content("{\"choices\": []}").is_err());
        assert!(extract_content("not json").is_err());
    }
}
