//! Chat-completion client.
//!
//! Wire format is described in `docs/chat-interface.md`. Requests go out as
//! `{"model", "messages": [{"role", "content"}], "temperature"}`; the reply
//! text is `choices[0].message.content`.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use coem_core::backend::{BackendError, GenerationRequest, Generator};
use coem_core::text;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::templates::TemplateSet;

pub const REDACTED: &str = "[REDACTED]";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    /// Full URL of the chat-completion route.
    pub endpoint: String,
    pub model_name: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    /// Name of the environment variable holding the bearer token.
    pub token_env: String,
    pub temperature: f64,
    pub max_concurrency: usize,
    /// First retry delay; doubles on each further retry.
    pub backoff_ms: u64,
    /// Directory of `<id>.txt` files overriding the shipped templates.
    pub templates_dir: Option<PathBuf>,
    /// JSON-lines file receiving every request and response, redacted.
    pub traffic_log: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model_name: "gpt-4o-mini".into(),
            timeout_secs: 30.0,
            max_retries: 3,
            token_env: "COEM_API_TOKEN".into(),
            temperature: 0.2,
            max_concurrency: 4,
            backoff_ms: 500,
            templates_dir: None,
            traffic_log: None,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return Err(format!("backend.timeout_secs must be > 0, got {}", self.timeout_secs));
        }
        if self.max_retries > 10 {
            return Err(format!("backend.max_retries must be at most 10, got {}", self.max_retries));
        }
        if self.max_concurrency == 0 {
            return Err("backend.max_concurrency must be at least 1".into());
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(format!("backend.temperature must be in [0, 2], got {}", self.temperature));
        }
        if !(self.endpoint.starts_with("http://") || self.endpoint.starts_with("https://")) {
            return Err(format!("backend.endpoint is not an http(s) URL: {}", self.endpoint));
        }
        if self.token_env.is_empty() {
            return Err("backend.token_env must name an environment variable".into());
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ChatMessage,
}

/// Extracts the first choice's message text.
pub fn parse_chat_response(body: &str) -> Result<String, BackendError> {
    let resp: ChatResponse = serde_json::from_str(body).map_err(|e| BackendError::Malformed(e.to_string()))?;
    resp.choices
        .into_iter()
        .next()
        .map(|c| c.message.content)
        .ok_or_else(|| BackendError::Malformed("no choices in response".into()))
}

/// Counting gate bounding in-flight remote calls.
#[derive(Debug)]
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

/// Append-only JSON-lines record of backend traffic.
#[derive(Debug)]
pub struct TrafficLog {
    file: Mutex<File>,
}

impl TrafficLog {
    pub fn open(path: &Path) -> std::io::Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { file: Mutex::new(file) })
    }

    fn record(&self, mut entry: serde_json::Value, secret: Option<&str>) {
        let ts = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64);
        entry["ts"] = ts.into();
        let mut line = entry.to_string();
        if let Some(s) = secret.filter(|s| !s.is_empty()) {
            line = line.replace(s, REDACTED);
        }
        line.push('\n');
        let mut file = self.file.lock().unwrap_or_else(|e| e.into_inner());
        if let Err(e) = file.write_all(line.as_bytes()) {
            tracing::warn!("traffic log write failed: {e}");
        }
    }
}

enum Attempt {
    Done(String),
    Retry(BackendError),
    Fail(BackendError),
}

/// Blocking chat-completion client with retries, a concurrency limit and
/// optional traffic mirroring.
pub struct RemoteGenerator {
    cfg: BackendConfig,
    agent: ureq::Agent,
    templates: TemplateSet,
    gate: Gate,
    traffic: Option<Arc<TrafficLog>>,
}

impl RemoteGenerator {
    pub fn new(cfg: BackendConfig) -> Result<Self, BackendError> {
        cfg.validate().map_err(BackendError::InvalidRequest)?;
        let templates = match &cfg.templates_dir {
            Some(dir) => TemplateSet::with_dir(dir).map_err(|e| BackendError::InvalidRequest(e.to_string()))?,
            None => TemplateSet::builtin(),
        };
        let traffic = match &cfg.traffic_log {
            Some(path) => Some(Arc::new(
                TrafficLog::open(path).map_err(|e| BackendError::InvalidRequest(format!("traffic log: {e}")))?,
            )),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout()))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            gate: Gate::new(cfg.max_concurrency),
            cfg,
            agent,
            templates,
            traffic,
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.cfg
    }

    pub fn templates(&self) -> &TemplateSet {
        &self.templates
    }

    fn token(&self) -> Result<String, BackendError> {
        match std::env::var(&self.cfg.token_env) {
            Ok(t) if !t.trim().is_empty() => Ok(t),
            _ => Err(BackendError::Auth(format!(
                "environment variable {} is not set",
                self.cfg.token_env
            ))),
        }
    }

    /// Renders `template` and sends it as a system + user exchange.
    pub fn complete(&self, template: &str, fragments: &[String], output: &str) -> Result<String, BackendError> {
        let t = self
            .templates
            .get(template)
            .map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
        let (system, user) = t.render(fragments, output);
        let mut messages = Vec::new();
        if !system.is_empty() {
            messages.push(ChatMessage {
                role: "system".into(),
                content: system,
            });
        }
        messages.push(ChatMessage {
            role: "user".into(),
            content: user,
        });
        self.chat(&ChatRequest {
            model: self.cfg.model_name.clone(),
            messages,
            temperature: self.cfg.temperature,
        })
    }

    /// Sends one chat request, retrying transient failures with exponential backoff.
    pub fn chat(&self, req: &ChatRequest) -> Result<String, BackendError> {
        let token = self.token()?;
        let body = serde_json::to_string(req).map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
        let _permit = self.gate.acquire();
        let mut delay = Duration::from_millis(self.cfg.backoff_ms);
        let mut attempt = 0;
        loop {
            if let Some(log) = &self.traffic {
                log.record(
                    json!({"direction": "request", "attempt": attempt, "endpoint": self.cfg.endpoint, "body": req}),
                    Some(&token),
                );
            }
            match self.send_once(&body, &token, attempt) {
                Attempt::Done(text) => return Ok(text),
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(e) if attempt >= self.cfg.max_retries => return Err(e),
                Attempt::Retry(e) => {
                    tracing::warn!(attempt, error = %e, "backend call failed, retrying in {delay:?}");
                    thread::sleep(delay);
                    delay = delay.saturating_mul(2);
                    attempt += 1;
                }
            }
        }
    }

    fn send_once(&self, body: &str, token: &str, attempt: u32) -> Attempt {
        let result = self
            .agent
            .post(&self.cfg.endpoint)
            .header("Authorization", &format!("Bearer {token}"))
            .header("Content-Type", "application/json")
            .send(body);
        let mut resp = match result {
            Ok(r) => r,
            Err(ureq::Error::Timeout(t)) => return Attempt::Retry(BackendError::Timeout(t.to_string())),
            Err(e) => return Attempt::Retry(BackendError::Unavailable(e.to_string())),
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(ureq::Error::Timeout(t)) => return Attempt::Retry(BackendError::Timeout(t.to_string())),
            Err(e) => return Attempt::Retry(BackendError::Unavailable(e.to_string())),
        };
        if let Some(log) = &self.traffic {
            log.record(
                json!({"direction": "response", "attempt": attempt, "status": status, "body": text}),
                Some(token),
            );
        }
        match status {
            200..=299 => match parse_chat_response(&text) {
                Ok(t) => Attempt::Done(t),
                Err(e) => Attempt::Fail(e),
            },
            401 | 403 => Attempt::Fail(BackendError::Auth(format!("HTTP {status}"))),
            408 | 504 => Attempt::Retry(BackendError::Timeout(format!("HTTP {status}"))),
            429 | 500..=599 => Attempt::Retry(BackendError::Unavailable(format!("HTTP {status}"))),
            _ => Attempt::Fail(BackendError::InvalidRequest(format!("HTTP {status}"))),
        }
    }
}

impl Generator for RemoteGenerator {
    fn generate(&self, req: &GenerationRequest) -> Result<String, BackendError> {
        req.validate()?;
        let mut out = self.complete(&req.instruction, &req.fragments, "")?;
        text::truncate_chars(&mut out, req.max_length);
        Ok(out)
    }
}
