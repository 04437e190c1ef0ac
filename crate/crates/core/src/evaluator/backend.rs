//! Generative backends: the trait the evaluator talks to, an HTTP
//! chat-completion client, a disk cache, and deterministic mocks.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("transport error calling {endpoint}: {message}")]
    Transport { endpoint: String, message: String },
    #[error("{endpoint} returned HTTP {status}")]
    Status { endpoint: String, status: u16 },
    #[error("malformed backend output: {0}")]
    Format(String),
    #[error("cache error: {0}")]
    Cache(String),
    #[error("scripted backend: {0}")]
    Script(String),
}

impl BackendError {
    /// Transport failures and throttling/server errors are worth retrying.
    pub fn is_transient(&self) -> bool {
        match self {
            BackendError::Transport { .. } => true,
            BackendError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// One filled prompt. `fields` holds the placeholder values that produced
/// `prompt`; remote backends ignore them, mocks may read them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRequest {
    pub template_id: String,
    pub prompt: String,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub fields: BTreeMap<String, String>,
}

impl PromptRequest {
    pub fn field(&self, name: &str) -> &str {
        self.fields.get(name).map(String::as_str).unwrap_or("")
    }
}

pub trait GenerativeBackend: Send + Sync {
    fn model_id(&self) -> &str;
    fn complete(&self, request: &PromptRequest) -> Result<String, BackendError>;
}

impl<B: GenerativeBackend + ?Sized> GenerativeBackend for &B {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }
    fn complete(&self, request: &PromptRequest) -> Result<String, BackendError> {
        (**self).complete(request)
    }
}

impl<B: GenerativeBackend + ?Sized> GenerativeBackend for Box<B> {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }
    fn complete(&self, request: &PromptRequest) -> Result<String, BackendError> {
        (**self).complete(request)
    }
}

impl<B: GenerativeBackend + ?Sized> GenerativeBackend for Arc<B> {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }
    fn complete(&self, request: &PromptRequest) -> Result<String, BackendError> {
        (**self).complete(request)
    }
}

/// Bounded retries with exponential backoff for transient failures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay_ms: 500,
        }
    }
}

impl RetryPolicy {
    pub fn no_delay() -> Self {
        Self {
            base_delay_ms: 0,
            ..Self::default()
        }
    }

    fn delay(&self, attempt: u32) -> Duration {
        Duration::from_millis(self.base_delay_ms.saturating_mul(1 << attempt.min(16)))
    }
}

pub fn complete_with_retry<B: GenerativeBackend + ?Sized>(
    backend: &B,
    request: &PromptRequest,
    policy: &RetryPolicy,
) -> Result<String, BackendError> {
    let attempts = policy.attempts.max(1);
    let mut attempt = 0;
    loop {
        match backend.complete(request) {
            Err(e) if e.is_transient() && attempt + 1 < attempts => {
                tracing::warn!(attempt, error = %e, "backend call failed, retrying");
                std::thread::sleep(policy.delay(attempt));
                attempt += 1;
            }
            other => return other,
        }
    }
}

/// OpenAI-style `POST {base_url}/chat/completions` client.
pub struct HttpBackend {
    base_url: String,
    model: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: Option<String>,
}

impl HttpBackend {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .build()
            .into();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            model: model.into(),
            api_key,
            agent,
        }
    }

    /// Reads the API key from the environment variable `key_var`, if set.
    pub fn from_env(base_url: impl Into<String>, model: impl Into<String>, key_var: &str) -> Self {
        Self::new(base_url, model, std::env::var(key_var).ok().filter(|k| !k.is_empty()))
    }

    pub fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.base_url)
    }
}

impl GenerativeBackend for HttpBackend {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn complete(&self, request: &PromptRequest) -> Result<String, BackendError> {
        let endpoint = self.endpoint();
        let body = serde_json::json!({
            "model": self.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
        });
        let mut call = self.agent.post(&endpoint);
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = call.send_json(&body).map_err(|e| match e {
            ureq::Error::StatusCode(status) => BackendError::Status {
                endpoint: endpoint.clone(),
                status,
            },
            other => BackendError::Transport {
                endpoint: endpoint.clone(),
                message: other.to_string(),
            },
        })?;
        let parsed: ChatResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| BackendError::Format(format!("{endpoint}: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError::Format(format!("{endpoint}: response has no message content")))
    }
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    template_id: String,
    model_id: String,
    temperature: f64,
    prompt: String,
    completion: String,
}

/// Disk cache in front of another backend. Entries live in
/// `<dir>/<sha256>.json`, keyed by template id, filled prompt, temperature
/// and model id. Reads take no lock; writes are serialized and land via
/// atomic rename.
pub struct CachedBackend<B> {
    inner: B,
    dir: PathBuf,
    write_lock: Mutex<()>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl<B: GenerativeBackend> CachedBackend<B> {
    pub fn new(inner: B, dir: impl Into<PathBuf>) -> Result<Self, BackendError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| BackendError::Cache(format!("{}: {e}", dir.display())))?;
        Ok(Self {
            inner,
            dir,
            write_lock: Mutex::new(()),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        })
    }

    pub fn cache_key(&self, request: &PromptRequest) -> String {
        cache_key(request, self.inner.model_id())
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    fn lookup(&self, path: &Path) -> Option<String> {
        let raw = fs::read(path).ok()?;
        match serde_json::from_slice::<CacheEntry>(&raw) {
            Ok(entry) => Some(entry.completion),
            Err(e) => {
                tracing::warn!(path = %path.display(), error = %e, "ignoring corrupt cache entry");
                None
            }
        }
    }

    fn store(&self, path: &Path, entry: &CacheEntry) -> Result<(), BackendError> {
        let _guard = self.write_lock.lock().unwrap_or_else(|p| p.into_inner());
        let err = |e: std::io::Error| BackendError::Cache(format!("{}: {e}", path.display()));
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(err)?;
        serde_json::to_writer(&mut tmp, entry).map_err(|e| BackendError::Cache(e.to_string()))?;
        tmp.flush().map_err(err)?;
        tmp.persist(path).map_err(|e| err(e.error))?;
        Ok(())
    }
}

/// Hex SHA-256 over (template id, prompt, temperature, model id).
pub fn cache_key(request: &PromptRequest, model_id: &str) -> String {
    let material = serde_json::json!([
        request.template_id,
        request.prompt,
        request.temperature.to_bits(),
        model_id
    ]);
    hex::encode(Sha256::digest(material.to_string().as_bytes()))
}

impl<B: GenerativeBackend> GenerativeBackend for CachedBackend<B> {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn complete(&self, request: &PromptRequest) -> Result<String, BackendError> {
        let path = self.path_for(&self.cache_key(request));
        if let Some(hit) = self.lookup(&path) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(hit);
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let completion = self.inner.complete(request)?;
        self.store(
            &path,
            &CacheEntry {
                template_id: request.template_id.clone(),
                model_id: self.inner.model_id().to_string(),
                temperature: request.temperature,
                prompt: request.prompt.clone(),
                completion: completion.clone(),
            },
        )?;
        Ok(completion)
    }
}

/// A transcript entry: fires when the template matches (if given) and every
/// `contains` needle occurs in the filled prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(default)]
    pub template_id: Option<String>,
    #[serde(default)]
    pub contains: Vec<String>,
    pub completion: String,
}

impl ScriptRule {
    fn matches(&self, request: &PromptRequest) -> bool {
        self.template_id.as_ref().is_none_or(|t| *t == request.template_id)
            && self.contains.iter().all(|needle| request.prompt.contains(needle.as_str()))
    }
}

type Responder = dyn Fn(&PromptRequest) -> Result<String, BackendError> + Send + Sync;

/// Replays fixed transcripts. Rules are tried in order; the first match wins.
/// Without a match the optional fallback responder answers. The output is a
/// pure function of the request.
pub struct ScriptedBackend {
    model_id: String,
    rules: Vec<ScriptRule>,
    fallback: Option<Box<Responder>>,
    calls: AtomicUsize,
}

impl ScriptedBackend {
    pub fn new(model_id: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            rules: Vec::new(),
            fallback: None,
            calls: AtomicUsize::new(0),
        }
    }

    /// Answers every request with `f`.
    pub fn from_fn(f: impl Fn(&PromptRequest) -> Result<String, BackendError> + Send + Sync + 'static) -> Self {
        Self::new("scripted").with_fallback(f)
    }

    /// Loads rules from a JSONL transcript of [`ScriptRule`] objects.
    pub fn from_jsonl(path: &Path) -> Result<Self, BackendError> {
        let file = fs::File::open(path).map_err(|e| BackendError::Script(format!("{}: {e}", path.display())))?;
        let mut backend = Self::new("scripted");
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| BackendError::Script(format!("{}: {e}", path.display())))?;
            if line.trim().is_empty() {
                continue;
            }
            let rule: ScriptRule = serde_json::from_str(&line)
                .map_err(|e| BackendError::Script(format!("{} line {}: {e}", path.display(), n + 1)))?;
            backend.rules.push(rule);
        }
        Ok(backend)
    }

    pub fn rule(mut self, template_id: Option<&str>, contains: &[&str], completion: impl Into<String>) -> Self {
        self.rules.push(ScriptRule {
            template_id: template_id.map(str::to_string),
            contains: contains.iter().map(|s| s.to_string()).collect(),
            completion: completion.into(),
        });
        self
    }

    pub fn with_fallback(
        mut self,
        f: impl Fn(&PromptRequest) -> Result<String, BackendError> + Send + Sync + 'static,
    ) -> Self {
        self.fallback = Some(Box::new(f));
        self
    }

    pub fn with_model_id(mut self, model_id: impl Into<String>) -> Self {
        self.model_id = model_id.into();
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl GenerativeBackend for ScriptedBackend {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn complete(&self, request: &PromptRequest) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        if let Some(rule) = self.rules.iter().find(|r| r.matches(request)) {
            return Ok(rule.completion.clone());
        }
        match &self.fallback {
            Some(f) => f(request),
            None => Err(BackendError::Script(format!(
                "no scripted completion for template {:?}",
                request.template_id
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request(prompt: &str) -> PromptRequest {
        PromptRequest {
            template_id: "t".into(),
            prompt: prompt.into(),
            temperature: 0.1,
            fields: BTreeMap::new(),
        }
    }

    struct Flaky {
        failures: AtomicUsize,
        error: BackendError,
    }

    impl GenerativeBackend for Flaky {
        fn model_id(&self) -> &str {
            "flaky"
        }
        fn complete(&self, _: &PromptRequest) -> Result<String, BackendError> {
            if self.failures.fetch_sub(1, Ordering::SeqCst) > 0 {
                Err(self.error.clone())
            } else {
                Ok("ok".into())
            }
        }
    }

    fn transport() -> BackendError {
        BackendError::Transport {
            endpoint: "http://x".into(),
            message: "refused".into(),
        }
    }

    #[test]
    fn retries_transient_failures_up_to_three_attempts() {
        let two = Flaky {
            failures: AtomicUsize::new(2),
            error: transport(),
        };
        assert_eq!(complete_with_retry(&two, &request("p"), &RetryPolicy::no_delay()).unwrap(), "ok");
        let three = Flaky {
            failures: AtomicUsize::new(3),
            error: transport(),
        };
        assert_eq!(complete_with_retry(&three, &request("p"), &RetryPolicy::no_delay()), Err(transport()));
    }

    #[test]
    fn does_not_retry_client_errors() {
        let err = BackendError::Status {
            endpoint: "e".into(),
            status: 401,
        };
        let backend = Flaky {
            failures: AtomicUsize::new(1),
            error: err.clone(),
        };
        assert_eq!(complete_with_retry(&backend, &request("p"), &RetryPolicy::no_delay()), Err(err));
    }

    #[test]
    fn scripted_rules_match_in_order() {
        let backend = ScriptedBackend::new("m")
            .rule(Some("t"), &["alpha"], "first")
            .rule(None, &[], "catch-all");
        assert_eq!(backend.complete(&request("alpha beta")).unwrap(), "first");
        assert_eq!(backend.complete(&request("gamma")).unwrap(), "catch-all");
        let empty = ScriptedBackend::new("m");
        assert!(matches!(empty.complete(&request("x")), Err(BackendError::Script(_))));
    }

    #[test]
    fn cache_serves_repeats_without_calling_inner() {
        let dir = tempfile::tempdir().unwrap();
        let cached = CachedBackend::new(ScriptedBackend::from_fn(|r| Ok(r.prompt.to_uppercase())), dir.path()).unwrap();
        assert_eq!(cached.complete(&request("abc")).unwrap(), "ABC");
        assert_eq!(cached.complete(&request("abc")).unwrap(), "ABC");
        assert_eq!((cached.hits(), cached.misses()), (1, 1));
        assert_eq!(cached.inner.calls(), 1);

        // A fresh wrapper over a failing backend still answers from disk.
        let offline = CachedBackend::new(
            ScriptedBackend::from_fn(|_| Err(BackendError::Script("offline".into()))).with_model_id("other"),
            dir.path(),
        )
        .unwrap();
        assert!(offline.complete(&request("abc")).is_err(), "model id differs, so the key differs");
        let offline = CachedBackend::new(
            ScriptedBackend::from_fn(|_| Err(BackendError::Script("offline".into()))).with_model_id("scripted"),
            dir.path(),
        )
        .unwrap();
        assert_eq!(offline.complete(&request("abc")).unwrap(), "ABC");
    }

    #[test]
    fn cache_key_covers_every_component() {
        let base = request("p");
        let key = cache_key(&base, "m");
        assert_eq!(key.len(), 64);
        assert_ne!(key, cache_key(&base, "m2"));
        assert_ne!(key, cache_key(&PromptRequest { temperature: 0.2, ..base.clone() }, "m"));
        assert_ne!(key, cache_key(&PromptRequest { template_id: "u".into(), ..base.clone() }, "m"));
        assert_ne!(key, cache_key(&request("q"), "m"));
        let mut with_fields = base.clone();
        with_fields.fields.insert("x".into(), "y".into());
        assert_eq!(key, cache_key(&with_fields, "m"));
    }

    #[test]
    fn http_backend_reports_endpoint_on_transport_failure() {
        // Port 9 on localhost is reliably closed in the sandbox.
        let backend = HttpBackend::new("http://127.0.0.1:9/v1/", "m", None);
        match backend.complete(&request("p")) {
            Err(BackendError::Transport { endpoint, .. }) => {
                assert_eq!(endpoint, "http://127.0.0.1:9/v1/chat/completions")
            }
            other => panic!("expected transport error, got {other:?}"),
        }
    }
}
