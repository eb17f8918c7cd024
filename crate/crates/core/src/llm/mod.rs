//! LLM access for the four workflow roles, over a chat-completion HTTP API
//! or a deterministic in-process mock.

mod mock;
mod remote;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::TransformCatalog;

pub use mock::{mock_check, mock_generate, mock_plan, mock_prune, mock_review, DEFAULT_KEYWORD_BIAS};
pub use remote::{chat_request_body, parse_chat_response};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Planner,
    Generator,
    Reviewer,
    Checker,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Planner, Role::Generator, Role::Reviewer, Role::Checker];
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Planner => "planner",
            Role::Generator => "generator",
            Role::Reviewer => "reviewer",
            Role::Checker => "checker",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Remote,
    Mock,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockProfile {
    #[serde(default)]
    pub p_malformed: f64,
    #[serde(default)]
    pub p_unsafe: f64,
    /// Extra sampling weight for a transform whose keyword appears in advice.
    #[serde(default)]
    pub catalog_bias: BTreeMap<String, f64>,
    /// Detection probability per generator label; `*` is the fallback.
    #[serde(default)]
    pub checker_accuracy: BTreeMap<String, f64>,
}

impl MockProfile {
    pub fn validate(&self) -> Result<(), LlmError> {
        let probs = [("p_malformed", self.p_malformed), ("p_unsafe", self.p_unsafe)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .chain(self.checker_accuracy.iter().map(|(k, &v)| (format!("checker_accuracy[{k}]"), v)));
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(LlmError::InvalidConfig(format!("{name} = {p} is not a probability")));
            }
        }
        if let Some((k, w)) = self.catalog_bias.iter().find(|(_, w)| !(**w >= 0.0)) {
            return Err(LlmError::InvalidConfig(format!("catalog_bias[{k}] = {w} must be non-negative")));
        }
        Ok(())
    }

    pub fn detection_probability(&self, generator: Option<&str>) -> f64 {
        generator
            .and_then(|g| self.checker_accuracy.get(g))
            .or_else(|| self.checker_accuracy.get("*"))
            .copied()
            .unwrap_or(0.0)
    }
}

fn default_temperature() -> f64 {
    0.7
}
fn default_timeout() -> f64 {
    120.0
}
fn default_retries() -> u32 {
    3
}
fn default_backoff() -> u64 {
    500
}
fn default_concurrency() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub role: Role,
    pub kind: BackendKind,
    /// Name written into `@generator` tags and used in reports.
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff")]
    pub backoff_base_ms: u64,
    #[serde(default)]
    pub mock_seed: Option<u64>,
    #[serde(default)]
    pub mock_profile: Option<MockProfile>,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
}

impl BackendConfig {
    pub fn mock(role: Role, seed: u64, profile: MockProfile) -> Self {
        Self {
            role,
            kind: BackendKind::Mock,
            label: None,
            endpoint: None,
            model: None,
            api_key_env: None,
            temperature: default_temperature(),
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            backoff_base_ms: default_backoff(),
            mock_seed: Some(seed),
            mock_profile: Some(profile),
            max_concurrency: default_concurrency(),
        }
    }

    pub fn remote(role: Role, endpoint: &str, model: &str, api_key_env: &str) -> Self {
        Self {
            kind: BackendKind::Remote,
            endpoint: Some(endpoint.into()),
            model: Some(model.into()),
            api_key_env: Some(api_key_env.into()),
            mock_seed: None,
            mock_profile: None,
            ..Self::mock(role, 0, MockProfile::default())
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn label(&self) -> String {
        self.label
            .clone()
            .or_else(|| self.model.clone())
            .unwrap_or_else(|| "mock".into())
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        let bad = |m: &str| Err(LlmError::InvalidConfig(format!("{} backend: {m}", self.role)));
        match self.kind {
            BackendKind::Remote => {
                if self.endpoint.is_none() || self.model.is_none() || self.api_key_env.is_none() {
                    return bad("remote needs endpoint, model and api_key_env");
                }
            }
            BackendKind::Mock => match &self.mock_profile {
                Some(p) if self.mock_seed.is_some() => p.validate()?,
                _ => return bad("mock needs mock_seed and mock_profile"),
            },
        }
        if !(self.timeout_secs > 0.0) {
            return bad("timeout_secs must be positive");
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return bad("temperature must be in [0, 2]");
        }
        if self.max_concurrency == 0 {
            return bad("max_concurrency must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Error)]
pub enum LlmError {
    #[error("invalid backend config: {0}")]
    InvalidConfig(String),
    #[error("environment variable `{env}` holding the API key is not set")]
    AuthMissing { env: String },
    #[error("request timed out")]
    Timeout,
    #[error("remote returned status {status}: {body}")]
    RemoteError { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("gave up after {attempts} attempts: {last}")]
    BackendExhausted { attempts: u32, last: Box<LlmError> },
    #[error("no backend configured for role {0}")]
    NoBackend(Role),
}

impl LlmError {
    pub fn is_auth(&self) -> bool {
        matches!(self, LlmError::AuthMissing { .. })
            || matches!(self, LlmError::RemoteError { status: 401 | 403, .. })
    }

    fn retriable(&self) -> bool {
        match self {
            LlmError::Timeout | LlmError::Transport(_) => true,
            LlmError::RemoteError { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// One completed prompt/response round trip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub role: Role,
    pub label: String,
    pub prompt: String,
    pub response: String,
    pub latency: f64,
    pub attempt: u32,
}

#[derive(Debug)]
struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

/// A configured backend with its concurrency limit.
#[derive(Debug)]
pub struct Backend {
    cfg: BackendConfig,
    catalog: Arc<TransformCatalog>,
    slots: Semaphore,
}

impl Backend {
    pub fn new(cfg: BackendConfig, catalog: Arc<TransformCatalog>) -> Result<Self, LlmError> {
        cfg.validate()?;
        let slots = Semaphore::new(cfg.max_concurrency);
        Ok(Self { cfg, catalog, slots })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.cfg
    }

    pub fn complete(&self, prompt: &str) -> Result<Exchange, LlmError> {
        let _permit = self.slots.acquire();
        complete_with(&self.cfg, &self.catalog, prompt)
    }
}

/// Single completion with the built-in catalog behind the mock.
pub fn complete(cfg: &BackendConfig, prompt: &str) -> Result<Exchange, LlmError> {
    cfg.validate()?;
    complete_with(cfg, &TransformCatalog::default(), prompt)
}

fn complete_with(cfg: &BackendConfig, catalog: &TransformCatalog, prompt: &str) -> Result<Exchange, LlmError> {
    let start = Instant::now();
    let label = cfg.label();
    let (response, attempt) = match cfg.kind {
        BackendKind::Mock => {
            let seed = cfg.mock_seed.unwrap_or_default();
            let profile = cfg.mock_profile.clone().unwrap_or_default();
            (mock::respond(cfg.role, seed, &label, &profile, catalog, prompt), 1)
        }
        BackendKind::Remote => {
            let env = cfg.api_key_env.clone().unwrap_or_default();
            let key = std::env::var(&env).map_err(|_| LlmError::AuthMissing { env: env.clone() })?;
            with_retries(cfg, |_| remote::post(cfg, &key, prompt))?
        }
    };
    Ok(Exchange {
        role: cfg.role,
        label,
        prompt: prompt.to_string(),
        response,
        latency: start.elapsed().as_secs_f64(),
        attempt,
    })
}

/// Runs `call` up to `max_retries + 1` times with exponential backoff on
/// retriable errors. Returns the value and the 1-based attempt that succeeded.
pub fn with_retries<T>(
    cfg: &BackendConfig,
    mut call: impl FnMut(u32) -> Result<T, LlmError>,
) -> Result<(T, u32), LlmError> {
    let max_attempts = cfg.max_retries + 1;
    let mut attempt = 1;
    loop {
        match call(attempt) {
            Ok(v) => return Ok((v, attempt)),
            Err(e) if e.retriable() => {
                if attempt == max_attempts {
                    return Err(LlmError::BackendExhausted {
                        attempts: attempt,
                        last: Box::new(e),
                    });
                }
                let delay = cfg.backoff_base_ms.saturating_mul(1 << (attempt - 1).min(16)).min(30_000);
                log::warn!("{} backend attempt {attempt} failed ({e}); retrying in {delay} ms", cfg.role);
                std::thread::sleep(Duration::from_millis(delay));
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

/// Backends for every role, sharing one transform catalog.
#[derive(Debug, Clone)]
pub struct Gateway {
    backends: BTreeMap<Role, Arc<Backend>>,
}

impl Gateway {
    pub fn new(configs: impl IntoIterator<Item = BackendConfig>, catalog: Arc<TransformCatalog>) -> Result<Self, LlmError> {
        let mut backends = BTreeMap::new();
        for cfg in configs {
            let role = cfg.role;
            if backends.insert(role, Arc::new(Backend::new(cfg, catalog.clone())?)).is_some() {
                return Err(LlmError::InvalidConfig(format!("role {role} configured twice")));
            }
        }
        Ok(Self { backends })
    }

    /// All-mock gateway; each role gets `seed` and the same profile.
    pub fn mock(seed: u64, profile: MockProfile, catalog: Arc<TransformCatalog>) -> Self {
        Self::new(Role::ALL.map(|r| BackendConfig::mock(r, seed, profile.clone())), catalog)
            .expect("mock configs are valid")
    }

    pub fn backend(&self, role: Role) -> Result<&Arc<Backend>, LlmError> {
        self.backends.get(&role).ok_or(LlmError::NoBackend(role))
    }

    pub fn call(&self, role: Role, prompt: &str) -> Result<Exchange, LlmError> {
        self.backend(role)?.complete(prompt)
    }

    pub fn has(&self, role: Role) -> bool {
        self.backends.contains_key(&role)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicU32, Ordering};

    /// Serves canned (status, body) replies in order, one per connection.
    fn stub_server(replies: Vec<(u16, String)>) -> (String, Arc<AtomicU32>, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let hits = Arc::new(AtomicU32::new(0));
        let counter = hits.clone();
        let handle = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in replies {
                let (stream, _) = listener.accept().unwrap();
                counter.fetch_add(1, Ordering::SeqCst);
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                bodies.push(String::from_utf8(buf).unwrap());
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
            bodies
        });
        (url, hits, handle)
    }

    fn ok_body(text: &str) -> String {
        serde_json::json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
    }

    fn remote_cfg(url: &str, env: &str) -> BackendConfig {
        let mut cfg = BackendConfig::remote(Role::Planner, url, "test-model", env);
        cfg.backoff_base_ms = 1;
        cfg.max_retries = 2;
        cfg.timeout_secs = 5.0;
        cfg
    }

    #[test]
    fn mock_is_deterministic() {
        let cfg = BackendConfig::mock(Role::Reviewer, 7, MockProfile::default());
        let a = complete(&cfg, "hello").unwrap();
        let b = complete(&cfg, "hello").unwrap();
        assert_eq!(a.response, b.response);
        assert_eq!(a.attempt, 1);
    }

    #[test]
    fn validation() {
        let mut cfg = BackendConfig::mock(Role::Generator, 1, MockProfile::default());
        cfg.mock_seed = None;
        assert!(matches!(cfg.validate(), Err(LlmError::InvalidConfig(_))));
        let p = MockProfile {
            p_unsafe: 1.5,
            ..MockProfile::default()
        };
        assert!(BackendConfig::mock(Role::Generator, 1, p).validate().is_err());
        let mut r = BackendConfig::remote(Role::Planner, "http://x", "m", "K");
        r.model = None;
        assert!(r.validate().is_err());
    }

    #[test]
    fn missing_key_fails_before_network() {
        let cfg = remote_cfg("http://127.0.0.1:9/unreachable", "GSOPT_TEST_KEY_THAT_IS_NOT_SET");
        assert!(matches!(complete(&cfg, "x"), Err(LlmError::AuthMissing { .. })));
    }

    #[test]
    fn remote_round_trip_and_wire_format() {
        let (url, _, handle) = stub_server(vec![(200, ok_body("1. Use FMA."))]);
        std::env::set_var("GSOPT_TEST_KEY_OK", "secret-value");
        let ex = complete(&remote_cfg(&url, "GSOPT_TEST_KEY_OK"), "the prompt").unwrap();
        assert_eq!(ex.response, "1. Use FMA.");
        assert_eq!(ex.attempt, 1);
        let bodies = handle.join().unwrap();
        let sent: serde_json::Value = serde_json::from_str(&bodies[0]).unwrap();
        assert_eq!(sent["model"], "test-model");
        assert_eq!(sent["messages"][0]["role"], "user");
        assert_eq!(sent["messages"][0]["content"], "the prompt");
        assert_eq!(sent["temperature"], 0.7);
        assert!(!bodies[0].contains("secret-value"));
    }

    #[test]
    fn retries_server_errors_then_succeeds() {
        let (url, hits, handle) = stub_server(vec![(503, "{}".into()), (429, "{}".into()), (200, ok_body("done"))]);
        std::env::set_var("GSOPT_TEST_KEY_RETRY", "k");
        let ex = complete(&remote_cfg(&url, "GSOPT_TEST_KEY_RETRY"), "p").unwrap();
        assert_eq!(ex.response, "done");
        assert_eq!(ex.attempt, 3);
        handle.join().unwrap();
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn exhausts_after_max_retries() {
        let (url, hits, handle) = stub_server(vec![(500, "{}".into()); 3]);
        std::env::set_var("GSOPT_TEST_KEY_EXHAUST", "k");
        let err = complete(&remote_cfg(&url, "GSOPT_TEST_KEY_EXHAUST"), "p").unwrap_err();
        assert!(matches!(err, LlmError::BackendExhausted { attempts: 3, .. }), "{err}");
        handle.join().unwrap();
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn client_errors_are_not_retried() {
        let (url, hits, handle) = stub_server(vec![(400, "bad request".into())]);
        std::env::set_var("GSOPT_TEST_KEY_400", "k");
        let err = complete(&remote_cfg(&url, "GSOPT_TEST_KEY_400"), "p").unwrap_err();
        assert!(matches!(err, LlmError::RemoteError { status: 400, .. }));
        handle.join().unwrap();
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn attempts_never_exceed_bound() {
        for retries in 0..4 {
            let mut cfg = BackendConfig::mock(Role::Planner, 0, MockProfile::default());
            cfg.max_retries = retries;
            cfg.backoff_base_ms = 0;
            let mut calls = 0;
            let r: Result<((), u32), _> = with_retries(&cfg, |_| {
                calls += 1;
                Err(LlmError::Timeout)
            });
            assert!(r.is_err());
            assert_eq!(calls, retries + 1);
        }
    }

    #[test]
    fn concurrency_limit_is_enforced() {
        let sem = Arc::new(Semaphore::new(2));
        let active = Arc::new(AtomicU32::new(0));
        let peak = Arc::new(AtomicU32::new(0));
        let threads: Vec<_> = (0..6)
            .map(|_| {
                let (sem, active, peak) = (sem.clone(), active.clone(), peak.clone());
                std::thread::spawn(move || {
                    let _p = sem.acquire();
                    let now = active.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(20));
                    active.fetch_sub(1, Ordering::SeqCst);
                })
            })
            .collect();
        for t in threads {
            t.join().unwrap();
        }
        assert_eq!(peak.load(Ordering::SeqCst), 2);
    }
}
