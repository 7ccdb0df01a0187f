//! Completion backends: a live chat-completion client, a replay backend
//! serving recorded transcripts, a scriptable mock, and the transcript cache
//! that sits in front of all of them.

mod http;
mod store;

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use http::{HttpBackend, HttpConfig, Provider};
pub use store::{TranscriptEntry, TranscriptStore};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("rate limited")]
    RateLimited { retry_after: Option<Duration> },
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("request rejected with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("no recorded transcript for request key {key}")]
    CacheMiss { key: String },
    #[error("transcript key {key} already holds a different payload")]
    Collision { key: String },
    #[error("transcript storage: {0}")]
    Storage(String),
    #[error("backend configuration: {0}")]
    Config(String),
}

impl BackendError {
    /// Worth another attempt after a pause.
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            BackendError::Transport(_) | BackendError::RateLimited { .. }
        )
    }
}

/// Where a response's token counts came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UsageSource {
    /// Usage figures returned by the provider.
    Reported,
    /// Filled in by an offline [`TokenCounter`].
    Counted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendRequest {
    pub model: String,
    pub prompt: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub sample_index: usize,
}

impl BackendRequest {
    /// SHA-256 over model, prompt, temperature and sample index, hex encoded.
    pub fn key(&self) -> String {
        request_key(
            &self.model,
            &self.prompt,
            self.temperature,
            self.sample_index,
        )
    }
}

pub(crate) fn request_key(
    model: &str,
    prompt: &str,
    temperature: f64,
    sample_index: usize,
) -> String {
    let mut h = Sha256::new();
    // length-prefixed so field boundaries cannot shift
    for field in [model.as_bytes(), prompt.as_bytes()] {
        h.update((field.len() as u64).to_le_bytes());
        h.update(field);
    }
    h.update(temperature.to_bits().to_le_bytes());
    h.update((sample_index as u64).to_le_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendResponse {
    pub text: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub usage_source: UsageSource,
    pub latency_ms: u64,
}

impl BackendResponse {
    pub fn total_tokens(&self) -> u64 {
        self.input_tokens + self.output_tokens
    }
}

pub trait Backend: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError>;
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        (**self).complete(request)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        (**self).complete(request)
    }
}

/// Offline token counting for providers that omit usage figures.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> u64;
}

/// Approximate counter: every maximal alphanumeric run is one token and every
/// other non-whitespace character is one token. Real tokenizers differ; cells
/// counted this way are flagged in reports.
#[derive(Debug, Clone, Copy, Default)]
pub struct ApproxTokenCounter;

impl TokenCounter for ApproxTokenCounter {
    fn count(&self, text: &str) -> u64 {
        let mut n = 0u64;
        let mut in_word = false;
        for ch in text.chars() {
            if ch.is_alphanumeric() {
                if !in_word {
                    n += 1;
                    in_word = true;
                }
            } else {
                in_word = false;
                if !ch.is_whitespace() {
                    n += 1;
                }
            }
        }
        n
    }
}

/// Serves responses recorded in a transcript store; never goes to network.
pub struct ReplayBackend {
    store: Arc<TranscriptStore>,
}

impl ReplayBackend {
    pub fn new(store: Arc<TranscriptStore>) -> Self {
        Self { store }
    }

    pub fn open(path: impl AsRef<std::path::Path>) -> Result<Self, BackendError> {
        Ok(Self::new(Arc::new(TranscriptStore::open_read_only(path)?)))
    }
}

impl Backend for ReplayBackend {
    fn name(&self) -> &str {
        "replay"
    }

    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let key = request.key();
        self.store.get(&key).ok_or(BackendError::CacheMiss { key })
    }
}

type MockFn = dyn Fn(&BackendRequest) -> Result<BackendResponse, BackendError> + Send + Sync;

/// Fixture backend driven by a rule.
pub struct MockBackend {
    name: String,
    rule: Box<MockFn>,
}

impl MockBackend {
    /// Answers every prompt with the same text and reported usage.
    pub fn fixed(text: impl Into<String>, input_tokens: u64, output_tokens: u64) -> Self {
        let text = text.into();
        Self::from_fn("mock", move |_| {
            Ok(BackendResponse {
                text: text.clone(),
                input_tokens,
                output_tokens,
                usage_source: UsageSource::Reported,
                latency_ms: 0,
            })
        })
    }

    pub fn from_fn<F>(name: impl Into<String>, rule: F) -> Self
    where
        F: Fn(&BackendRequest) -> Result<BackendResponse, BackendError> + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            rule: Box::new(rule),
        }
    }
}

impl Backend for MockBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        (self.rule)(request)
    }
}

/// Consults the transcript store before the inner backend and records
/// everything the inner backend returns.
pub struct CachedBackend<B> {
    inner: B,
    store: Arc<TranscriptStore>,
}

impl<B: Backend> CachedBackend<B> {
    pub fn new(inner: B, store: Arc<TranscriptStore>) -> Self {
        Self { inner, store }
    }

    pub fn store(&self) -> &Arc<TranscriptStore> {
        &self.store
    }
}

impl<B: Backend> Backend for CachedBackend<B> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        if let Some(hit) = self.store.get(&request.key()) {
            return Ok(hit);
        }
        let resp = self.inner.complete(request)?;
        self.store.put(request, &resp)?;
        Ok(resp)
    }
}

/// Caps the number of in-flight requests to the inner backend.
pub struct Limited<B> {
    inner: B,
    limit: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

impl<B: Backend> Limited<B> {
    pub fn new(inner: B, limit: usize) -> Self {
        assert!(limit >= 1, "concurrency limit must be at least 1");
        Self {
            inner,
            limit,
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
        }
    }
}

impl<B: Backend> Backend for Limited<B> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        {
            let mut n = self.in_flight.lock().unwrap();
            while *n >= self.limit {
                n = self.freed.wait(n).unwrap();
            }
            *n += 1;
        }
        let out = self.inner.complete(request);
        *self.in_flight.lock().unwrap() -= 1;
        self.freed.notify_one();
        out
    }
}

/// Bounded exponential backoff.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    pub fn immediate(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
        }
    }

    /// Pause before attempt `attempt + 1` (0-based `attempt` just failed).
    pub fn delay(&self, attempt: u32, err: &BackendError) -> Duration {
        let exp = self.base_delay.saturating_mul(1u32 << attempt.min(16));
        let wanted = match err {
            BackendError::RateLimited {
                retry_after: Some(d),
            } => exp.max(*d),
            _ => exp,
        };
        wanted.min(self.max_delay)
    }
}

/// Calls `backend`, retrying retryable failures per `policy`. Returns the
/// last error once attempts run out.
pub fn complete_with_retry<B: Backend + ?Sized>(
    backend: &B,
    request: &BackendRequest,
    policy: &RetryPolicy,
) -> Result<BackendResponse, BackendError> {
    let mut attempt = 0;
    loop {
        match backend.complete(request) {
            Ok(r) => return Ok(r),
            Err(e) if e.is_retryable() && attempt + 1 < policy.max_attempts => {
                let pause = policy.delay(attempt, &e);
                log::debug!("{}: {e}; retrying in {pause:?}", backend.name());
                std::thread::sleep(pause);
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn req(prompt: &str, sample_index: usize) -> BackendRequest {
        BackendRequest {
            model: "m".into(),
            prompt: prompt.into(),
            temperature: 0.0,
            max_output_tokens: 256,
            sample_index,
        }
    }

    #[test]
    fn key_depends_on_listed_inputs_only() {
        let a = req("p", 0);
        let mut b = a.clone();
        b.max_output_tokens = 1;
        assert_eq!(a.key(), b.key());
        assert_ne!(a.key(), req("p", 1).key());
        let mut c = a.clone();
        c.temperature = 0.7;
        assert_ne!(a.key(), c.key());
        let mut d = a.clone();
        d.model = "mp".into();
        d.prompt = String::new();
        let mut e = a.clone();
        e.model = "m".into();
        e.prompt = "p".into();
        assert_ne!(d.key(), e.key());
        assert_eq!(a.key().len(), 64);
    }

    #[test]
    fn mock_answers_anything() {
        let m = MockBackend::fixed("Final Answer = (A)", 10, 5);
        for p in ["x", "y"] {
            let r = m.complete(&req(p, 0)).unwrap();
            assert_eq!(
                (r.text.as_str(), r.input_tokens, r.output_tokens),
                ("Final Answer = (A)", 10, 5)
            );
            assert_eq!(r.usage_source, UsageSource::Reported);
        }
    }

    #[test]
    fn replay_serves_recorded_and_misses_otherwise() {
        let store = Arc::new(TranscriptStore::in_memory());
        let r = BackendResponse {
            text: "recorded".into(),
            input_tokens: 3,
            output_tokens: 4,
            usage_source: UsageSource::Counted,
            latency_ms: 99,
        };
        store.put(&req("p", 0), &r).unwrap();
        let replay = ReplayBackend::new(store);
        let got = replay.complete(&req("p", 0)).unwrap();
        assert_eq!(
            (got.text.as_str(), got.input_tokens, got.output_tokens),
            ("recorded", 3, 4)
        );
        assert_eq!(got.usage_source, UsageSource::Counted);
        let miss = req("other", 0);
        assert_eq!(
            replay.complete(&miss),
            Err(BackendError::CacheMiss { key: miss.key() })
        );
    }

    #[test]
    fn cache_consulted_first() {
        let calls = Arc::new(AtomicUsize::new(0));
        let c = calls.clone();
        let inner = MockBackend::from_fn("counting", move |_| {
            c.fetch_add(1, Ordering::SeqCst);
            Ok(BackendResponse {
                text: "t".into(),
                input_tokens: 1,
                output_tokens: 1,
                usage_source: UsageSource::Reported,
                latency_ms: 0,
            })
        });
        let cached = CachedBackend::new(inner, Arc::new(TranscriptStore::in_memory()));
        cached.complete(&req("p", 0)).unwrap();
        cached.complete(&req("p", 0)).unwrap();
        cached.complete(&req("p", 1)).unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn retries_transient_then_gives_up() {
        let calls = Arc::new(AtomicUsize::new(0));
        let c = calls.clone();
        let flaky = MockBackend::from_fn("flaky", move |_| {
            let n = c.fetch_add(1, Ordering::SeqCst);
            if n < 2 {
                Err(BackendError::RateLimited { retry_after: None })
            } else {
                Ok(BackendResponse {
                    text: "ok".into(),
                    input_tokens: 0,
                    output_tokens: 0,
                    usage_source: UsageSource::Reported,
                    latency_ms: 0,
                })
            }
        });
        let policy = RetryPolicy::immediate(5);
        assert_eq!(
            complete_with_retry(&flaky, &req("p", 0), &policy)
                .unwrap()
                .text,
            "ok"
        );
        assert_eq!(calls.load(Ordering::SeqCst), 3);

        let c2 = Arc::new(AtomicUsize::new(0));
        let cc = c2.clone();
        let down = MockBackend::from_fn("down", move |_| {
            cc.fetch_add(1, Ordering::SeqCst);
            Err(BackendError::Transport("refused".into()))
        });
        assert!(complete_with_retry(&down, &req("p", 0), &policy).is_err());
        assert_eq!(c2.load(Ordering::SeqCst), 5);

        let c3 = Arc::new(AtomicUsize::new(0));
        let ccc = c3.clone();
        let denied = MockBackend::from_fn("denied", move |_| {
            ccc.fetch_add(1, Ordering::SeqCst);
            Err(BackendError::Auth("bad key".into()))
        });
        assert!(matches!(
            complete_with_retry(&denied, &req("p", 0), &policy),
            Err(BackendError::Auth(_))
        ));
        assert_eq!(c3.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn backoff_is_exponential_and_capped() {
        let p = RetryPolicy {
            max_attempts: 5,
            base_delay: Duration::from_millis(100),
            max_delay: Duration::from_millis(1000),
        };
        let t = BackendError::Transport(String::new());
        let ms: Vec<u128> = (0..5).map(|a| p.delay(a, &t).as_millis()).collect();
        assert_eq!(ms, [100, 200, 400, 800, 1000]);
        let rl = BackendError::RateLimited {
            retry_after: Some(Duration::from_millis(700)),
        };
        assert_eq!(p.delay(0, &rl), Duration::from_millis(700));
    }

    #[test]
    fn limited_caps_in_flight_requests() {
        let current = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let (c, p) = (current.clone(), peak.clone());
        let slow = MockBackend::from_fn("slow", move |_| {
            let now = c.fetch_add(1, Ordering::SeqCst) + 1;
            p.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(5));
            c.fetch_sub(1, Ordering::SeqCst);
            Ok(BackendResponse {
                text: String::new(),
                input_tokens: 0,
                output_tokens: 0,
                usage_source: UsageSource::Reported,
                latency_ms: 0,
            })
        });
        let limited = Limited::new(slow, 3);
        std::thread::scope(|s| {
            for i in 0..12 {
                let l = &limited;
                s.spawn(move || l.complete(&req("p", i)).unwrap());
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 3);
        assert!(peak.load(Ordering::SeqCst) >= 1);
    }

    #[test]
    fn approximate_counter() {
        let c = ApproxTokenCounter;
        assert_eq!(c.count(""), 0);
        assert_eq!(c.count("Final Answer = (A)"), 6);
        assert_eq!(c.count("it's 1,200."), 7);
    }
}
