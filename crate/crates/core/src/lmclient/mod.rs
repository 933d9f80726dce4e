//! Teacher language-model client: scripted or live backends behind a
//! persistent cache, a requests-per-minute ceiling and retry with backoff.

mod live;
pub mod template;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use live::{LiveBackend, LiveConfig};

use crate::error::{PgtError, Result};
use crate::jsonio::{append_line, parse_line, read_lines};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelTag {
    SeedTeacher,
    BootstrapTeacher,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_tokens: usize,
    pub temperature: f64,
    pub model_tag: ModelTag,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl CompletionRequest {
    pub fn new(prompt: impl Into<String>, model_tag: ModelTag) -> Self {
        Self { prompt: prompt.into(), max_tokens: 128, temperature: 0.0, model_tag, metadata: BTreeMap::new() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompt.trim().is_empty() {
            return Err(PgtError::InvalidInput("completion prompt is empty".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(PgtError::InvalidInput("completion temperature must be >= 0".into()));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(&self.prompt)
    }
}

/// SHA-256 of the prompt with whitespace runs collapsed to one space.
pub fn fingerprint(prompt: &str) -> String {
    let norm = prompt.split_whitespace().collect::<Vec<_>>().join(" ");
    hex::encode(Sha256::digest(norm.as_bytes()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: usize,
    pub completion_tokens: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Completion {
    pub text: String,
    /// Mean per-token log-probability when the backend reports it.
    pub logprob: Option<f64>,
    pub usage: Usage,
    pub cached: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackendReply {
    pub text: String,
    pub logprob: Option<f64>,
}

pub trait Backend: Send + Sync {
    /// `PgtError::Backend` is treated as transient and retried; any other
    /// error is returned immediately.
    fn complete(&self, req: &CompletionRequest) -> Result<BackendReply>;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fallback {
    #[default]
    Error,
    Template,
}

/// One scripted completion (also the stub file line format).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StubRecord {
    pub fingerprint: String,
    pub model_tag: ModelTag,
    pub prompt: String,
    pub completion: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprob: Option<f64>,
}

/// Replays canned completions keyed by prompt fingerprint.
#[derive(Clone, Debug, Default)]
pub struct ScriptedStub {
    records: HashMap<String, StubRecord>,
    pub fallback: Fallback,
}

impl ScriptedStub {
    pub fn new(fallback: Fallback) -> Self {
        Self { records: HashMap::new(), fallback }
    }

    pub fn insert(&mut self, model_tag: ModelTag, prompt: &str, completion: &str, logprob: Option<f64>) {
        let fp = fingerprint(prompt);
        self.records.insert(
            fp.clone(),
            StubRecord { fingerprint: fp, model_tag, prompt: prompt.to_string(), completion: completion.to_string(), logprob },
        );
    }

    pub fn load(path: &Path, fallback: Fallback) -> Result<Self> {
        let mut stub = Self::new(fallback);
        for (i, line) in read_lines(path)?.iter().enumerate() {
            let rec: StubRecord = parse_line(path, i, line)?;
            if rec.fingerprint != fingerprint(&rec.prompt) {
                return Err(PgtError::InvalidInput(format!("{}:{}: fingerprint does not match prompt", path.display(), i + 1)));
            }
            stub.records.insert(rec.fingerprint.clone(), rec);
        }
        Ok(stub)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

impl Backend for ScriptedStub {
    fn complete(&self, req: &CompletionRequest) -> Result<BackendReply> {
        let fp = req.fingerprint();
        if let Some(r) = self.records.get(&fp) {
            return Ok(BackendReply { text: r.completion.clone(), logprob: r.logprob });
        }
        match self.fallback {
            Fallback::Error => Err(PgtError::UnscriptedPrompt(fp)),
            Fallback::Template => Ok(template::respond(&req.prompt, req.temperature)),
        }
    }
}

/// Time source for rate limiting and backoff; tests inject a virtual clock.
pub trait Clock: Send + Sync {
    fn now(&self) -> Duration;
    fn sleep(&self, d: Duration);
}

pub struct SystemClock {
    start: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        Self { start: Instant::now() }
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.start.elapsed()
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Virtual time: `sleep` advances the clock instantly.
#[derive(Default)]
pub struct ManualClock {
    now: Mutex<Duration>,
}

impl Clock for ManualClock {
    fn now(&self) -> Duration {
        *self.now.lock().unwrap()
    }

    fn sleep(&self, d: Duration) {
        *self.now.lock().unwrap() += d;
    }
}

/// Spaces backend calls at least `60 / rpm` seconds apart.
pub struct RateLimiter {
    interval: Duration,
    next: Option<Duration>,
}

impl RateLimiter {
    pub fn new(rpm: Option<f64>) -> Self {
        let interval = match rpm {
            Some(r) if r > 0.0 => Duration::from_secs_f64(60.0 / r),
            _ => Duration::ZERO,
        };
        Self { interval, next: None }
    }

    /// Blocks until the next call is allowed and reserves its slot.
    pub fn acquire(&mut self, clock: &dyn Clock) {
        let now = clock.now();
        let at = match self.next {
            Some(n) if n > now => {
                clock.sleep(n - now);
                n
            }
            _ => now,
        };
        self.next = Some(at + self.interval);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub fingerprint: String,
    pub model_tag: ModelTag,
    pub prompt: String,
    pub completion: String,
    pub timestamp: u64,
    pub temperature: f64,
    pub max_tokens: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprob: Option<f64>,
}

type CacheKey = (ModelTag, String, u64, usize);

fn cache_key(req: &CompletionRequest) -> CacheKey {
    (req.model_tag, req.fingerprint(), req.temperature.to_bits(), req.max_tokens)
}

/// Append-only JSON-lines cache, loaded fully into memory.
pub struct Cache {
    path: Option<PathBuf>,
    entries: Mutex<HashMap<CacheKey, CacheRecord>>,
}

impl Cache {
    pub fn in_memory() -> Self {
        Self { path: None, entries: Mutex::new(HashMap::new()) }
    }

    pub fn open(path: &Path) -> Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            for (i, line) in read_lines(path)?.iter().enumerate() {
                let r: CacheRecord = parse_line(path, i, line)?;
                entries.insert((r.model_tag, r.fingerprint.clone(), r.temperature.to_bits(), r.max_tokens), r);
            }
        }
        Ok(Self { path: Some(path.to_path_buf()), entries: Mutex::new(entries) })
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get(&self, req: &CompletionRequest) -> Option<CacheRecord> {
        let r = self.entries.lock().unwrap().get(&cache_key(req)).cloned()?;
        // a fingerprint collision would surface as a prompt mismatch
        (fingerprint(&r.prompt) == req.fingerprint()).then_some(r)
    }

    fn put(&self, req: &CompletionRequest, reply: &BackendReply) -> Result<()> {
        let rec = CacheRecord {
            fingerprint: req.fingerprint(),
            model_tag: req.model_tag,
            prompt: req.prompt.clone(),
            completion: reply.text.clone(),
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            temperature: req.temperature,
            max_tokens: req.max_tokens,
            logprob: reply.logprob,
        };
        let mut entries = self.entries.lock().unwrap();
        if let Some(p) = &self.path {
            append_line(p, &rec)?;
        }
        entries.insert(cache_key(req), rec);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClientConfig {
    /// Requests-per-minute ceiling for backend calls; `None` is unlimited.
    pub rpm: Option<f64>,
    pub concurrency: usize,
    pub max_retries: usize,
    pub backoff_ms: u64,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self { rpm: None, concurrency: 4, max_retries: 5, backoff_ms: 500 }
    }
}

pub struct LmClient {
    backend: Box<dyn Backend>,
    cache: Cache,
    limiter: Mutex<RateLimiter>,
    clock: Arc<dyn Clock>,
    cfg: ClientConfig,
    backend_calls: AtomicUsize,
}

impl LmClient {
    pub fn new(backend: Box<dyn Backend>, cache: Cache, cfg: ClientConfig) -> Self {
        Self::with_clock(backend, cache, cfg, Arc::new(SystemClock::default()))
    }

    pub fn with_clock(backend: Box<dyn Backend>, cache: Cache, cfg: ClientConfig, clock: Arc<dyn Clock>) -> Self {
        Self { limiter: Mutex::new(RateLimiter::new(cfg.rpm)), backend, cache, clock, cfg, backend_calls: AtomicUsize::new(0) }
    }

    /// Backend invocations so far, retries included.
    pub fn backend_calls(&self) -> usize {
        self.backend_calls.load(Ordering::SeqCst)
    }

    pub fn cache(&self) -> &Cache {
        &self.cache
    }

    pub fn complete(&self, req: &CompletionRequest) -> Result<Completion> {
        req.validate()?;
        if let Some(hit) = self.cache.get(req) {
            return Ok(completion(req, hit.completion, hit.logprob, true));
        }
        let reply = self.call_backend(req)?;
        self.cache.put(req, &reply)?;
        Ok(completion(req, reply.text, reply.logprob, false))
    }

    fn call_backend(&self, req: &CompletionRequest) -> Result<BackendReply> {
        let mut attempt = 0;
        loop {
            self.limiter.lock().unwrap().acquire(self.clock.as_ref());
            self.backend_calls.fetch_add(1, Ordering::SeqCst);
            match self.backend.complete(req) {
                Err(PgtError::Backend(msg)) => {
                    attempt += 1;
                    if attempt >= self.cfg.max_retries {
                        return Err(PgtError::Backend(format!("{msg} (gave up after {attempt} attempts)")));
                    }
                    self.clock.sleep(Duration::from_millis(self.cfg.backoff_ms << (attempt - 1)));
                }
                other => return other,
            }
        }
    }

    /// Completes every request with at most `concurrency` backend calls in
    /// flight; results keep request order.
    pub fn complete_many(&self, reqs: &[CompletionRequest]) -> Vec<Result<Completion>> {
        let width = self.cfg.concurrency.max(1);
        let mut out = Vec::with_capacity(reqs.len());
        for group in reqs.chunks(width) {
            let results: Vec<Result<Completion>> = std::thread::scope(|s| {
                let handles: Vec<_> = group.iter().map(|r| s.spawn(move || self.complete(r))).collect();
                handles.into_iter().map(|h| h.join().expect("completion worker panicked")).collect()
            });
            out.extend(results);
        }
        out
    }
}

fn completion(req: &CompletionRequest, text: String, logprob: Option<f64>, cached: bool) -> Completion {
    let usage = Usage { prompt_tokens: req.prompt.split_whitespace().count(), completion_tokens: text.split_whitespace().count() };
    Completion { text, logprob, usage, cached }
}
