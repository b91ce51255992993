//! Completion backends for the frozen LM, with a disk cache, retries and
//! bounded-concurrency batches.

use std::collections::{HashMap, VecDeque};
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{AnnotatedExample, EntitySpan, Sentence};
use crate::prompt::PredictedItem;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LmError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("transcript exhausted")]
    TranscriptExhausted,
    #[error("no gold annotation for sentence {0:?}")]
    NoGold(String),
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("http status {status} after {attempts} attempt(s): {body}")]
    Status {
        status: u16,
        attempts: u32,
        body: String,
    },
    #[error("unexpected response: {0}")]
    Response(String),
    #[error("cache error: {0}")]
    Cache(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodingParams {
    pub max_tokens: u32,
    pub temperature: f64,
    pub stop: Vec<String>,
}

impl Default for DecodingParams {
    fn default() -> Self {
        Self {
            max_tokens: 256,
            temperature: 0.0,
            stop: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmRequest {
    pub prompt: String,
    pub params: DecodingParams,
    /// Test sentence the prompt is about. Only the oracle backend reads it.
    pub sentence_id: Option<String>,
}

impl LmRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            params: DecodingParams::default(),
            sentence_id: None,
        }
    }

    pub fn for_sentence(mut self, id: impl Into<String>) -> Self {
        self.sentence_id = Some(id.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmResponse {
    pub text: String,
    pub latency: Duration,
    pub backend: String,
    pub cache_hit: bool,
    /// Calls made to the backend; 0 for cache hits.
    pub attempts: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    MockOracle,
    MockScripted,
    Http,
}

impl BackendKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::MockOracle => "mock-oracle",
            Self::MockScripted => "mock-scripted",
            Self::Http => "http",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_backoff_ms: 500,
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `attempt + 1`, doubling from the base.
    pub fn backoff(&self, attempt: u32) -> Duration {
        Duration::from_millis(
            self.base_backoff_ms
                .saturating_mul(1 << (attempt - 1).min(16)),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    pub model: String,
    /// Environment variable holding a bearer token.
    pub auth_env: Option<String>,
    /// JSON pointer to the completion text in the response body.
    pub response_pointer: String,
    pub timeout_secs: u64,
    pub retry: RetryPolicy,
    pub max_parallel: usize,
    /// Reply script for `mock-scripted`: JSONL objects with a `reply` field.
    pub transcript: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub params: DecodingParams,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::MockOracle,
            endpoint: None,
            model: String::new(),
            auth_env: None,
            response_pointer: "/choices/0/text".into(),
            timeout_secs: 60,
            retry: RetryPolicy::default(),
            max_parallel: 4,
            transcript: None,
            cache_dir: None,
            params: DecodingParams::default(),
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), LmError> {
        if self.max_parallel == 0 {
            return Err(LmError::Config("max_parallel must be at least 1".into()));
        }
        if self.retry.max_attempts == 0 {
            return Err(LmError::Config(
                "retry.max_attempts must be at least 1".into(),
            ));
        }
        match self.kind {
            BackendKind::Http => {
                if self.endpoint.is_none() {
                    return Err(LmError::Config("http backend needs an endpoint".into()));
                }
                if let Some(var) = &self.auth_env {
                    if std::env::var_os(var).is_none() {
                        return Err(LmError::Config(format!(
                            "environment variable {var} is not set"
                        )));
                    }
                }
            }
            BackendKind::MockScripted if self.transcript.is_none() => {
                return Err(LmError::Config(
                    "mock-scripted backend needs a transcript".into(),
                ));
            }
            _ => {}
        }
        Ok(())
    }

    fn model_name(&self) -> &str {
        if self.model.is_empty() {
            self.kind.as_str()
        } else {
            &self.model
        }
    }
}

pub trait Backend: Send + Sync {
    fn name(&self) -> &str;
    /// Returns the completion text and the number of attempts it took.
    fn complete(&self, request: &LmRequest) -> Result<(String, u32), LmError>;
    /// Backends whose replies depend on call order run one request at a time.
    fn sequential(&self) -> bool {
        false
    }
}

/// Gold entities by sentence id, for the oracle backend.
#[derive(Debug, Clone, Default)]
pub struct GoldLookup {
    gold: HashMap<String, (Sentence, Vec<EntitySpan>)>,
}

impl GoldLookup {
    pub fn from_examples(examples: &[AnnotatedExample]) -> Self {
        let gold = examples
            .iter()
            .map(|e| (e.id().to_string(), (e.sentence.clone(), e.entities.clone())))
            .collect();
        Self { gold }
    }
}

/// The gold spans of `sentence` as a JSON array reply, in (start, end) order.
pub fn oracle_reply(sentence: &Sentence, spans: &[EntitySpan]) -> String {
    let mut ordered: Vec<&EntitySpan> = spans.iter().collect();
    ordered.sort();
    let items: Vec<PredictedItem> = ordered
        .iter()
        .map(|s| PredictedItem {
            text: s.surface(sentence).join(" "),
            label: s.label.clone(),
        })
        .collect();
    serde_json::to_string(&items).expect("items serialize")
}

pub struct OracleBackend {
    gold: GoldLookup,
}

impl Backend for OracleBackend {
    fn name(&self) -> &str {
        "mock-oracle"
    }

    fn complete(&self, request: &LmRequest) -> Result<(String, u32), LmError> {
        let id = request.sentence_id.as_deref().unwrap_or_default();
        let (sentence, spans) = self
            .gold
            .gold
            .get(id)
            .ok_or_else(|| LmError::NoGold(id.to_string()))?;
        Ok((oracle_reply(sentence, spans), 1))
    }
}

pub struct ScriptedBackend {
    replies: Mutex<VecDeque<String>>,
}

#[derive(Deserialize)]
struct ScriptLine {
    reply: String,
}

impl ScriptedBackend {
    pub fn new(replies: impl IntoIterator<Item = String>) -> Self {
        Self {
            replies: Mutex::new(replies.into_iter().collect()),
        }
    }

    pub fn load(path: &Path) -> Result<Self, LmError> {
        let text = fs::read_to_string(path)
            .map_err(|e| LmError::Config(format!("{}: {e}", path.display())))?;
        let mut replies = Vec::new();
        for (i, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let l: ScriptLine = serde_json::from_str(line)
                .map_err(|e| LmError::Config(format!("{} line {}: {e}", path.display(), i + 1)))?;
            replies.push(l.reply);
        }
        Ok(Self::new(replies))
    }
}

impl Backend for ScriptedBackend {
    fn name(&self) -> &str {
        "mock-scripted"
    }

    fn complete(&self, _request: &LmRequest) -> Result<(String, u32), LmError> {
        let reply = self.replies.lock().unwrap().pop_front();
        reply.map(|r| (r, 1)).ok_or(LmError::TranscriptExhausted)
    }

    fn sequential(&self) -> bool {
        true
    }
}

/// JSON completion endpoint: posts `{model, prompt, max_tokens, temperature,
/// stop}` and reads the text at `response_pointer`.
pub struct HttpBackend {
    agent: ureq::Agent,
    endpoint: String,
    model: String,
    token: Option<String>,
    pointer: String,
    retry: RetryPolicy,
}

enum Attempt {
    Done(String),
    Retry(LmError),
    Fail(LmError),
}

impl HttpBackend {
    pub fn new(config: &BackendConfig) -> Result<Self, LmError> {
        config.validate()?;
        let token =
            match &config.auth_env {
                Some(var) => Some(std::env::var(var).map_err(|_| {
                    LmError::Config(format!("environment variable {var} is not set"))
                })?),
                None => None,
            };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        Ok(Self {
            agent,
            endpoint: config.endpoint.clone().unwrap_or_default(),
            model: config.model.clone(),
            token,
            pointer: config.response_pointer.clone(),
            retry: config.retry,
        })
    }

    fn attempt(&self, body: &str, attempts: u32) -> Attempt {
        let mut req = self
            .agent
            .post(&self.endpoint)
            .header("Content-Type", "application/json");
        if let Some(t) = &self.token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        let mut resp = match req.send(body) {
            Ok(r) => r,
            Err(e) => {
                return Attempt::Retry(LmError::Transport {
                    attempts,
                    message: e.to_string(),
                })
            }
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) => {
                return Attempt::Retry(LmError::Transport {
                    attempts,
                    message: e.to_string(),
                })
            }
        };
        if status == 429 || status >= 500 {
            return Attempt::Retry(LmError::Status {
                status,
                attempts,
                body: text,
            });
        }
        if !(200..300).contains(&status) {
            return Attempt::Fail(LmError::Status {
                status,
                attempts,
                body: text,
            });
        }
        let json: Value = match serde_json::from_str(&text) {
            Ok(v) => v,
            Err(e) => return Attempt::Fail(LmError::Response(format!("body is not JSON: {e}"))),
        };
        match json.pointer(&self.pointer).and_then(Value::as_str) {
            Some(s) => Attempt::Done(s.to_string()),
            None => Attempt::Fail(LmError::Response(format!("no string at {}", self.pointer))),
        }
    }
}

impl Backend for HttpBackend {
    fn name(&self) -> &str {
        "http"
    }

    fn complete(&self, request: &LmRequest) -> Result<(String, u32), LmError> {
        let body = serde_json::json!({
            "model": self.model,
            "prompt": request.prompt,
            "max_tokens": request.params.max_tokens,
            "temperature": request.params.temperature,
            "stop": request.params.stop,
        })
        .to_string();
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&body, attempts) {
                Attempt::Done(text) => return Ok((text, attempts)),
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(e) if attempts >= self.retry.max_attempts => return Err(e),
                Attempt::Retry(e) => {
                    let wait = self.retry.backoff(attempts);
                    warn!("attempt {attempts} failed ({e}); retrying in {wait:?}");
                    thread::sleep(wait);
                }
            }
        }
    }
}

#[derive(Serialize)]
struct KeyMaterial<'a> {
    backend: &'a str,
    model: &'a str,
    prompt: &'a str,
    params: &'a DecodingParams,
}

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    backend: String,
    model: String,
    prompt: String,
    params: DecodingParams,
    text: String,
}

/// One JSON file per request hash.
#[derive(Debug)]
pub struct ResponseCache {
    dir: PathBuf,
    lock: Mutex<()>,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, LmError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| LmError::Cache(format!("{}: {e}", dir.display())))?;
        Ok(Self {
            dir,
            lock: Mutex::new(()),
        })
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str, prompt: &str) -> Option<String> {
        let _g = self.lock.lock().unwrap();
        let file = File::open(self.path(key)).ok()?;
        let rec: CacheRecord = serde_json::from_reader(BufReader::new(file)).ok()?;
        (rec.prompt == prompt).then_some(rec.text)
    }

    fn put(&self, key: &str, rec: &CacheRecord) -> Result<(), LmError> {
        let _g = self.lock.lock().unwrap();
        let tmp = self.dir.join(format!("{key}.tmp"));
        let err = |e: std::io::Error| LmError::Cache(format!("{}: {e}", tmp.display()));
        fs::write(
            &tmp,
            serde_json::to_vec_pretty(rec).expect("record serializes"),
        )
        .map_err(err)?;
        fs::rename(&tmp, self.path(key)).map_err(err)
    }
}

pub struct LmClient {
    config: BackendConfig,
    backend: Box<dyn Backend>,
    cache: Option<ResponseCache>,
}

impl LmClient {
    /// Builds the configured backend. `gold` is required for `mock-oracle`.
    pub fn new(config: BackendConfig, gold: Option<GoldLookup>) -> Result<Self, LmError> {
        config.validate()?;
        let backend: Box<dyn Backend> = match config.kind {
            BackendKind::MockOracle => Box::new(OracleBackend {
                gold: gold.ok_or_else(|| {
                    LmError::Config("mock-oracle backend needs gold annotations".into())
                })?,
            }),
            BackendKind::MockScripted => Box::new(ScriptedBackend::load(
                config.transcript.as_deref().unwrap(),
            )?),
            BackendKind::Http => Box::new(HttpBackend::new(&config)?),
        };
        Self::with_backend(config, backend)
    }

    pub fn with_backend(config: BackendConfig, backend: Box<dyn Backend>) -> Result<Self, LmError> {
        let cache = config
            .cache_dir
            .as_ref()
            .map(ResponseCache::open)
            .transpose()?;
        Ok(Self {
            config,
            backend,
            cache,
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    /// Cache key: SHA-256 over backend kind, model, prompt and decoding params.
    pub fn cache_key(&self, request: &LmRequest) -> String {
        let material = KeyMaterial {
            backend: self.config.kind.as_str(),
            model: self.config.model_name(),
            prompt: &request.prompt,
            params: &request.params,
        };
        hex::encode(Sha256::digest(
            serde_json::to_vec(&material).expect("key serializes"),
        ))
    }

    pub fn complete(&self, request: &LmRequest) -> Result<LmResponse, LmError> {
        self.complete_batch(std::slice::from_ref(request))
            .pop()
            .unwrap()
    }

    fn hit(&self, text: String) -> LmResponse {
        LmResponse {
            text,
            latency: Duration::ZERO,
            backend: self.backend.name().to_string(),
            cache_hit: true,
            attempts: 0,
        }
    }

    fn dispatch(&self, key: &str, request: &LmRequest) -> Result<LmResponse, LmError> {
        let started = Instant::now();
        let (text, attempts) = self.backend.complete(request)?;
        let latency = started.elapsed();
        debug!(
            "{} completed in {latency:?} after {attempts} attempt(s)",
            self.backend.name()
        );
        if let Some(cache) = &self.cache {
            cache.put(
                key,
                &CacheRecord {
                    backend: self.config.kind.as_str().to_string(),
                    model: self.config.model_name().to_string(),
                    prompt: request.prompt.clone(),
                    params: request.params.clone(),
                    text: text.clone(),
                },
            )?;
        }
        Ok(LmResponse {
            text,
            latency,
            backend: self.backend.name().to_string(),
            cache_hit: false,
            attempts,
        })
    }

    /// Completes every request, returning results in request order.
    ///
    /// Cached keys are never dispatched. A request repeating an earlier key
    /// of the same batch waits for that one and is reported as a cache hit.
    /// At most `max_parallel` requests are in flight at once.
    pub fn complete_batch(&self, requests: &[LmRequest]) -> Vec<Result<LmResponse, LmError>> {
        enum Plan {
            Cached(String),
            Dispatch,
            SameAs(usize),
        }
        let keys: Vec<String> = requests.iter().map(|r| self.cache_key(r)).collect();
        let mut first_with_key: HashMap<&str, usize> = HashMap::new();
        let mut plans = Vec::with_capacity(requests.len());
        for (i, (key, req)) in keys.iter().zip(requests).enumerate() {
            if let Some(&j) = first_with_key.get(key.as_str()) {
                plans.push(Plan::SameAs(j));
                continue;
            }
            first_with_key.insert(key, i);
            match self.cache.as_ref().and_then(|c| c.get(key, &req.prompt)) {
                Some(text) => plans.push(Plan::Cached(text)),
                None => plans.push(Plan::Dispatch),
            }
        }

        let to_send: Vec<usize> = (0..requests.len())
            .filter(|&i| matches!(plans[i], Plan::Dispatch))
            .collect();
        let workers = if self.backend.sequential() {
            1
        } else {
            self.config.max_parallel.min(to_send.len())
        };
        let slots: Vec<Mutex<Option<Result<LmResponse, LmError>>>> =
            (0..requests.len()).map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let n = next.fetch_add(1, Ordering::SeqCst);
                    let Some(&i) = to_send.get(n) else { break };
                    let result = self.dispatch(&keys[i], &requests[i]);
                    *slots[i].lock().unwrap() = Some(result);
                });
            }
        });

        let mut results: Vec<Result<LmResponse, LmError>> = Vec::with_capacity(requests.len());
        for (i, plan) in plans.into_iter().enumerate() {
            let r = match plan {
                Plan::Cached(text) => Ok(self.hit(text)),
                Plan::Dispatch => slots[i].lock().unwrap().take().expect("dispatched"),
                Plan::SameAs(j) => match &results[j] {
                    Ok(first) => Ok(self.hit(first.text.clone())),
                    Err(e) => Err(e.clone()),
                },
            };
            results.push(r);
        }
        results
    }
}
