//! Single abstraction over text generators: a live OpenAI-compatible chat
//! endpoint and a deterministic scripted mock for offline runs.
//!
//! Requests are keyed by a fingerprint of (request tag, last user message).
//! Because one request may legitimately be issued several times (k samples
//! during expansion), both the mock script and the response cache key on
//! (fingerprint, per-fingerprint call ordinal); the mock is a pure function
//! of that pair, which keeps whole-pipeline output byte-identical across
//! reruns and independent of whether the cache is enabled.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Environment variable holding the live API key.
pub const ENV_API_KEY: &str = "CRPS_API_KEY";
/// Environment variable holding the live API base URL.
pub const ENV_API_BASE: &str = "CRPS_API_BASE";

const MAX_ATTEMPTS: u32 = 5;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport exhausted after {MAX_ATTEMPTS} attempts: {0}")]
    TransportExhausted(String),
    #[error("authentication failure: {0}")]
    AuthFailure(String),
    #[error("mock script has no entry for fingerprint {0} and no default")]
    ScriptMiss(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("cache io: {0}")]
    CacheIo(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestTag {
    Explore,
    Critique,
    Synthesize,
    Evaluate,
}

impl RequestTag {
    fn as_str(&self) -> &'static str {
        match self {
            RequestTag::Explore => "explore",
            RequestTag::Critique => "critique",
            RequestTag::Synthesize => "synthesize",
            RequestTag::Evaluate => "evaluate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "system".into(),
            content: content.into(),
        }
    }
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "user".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub model_name: String,
    pub request_tag: RequestTag,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), ClientError> {
        if self.messages.is_empty() {
            return Err(ClientError::InvalidRequest("no messages".into()));
        }
        if self.temperature < 0.0 {
            return Err(ClientError::InvalidRequest("negative temperature".into()));
        }
        Ok(())
    }
}

/// Stable key for a request: hash of (tag, whitespace-normalized last user
/// message). Temperature and model name are deliberately excluded so that a
/// scripted mock and the response cache treat resamples of one prompt as the
/// same entry.
pub fn fingerprint(req: &ChatRequest) -> String {
    let last_user = req
        .messages
        .iter()
        .rev()
        .find(|m| m.role == "user")
        .map(|m| m.content.as_str())
        .unwrap_or("");
    let normalized = last_user.split_whitespace().collect::<Vec<_>>().join(" ");
    let mut hasher = Sha256::new();
    hasher.update(req.request_tag.as_str().as_bytes());
    hasher.update([0u8]);
    hasher.update(normalized.as_bytes());
    let digest = hasher.finalize();
    let mut out = String::with_capacity(16);
    for b in &digest[..8] {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedChoice {
    pub weight: f64,
    pub text: String,
}

/// One scripted response: fixed text or a seeded weighted branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MockResponse {
    Text(String),
    Weighted { choices: Vec<WeightedChoice> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockEntry {
    pub tag: RequestTag,
    pub fingerprint: String,
    /// Human-readable hint for script audits; ignored by the client.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    /// Responses for successive calls with this fingerprint; the last entry
    /// repeats once the list is exhausted.
    pub responses: Vec<MockResponse>,
}

/// Deterministic scripted backend for offline runs and desk-scale oracles.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    pub rng_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_response: Option<String>,
    pub entries: Vec<MockEntry>,
}

impl MockScript {
    pub fn new(rng_seed: u64) -> Self {
        MockScript {
            rng_seed,
            default_response: None,
            entries: Vec::new(),
        }
    }

    /// Script the given request with an ordered list of plain-text responses.
    pub fn script(&mut self, req: &ChatRequest, responses: Vec<&str>, note: impl Into<String>) {
        self.entries.push(MockEntry {
            tag: req.request_tag,
            fingerprint: fingerprint(req),
            note: Some(note.into()),
            responses: responses
                .into_iter()
                .map(|t| MockResponse::Text(t.to_string()))
                .collect(),
        });
    }

    pub fn script_weighted(
        &mut self,
        req: &ChatRequest,
        choices: Vec<(f64, &str)>,
        note: impl Into<String>,
    ) {
        self.entries.push(MockEntry {
            tag: req.request_tag,
            fingerprint: fingerprint(req),
            note: Some(note.into()),
            responses: vec![MockResponse::Weighted {
                choices: choices
                    .into_iter()
                    .map(|(weight, text)| WeightedChoice {
                        weight,
                        text: text.to_string(),
                    })
                    .collect(),
            }],
        });
    }

    pub fn validate(&self) -> Result<(), String> {
        for e in &self.entries {
            for r in &e.responses {
                if let MockResponse::Weighted { choices } = r {
                    if choices.is_empty() {
                        return Err(format!("empty weighted choice list for {}", e.fingerprint));
                    }
                    let total: f64 = choices.iter().map(|c| c.weight).sum();
                    if (total - 1.0).abs() > 1e-9 {
                        return Err(format!(
                            "weights for {} sum to {total}, expected 1",
                            e.fingerprint
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("read {path:?}: {e}"))?;
        let script: MockScript =
            serde_json::from_str(&text).map_err(|e| format!("parse {path:?}: {e}"))?;
        script.validate()?;
        Ok(script)
    }

    pub fn save(&self, path: &Path) -> Result<(), String> {
        let text = serde_json::to_string_pretty(self).expect("script serializes");
        fs::write(path, text).map_err(|e| format!("write {path:?}: {e}"))
    }

    fn respond(&self, fp: &str, ordinal: u64) -> Result<String, ClientError> {
        let entry = self.entries.iter().find(|e| e.fingerprint == fp);
        let Some(entry) = entry else {
            return match &self.default_response {
                Some(d) => Ok(d.clone()),
                None => Err(ClientError::ScriptMiss(fp.to_string())),
            };
        };
        let idx = (ordinal as usize).min(entry.responses.len().saturating_sub(1));
        match &entry.responses[idx] {
            MockResponse::Text(t) => Ok(t.clone()),
            MockResponse::Weighted { choices } => {
                let u = unit_draw(self.rng_seed, fp, ordinal);
                let mut acc = 0.0;
                for c in choices {
                    acc += c.weight;
                    if u < acc {
                        return Ok(c.text.clone());
                    }
                }
                Ok(choices.last().expect("validated non-empty").text.clone())
            }
        }
    }
}

/// Pure deterministic draw in [0,1) from (seed, fingerprint, ordinal); no
/// shared RNG state, so parallel workers cannot perturb each other.
fn unit_draw(seed: u64, fp: &str, ordinal: u64) -> f64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(fp.as_bytes());
    hasher.update(ordinal.to_le_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    (u64::from_le_bytes(bytes) >> 11) as f64 / (1u64 << 53) as f64
}

#[derive(Debug, Clone)]
pub struct LiveConfig {
    pub api_base: String,
    pub api_key: String,
}

impl LiveConfig {
    /// Read endpoint and key from the environment. Missing key is an
    /// authentication failure at startup, before any work happens.
    pub fn from_env() -> Result<Self, ClientError> {
        let api_key = std::env::var(ENV_API_KEY)
            .map_err(|_| ClientError::AuthFailure(format!("{ENV_API_KEY} not set")))?;
        let api_base =
            std::env::var(ENV_API_BASE).unwrap_or_else(|_| "https://api.openai.com/v1".into());
        Ok(LiveConfig { api_base, api_key })
    }
}

enum BackendImpl {
    Mock(MockScript),
    Live(LiveConfig, ureq::Agent),
}

/// Counting semaphore bounding simultaneous in-flight requests.
struct InFlightLimiter {
    available: Mutex<usize>,
    cv: Condvar,
}

impl InFlightLimiter {
    fn new(max: usize) -> Self {
        InFlightLimiter {
            available: Mutex::new(max.max(1)),
            cv: Condvar::new(),
        }
    }
    fn acquire(&self) {
        let mut n = self.available.lock().unwrap();
        while *n == 0 {
            n = self.cv.wait(n).unwrap();
        }
        *n -= 1;
    }
    fn release(&self) {
        *self.available.lock().unwrap() += 1;
        self.cv.notify_one();
    }
}

pub struct ModelClient {
    backend: BackendImpl,
    cache_dir: Option<PathBuf>,
    limiter: InFlightLimiter,
    counters: Mutex<HashMap<String, u64>>,
}

impl ModelClient {
    pub fn mock(script: MockScript) -> Self {
        ModelClient {
            backend: BackendImpl::Mock(script),
            cache_dir: None,
            limiter: InFlightLimiter::new(usize::MAX - 1),
            counters: Mutex::new(HashMap::new()),
        }
    }

    pub fn live(
        cfg: LiveConfig,
        max_in_flight: usize,
        cache_dir: Option<PathBuf>,
    ) -> Result<Self, ClientError> {
        if cfg.api_key.is_empty() {
            return Err(ClientError::AuthFailure("empty API key".into()));
        }
        if let Some(dir) = &cache_dir {
            fs::create_dir_all(dir).map_err(|e| ClientError::CacheIo(e.to_string()))?;
        }
        Ok(ModelClient {
            backend: BackendImpl::Live(cfg, ureq::Agent::new_with_defaults()),
            cache_dir,
            limiter: InFlightLimiter::new(max_in_flight),
            counters: Mutex::new(HashMap::new()),
        })
    }

    /// Attach an on-disk response cache (used for live runs; harmless but
    /// pointless for the mock, which is already deterministic).
    pub fn with_cache(mut self, dir: PathBuf) -> Result<Self, ClientError> {
        fs::create_dir_all(&dir).map_err(|e| ClientError::CacheIo(e.to_string()))?;
        self.cache_dir = Some(dir);
        Ok(self)
    }

    /// Complete a chat request, returning the model text.
    pub fn complete(&self, req: &ChatRequest) -> Result<String, ClientError> {
        req.validate()?;
        let fp = fingerprint(req);
        let ordinal = {
            let mut counters = self.counters.lock().unwrap();
            let slot = counters.entry(fp.clone()).or_insert(0);
            let o = *slot;
            *slot += 1;
            o
        };
        if let Some(dir) = &self.cache_dir {
            let path = dir.join(format!("{fp}-{ordinal}.txt"));
            if let Ok(text) = fs::read_to_string(&path) {
                return Ok(text);
            }
        }
        self.limiter.acquire();
        let result = match &self.backend {
            BackendImpl::Mock(script) => script.respond(&fp, ordinal),
            BackendImpl::Live(cfg, agent) => live_complete(cfg, agent, req),
        };
        self.limiter.release();
        let text = result?;
        if let Some(dir) = &self.cache_dir {
            let path = dir.join(format!("{fp}-{ordinal}.txt"));
            let tmp = dir.join(format!("{fp}-{ordinal}.tmp"));
            fs::write(&tmp, &text).map_err(|e| ClientError::CacheIo(e.to_string()))?;
            fs::rename(&tmp, &path).map_err(|e| ClientError::CacheIo(e.to_string()))?;
        }
        Ok(text)
    }

    /// Total number of backend-or-cache completions issued so far.
    pub fn call_count(&self) -> u64 {
        self.counters.lock().unwrap().values().sum()
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    content: String,
}

fn live_complete(
    cfg: &LiveConfig,
    agent: &ureq::Agent,
    req: &ChatRequest,
) -> Result<String, ClientError> {
    let url = format!("{}/chat/completions", cfg.api_base.trim_end_matches('/'));
    let body = WireRequest {
        model: &req.model_name,
        messages: &req.messages,
        temperature: req.temperature,
        max_tokens: req.max_output_tokens,
    };
    let mut last_err = String::new();
    for attempt in 0..MAX_ATTEMPTS {
        if attempt > 0 {
            let backoff = Duration::from_millis(250 * (1 << (attempt - 1)));
            std::thread::sleep(backoff);
        }
        let sent = agent
            .post(&url)
            .header("Authorization", &format!("Bearer {}", cfg.api_key))
            .send_json(&body);
        match sent {
            Ok(mut resp) => {
                let parsed: Result<WireResponse, _> = resp.body_mut().read_json();
                match parsed {
                    Ok(wire) => {
                        return wire
                            .choices
                            .into_iter()
                            .next()
                            .map(|c| c.message.content)
                            .ok_or_else(|| {
                                ClientError::TransportExhausted("empty choices".into())
                            });
                    }
                    Err(e) => last_err = format!("body decode: {e}"),
                }
            }
            Err(ureq::Error::StatusCode(code)) if code == 401 || code == 403 => {
                return Err(ClientError::AuthFailure(format!("HTTP {code}")));
            }
            // Retry rate limits and server errors.
            Err(ureq::Error::StatusCode(code)) if code == 429 || code >= 500 => {
                last_err = format!("HTTP {code}");
            }
            Err(ureq::Error::StatusCode(code)) => {
                return Err(ClientError::TransportExhausted(format!("HTTP {code}")));
            }
            Err(e) => last_err = e.to_string(),
        }
    }
    Err(ClientError::TransportExhausted(last_err))
}

/// Save a mock script with entries sorted for stable diffs.
pub fn save_script_sorted(script: &MockScript, path: &Path) -> Result<(), String> {
    let mut sorted = script.clone();
    sorted
        .entries
        .sort_by(|a, b| (a.tag, &a.fingerprint).cmp(&(b.tag, &b.fingerprint)));
    sorted.save(path)
}

/// Group entry counts by tag, for stats output.
pub fn entries_by_tag(script: &MockScript) -> BTreeMap<String, usize> {
    let mut map = BTreeMap::new();
    for e in &script.entries {
        *map.entry(e.tag.as_str().to_string()).or_insert(0) += 1;
    }
    map
}
