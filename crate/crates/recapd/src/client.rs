//! Clients for the four model roles: request construction, transports, retry
//! with exponential backoff, per-endpoint rate limiting, and the response
//! cache.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use base64::Engine as _;
use recap_core::answer::QaAnswer;
use recap_core::hashing::{canonical_json, sha256_hex};
use recap_core::trace::{CallOutput, CallRecord, CallTiming, EndpointIdentity};
use recap_core::{ImageRef, Role};
use serde_json::{json, Value};

use crate::config::{Backend, CliConfig, ConfigError, EndpointConfig};
use crate::mock;
use crate::store::{cache_key, CacheEntry, Store, StoreError};

const B64: base64::engine::GeneralPurpose = base64::engine::general_purpose::STANDARD;
const MAX_BACKOFF: Duration = Duration::from_secs(60);
const MAX_RESPONSE_BYTES: u64 = 256 * 1024 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("{role}: transport error after {attempts} attempt(s): {message}")]
    Transport {
        role: Role,
        attempts: u32,
        message: String,
    },
    #[error("{role}: provider returned HTTP {status} after {attempts} attempt(s): {body}")]
    Provider {
        role: Role,
        status: u16,
        attempts: u32,
        body: String,
    },
    #[error("{role}: empty response")]
    EmptyResponse { role: Role },
    #[error("{role}: response is not a decodable image: {message}")]
    Decode { role: Role, message: String },
    #[error("{role}: malformed response: {message}")]
    Malformed { role: Role, message: String },
    #[error("{role}: unparseable judge answer {raw:?}")]
    UnparseableAnswer { role: Role, raw: String },
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// A failed exchange with the backend, before retry policy is applied.
#[derive(Debug, Clone, PartialEq)]
pub enum TransportFailure {
    /// Connection, timeout or other I/O failure.
    Network(String),
    /// Non-2xx status with the response body.
    Status { status: u16, body: String },
    /// 2xx response whose body is not JSON.
    BadBody(String),
}

impl TransportFailure {
    pub fn retryable(&self) -> bool {
        match self {
            TransportFailure::Network(_) => true,
            TransportFailure::Status { status, .. } => *status == 429 || *status >= 500,
            TransportFailure::BadBody(_) => false,
        }
    }
}

/// One request as handed to a transport.
#[derive(Debug, Clone, Copy)]
pub struct WireRequest<'a> {
    pub role: Role,
    pub body: &'a Value,
    /// SHA-256 of the canonical body.
    pub request_hash: &'a str,
    /// Human-meaningful lookup key for scripted fixtures (image hash for the
    /// captioner, caption for t2i, previous caption for the reviser, query
    /// for the judge).
    pub fixture_key: &'a str,
}

pub trait Transport: Send + Sync {
    /// Sends the request and returns the JSON response body.
    fn send(&self, req: &WireRequest<'_>) -> Result<Value, TransportFailure>;
}

/// OpenAI-compatible HTTP transport (`{base}/chat/completions` or
/// `{base}/images/generations`).
pub struct HttpTransport {
    agent: ureq::Agent,
    url: String,
    token: Option<String>,
}

impl HttpTransport {
    pub fn new(config: &EndpointConfig) -> Result<Self, ConfigError> {
        let path = match config.backend {
            Backend::HttpT2i => "images/generations",
            _ => "chat/completions",
        };
        let url = format!("{}/{path}", config.base_url.trim_end_matches('/'));
        let token = match &config.auth_env {
            Some(var) => Some(std::env::var(var).map_err(|_| ConfigError::MissingSecret {
                role: config.role,
                var: var.clone(),
            })?),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_s)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self { agent, url, token })
    }
}

impl Transport for HttpTransport {
    fn send(&self, req: &WireRequest<'_>) -> Result<Value, TransportFailure> {
        let mut request = self
            .agent
            .post(&self.url)
            .header("content-type", "application/json");
        if let Some(token) = &self.token {
            request = request.header("authorization", format!("Bearer {token}"));
        }
        let mut response = request
            .send(req.body.to_string())
            .map_err(|e| TransportFailure::Network(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .with_config()
            .limit(MAX_RESPONSE_BYTES)
            .read_to_string()
            .map_err(|e| TransportFailure::Network(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(TransportFailure::Status { status, body: text });
        }
        serde_json::from_str(&text).map_err(|e| TransportFailure::BadBody(e.to_string()))
    }
}

/// In-process deterministic backend; see [`crate::mock`].
pub struct MockTransport {
    latency: Duration,
}

impl MockTransport {
    pub fn new(latency: Duration) -> Self {
        Self { latency }
    }
}

impl Transport for MockTransport {
    fn send(&self, req: &WireRequest<'_>) -> Result<Value, TransportFailure> {
        if !self.latency.is_zero() {
            std::thread::sleep(self.latency);
        }
        Ok(mock::respond(req.role, req.body))
    }
}

/// Canned responses from a JSON fixture map.
///
/// Keys are tried in order: request hash, fixture key, then `"*"`. A value
/// is a string (text; base64 image bytes for t2i), an array of such strings
/// served in turn (the last one repeats), or `{"status": 503, "body": "..."}`
/// to simulate a provider error.
pub struct ScriptedTransport {
    fixtures: BTreeMap<String, Value>,
    served: Mutex<HashMap<String, usize>>,
}

impl ScriptedTransport {
    pub fn new(fixtures: BTreeMap<String, Value>) -> Self {
        Self {
            fixtures,
            served: Mutex::new(HashMap::new()),
        }
    }

    pub fn from_file(config: &EndpointConfig) -> Result<Self, ConfigError> {
        let path = config.fixtures.clone().unwrap_or_default();
        let text = fs::read_to_string(&path).map_err(|source| ConfigError::Read {
            path: path.clone(),
            source,
        })?;
        let fixtures = serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
            path,
            message: e.to_string(),
        })?;
        Ok(Self::new(fixtures))
    }
}

impl Transport for ScriptedTransport {
    fn send(&self, req: &WireRequest<'_>) -> Result<Value, TransportFailure> {
        let (key, value) = [req.request_hash, req.fixture_key, "*"]
            .into_iter()
            .find_map(|k| self.fixtures.get_key_value(k))
            .ok_or_else(|| TransportFailure::Status {
                status: 404,
                body: format!(
                    "no fixture for request {} (key {:?})",
                    req.request_hash, req.fixture_key
                ),
            })?;
        let value = match value {
            Value::Array(seq) if !seq.is_empty() => {
                let mut served = self.served.lock().unwrap();
                let n = served.entry(key.clone()).or_default();
                let v = &seq[(*n).min(seq.len() - 1)];
                *n += 1;
                v
            }
            v => v,
        };
        if let Some(status) = value.get("status").and_then(Value::as_u64) {
            return Err(TransportFailure::Status {
                status: status as u16,
                body: value.get("body").map(|b| b.to_string()).unwrap_or_default(),
            });
        }
        let text = value.as_str().ok_or_else(|| {
            TransportFailure::BadBody(format!("fixture {key:?} is not a string"))
        })?;
        Ok(match req.role {
            Role::T2i => json!({ "image": text }),
            _ => mock::chat_response(req.body, text),
        })
    }
}

/// Delays slept before retry `k` (0-based): `base · 2^k`, capped at a
/// minute. Nondecreasing by construction.
pub fn backoff_schedule(base_ms: u64, max_retries: u32) -> Vec<Duration> {
    (0..max_retries)
        .map(|k| {
            let factor = 1u64.checked_shl(k).unwrap_or(u64::MAX);
            Duration::from_millis(base_ms.saturating_mul(factor)).min(MAX_BACKOFF)
        })
        .collect()
}

/// Minimum spacing between request starts plus a cap on concurrent requests.
pub struct Limiter {
    interval: Duration,
    max_in_flight: u32,
    state: Mutex<LimiterState>,
    freed: Condvar,
}

struct LimiterState {
    next_slot: Option<Instant>,
    in_flight: u32,
}

pub struct Permit<'a>(&'a Limiter);

impl Limiter {
    pub fn new(rate_limit_rpm: u32, max_in_flight: u32) -> Self {
        Self {
            interval: Duration::from_secs_f64(60.0 / f64::from(rate_limit_rpm.max(1))),
            max_in_flight: max_in_flight.max(1),
            state: Mutex::new(LimiterState {
                next_slot: None,
                in_flight: 0,
            }),
            freed: Condvar::new(),
        }
    }

    pub fn interval(&self) -> Duration {
        self.interval
    }

    /// Blocks until a request may start.
    pub fn acquire(&self) -> Permit<'_> {
        let mut st = self.state.lock().unwrap();
        while st.in_flight >= self.max_in_flight {
            st = self.freed.wait(st).unwrap();
        }
        st.in_flight += 1;
        let now = Instant::now();
        let start = st.next_slot.map_or(now, |slot| slot.max(now));
        st.next_slot = Some(start + self.interval);
        drop(st);
        let now = Instant::now();
        if start > now {
            std::thread::sleep(start - now);
        }
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut st = self.0.state.lock().unwrap();
        st.in_flight -= 1;
        self.0.freed.notify_one();
    }
}

/// Counters around every transport call of an endpoint.
#[derive(Debug, Default)]
pub struct CallStats {
    calls: AtomicU64,
    in_flight: AtomicU64,
    max_in_flight: AtomicU64,
    starts: Mutex<Vec<Instant>>,
}

impl CallStats {
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn max_in_flight(&self) -> u64 {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    /// Start instants of every transport call, in order.
    pub fn starts(&self) -> Vec<Instant> {
        self.starts.lock().unwrap().clone()
    }

    fn enter(&self) {
        self.starts.lock().unwrap().push(Instant::now());
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
    }

    fn exit(&self) {
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

pub struct Endpoint {
    pub config: EndpointConfig,
    transport: Box<dyn Transport>,
    limiter: Limiter,
    stats: Arc<CallStats>,
}

impl Endpoint {
    pub fn with_transport(config: EndpointConfig, transport: Box<dyn Transport>) -> Self {
        let limiter = Limiter::new(config.rate_limit_rpm, config.max_in_flight);
        Self {
            config,
            transport,
            limiter,
            stats: Arc::default(),
        }
    }

    pub fn from_config(config: EndpointConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let transport: Box<dyn Transport> = match config.backend {
            Backend::HttpChat | Backend::HttpT2i => Box::new(HttpTransport::new(&config)?),
            Backend::Mock => Box::new(MockTransport::new(Duration::from_millis(config.latency_ms))),
            Backend::Scripted => Box::new(ScriptedTransport::from_file(&config)?),
        };
        Ok(Self::with_transport(config, transport))
    }

    pub fn stats(&self) -> Arc<CallStats> {
        Arc::clone(&self.stats)
    }

    pub fn identity(&self) -> EndpointIdentity {
        EndpointIdentity {
            role: self.config.role,
            backend: self.config.backend.to_string(),
            model_name: self.config.model_name.clone(),
        }
    }

    /// Sends with retries; returns the response and the attempt count.
    fn send_with_retry(&self, req: &WireRequest<'_>) -> Result<(Value, u32), ClientError> {
        let delays = backoff_schedule(self.config.backoff_base_ms, self.config.max_retries);
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            let result = {
                let _permit = self.limiter.acquire();
                self.stats.enter();
                let r = self.transport.send(req);
                self.stats.exit();
                r
            };
            match result {
                Ok(v) => return Ok((v, attempts)),
                Err(f) if f.retryable() && attempts <= self.config.max_retries => {
                    let delay = delays[(attempts - 1) as usize];
                    log::warn!(
                        "{}: attempt {attempts} failed ({f:?}); retrying in {delay:?}",
                        req.role
                    );
                    std::thread::sleep(delay);
                }
                Err(TransportFailure::Network(message)) => {
                    return Err(ClientError::Transport {
                        role: req.role,
                        attempts,
                        message,
                    })
                }
                Err(TransportFailure::Status { status, body }) => {
                    return Err(ClientError::Provider {
                        role: req.role,
                        status,
                        attempts,
                        body,
                    })
                }
                Err(TransportFailure::BadBody(message)) => {
                    return Err(ClientError::Malformed {
                        role: req.role,
                        message,
                    })
                }
            }
        }
    }
}

/// Output of one client operation with its trace record and timing.
#[derive(Debug, Clone)]
pub struct Called<T> {
    pub value: T,
    pub record: CallRecord,
    pub timing: CallTiming,
}

/// OpenAI-style chat body with the images first (in the given order) and the
/// prompt text last.
pub fn chat_body(model: &str, prompt: &str, images: &[(&ImageRef, &[u8])]) -> Value {
    let content: Value = if images.is_empty() {
        Value::String(prompt.to_string())
    } else {
        let mut parts: Vec<Value> = images
            .iter()
            .map(|(image, bytes)| {
                json!({
                    "type": "image_url",
                    "image_url": {"url": image.data_url(&B64.encode(bytes))}
                })
            })
            .collect();
        parts.push(json!({"type": "text", "text": prompt}));
        Value::Array(parts)
    };
    json!({
        "model": model,
        "messages": [{"role": "user", "content": content}],
        "temperature": 0
    })
}

/// `{"prompt": caption, "seed": seed?}`
pub fn t2i_body(caption: &str, seed: Option<u64>) -> Value {
    match seed {
        Some(seed) => json!({"prompt": caption, "seed": seed}),
        None => json!({"prompt": caption}),
    }
}

fn chat_text(role: Role, response: &Value) -> Result<String, ClientError> {
    let content = &response["choices"][0]["message"]["content"];
    let text = match content {
        Value::String(s) => s.clone(),
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p["text"].as_str())
            .collect::<Vec<_>>()
            .join(""),
        Value::Null => {
            return Err(ClientError::Malformed {
                role,
                message: "no choices[0].message.content".into(),
            })
        }
        other => {
            return Err(ClientError::Malformed {
                role,
                message: format!("unexpected content {other}"),
            })
        }
    };
    if text.trim().is_empty() {
        return Err(ClientError::EmptyResponse { role });
    }
    Ok(text)
}

fn image_payload(response: &Value) -> Option<&str> {
    response["image"]
        .as_str()
        .or_else(|| response["data"][0]["b64_json"].as_str())
}

/// All configured endpoints plus the store they read images from and record
/// responses to.
pub struct Clients {
    endpoints: BTreeMap<Role, Endpoint>,
    store: Store,
    cache_enabled: bool,
}

impl Clients {
    pub fn new(endpoints: impl IntoIterator<Item = Endpoint>, store: Store, cache_enabled: bool) -> Self {
        Self {
            endpoints: endpoints.into_iter().map(|e| (e.config.role, e)).collect(),
            store,
            cache_enabled,
        }
    }

    pub fn from_config(config: &CliConfig, store: Store) -> Result<Self, ConfigError> {
        let endpoints = config
            .endpoints
            .values()
            .cloned()
            .map(Endpoint::from_config)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::new(endpoints, store, config.cache))
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn endpoint(&self, role: Role) -> Result<&Endpoint, ClientError> {
        self.endpoints
            .get(&role)
            .ok_or(ClientError::Config(ConfigError::MissingRole(role)))
    }

    pub fn require(&self, roles: &[Role]) -> Result<(), ClientError> {
        roles.iter().try_for_each(|&r| self.endpoint(r).map(drop))
    }

    pub fn stats(&self, role: Role) -> Option<Arc<CallStats>> {
        self.endpoints.get(&role).map(Endpoint::stats)
    }

    /// Transport calls across all endpoints.
    pub fn total_calls(&self) -> u64 {
        self.endpoints.values().map(|e| e.stats.calls()).sum()
    }

    pub fn identities(&self, roles: &[Role]) -> Vec<EndpointIdentity> {
        roles
            .iter()
            .filter_map(|r| self.endpoints.get(r))
            .map(Endpoint::identity)
            .collect()
    }

    /// Cache lookup, then transport with retries. The response is recorded
    /// in the cache before the caller parses it.
    fn call(
        &self,
        role: Role,
        body: &Value,
        fixture_key: &str,
        repeat: u32,
    ) -> Result<(Value, CallTiming, u32, String), ClientError> {
        let ep = self.endpoint(role)?;
        let canonical = canonical_json(body);
        let request_hash = sha256_hex(canonical.as_bytes());
        let key = cache_key(role, &ep.config.model_name, &canonical, repeat);
        if self.cache_enabled {
            if let Some(hit) = self.store.cache_lookup(&key)? {
                let timing = CallTiming {
                    request_hash: request_hash.clone(),
                    latency_ms: 0,
                    from_cache: true,
                };
                return Ok((hit.response, timing, hit.attempts, request_hash));
            }
        }
        let started = Instant::now();
        let req = WireRequest {
            role,
            body,
            request_hash: &request_hash,
            fixture_key,
        };
        let (response, attempts) = ep.send_with_retry(&req)?;
        self.store.cache_put(
            &key,
            &CacheEntry {
                role,
                model: ep.config.model_name.clone(),
                request_hash: request_hash.clone(),
                attempts,
                response: response.clone(),
            },
        )?;
        let timing = CallTiming {
            request_hash: request_hash.clone(),
            latency_ms: started.elapsed().as_millis() as u64,
            from_cache: false,
        };
        Ok((response, timing, attempts, request_hash))
    }

    fn text_call(
        &self,
        role: Role,
        body: &Value,
        fixture_key: &str,
        repeat: u32,
    ) -> Result<Called<String>, ClientError> {
        let (response, timing, attempts, request_hash) = self.call(role, body, fixture_key, repeat)?;
        let text = chat_text(role, &response)?;
        Ok(Called {
            record: CallRecord {
                role,
                request_hash,
                output: CallOutput::Text { text: text.clone() },
                attempts,
            },
            value: text,
            timing,
        })
    }

    fn image_bytes(&self, image: &ImageRef) -> Result<Vec<u8>, ClientError> {
        Ok(self.store.get_blob(&image.hash)?)
    }

    /// Initial caption for `image`.
    pub fn caption_image(&self, image: &ImageRef, prompt: &str) -> Result<Called<String>, ClientError> {
        if prompt.trim().is_empty() {
            return Err(ClientError::Precondition("captioning prompt is empty".into()));
        }
        let ep = self.endpoint(Role::Captioner)?;
        let bytes = self.image_bytes(image)?;
        let body = chat_body(&ep.config.model_name, prompt, &[(image, &bytes)]);
        let mut called = self.text_call(Role::Captioner, &body, &image.hash, 0)?;
        called.value = called.value.trim().to_string();
        Ok(called)
    }

    /// Renders `caption` into an image and stores it.
    pub fn generate_image(&self, caption: &str, seed: Option<u64>) -> Result<Called<ImageRef>, ClientError> {
        if caption.trim().is_empty() {
            return Err(ClientError::Precondition("caption for reconstruction is empty".into()));
        }
        self.endpoint(Role::T2i)?;
        let body = t2i_body(caption, seed);
        let (response, timing, attempts, request_hash) = self.call(Role::T2i, &body, caption, 0)?;
        let payload = image_payload(&response).ok_or_else(|| ClientError::Malformed {
            role: Role::T2i,
            message: "no image or data[0].b64_json field".into(),
        })?;
        let bytes = B64.decode(payload.trim()).map_err(|e| ClientError::Decode {
            role: Role::T2i,
            message: e.to_string(),
        })?;
        let image = self.store.put_image(&bytes).map_err(|e| match e {
            StoreError::NotAnImage(message) => ClientError::Decode {
                role: Role::T2i,
                message,
            },
            other => other.into(),
        })?;
        Ok(Called {
            record: CallRecord {
                role: Role::T2i,
                request_hash,
                output: CallOutput::Image {
                    image: image.clone(),
                },
                attempts,
            },
            value: image,
            timing,
        })
    }

    /// Raw reviser text for the (original, reconstruction) image pair.
    /// `repeat > 0` marks a deliberate re-ask of an identical request.
    pub fn revise_caption(
        &self,
        original: &ImageRef,
        reconstruction: &ImageRef,
        rendered_prompt: &str,
        prev_caption: &str,
        repeat: u32,
    ) -> Result<Called<String>, ClientError> {
        if rendered_prompt.trim().is_empty() {
            return Err(ClientError::Precondition("refinement prompt is empty".into()));
        }
        let ep = self.endpoint(Role::Reviser)?;
        let a = self.image_bytes(original)?;
        let b = self.image_bytes(reconstruction)?;
        let body = chat_body(
            &ep.config.model_name,
            rendered_prompt,
            &[(original, &a), (reconstruction, &b)],
        );
        self.text_call(Role::Reviser, &body, prev_caption, repeat)
    }

    /// Raw judge text for `prompt`; `fixture_key` names the query.
    pub fn judge(&self, prompt: &str, fixture_key: &str) -> Result<Called<String>, ClientError> {
        let ep = self.endpoint(Role::Judge)?;
        let body = chat_body(&ep.config.model_name, prompt, &[]);
        self.text_call(Role::Judge, &body, fixture_key, 0)
    }

    /// Judge answer to `question` about `caption`, normalised to yes/no/n/a.
    pub fn judge_qa(&self, prompt: &str, question: &str) -> Result<(QaAnswer, Called<String>), ClientError> {
        let called = self.judge(prompt, question)?;
        let answer = QaAnswer::normalize(&called.value).map_err(|e| ClientError::UnparseableAnswer {
            role: Role::Judge,
            raw: e.raw,
        })?;
        Ok((answer, called))
    }
}
