//! External-judge annotation client.
//!
//! Requests are content-addressed by a SHA-256 of their canonical JSON form.
//! [`ReplayBackend`] serves stored responses from `<hash>.txt` files and never
//! invents text; [`RemoteBackend`] calls an HTTP endpoint through a
//! [`Transport`], retrying transient failures with exponential backoff,
//! rejecting responses that do not parse for the request's task, and caching
//! accepted responses by request hash.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::PathBuf;
use std::sync::RwLock;
use std::thread;
use std::time::{Duration, Instant};

use judgekit_core::parser::parse_judgment;
use judgekit_core::schema::TaskKind;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const ENDPOINT_VAR: &str = "JUDGE_ENDPOINT";
pub const API_KEY_VAR: &str = "JUDGE_API_KEY";

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error("no fixture for request {hash}")]
    Miss { hash: String },
    #[error("transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("response rejected after {attempts} attempt(s): {message}")]
    InvalidResponse { attempts: u32, message: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Prompt template identifier for each task.
pub fn template_for(task: TaskKind) -> &'static str {
    match task {
        TaskKind::T1PairwisePreference => "utterance-preference-v1",
        TaskKind::T2QualityAssessment => "quality-assessment-v1",
        TaskKind::T3ScenarioPreference => "scenario-preference-v1",
        TaskKind::T4DialoguePreference => "dialogue-preference-v1",
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub task: TaskKind,
    pub template_id: String,
    /// Opaque named text blocks (target text, context, candidate references).
    pub payload: BTreeMap<String, String>,
}

impl JudgeRequest {
    pub fn new(task: TaskKind, payload: BTreeMap<String, String>) -> Self {
        JudgeRequest { task, template_id: template_for(task).to_string(), payload }
    }

    pub fn validate(&self) -> Result<(), AnnotateError> {
        if self.template_id != template_for(self.task) {
            return Err(AnnotateError::InvalidRequest(format!(
                "template `{}` does not belong to task {}",
                self.template_id, self.task
            )));
        }
        Ok(())
    }

    /// Canonical JSON: fixed field order, payload keys sorted.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("request serializes")
    }

    /// Lowercase hex SHA-256 of [`canonical_json`](Self::canonical_json).
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Replay,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeResponse {
    pub raw_text: String,
    pub latency: Duration,
    pub source: Source,
    /// Transport calls made for this response; 0 when served from cache or fixtures.
    pub attempts: u32,
}

pub trait Backend: Send + Sync {
    fn annotate(&self, req: &JudgeRequest) -> Result<JudgeResponse, AnnotateError>;
}

/// Offline backend over a directory of `<hash>.txt` fixtures.
#[derive(Debug, Clone)]
pub struct ReplayBackend {
    dir: PathBuf,
}

impl ReplayBackend {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ReplayBackend { dir: dir.into() }
    }

    pub fn fixture_path(&self, req: &JudgeRequest) -> PathBuf {
        self.dir.join(format!("{}.txt", req.hash()))
    }

    /// Stores `raw_text` as the fixture for `req`.
    pub fn record(&self, req: &JudgeRequest, raw_text: &str) -> Result<PathBuf, AnnotateError> {
        req.validate()?;
        fs::create_dir_all(&self.dir)?;
        let path = self.fixture_path(req);
        fs::write(&path, raw_text)?;
        Ok(path)
    }
}

impl Backend for ReplayBackend {
    fn annotate(&self, req: &JudgeRequest) -> Result<JudgeResponse, AnnotateError> {
        req.validate()?;
        let start = Instant::now();
        let path = self.fixture_path(req);
        match fs::read_to_string(&path) {
            Ok(raw_text) if !raw_text.is_empty() => Ok(JudgeResponse {
                raw_text,
                latency: start.elapsed(),
                source: Source::Replay,
                attempts: 0,
            }),
            Ok(_) => Err(AnnotateError::Miss { hash: req.hash() }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(AnnotateError::Miss { hash: req.hash() }),
            Err(e) => Err(e.into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportError {
    pub transient: bool,
    pub message: String,
}

/// One request/response exchange with the judge endpoint.
pub trait Transport: Send + Sync {
    fn send(&self, body: &str) -> Result<String, TransportError>;
}

/// Blocking HTTP POST of a JSON body; the response body is the raw judgment.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    endpoint: String,
    api_key: Option<String>,
}

impl HttpTransport {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Result<Self, AnnotateError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| AnnotateError::Config(e.to_string()))?;
        Ok(HttpTransport { client, endpoint: endpoint.into(), api_key })
    }

    /// Reads the endpoint and optional key from `JUDGE_ENDPOINT` / `JUDGE_API_KEY`.
    pub fn from_env(timeout: Duration) -> Result<Self, AnnotateError> {
        let endpoint = std::env::var(ENDPOINT_VAR).map_err(|_| AnnotateError::Config(format!("{ENDPOINT_VAR} is not set")))?;
        Self::new(endpoint, std::env::var(API_KEY_VAR).ok(), timeout)
    }
}

impl Transport for HttpTransport {
    fn send(&self, body: &str) -> Result<String, TransportError> {
        let mut req = self
            .client
            .post(&self.endpoint)
            .header("content-type", "application/json")
            .body(body.to_string());
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| TransportError { transient: true, message: e.to_string() })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| TransportError { transient: true, message: e.to_string() })?;
        if status.is_success() {
            Ok(text)
        } else {
            Err(TransportError {
                transient: status.is_server_error() || status.as_u16() == 429,
                message: format!("HTTP {status}"),
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 4, base_delay: Duration::from_millis(250), max_delay: Duration::from_secs(8) }
    }
}

impl RetryPolicy {
    /// Delay before attempt `attempt + 1` (1-based `attempt`).
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt.saturating_sub(1)).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

pub struct RemoteBackend<T> {
    transport: T,
    retry: RetryPolicy,
    cache: RwLock<HashMap<String, String>>,
}

impl<T: Transport> RemoteBackend<T> {
    pub fn new(transport: T, retry: RetryPolicy) -> Self {
        RemoteBackend { transport, retry, cache: RwLock::new(HashMap::new()) }
    }

    pub fn cached(&self, req: &JudgeRequest) -> Option<String> {
        self.cache.read().expect("cache lock").get(&req.hash()).cloned()
    }

    pub fn cache_len(&self) -> usize {
        self.cache.read().expect("cache lock").len()
    }
}

impl<T: Transport> Backend for RemoteBackend<T> {
    fn annotate(&self, req: &JudgeRequest) -> Result<JudgeResponse, AnnotateError> {
        req.validate()?;
        let start = Instant::now();
        let hash = req.hash();
        if let Some(raw_text) = self.cache.read().expect("cache lock").get(&hash).cloned() {
            return Ok(JudgeResponse { raw_text, latency: start.elapsed(), source: Source::Remote, attempts: 0 });
        }
        let body = req.canonical_json();
        let mut last: Option<AnnotateError> = None;
        for attempt in 1..=self.retry.max_attempts.max(1) {
            if attempt > 1 {
                thread::sleep(self.retry.delay(attempt - 1));
            }
            match self.transport.send(&body) {
                Ok(raw_text) => match parse_judgment(&raw_text, req.task) {
                    Ok(_) => {
                        self.cache.write().expect("cache lock").insert(hash, raw_text.clone());
                        return Ok(JudgeResponse { raw_text, latency: start.elapsed(), source: Source::Remote, attempts: attempt });
                    }
                    Err(e) => last = Some(AnnotateError::InvalidResponse { attempts: attempt, message: e.to_string() }),
                },
                Err(e) if e.transient => last = Some(AnnotateError::Transport { attempts: attempt, message: e.message }),
                Err(e) => return Err(AnnotateError::Transport { attempts: attempt, message: e.message }),
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

/// Annotates every request with at most `parallelism` in flight. Results are
/// in input order and failures are reported per item.
pub fn batch_annotate(
    reqs: &[JudgeRequest],
    backend: &dyn Backend,
    parallelism: usize,
) -> Result<Vec<Result<JudgeResponse, AnnotateError>>, AnnotateError> {
    if parallelism == 0 {
        return Err(AnnotateError::Config("parallelism must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| AnnotateError::Config(e.to_string()))?;
    Ok(pool.install(|| reqs.par_iter().map(|r| backend.annotate(r)).collect()))
}
