//! Language-model access: an OpenAI-compatible chat client and a
//! record/replay transcript keyed by request content.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const ENV_API_KEY: &str = "CFX_LLM_API_KEY";
pub const ENV_BASE_URL: &str = "CFX_LLM_BASE_URL";
pub const ENV_MODEL: &str = "CFX_LLM_MODEL";

pub const DEFAULT_BASE_URL: &str = "https://api.openai.com";
pub const DEFAULT_MODEL: &str = "gpt-4o";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);
pub const DEFAULT_MAX_TOKENS: u32 = 2048;
pub const DEFAULT_CONCURRENCY: usize = 4;
pub const MAX_RETRIES: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    ExtractCauses,
    Explanation,
    TotMerge,
    FinalExample,
    EvalTable,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::ExtractCauses,
        Stage::Explanation,
        Stage::TotMerge,
        Stage::FinalExample,
        Stage::EvalTable,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::ExtractCauses => "extract_causes",
            Stage::Explanation => "explanation",
            Stage::TotMerge => "tot_merge",
            Stage::FinalExample => "final_example",
            Stage::EvalTable => "eval_table",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub stage: Stage,
    pub system_text: String,
    pub user_text: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    /// Temperature 0 and the default token budget.
    pub fn new(stage: Stage, system_text: impl Into<String>, user_text: impl Into<String>) -> Self {
        Self {
            stage,
            system_text: system_text.into(),
            user_text: user_text.into(),
            temperature: 0.0,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.user_text.trim().is_empty() {
            return Err(LlmError::InvalidRequest("user_text is empty".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(LlmError::InvalidRequest("temperature must be a nonnegative number".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub usage: Usage,
    pub backend_id: String,
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("request timed out")]
    Timeout,
    #[error("transport: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("no recorded response for request {key}; canonical request:\n{canonical}")]
    ReplayMiss { key: String, canonical: String },
    #[error("transcript {path}: {message}")]
    Transcript { path: String, message: String },
    #[error("{0}")]
    Other(String),
}

/// Serialized request fields in sorted-key JSON; no metadata participates.
pub fn canonical_json(req: &ChatRequest) -> String {
    // serde_json maps are ordered by key
    serde_json::json!({
        "stage": req.stage.as_str(),
        "system_text": req.system_text,
        "user_text": req.user_text,
        "temperature": req.temperature,
        "max_tokens": req.max_tokens,
    })
    .to_string()
}

/// Hex SHA-256 of [`canonical_json`].
pub fn canonical_key(req: &ChatRequest) -> String {
    hex::encode(Sha256::digest(canonical_json(req).as_bytes()))
}

pub trait LanguageModel: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<Completion, LlmError>;
}

#[derive(Debug)]
pub enum TransportError {
    Timeout,
    Other(String),
}

/// One JSON POST; returns the status code and body.
pub trait HttpTransport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        bearer: &str,
        body: &serde_json::Value,
        timeout: Duration,
    ) -> Result<(u16, String), TransportError>;
}

pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new() -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        Ok(Self { client })
    }
}

impl HttpTransport for ReqwestTransport {
    fn post_json(
        &self,
        url: &str,
        bearer: &str,
        body: &serde_json::Value,
        timeout: Duration,
    ) -> Result<(u16, String), TransportError> {
        let map = |e: reqwest::Error| {
            if e.is_timeout() {
                TransportError::Timeout
            } else {
                TransportError::Other(e.to_string())
            }
        };
        let resp = self
            .client
            .post(url)
            .bearer_auth(bearer)
            .timeout(timeout)
            .json(body)
            .send()
            .map_err(map)?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(map)?;
        Ok((status, text))
    }
}

/// Client for `POST {base}/v1/chat/completions`.
pub struct OpenAiClient {
    transport: Box<dyn HttpTransport>,
    base_url: String,
    model: String,
    api_key: String,
    pub timeout: Duration,
    pub max_retries: u32,
    /// First retry delay; doubles per attempt.
    pub backoff: Duration,
}

impl OpenAiClient {
    pub fn new(
        transport: Box<dyn HttpTransport>,
        base_url: impl Into<String>,
        model: impl Into<String>,
        api_key: impl Into<String>,
    ) -> Self {
        Self {
            transport,
            base_url: base_url.into().trim_end_matches('/').to_string(),
            model: model.into(),
            api_key: api_key.into(),
            timeout: DEFAULT_TIMEOUT,
            max_retries: MAX_RETRIES,
            backoff: Duration::from_millis(500),
        }
    }

    /// Reads the credential, endpoint and model name from the environment.
    pub fn from_env() -> Result<Self, LlmError> {
        let api_key = std::env::var(ENV_API_KEY)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| LlmError::Config(format!("{ENV_API_KEY} is not set")))?;
        let base = std::env::var(ENV_BASE_URL).unwrap_or_else(|_| DEFAULT_BASE_URL.into());
        let model = std::env::var(ENV_MODEL).unwrap_or_else(|_| DEFAULT_MODEL.into());
        Ok(Self::new(Box::new(ReqwestTransport::new()?), base, model, api_key))
    }

    pub fn id(&self) -> String {
        format!("openai:{}", self.model)
    }

    fn payload(&self, req: &ChatRequest) -> serde_json::Value {
        let mut messages = Vec::new();
        if !req.system_text.is_empty() {
            messages.push(serde_json::json!({"role": "system", "content": req.system_text}));
        }
        messages.push(serde_json::json!({"role": "user", "content": req.user_text}));
        serde_json::json!({
            "model": self.model,
            "messages": messages,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        })
    }

    fn parse(&self, body: &str) -> Result<Completion, LlmError> {
        let v: serde_json::Value =
            serde_json::from_str(body).map_err(|e| LlmError::Malformed(e.to_string()))?;
        let text = v["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| LlmError::Malformed("missing choices[0].message.content".into()))?;
        let usage = Usage {
            prompt_tokens: v["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
            completion_tokens: v["usage"]["completion_tokens"].as_u64().unwrap_or(0),
        };
        Ok(Completion {
            text: text.to_string(),
            usage,
            backend_id: self.id(),
        })
    }
}

fn retryable(status: u16) -> bool {
    status == 429 || (500..600).contains(&status)
}

impl LanguageModel for OpenAiClient {
    fn complete(&self, req: &ChatRequest) -> Result<Completion, LlmError> {
        req.validate()?;
        let url = format!("{}/v1/chat/completions", self.base_url);
        let body = self.payload(req);
        let mut attempt = 0;
        loop {
            let err = match self.transport.post_json(&url, &self.api_key, &body, self.timeout) {
                Ok((status, text)) if (200..300).contains(&status) => return self.parse(&text),
                Ok((status, text)) => {
                    let err = LlmError::Http { status, body: text };
                    if !retryable(status) {
                        return Err(err);
                    }
                    err
                }
                Err(TransportError::Timeout) => LlmError::Timeout,
                Err(TransportError::Other(m)) => return Err(LlmError::Transport(m)),
            };
            if attempt >= self.max_retries {
                return Err(err);
            }
            log::warn!("{}: {err}; retry {} of {}", req.stage, attempt + 1, self.max_retries);
            std::thread::sleep(self.backoff * 2u32.pow(attempt));
            attempt += 1;
        }
    }
}

/// Answers from a closure; used for scripted runs and tests.
pub struct FnModel<F>(pub F);

impl<F> LanguageModel for FnModel<F>
where
    F: Fn(&ChatRequest) -> Result<String, LlmError> + Send + Sync,
{
    fn complete(&self, req: &ChatRequest) -> Result<Completion, LlmError> {
        Ok(Completion {
            text: (self.0)(req)?,
            usage: Usage::default(),
            backend_id: "scripted".into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub key: String,
    pub stage: Stage,
    pub system: String,
    pub user: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub response: String,
    pub ts: String,
}

impl TranscriptEntry {
    pub fn request(&self) -> ChatRequest {
        ChatRequest {
            stage: self.stage,
            system_text: self.system.clone(),
            user_text: self.user.clone(),
            temperature: self.temperature,
            max_tokens: self.max_tokens,
        }
    }
}

/// Append-only JSONL store of request/response pairs with unique keys.
#[derive(Debug, Default)]
pub struct Transcript {
    path: Option<PathBuf>,
    entries: HashMap<String, TranscriptEntry>,
    order: Vec<String>,
}

impl Transcript {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Loads `path`, or starts empty if it does not exist. Every entry's key
    /// must match its request fields.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, LlmError> {
        let path = path.as_ref().to_path_buf();
        let err = |message: String| LlmError::Transcript {
            path: path.display().to_string(),
            message,
        };
        let mut t = Transcript {
            path: Some(path.clone()),
            ..Default::default()
        };
        if !path.exists() {
            return Ok(t);
        }
        let file = File::open(&path).map_err(|e| err(e.to_string()))?;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| err(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: TranscriptEntry =
                serde_json::from_str(&line).map_err(|e| err(format!("line {}: {e}", i + 1)))?;
            let expected = canonical_key(&entry.request());
            if entry.key != expected {
                return Err(err(format!(
                    "line {}: key {} does not match its request (expected {expected})",
                    i + 1,
                    entry.key
                )));
            }
            t.insert(entry);
        }
        Ok(t)
    }

    /// Must exist on disk.
    pub fn open_existing(path: impl AsRef<Path>) -> Result<Self, LlmError> {
        let p = path.as_ref();
        if !p.exists() {
            return Err(LlmError::Transcript {
                path: p.display().to_string(),
                message: "file not found".into(),
            });
        }
        Self::open(p)
    }

    fn insert(&mut self, entry: TranscriptEntry) {
        if !self.entries.contains_key(&entry.key) {
            self.order.push(entry.key.clone());
            self.entries.insert(entry.key.clone(), entry);
        }
    }

    pub fn get(&self, key: &str) -> Option<&TranscriptEntry> {
        self.entries.get(key)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &TranscriptEntry> {
        self.order.iter().map(|k| &self.entries[k])
    }

    /// Adds the entry and appends it to the backing file. An existing key wins.
    pub fn append(&mut self, entry: TranscriptEntry) -> Result<&TranscriptEntry, LlmError> {
        if self.entries.contains_key(&entry.key) {
            return Ok(&self.entries[&entry.key]);
        }
        if let Some(path) = &self.path {
            let err = |e: std::io::Error| LlmError::Transcript {
                path: path.display().to_string(),
                message: e.to_string(),
            };
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(err)?;
            }
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(err)?;
            let line = serde_json::to_string(&entry).expect("entry serializes");
            writeln!(f, "{line}").map_err(err)?;
        }
        let key = entry.key.clone();
        self.insert(entry);
        Ok(&self.entries[&key])
    }
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        SemaphoreGuard(self)
    }
}

struct SemaphoreGuard<'a>(&'a Semaphore);

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Live,
    Record,
    #[default]
    Replay,
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "live" => Ok(Mode::Live),
            "record" => Ok(Mode::Record),
            "replay" => Ok(Mode::Replay),
            _ => Err(format!("unknown llm mode `{s}` (expected live, record or replay)")),
        }
    }
}

/// A language model wrapped in live, record or replay behavior.
pub struct Backend {
    mode: Mode,
    inner: Option<Arc<dyn LanguageModel>>,
    transcript: Option<Mutex<Transcript>>,
    in_flight: Semaphore,
    upstream_calls: AtomicUsize,
}

impl Backend {
    pub fn live(model: Arc<dyn LanguageModel>) -> Self {
        Self::build(Mode::Live, Some(model), None)
    }

    pub fn record(model: Arc<dyn LanguageModel>, transcript: Transcript) -> Self {
        Self::build(Mode::Record, Some(model), Some(transcript))
    }

    /// Holds no model at all, so it cannot reach the network.
    pub fn replay(transcript: Transcript) -> Self {
        Self::build(Mode::Replay, None, Some(transcript))
    }

    fn build(mode: Mode, inner: Option<Arc<dyn LanguageModel>>, transcript: Option<Transcript>) -> Self {
        Self {
            mode,
            inner,
            transcript: transcript.map(Mutex::new),
            in_flight: Semaphore::new(DEFAULT_CONCURRENCY),
            upstream_calls: AtomicUsize::new(0),
        }
    }

    pub fn with_concurrency(mut self, n: usize) -> Self {
        self.in_flight = Semaphore::new(n);
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Number of requests forwarded to the wrapped model.
    pub fn upstream_calls(&self) -> usize {
        self.upstream_calls.load(Ordering::SeqCst)
    }

    fn call_inner(&self, req: &ChatRequest) -> Result<Completion, LlmError> {
        let inner = self.inner.as_ref().expect("live and record backends hold a model");
        let _slot = self.in_flight.acquire();
        self.upstream_calls.fetch_add(1, Ordering::SeqCst);
        inner.complete(req)
    }

    fn lookup(&self, key: &str) -> Option<Completion> {
        let t = self.transcript.as_ref()?.lock().unwrap();
        t.get(key).map(|e| Completion {
            text: e.response.clone(),
            usage: Usage::default(),
            backend_id: "replay".into(),
        })
    }
}

impl LanguageModel for Backend {
    fn complete(&self, req: &ChatRequest) -> Result<Completion, LlmError> {
        req.validate()?;
        match self.mode {
            Mode::Live => self.call_inner(req),
            Mode::Replay => {
                let key = canonical_key(req);
                self.lookup(&key).ok_or_else(|| LlmError::ReplayMiss {
                    key,
                    canonical: canonical_json(req),
                })
            }
            Mode::Record => {
                let key = canonical_key(req);
                if let Some(hit) = self.lookup(&key) {
                    return Ok(hit);
                }
                let completion = self.call_inner(req)?;
                let entry = TranscriptEntry {
                    key,
                    stage: req.stage,
                    system: req.system_text.clone(),
                    user: req.user_text.clone(),
                    temperature: req.temperature,
                    max_tokens: req.max_tokens,
                    response: completion.text.clone(),
                    ts: chrono::Utc::now().to_rfc3339(),
                };
                let mut t = self.transcript.as_ref().expect("record backend has a transcript").lock().unwrap();
                let stored = t.append(entry)?;
                Ok(Completion {
                    text: stored.response.clone(),
                    ..completion
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicU32;

    fn req(user: &str) -> ChatRequest {
        ChatRequest::new(Stage::ExtractCauses, "sys", user)
    }

    #[test]
    fn keys_are_stable_and_content_sensitive() {
        assert_eq!(canonical_key(&req("abc")), canonical_key(&req("abc")));
        assert_ne!(canonical_key(&req("abc")), canonical_key(&req("abd")));
        assert_ne!(canonical_key(&req("abc")), canonical_key(&req("abc").with_temperature(0.7)));
        let mut other_stage = req("abc");
        other_stage.stage = Stage::Explanation;
        assert_ne!(canonical_key(&req("abc")), canonical_key(&other_stage));
    }

    #[test]
    fn key_ignores_transcript_metadata() {
        let r = req("abc");
        let make = |ts: &str| TranscriptEntry {
            key: canonical_key(&r),
            stage: r.stage,
            system: r.system_text.clone(),
            user: r.user_text.clone(),
            temperature: r.temperature,
            max_tokens: r.max_tokens,
            response: "x".into(),
            ts: ts.into(),
        };
        assert_eq!(
            canonical_key(&make("2020-01-01T00:00:00Z").request()),
            canonical_key(&make("2030-01-01T00:00:00Z").request())
        );
    }

    #[test]
    fn empty_user_text_is_rejected() {
        let b = Backend::replay(Transcript::in_memory());
        assert!(matches!(b.complete(&req("  ")), Err(LlmError::InvalidRequest(_))));
    }

    fn counting_model(counter: Arc<AtomicU32>) -> Arc<dyn LanguageModel> {
        Arc::new(FnModel(move |r: &ChatRequest| {
            counter.fetch_add(1, Ordering::SeqCst);
            Ok(format!("answer to {}", r.user_text))
        }))
    }

    #[test]
    fn record_then_replay_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let calls = Arc::new(AtomicU32::new(0));
        let rec = Backend::record(counting_model(calls.clone()), Transcript::open(&path).unwrap());
        let a = rec.complete(&req("one")).unwrap();
        let again = rec.complete(&req("one")).unwrap();
        rec.complete(&req("two")).unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 2);
        assert_eq!(a.text, again.text);

        let replay = Backend::replay(Transcript::open_existing(&path).unwrap());
        assert_eq!(replay.complete(&req("one")).unwrap().text, "answer to one");
        assert_eq!(replay.complete(&req("two")).unwrap().text, "answer to two");
        assert_eq!(replay.upstream_calls(), 0);
        match replay.complete(&req("three")) {
            Err(LlmError::ReplayMiss { key, canonical }) => {
                assert_eq!(key, canonical_key(&req("three")));
                assert!(canonical.contains("\"user_text\":\"three\""));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tampered_transcript_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let rec = Backend::record(counting_model(Arc::default()), Transcript::open(&path).unwrap());
        rec.complete(&req("one")).unwrap();
        let text = std::fs::read_to_string(&path).unwrap().replace("\"one\"", "\"uno\"");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(Transcript::open(&path), Err(LlmError::Transcript { .. })));
        assert!(Transcript::open_existing(dir.path().join("missing.jsonl")).is_err());
    }

    struct ScriptedTransport {
        replies: Mutex<Vec<Result<(u16, String), TransportError>>>,
        seen: Mutex<Vec<(String, serde_json::Value)>>,
    }

    impl HttpTransport for Arc<ScriptedTransport> {
        fn post_json(
            &self,
            url: &str,
            _bearer: &str,
            body: &serde_json::Value,
            _timeout: Duration,
        ) -> Result<(u16, String), TransportError> {
            self.seen.lock().unwrap().push((url.to_string(), body.clone()));
            self.replies.lock().unwrap().remove(0)
        }
    }

    fn ok_body(text: &str) -> String {
        serde_json::json!({
            "choices": [{"message": {"role": "assistant", "content": text}}],
            "usage": {"prompt_tokens": 3, "completion_tokens": 4}
        })
        .to_string()
    }

    fn client(replies: Vec<Result<(u16, String), TransportError>>) -> (OpenAiClient, Arc<ScriptedTransport>) {
        let t = Arc::new(ScriptedTransport {
            replies: Mutex::new(replies),
            seen: Mutex::new(Vec::new()),
        });
        let mut c = OpenAiClient::new(Box::new(t.clone()), "http://host/", "m", "k");
        c.backoff = Duration::ZERO;
        (c, t)
    }

    #[test]
    fn payload_and_first_choice() {
        let (c, t) = client(vec![Ok((200, ok_body("hi")))]);
        let out = c.complete(&req("question")).unwrap();
        assert_eq!(out.text, "hi");
        assert_eq!(out.usage.completion_tokens, 4);
        let seen = t.seen.lock().unwrap();
        assert_eq!(seen[0].0, "http://host/v1/chat/completions");
        assert_eq!(seen[0].1["messages"][1]["content"], "question");
        assert_eq!(seen[0].1["messages"][0]["role"], "system");
        assert_eq!(seen[0].1["model"], "m");
    }

    #[test]
    fn retries_transient_failures() {
        let (c, t) = client(vec![
            Ok((429, "slow down".into())),
            Err(TransportError::Timeout),
            Ok((503, "busy".into())),
            Ok((200, ok_body("finally"))),
        ]);
        assert_eq!(c.complete(&req("q")).unwrap().text, "finally");
        assert_eq!(t.seen.lock().unwrap().len(), 4);
    }

    #[test]
    fn gives_up_after_three_retries() {
        let (c, t) = client((0..5).map(|_| Ok((500, "down".to_string()))).collect());
        assert!(matches!(c.complete(&req("q")), Err(LlmError::Http { status: 500, .. })));
        assert_eq!(t.seen.lock().unwrap().len(), 4);
    }

    #[test]
    fn client_errors_are_not_retried() {
        for status in [400, 401] {
            let (c, t) = client(vec![Ok((status, "no".into())), Ok((200, ok_body("x")))]);
            assert!(matches!(c.complete(&req("q")), Err(LlmError::Http { .. })));
            assert_eq!(t.seen.lock().unwrap().len(), 1);
        }
    }

    #[test]
    fn malformed_body_is_reported() {
        let (c, _) = client(vec![Ok((200, "{\"choices\": []}".into()))]);
        assert!(matches!(c.complete(&req("q")), Err(LlmError::Malformed(_))));
    }

    #[test]
    fn concurrency_cap_bounds_in_flight_calls() {
        let current = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let (c2, p2) = (current.clone(), peak.clone());
        let model: Arc<dyn LanguageModel> = Arc::new(FnModel(move |_: &ChatRequest| {
            let now = c2.fetch_add(1, Ordering::SeqCst) + 1;
            p2.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(20));
            c2.fetch_sub(1, Ordering::SeqCst);
            Ok("x".into())
        }));
        let backend = Backend::live(model).with_concurrency(2);
        std::thread::scope(|s| {
            for i in 0..8 {
                let b = &backend;
                s.spawn(move || b.complete(&req(&format!("q{i}"))).unwrap());
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 2);
        assert_eq!(backend.upstream_calls(), 8);
    }

    #[test]
    fn missing_api_key_is_a_config_error() {
        // only meaningful when the variable is absent in the test environment
        if std::env::var(ENV_API_KEY).is_err() {
            assert!(matches!(OpenAiClient::from_env(), Err(LlmError::Config(_))));
        }
    }
}
