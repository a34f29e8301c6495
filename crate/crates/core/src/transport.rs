//! HTTP plumbing shared by the LLM gateway and the StackExchange client.
//!
//! Callers talk to an [`HttpTransport`]; the live implementation wraps
//! `reqwest`, [`FixtureTransport`] replays recorded exchanges keyed by request
//! signature, and [`RecordingTransport`] captures live exchanges into the
//! same fixture format.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

pub const FIXTURE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Method {
    Get,
    Post,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpRequest {
    pub method: Method,
    pub url: String,
    pub headers: Vec<(String, String)>,
    pub body: Option<String>,
}

impl HttpRequest {
    pub fn get(url: impl Into<String>) -> Self {
        Self { method: Method::Get, url: url.into(), headers: Vec::new(), body: None }
    }

    pub fn post_json(url: impl Into<String>, body: &serde_json::Value) -> Self {
        Self {
            method: Method::Post,
            url: url.into(),
            headers: vec![("content-type".into(), "application/json".into())],
            body: Some(body.to_string()),
        }
    }

    pub fn header(mut self, name: impl Into<String>, value: impl Into<String>) -> Self {
        self.headers.push((name.into(), value.into()));
        self
    }

    /// Stable identity of a request for fixture lookup: method, path and
    /// sorted query parameters, with credentials (`key`, `access_token`)
    /// removed. POST bodies are appended verbatim.
    pub fn signature(&self) -> String {
        let method = match self.method {
            Method::Get => "GET",
            Method::Post => "POST",
        };
        let target = match Url::parse(&self.url) {
            Ok(url) => {
                let mut pairs: Vec<(String, String)> = url
                    .query_pairs()
                    .filter(|(k, _)| k != "key" && k != "access_token")
                    .map(|(k, v)| (k.into_owned(), v.into_owned()))
                    .collect();
                pairs.sort();
                let query = url::form_urlencoded::Serializer::new(String::new())
                    .extend_pairs(pairs)
                    .finish();
                if query.is_empty() {
                    url.path().to_string()
                } else {
                    format!("{}?{}", url.path(), query)
                }
            }
            Err(_) => self.url.clone(),
        };
        match &self.body {
            Some(body) => format!("{method} {target} {body}"),
            None => format!("{method} {target}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

impl HttpResponse {
    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("network error: {0}")]
    Network(String),
    #[error("no recorded fixture for request `{0}`")]
    FixtureMiss(String),
}

#[async_trait]
pub trait HttpTransport: Send + Sync {
    async fn send(&self, request: &HttpRequest) -> Result<HttpResponse, TransportError>;
}

/// Live HTTP via `reqwest`. Responses are decompressed transparently.
pub struct ReqwestTransport {
    client: reqwest::Client,
}

impl ReqwestTransport {
    pub fn new(timeout: Duration) -> Result<Self, TransportError> {
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .user_agent(concat!("stackrag/", env!("CARGO_PKG_VERSION")))
            .build()
            .map_err(|e| TransportError::Network(e.to_string()))?;
        Ok(Self { client })
    }
}

#[async_trait]
impl HttpTransport for ReqwestTransport {
    async fn send(&self, request: &HttpRequest) -> Result<HttpResponse, TransportError> {
        let mut builder = match request.method {
            Method::Get => self.client.get(&request.url),
            Method::Post => self.client.post(&request.url),
        };
        for (name, value) in &request.headers {
            builder = builder.header(name, value);
        }
        if let Some(body) = &request.body {
            builder = builder.body(body.clone());
        }
        let response = builder.send().await.map_err(|e| TransportError::Network(e.to_string()))?;
        let status = response.status().as_u16();
        let body = response.text().await.map_err(|e| TransportError::Network(e.to_string()))?;
        Ok(HttpResponse { status, body })
    }
}

/// One recorded request/response pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Exchange {
    pub signature: String,
    pub status: u16,
    /// Parsed JSON when the body was JSON, otherwise the raw text as a string.
    pub body: serde_json::Value,
}

impl Exchange {
    pub fn new(signature: impl Into<String>, response: &HttpResponse) -> Self {
        let body = serde_json::from_str(&response.body)
            .unwrap_or_else(|_| serde_json::Value::String(response.body.clone()));
        Self { signature: signature.into(), status: response.status, body }
    }

    fn response(&self) -> HttpResponse {
        let body = match &self.body {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        HttpResponse { status: self.status, body }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExchangeLog {
    pub version: u32,
    pub exchanges: Vec<Exchange>,
}

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("cannot read fixture file {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed fixture file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
}

impl ExchangeLog {
    pub fn load(path: &Path) -> Result<Self, FixtureError> {
        let text = fs::read_to_string(path)
            .map_err(|source| FixtureError::Io { path: path.to_path_buf(), source })?;
        let log: Self = serde_json::from_str(&text).map_err(|e| FixtureError::Malformed {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        log.validate().map_err(|reason| FixtureError::Malformed { path: path.to_path_buf(), reason })?;
        Ok(log)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.version != FIXTURE_FORMAT_VERSION {
            return Err(format!("unsupported fixture version {}", self.version));
        }
        let mut seen = std::collections::HashSet::new();
        for exchange in &self.exchanges {
            let Some((method, rest)) = exchange.signature.split_once(' ') else {
                return Err(format!("signature `{}` lacks a method", exchange.signature));
            };
            if method != "GET" && method != "POST" {
                return Err(format!("signature `{}` has unknown method", exchange.signature));
            }
            if !rest.starts_with('/') {
                return Err(format!("signature `{}` lacks a path", exchange.signature));
            }
            if !(100..600).contains(&exchange.status) {
                return Err(format!("invalid status {} for `{}`", exchange.status, exchange.signature));
            }
            if !seen.insert(&exchange.signature) {
                return Err(format!("duplicate signature `{}`", exchange.signature));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        write_atomic(path, json.as_bytes())
    }
}

/// Writes via a sibling temp file and rename.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

/// Replays recorded exchanges. Unknown requests fail with
/// [`TransportError::FixtureMiss`] naming the request signature.
#[derive(Default)]
pub struct FixtureTransport {
    responses: BTreeMap<String, Exchange>,
    requests: Mutex<Vec<String>>,
}

impl FixtureTransport {
    pub fn new(log: ExchangeLog) -> Self {
        let responses = log.exchanges.into_iter().map(|e| (e.signature.clone(), e)).collect();
        Self { responses, requests: Mutex::new(Vec::new()) }
    }

    pub fn load(path: &Path) -> Result<Self, FixtureError> {
        ExchangeLog::load(path).map(Self::new)
    }

    pub fn insert(&mut self, exchange: Exchange) {
        self.responses.insert(exchange.signature.clone(), exchange);
    }

    /// Signatures of every request served or missed, in arrival order.
    pub fn requests(&self) -> Vec<String> {
        self.requests.lock().unwrap().clone()
    }
}

#[async_trait]
impl HttpTransport for FixtureTransport {
    async fn send(&self, request: &HttpRequest) -> Result<HttpResponse, TransportError> {
        let signature = request.signature();
        self.requests.lock().unwrap().push(signature.clone());
        self.responses
            .get(&signature)
            .map(Exchange::response)
            .ok_or(TransportError::FixtureMiss(signature))
    }
}

/// Forwards to an inner transport and keeps every exchange for later replay.
pub struct RecordingTransport<T> {
    inner: T,
    log: Mutex<ExchangeLog>,
}

impl<T: HttpTransport> RecordingTransport<T> {
    pub fn new(inner: T) -> Self {
        Self {
            inner,
            log: Mutex::new(ExchangeLog { version: FIXTURE_FORMAT_VERSION, exchanges: Vec::new() }),
        }
    }

    pub fn log(&self) -> ExchangeLog {
        self.log.lock().unwrap().clone()
    }
}

#[async_trait]
impl<T: HttpTransport> HttpTransport for RecordingTransport<T> {
    async fn send(&self, request: &HttpRequest) -> Result<HttpResponse, TransportError> {
        let response = self.inner.send(request).await?;
        let signature = request.signature();
        let mut log = self.log.lock().unwrap();
        if !log.exchanges.iter().any(|e| e.signature == signature) {
            log.exchanges.push(Exchange::new(signature, &response));
        }
        Ok(response)
    }
}
