//! Chat-completion and embedding calls.
//!
//! Every LLM interaction in the crate goes through [`Gateway`], which wraps an
//! [`LlmBackend`]: either [`OpenAiBackend`] for any OpenAI-compatible endpoint
//! or [`MockBackend`] driven by a scripted fixture file.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::transport::{write_atomic, FixtureError, HttpRequest, HttpTransport, TransportError};

pub const API_KEY_ENV: &str = "STACKRAG_LLM_API_KEY";
pub const BASE_URL_ENV: &str = "STACKRAG_LLM_BASE_URL";
pub const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";
pub const DEFAULT_CHAT_MODEL: &str = "gpt-4";
pub const DEFAULT_EMBEDDING_MODEL: &str = "text-embedding-3-small";
pub const DEFAULT_EMBEDDING_DIMENSION: usize = 1536;
pub const DEFAULT_MAX_EMBED_CHARS: usize = 8000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("authentication rejected (HTTP {status}); check {API_KEY_ENV}")]
    Auth { status: u16 },
    #[error("provider rate limit or budget exceeded (HTTP 429)")]
    Budget,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("unexpected provider response: {0}")]
    Protocol(String),
    #[error("no scripted response for prompt starting `{0}`")]
    FixtureMiss(String),
    #[error("embedding has dimension {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub prompt: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl ChatRequest {
    pub fn new(prompt: impl Into<String>) -> Result<Self, GatewayError> {
        let prompt = prompt.into();
        if prompt.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("prompt is empty".into()));
        }
        Ok(Self { prompt, temperature: 0.0, max_output_tokens: 1024 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub model_id: String,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>, model_id: impl Into<String>) -> Self {
        Self { values, model_id: model_id.into() }
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

impl AsRef<[f64]> for EmbeddingVector {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

#[async_trait]
pub trait LlmBackend: Send + Sync {
    async fn chat(&self, request: &ChatRequest) -> Result<String, GatewayError>;
    async fn embed(&self, text: &str) -> Result<EmbeddingVector, GatewayError>;
}

#[derive(Debug, Clone)]
pub struct OpenAiConfig {
    pub base_url: String,
    pub api_key: String,
    pub chat_model: String,
    pub embedding_model: String,
    pub max_retries: u32,
    pub initial_backoff: Duration,
}

impl OpenAiConfig {
    pub fn new(api_key: impl Into<String>) -> Self {
        Self {
            base_url: DEFAULT_BASE_URL.into(),
            api_key: api_key.into(),
            chat_model: DEFAULT_CHAT_MODEL.into(),
            embedding_model: DEFAULT_EMBEDDING_MODEL.into(),
            max_retries: 2,
            initial_backoff: Duration::from_millis(500),
        }
    }
}

/// Client for `<base_url>/chat/completions` and `<base_url>/embeddings`.
pub struct OpenAiBackend {
    transport: Arc<dyn HttpTransport>,
    config: OpenAiConfig,
}

#[derive(Deserialize)]
struct ChatCompletion {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

impl OpenAiBackend {
    pub fn new(transport: Arc<dyn HttpTransport>, config: OpenAiConfig) -> Self {
        Self { transport, config }
    }

    fn endpoint(&self, path: &str) -> String {
        format!("{}/{}", self.config.base_url.trim_end_matches('/'), path)
    }

    /// POSTs with retry: transport failures, 5xx and 429 are retried up to
    /// `max_retries` times with doubling delays; 401/403 fail immediately.
    async fn post(&self, path: &str, body: serde_json::Value) -> Result<String, GatewayError> {
        let request = HttpRequest::post_json(self.endpoint(path), &body)
            .header("authorization", format!("Bearer {}", self.config.api_key));
        let mut delay = self.config.initial_backoff;
        let mut attempt = 0;
        loop {
            let failure = match self.transport.send(&request).await {
                Ok(resp) if resp.is_success() => return Ok(resp.body),
                Ok(resp) if resp.status == 401 || resp.status == 403 => {
                    return Err(GatewayError::Auth { status: resp.status })
                }
                Ok(resp) if resp.status == 429 => GatewayError::Budget,
                Ok(resp) if resp.status >= 500 => {
                    GatewayError::Transport(format!("HTTP {} from {path}", resp.status))
                }
                Ok(resp) => {
                    return Err(GatewayError::Protocol(format!(
                        "HTTP {} from {path}: {}",
                        resp.status,
                        truncate_chars(&resp.body, 200)
                    )))
                }
                Err(TransportError::FixtureMiss(sig)) => return Err(GatewayError::FixtureMiss(sig)),
                Err(TransportError::Network(msg)) => GatewayError::Transport(msg),
            };
            if attempt >= self.config.max_retries {
                return Err(failure);
            }
            tracing::debug!(attempt, ?failure, "retrying LLM request");
            tokio::time::sleep(delay).await;
            delay *= 2;
            attempt += 1;
        }
    }
}

#[async_trait]
impl LlmBackend for OpenAiBackend {
    async fn chat(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        let body = json!({
            "model": self.config.chat_model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        });
        let raw = self.post("chat/completions", body).await?;
        let parsed: ChatCompletion =
            serde_json::from_str(&raw).map_err(|e| GatewayError::Protocol(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| GatewayError::Protocol("completion has no content".into()))
    }

    async fn embed(&self, text: &str) -> Result<EmbeddingVector, GatewayError> {
        let body = json!({ "model": self.config.embedding_model, "input": text });
        let raw = self.post("embeddings", body).await?;
        let parsed: EmbeddingResponse =
            serde_json::from_str(&raw).map_err(|e| GatewayError::Protocol(e.to_string()))?;
        let values = parsed
            .data
            .into_iter()
            .next()
            .map(|d| d.embedding)
            .ok_or_else(|| GatewayError::Protocol("embedding response has no data".into()))?;
        Ok(EmbeddingVector::new(values, self.config.embedding_model.clone()))
    }
}

/// One scripted chat turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedChat {
    /// Matched against the rendered prompt: substring by default, whole
    /// prompt when `exact` is set. An empty string matches any prompt.
    pub expect: String,
    pub response: String,
    /// Repeating entries are never consumed.
    #[serde(default, skip_serializing_if = "is_false")]
    pub repeat: bool,
    #[serde(default, skip_serializing_if = "is_false")]
    pub exact: bool,
}

fn is_false(b: &bool) -> bool {
    !*b
}

impl ScriptedChat {
    pub fn once(expect: impl Into<String>, response: impl Into<String>) -> Self {
        Self { expect: expect.into(), response: response.into(), repeat: false, exact: false }
    }

    pub fn always(expect: impl Into<String>, response: impl Into<String>) -> Self {
        Self { repeat: true, ..Self::once(expect, response) }
    }

    fn matches(&self, prompt: &str) -> bool {
        if self.exact {
            prompt == self.expect
        } else {
            prompt.contains(&self.expect)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedEmbedding {
    pub text: String,
    pub values: Vec<f64>,
}

/// The mock backend's fixture file (`llm.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    pub dimension: usize,
    #[serde(default = "default_mock_model")]
    pub embedding_model: String,
    #[serde(default)]
    pub chat: Vec<ScriptedChat>,
    /// Exact-text overrides; other texts get [`hash_embedding`].
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub embeddings: Vec<ScriptedEmbedding>,
}

fn default_mock_model() -> String {
    "mock-hash-embedding".into()
}

impl MockScript {
    pub fn new(dimension: usize) -> Self {
        Self { dimension, embedding_model: default_mock_model(), chat: Vec::new(), embeddings: Vec::new() }
    }

    pub fn with_chat(mut self, entry: ScriptedChat) -> Self {
        self.chat.push(entry);
        self
    }

    pub fn load(path: &Path) -> Result<Self, FixtureError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| FixtureError::Io { path: path.to_path_buf(), source })?;
        let script: Self = serde_json::from_str(&text).map_err(|e| FixtureError::Malformed {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        script
            .validate()
            .map_err(|reason| FixtureError::Malformed { path: path.to_path_buf(), reason })?;
        Ok(script)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.dimension == 0 {
            return Err("dimension must be positive".into());
        }
        for e in &self.embeddings {
            if e.values.len() != self.dimension {
                return Err(format!(
                    "embedding for `{}` has {} values, expected {}",
                    truncate_chars(&e.text, 40),
                    e.values.len(),
                    self.dimension
                ));
            }
            if e.values.iter().any(|v| !v.is_finite()) {
                return Err("embedding values must be finite".into());
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        write_atomic(path, json.as_bytes())
    }
}

/// Deterministic unit vector derived from SHA-256 of the text in counter mode.
pub fn hash_embedding(text: &str, dimension: usize) -> Vec<f64> {
    let mut values = Vec::with_capacity(dimension);
    let mut block = 0u32;
    while values.len() < dimension {
        let digest = Sha256::new()
            .chain_update(block.to_le_bytes())
            .chain_update(text.as_bytes())
            .finalize();
        for chunk in digest.chunks_exact(8) {
            if values.len() == dimension {
                break;
            }
            let bits = u64::from_le_bytes(chunk.try_into().unwrap()) >> 11;
            values.push(bits as f64 / (1u64 << 53) as f64 * 2.0 - 1.0);
        }
        block += 1;
    }
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        values.iter_mut().for_each(|v| *v /= norm);
    } else if let Some(first) = values.first_mut() {
        *first = 1.0;
    }
    values
}

/// Scripted backend for offline runs.
///
/// Each chat call consumes the first unconsumed entry (in script order) that
/// matches the prompt.
pub struct MockBackend {
    script: MockScript,
    consumed: Mutex<Vec<bool>>,
    embeddings: HashMap<String, Vec<f64>>,
    prompts: Mutex<Vec<String>>,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        let consumed = Mutex::new(vec![false; script.chat.len()]);
        let embeddings = script.embeddings.iter().map(|e| (e.text.clone(), e.values.clone())).collect();
        Self { script, consumed, embeddings, prompts: Mutex::new(Vec::new()) }
    }

    pub fn load(path: &Path) -> Result<Self, FixtureError> {
        MockScript::load(path).map(Self::new)
    }

    pub fn dimension(&self) -> usize {
        self.script.dimension
    }

    /// Every prompt received so far, in arrival order.
    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().unwrap().clone()
    }
}

#[async_trait]
impl LlmBackend for MockBackend {
    async fn chat(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        self.prompts.lock().unwrap().push(request.prompt.clone());
        let mut consumed = self.consumed.lock().unwrap();
        let hit = self
            .script
            .chat
            .iter()
            .enumerate()
            .find(|(i, entry)| !consumed[*i] && entry.matches(&request.prompt));
        match hit {
            Some((i, entry)) => {
                if !entry.repeat {
                    consumed[i] = true;
                }
                Ok(entry.response.clone())
            }
            None => Err(GatewayError::FixtureMiss(truncate_chars(&request.prompt, 120))),
        }
    }

    async fn embed(&self, text: &str) -> Result<EmbeddingVector, GatewayError> {
        let values = self
            .embeddings
            .get(text)
            .cloned()
            .unwrap_or_else(|| hash_embedding(text, self.script.dimension));
        Ok(EmbeddingVector::new(values, self.script.embedding_model.clone()))
    }
}

/// Wraps a live backend and writes every exchange into a [`MockScript`] that
/// replays it exactly.
pub struct RecordingBackend {
    inner: Arc<dyn LlmBackend>,
    script: Mutex<MockScript>,
}

impl RecordingBackend {
    pub fn new(inner: Arc<dyn LlmBackend>, dimension: usize, embedding_model: impl Into<String>) -> Self {
        let mut script = MockScript::new(dimension);
        script.embedding_model = embedding_model.into();
        Self { inner, script: Mutex::new(script) }
    }

    pub fn script(&self) -> MockScript {
        self.script.lock().unwrap().clone()
    }
}

#[async_trait]
impl LlmBackend for RecordingBackend {
    async fn chat(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        let response = self.inner.chat(request).await?;
        self.script.lock().unwrap().chat.push(ScriptedChat {
            expect: request.prompt.clone(),
            response: response.clone(),
            repeat: false,
            exact: true,
        });
        Ok(response)
    }

    async fn embed(&self, text: &str) -> Result<EmbeddingVector, GatewayError> {
        let vector = self.inner.embed(text).await?;
        let mut script = self.script.lock().unwrap();
        if !script.embeddings.iter().any(|e| e.text == text) {
            script.embeddings.push(ScriptedEmbedding { text: text.to_string(), values: vector.values.clone() });
        }
        Ok(vector)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GatewayStats {
    pub chat_calls: usize,
    pub embed_calls: usize,
}

/// Validating front door to a backend. Counts calls, enforces the embedding
/// dimension, truncates embedding input and pins temperature to 0.
pub struct Gateway {
    backend: Arc<dyn LlmBackend>,
    dimension: usize,
    max_embed_chars: usize,
    chat_calls: AtomicUsize,
    embed_calls: AtomicUsize,
}

impl Gateway {
    pub fn new(backend: Arc<dyn LlmBackend>, dimension: usize) -> Self {
        Self {
            backend,
            dimension,
            max_embed_chars: DEFAULT_MAX_EMBED_CHARS,
            chat_calls: AtomicUsize::new(0),
            embed_calls: AtomicUsize::new(0),
        }
    }

    pub fn with_max_embed_chars(mut self, max_chars: usize) -> Self {
        self.max_embed_chars = max_chars;
        self
    }

    pub fn mock(backend: Arc<MockBackend>) -> Self {
        let dimension = backend.dimension();
        Self::new(backend, dimension)
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn max_embed_chars(&self) -> usize {
        self.max_embed_chars
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            chat_calls: self.chat_calls.load(Ordering::SeqCst),
            embed_calls: self.embed_calls.load(Ordering::SeqCst),
        }
    }

    pub async fn chat(&self, prompt: impl Into<String>) -> Result<String, GatewayError> {
        let request = ChatRequest::new(prompt)?;
        self.chat_calls.fetch_add(1, Ordering::SeqCst);
        self.backend.chat(&request).await
    }

    pub async fn embed(&self, text: &str) -> Result<EmbeddingVector, GatewayError> {
        if text.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("embedding input is empty".into()));
        }
        let text = truncate_chars(text, self.max_embed_chars);
        self.embed_calls.fetch_add(1, Ordering::SeqCst);
        let vector = self.backend.embed(&text).await?;
        if vector.dimension() != self.dimension {
            return Err(GatewayError::Dimension { expected: self.dimension, got: vector.dimension() });
        }
        if !vector.is_finite() {
            return Err(GatewayError::Protocol("embedding contains non-finite values".into()));
        }
        Ok(vector)
    }
}

pub(crate) fn truncate_chars(text: &str, max_chars: usize) -> String {
    match text.char_indices().nth(max_chars) {
        Some((idx, _)) => text[..idx].to_string(),
        None => text.to_string(),
    }
}
