//! Stack Overflow search and answer retrieval through the StackExchange API.
//!
//! All requests go out one at a time behind a single lock. A sliding-window
//! limiter keeps the client under the API's per-second penalty threshold, a
//! daily budget (persisted across restarts) tracks the quota, and `backoff`
//! signals from the API block further requests for the stated time.

use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Mutex;
use tokio::time::Instant;

use crate::domain::{strip_html, SOAnswer, SOQuestion};
use crate::transport::{write_atomic, HttpRequest, HttpTransport, TransportError};

pub const DEFAULT_BASE_URL: &str = "https://api.stackexchange.com/2.3";
pub const KEY_ENV: &str = "STACKEXCHANGE_KEY";
pub const BASE_URL_ENV: &str = "STACKEXCHANGE_BASE_URL";
/// The API's limit on ids per vectorized request.
pub const MAX_IDS_PER_CALL: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StackExchangeError {
    #[error("daily StackExchange quota exhausted ({used}/{quota} calls)")]
    QuotaExhausted { used: u32, quota: u32 },
    #[error("StackExchange asked for a {seconds}s backoff")]
    BackoffRequested { seconds: u64 },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("no recorded fixture for request `{0}`")]
    FixtureMiss(String),
    #[error("StackExchange API error (HTTP {status}, {name}): {message}")]
    Api { status: u16, name: String, message: String },
    #[error("unexpected StackExchange response: {0}")]
    Parse(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("cannot persist quota state: {0}")]
    Persist(String),
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub base_url: String,
    pub site: String,
    pub filter: String,
    pub page_size: u32,
    pub api_key: Option<String>,
    pub max_per_second: u32,
    pub daily_quota: u32,
    /// Page size for answer requests; answers are paged while `has_more`.
    pub answers_page_size: u32,
    pub max_answer_pages: u32,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            base_url: DEFAULT_BASE_URL.into(),
            site: "stackoverflow".into(),
            filter: "withbody".into(),
            page_size: 30,
            api_key: None,
            max_per_second: 25,
            daily_quota: 10_000,
            answers_page_size: 100,
            max_answer_pages: 5,
        }
    }
}

/// Daily call accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RateBudget {
    pub max_per_second: u32,
    pub daily_quota: u32,
    pub used_today: u32,
    /// Days since the Unix epoch (UTC), the API's quota period.
    pub day_epoch: u64,
}

impl RateBudget {
    pub fn new(max_per_second: u32, daily_quota: u32, today: u64) -> Self {
        Self { max_per_second, daily_quota, used_today: 0, day_epoch: today }
    }

    /// Resets the counter when the day changes.
    pub fn roll(&mut self, today: u64) {
        if today != self.day_epoch {
            self.day_epoch = today;
            self.used_today = 0;
        }
    }

    pub fn remaining(&self) -> u32 {
        self.daily_quota.saturating_sub(self.used_today)
    }

    pub fn try_consume(&mut self, today: u64) -> Result<(), StackExchangeError> {
        self.roll(today);
        if self.used_today >= self.daily_quota {
            return Err(StackExchangeError::QuotaExhausted { used: self.used_today, quota: self.daily_quota });
        }
        self.used_today += 1;
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct QuotaFile {
    day: u64,
    used: u32,
}

/// Reads the persisted `{day, used}` counter, if any.
pub fn load_quota_usage(path: &Path) -> Option<(u64, u32)> {
    let text = std::fs::read_to_string(path).ok()?;
    let file: QuotaFile = serde_json::from_str(&text).ok()?;
    Some((file.day, file.used))
}

/// At most `capacity` acquisitions in any window of length `window`.
#[derive(Debug)]
pub struct SlidingWindowLimiter {
    capacity: usize,
    window: Duration,
    sent: VecDeque<Instant>,
}

impl SlidingWindowLimiter {
    pub fn new(capacity: usize, window: Duration) -> Self {
        Self { capacity: capacity.max(1), window, sent: VecDeque::new() }
    }

    pub async fn acquire(&mut self) {
        if self.sent.len() >= self.capacity {
            let oldest = self.sent.pop_front().expect("non-empty");
            tokio::time::sleep_until(oldest + self.window).await;
        }
        self.sent.push_back(Instant::now());
    }
}

pub fn utc_day_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs() / 86_400).unwrap_or(0)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClientStats {
    pub search_calls: usize,
    pub answer_calls: usize,
}

struct ClientState {
    limiter: SlidingWindowLimiter,
    budget: RateBudget,
    blocked_until: Option<Instant>,
    quota_path: Option<PathBuf>,
}

type DaySource = Arc<dyn Fn() -> u64 + Send + Sync>;

pub struct StackExchangeClient {
    transport: Arc<dyn HttpTransport>,
    config: ClientConfig,
    state: Mutex<ClientState>,
    today: DaySource,
    search_calls: AtomicUsize,
    answer_calls: AtomicUsize,
}

#[derive(Deserialize)]
struct Wrapper<T> {
    #[serde(default = "Vec::new")]
    items: Vec<T>,
    #[serde(default)]
    has_more: bool,
    #[serde(default)]
    backoff: Option<u64>,
    #[serde(default)]
    quota_remaining: Option<u32>,
    #[serde(default)]
    error_id: Option<u32>,
    #[serde(default)]
    error_name: Option<String>,
    #[serde(default)]
    error_message: Option<String>,
}

#[derive(Deserialize)]
struct RawQuestion {
    question_id: u64,
    link: String,
    title: String,
    #[serde(default)]
    body: String,
    creation_date: i64,
    #[serde(default)]
    accepted_answer_id: Option<u64>,
}

#[derive(Deserialize)]
struct RawAnswer {
    answer_id: u64,
    question_id: u64,
    #[serde(default)]
    body: String,
    #[serde(default)]
    score: i64,
    creation_date: i64,
    #[serde(default)]
    is_accepted: bool,
}

fn encode(value: &str) -> String {
    url::form_urlencoded::byte_serialize(value.as_bytes()).collect()
}

fn throttle_seconds(message: &str) -> u64 {
    // "too many requests from this IP, more requests available in 82007 seconds"
    message
        .split_whitespace()
        .collect::<Vec<_>>()
        .windows(2)
        .find(|w| w[1].starts_with("second"))
        .and_then(|w| w[0].parse().ok())
        .unwrap_or(60)
}

impl StackExchangeClient {
    pub fn new(transport: Arc<dyn HttpTransport>, config: ClientConfig) -> Self {
        let today: DaySource = Arc::new(utc_day_now);
        let state = ClientState {
            limiter: SlidingWindowLimiter::new(config.max_per_second as usize, Duration::from_secs(1)),
            budget: RateBudget::new(config.max_per_second, config.daily_quota, today()),
            blocked_until: None,
            quota_path: None,
        };
        Self {
            transport,
            config,
            state: Mutex::new(state),
            today,
            search_calls: AtomicUsize::new(0),
            answer_calls: AtomicUsize::new(0),
        }
    }

    /// Replaces the wall-clock day source (days since the Unix epoch).
    pub fn with_day_source(mut self, today: impl Fn() -> u64 + Send + Sync + 'static) -> Self {
        self.today = Arc::new(today);
        let day = (self.today)();
        self.state.get_mut().budget.roll(day);
        self
    }

    /// Persists the daily counter at `path`, resuming from it when present.
    pub fn with_quota_file(mut self, path: impl Into<PathBuf>) -> Self {
        let path = path.into();
        let state = self.state.get_mut();
        if let Some((day, used)) = load_quota_usage(&path) {
            state.budget.day_epoch = day;
            state.budget.used_today = used.min(state.budget.daily_quota);
            state.budget.roll((self.today)());
        }
        state.quota_path = Some(path);
        self
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    pub async fn budget(&self) -> RateBudget {
        let mut state = self.state.lock().await;
        state.budget.roll((self.today)());
        state.budget
    }

    pub fn stats(&self) -> ClientStats {
        ClientStats {
            search_calls: self.search_calls.load(Ordering::SeqCst),
            answer_calls: self.answer_calls.load(Ordering::SeqCst),
        }
    }

    fn with_key(&self, mut url: String) -> String {
        if let Some(key) = &self.config.api_key {
            url.push_str("&key=");
            url.push_str(&encode(key));
        }
        url
    }

    pub fn search_url(&self, keyword: &str) -> String {
        self.with_key(format!(
            "{}/search/advanced?q={}&site={}&filter={}&pagesize={}",
            self.config.base_url.trim_end_matches('/'),
            encode(keyword),
            encode(&self.config.site),
            encode(&self.config.filter),
            self.config.page_size
        ))
    }

    pub fn answers_url(&self, ids: &[u64], page: u32) -> String {
        let ids = ids.iter().map(u64::to_string).collect::<Vec<_>>().join(";");
        let mut url = format!(
            "{}/questions/{}/answers?site={}&filter={}&sort=votes&pagesize={}",
            self.config.base_url.trim_end_matches('/'),
            ids,
            encode(&self.config.site),
            encode(&self.config.filter),
            self.config.answers_page_size
        );
        if page > 1 {
            url.push_str(&format!("&page={page}"));
        }
        self.with_key(url)
    }

    async fn call<T: DeserializeOwned>(&self, url: String) -> Result<(Vec<T>, bool), StackExchangeError> {
        let mut state = self.state.lock().await;
        if let Some(until) = state.blocked_until.take() {
            tokio::time::sleep_until(until).await;
        }
        let today = (self.today)();
        state.budget.try_consume(today)?;
        if let Some(path) = &state.quota_path {
            let file = QuotaFile { day: state.budget.day_epoch, used: state.budget.used_today };
            let bytes = serde_json::to_vec(&file).map_err(|e| StackExchangeError::Persist(e.to_string()))?;
            write_atomic(path, &bytes).map_err(|e| StackExchangeError::Persist(e.to_string()))?;
        }
        state.limiter.acquire().await;

        let response = self.transport.send(&HttpRequest::get(url)).await.map_err(|e| match e {
            TransportError::Network(msg) => StackExchangeError::Transport(msg),
            TransportError::FixtureMiss(sig) => StackExchangeError::FixtureMiss(sig),
        })?;

        let wrapper: Wrapper<serde_json::Value> = serde_json::from_str(&response.body).map_err(|e| {
            if response.is_success() {
                StackExchangeError::Parse(e.to_string())
            } else {
                StackExchangeError::Api {
                    status: response.status,
                    name: "unknown".into(),
                    message: response.body.chars().take(200).collect(),
                }
            }
        })?;

        if wrapper.quota_remaining == Some(0) {
            state.budget.used_today = state.budget.daily_quota;
        }
        if let Some(seconds) = wrapper.backoff {
            state.blocked_until = Some(Instant::now() + Duration::from_secs(seconds));
            return Err(StackExchangeError::BackoffRequested { seconds });
        }
        if !response.is_success() || wrapper.error_id.is_some() {
            let name = wrapper.error_name.unwrap_or_else(|| "unknown".into());
            let message = wrapper.error_message.unwrap_or_default();
            if name == "throttle_violation" {
                let seconds = throttle_seconds(&message);
                state.blocked_until = Some(Instant::now() + Duration::from_secs(seconds));
                return Err(StackExchangeError::BackoffRequested { seconds });
            }
            return Err(StackExchangeError::Api { status: response.status, name, message });
        }
        drop(state);

        let items = wrapper
            .items
            .into_iter()
            .map(serde_json::from_value)
            .collect::<Result<Vec<T>, _>>()
            .map_err(|e| StackExchangeError::Parse(e.to_string()))?;
        Ok((items, wrapper.has_more))
    }

    /// One page of questions matching `keyword`.
    pub async fn search_questions(&self, keyword: &str) -> Result<Vec<SOQuestion>, StackExchangeError> {
        if keyword.trim().is_empty() {
            return Err(StackExchangeError::InvalidRequest("empty search keyword".into()));
        }
        self.search_calls.fetch_add(1, Ordering::SeqCst);
        let (raw, _) = self.call::<RawQuestion>(self.search_url(keyword.trim())).await?;
        Ok(raw
            .into_iter()
            .map(|q| SOQuestion {
                id: q.question_id,
                link: q.link,
                title: strip_html(&q.title),
                body: q.body,
                creation_date: q.creation_date,
                accepted_answer_id: q.accepted_answer_id,
            })
            .filter(|q| match q.validate() {
                Ok(()) => true,
                Err(err) => {
                    tracing::warn!(%err, "skipping malformed question");
                    false
                }
            })
            .collect())
    }

    /// Answers for the given questions, requested in ascending id order and
    /// batched by [`MAX_IDS_PER_CALL`].
    pub async fn fetch_answers(
        &self,
        question_ids: &[u64],
    ) -> Result<BTreeMap<u64, Vec<SOAnswer>>, StackExchangeError> {
        if question_ids.is_empty() {
            return Err(StackExchangeError::InvalidRequest("no question ids given".into()));
        }
        if question_ids.contains(&0) {
            return Err(StackExchangeError::InvalidRequest("question ids must be positive".into()));
        }
        let mut ids = question_ids.to_vec();
        ids.sort_unstable();
        ids.dedup();
        let mut out: BTreeMap<u64, Vec<SOAnswer>> = BTreeMap::new();
        for batch in ids.chunks(MAX_IDS_PER_CALL) {
            for page in 1..=self.config.max_answer_pages.max(1) {
                self.answer_calls.fetch_add(1, Ordering::SeqCst);
                let (raw, has_more) = self.call::<RawAnswer>(self.answers_url(batch, page)).await?;
                for a in raw {
                    let answer = SOAnswer {
                        id: a.answer_id,
                        question_id: a.question_id,
                        body: a.body,
                        score: a.score,
                        creation_date: a.creation_date,
                        is_accepted: a.is_accepted,
                    };
                    if answer.validate().is_ok() {
                        out.entry(answer.question_id).or_default().push(answer);
                    }
                }
                if !has_more {
                    break;
                }
            }
        }
        Ok(out)
    }
}

/// The accepted answer (if any) followed by the two best unaccepted answers,
/// ranked by score and then by recency.
pub fn select_answers(answers: &[SOAnswer]) -> Vec<SOAnswer> {
    let accepted = answers.iter().find(|a| a.is_accepted);
    let mut others: Vec<&SOAnswer> = answers.iter().filter(|a| !a.is_accepted).collect();
    others.sort_by(|a, b| b.score.cmp(&a.score).then(b.creation_date.cmp(&a.creation_date)));
    accepted.into_iter().chain(others.into_iter().take(2)).cloned().collect()
}
