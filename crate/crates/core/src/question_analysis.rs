//! Keyword extraction: complexity gate, sub-question fan-out and search-query
//! parsing.

use std::sync::{Arc, LazyLock};

use futures::stream::{self, StreamExt};
use regex::Regex;
use thiserror::Error;

use crate::domain::{KeywordList, UserQuery};
use crate::llm_gateway::{Gateway, GatewayError};
use crate::prompts::{self, render};

/// Keywords are cut to this many whitespace-separated words.
pub const MAX_KEYWORD_WORDS: usize = 3;
pub const DEFAULT_FANOUT: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("could not parse a keyword list from model output `{output}`")]
    Parse { output: String },
}

/// Parses a one-word TRUE/FALSE verdict. Anything else is `None`.
pub fn parse_verdict(output: &str) -> Option<bool> {
    match output.trim().to_uppercase().as_str() {
        "TRUE" => Some(true),
        "FALSE" => Some(false),
        _ => None,
    }
}

static QUOTED: LazyLock<Regex> = LazyLock::new(|| Regex::new(r#""((?:[^"\\]|\\.)*)""#).unwrap());
static LIST_MARKER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*(?:[-*\u{2022}]|\d+[.)])\s+").unwrap());

fn shorten(keyword: &str) -> String {
    keyword.split_whitespace().take(MAX_KEYWORD_WORDS).collect::<Vec<_>>().join(" ")
}

/// Parses a bracketed list of double-quoted strings, e.g. `["a b", "c"]`.
/// Entries longer than three words are cut to their first three.
pub fn parse_keyword_list(output: &str) -> Option<KeywordList> {
    let start = output.find('[')?;
    let end = output.rfind(']')?;
    if end <= start {
        return None;
    }
    let inner = &output[start..=end];
    let entries: Vec<String> = match serde_json::from_str::<Vec<String>>(inner) {
        Ok(entries) => entries,
        Err(_) => QUOTED
            .captures_iter(inner)
            .map(|c| c[1].replace("\\\"", "\""))
            .collect(),
    };
    let list = KeywordList::from_entries(entries.iter().map(|e| shorten(e)));
    (!list.is_empty()).then_some(list)
}

/// One sub-question per non-empty line; stray bullets or numbering are
/// removed.
pub fn parse_subquestions(output: &str) -> Vec<UserQuery> {
    output
        .lines()
        .map(|line| LIST_MARKER.replace(line, "").trim().to_string())
        .filter_map(|line| UserQuery::new(line).ok())
        .collect()
}

pub struct QuestionAnalyzer {
    gateway: Arc<Gateway>,
    fanout: usize,
}

impl QuestionAnalyzer {
    pub fn new(gateway: Arc<Gateway>) -> Self {
        Self { gateway, fanout: DEFAULT_FANOUT }
    }

    pub fn with_fanout(mut self, fanout: usize) -> Self {
        self.fanout = fanout.max(1);
        self
    }

    /// Asks whether the query should be split. Malformed output is re-asked
    /// once and then read as `false`.
    pub async fn check_complexity(&self, query: &UserQuery) -> Result<bool, AnalysisError> {
        let prompt = render(prompts::QUESTION_COMPLEXITY_CHECKER, &[("question", query.as_str())]);
        for _ in 0..2 {
            let output = self.gateway.chat(prompt.as_str()).await?;
            if let Some(verdict) = parse_verdict(&output) {
                return Ok(verdict);
            }
            tracing::debug!(%output, "complexity checker gave no verdict");
        }
        Ok(false)
    }

    pub async fn split_into_subquestions(&self, query: &UserQuery) -> Result<Vec<UserQuery>, AnalysisError> {
        let prompt = render(prompts::SUBQUESTION_SPLITTER, &[("question", query.as_str())]);
        let output = self.gateway.chat(prompt).await?;
        let subs = parse_subquestions(&output);
        if subs.is_empty() {
            return Ok(vec![query.clone()]);
        }
        Ok(subs)
    }

    pub async fn extract_keywords(&self, question: &UserQuery) -> Result<KeywordList, AnalysisError> {
        let prompt = render(prompts::KEYWORD_EXTRACTOR, &[("question", question.as_str())]);
        let mut last = String::new();
        for _ in 0..2 {
            last = self.gateway.chat(prompt.as_str()).await?;
            if let Some(list) = parse_keyword_list(&last) {
                return Ok(list);
            }
        }
        Err(AnalysisError::Parse { output: last })
    }

    /// Produces the search keywords for a query, splitting complex queries and
    /// extracting from the parts concurrently. A part whose output cannot be
    /// parsed is skipped as long as another part yields keywords.
    pub async fn analyze(&self, query: &UserQuery) -> Result<KeywordList, AnalysisError> {
        if !self.check_complexity(query).await? {
            return self.extract_keywords(query).await;
        }
        let subs = self.split_into_subquestions(query).await?;
        let results: Vec<Result<KeywordList, AnalysisError>> = stream::iter(subs.iter())
            .map(|sub| self.extract_keywords(sub))
            .buffered(self.fanout)
            .collect()
            .await;

        let mut merged = KeywordList::default();
        let mut last_parse_error = None;
        for result in results {
            match result {
                Ok(list) => merged.extend(list.iter()),
                Err(err @ AnalysisError::Parse { .. }) => last_parse_error = Some(err),
                Err(err) => return Err(err),
            }
        }
        if merged.is_empty() {
            return Err(last_parse_error.unwrap_or(AnalysisError::Parse { output: String::new() }));
        }
        Ok(merged)
    }
}
