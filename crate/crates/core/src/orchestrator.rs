//! The ask loop: keywords, search and storage, evidence, answer, with bounded
//! restarts.

use std::collections::HashSet;
use std::future::Future;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::answer_generation::{AnswerError, AnswerGenerator};
use crate::domain::{strip_html, GeneratedAnswer, KeywordList, LinkRef, SOAnswer, SOQuestion, UserQuery};
use crate::evidence::{EvidenceConfig, EvidenceError, EvidenceGatherer, GatherTrace};
use crate::llm_gateway::{truncate_chars, Gateway, GatewayError};
use crate::question_analysis::{AnalysisError, QuestionAnalyzer};
use crate::ranking::bm25_topk;
use crate::stackexchange::{select_answers, StackExchangeClient, StackExchangeError};
use crate::vector_store::{SharedStore, StoreError, StoredDocument};

pub const NO_RESULTS_MESSAGE: &str = "no results found";

/// How many times one StackExchange call is retried after a backoff request.
const BACKOFF_RETRIES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub bm25_top_k: usize,
    pub cosine_top_k: usize,
    pub mmr_k: usize,
    pub evidence_n: usize,
    pub mmr_lambda: f64,
    pub max_loop_iterations: usize,
    pub max_store_retries: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            bm25_top_k: 50,
            cosine_top_k: 30,
            mmr_k: 15,
            evidence_n: 3,
            mmr_lambda: 0.5,
            max_loop_iterations: 3,
            max_store_retries: 2,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid session config: {0}")]
pub struct ConfigError(pub String);

impl SessionConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let counts = [
            ("bm25_top_k", self.bm25_top_k),
            ("cosine_top_k", self.cosine_top_k),
            ("mmr_k", self.mmr_k),
            ("evidence_n", self.evidence_n),
            ("max_loop_iterations", self.max_loop_iterations),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(ConfigError(format!("{name} must be at least 1")));
        }
        if self.mmr_k > self.cosine_top_k {
            return Err(ConfigError("mmr_k must not exceed cosine_top_k".into()));
        }
        if self.evidence_n > self.mmr_k {
            return Err(ConfigError("evidence_n must not exceed mmr_k".into()));
        }
        if !(0.0..=1.0).contains(&self.mmr_lambda) {
            return Err(ConfigError("mmr_lambda must be within [0, 1]".into()));
        }
        Ok(())
    }

    pub fn evidence_config(&self) -> EvidenceConfig {
        EvidenceConfig {
            cosine_top_k: self.cosine_top_k,
            mmr_k: self.mmr_k,
            mmr_lambda: self.mmr_lambda,
            evidence_n: self.evidence_n,
            ..EvidenceConfig::default()
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    StackExchange(#[from] StackExchangeError),
    #[error(transparent)]
    Evidence(#[from] EvidenceError),
    #[error(transparent)]
    Answer(#[from] AnswerError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("search and storage failed after {attempts} attempts: {cause}")]
    SearchFailed { attempts: usize, cause: StoreError },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AskError {
    #[error("{NO_RESULTS_MESSAGE}")]
    NoResults { iterations: usize },
    #[error(transparent)]
    Failed(#[from] PipelineError),
}

/// Stage sizes from one search-and-store pass.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct StoreTrace {
    pub raw_hits: usize,
    pub unique: usize,
    pub bm25_kept: usize,
    pub answered: usize,
    pub unanswered: usize,
    pub already_cached: usize,
    pub stored: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoreOutcome {
    pub stored: usize,
    pub unanswered_links: Vec<LinkRef>,
    pub trace: StoreTrace,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IterationTrace {
    pub keywords: Vec<String>,
    pub store: Option<StoreTrace>,
    pub gather: Option<GatherTrace>,
    pub sufficient: bool,
}

#[derive(Debug, Clone)]
pub struct AskReport {
    pub result: Result<GeneratedAnswer, AskError>,
    pub iterations: Vec<IterationTrace>,
}

/// Combined text stored and embedded for an answered question.
pub fn build_document(question: &SOQuestion, answers: &[SOAnswer]) -> String {
    let mut doc = format!("Question: {}\n{}", question.title, strip_html(&question.body));
    for answer in answers {
        let kind = if answer.is_accepted { "Accepted answer" } else { "Answer" };
        doc.push_str(&format!("\n\n{kind} (score {}):\n{}", answer.score, strip_html(&answer.body)));
    }
    doc
}

async fn with_backoff<T, F, Fut>(mut call: F) -> Result<T, StackExchangeError>
where
    F: FnMut() -> Fut,
    Fut: Future<Output = Result<T, StackExchangeError>>,
{
    let mut attempt = 0;
    loop {
        match call().await {
            Err(StackExchangeError::BackoffRequested { seconds }) if attempt < BACKOFF_RETRIES => {
                attempt += 1;
                tracing::info!(seconds, attempt, "StackExchange backoff, retrying");
            }
            other => return other,
        }
    }
}

pub struct Pipeline {
    gateway: Arc<Gateway>,
    client: Arc<StackExchangeClient>,
    store: SharedStore,
    analyzer: QuestionAnalyzer,
    gatherer: EvidenceGatherer,
    generator: AnswerGenerator,
    config: SessionConfig,
}

impl Pipeline {
    pub fn new(
        gateway: Arc<Gateway>,
        client: Arc<StackExchangeClient>,
        store: SharedStore,
        config: SessionConfig,
    ) -> Result<Self, ConfigError> {
        config.validate()?;
        let dim = store.read().unwrap().dimension();
        if dim != gateway.dimension() {
            return Err(ConfigError(format!(
                "store dimension {dim} differs from embedding dimension {}",
                gateway.dimension()
            )));
        }
        Ok(Self {
            analyzer: QuestionAnalyzer::new(gateway.clone()),
            gatherer: EvidenceGatherer::new(gateway.clone(), store.clone(), config.evidence_config()),
            generator: AnswerGenerator::new(gateway.clone()),
            gateway,
            client,
            store,
            config,
        })
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn gateway(&self) -> &Arc<Gateway> {
        &self.gateway
    }

    pub fn client(&self) -> &Arc<StackExchangeClient> {
        &self.client
    }

    pub fn store(&self) -> &SharedStore {
        &self.store
    }

    /// Searches every keyword, ranks the union against the user question,
    /// and stores answered questions not seen before. A storage failure
    /// repeats the whole step.
    pub async fn search_and_store(
        &self,
        query: &UserQuery,
        keywords: &KeywordList,
    ) -> Result<StoreOutcome, PipelineError> {
        let attempts = self.config.max_store_retries + 1;
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.search_and_store_once(query, keywords).await {
                Err(PipelineError::Store(cause)) if !matches!(cause, StoreError::DimensionMismatch { .. }) => {
                    tracing::warn!(%cause, attempt, "storage failed");
                    if attempt >= attempts {
                        return Err(PipelineError::SearchFailed { attempts, cause });
                    }
                }
                other => return other,
            }
        }
    }

    async fn search_and_store_once(
        &self,
        query: &UserQuery,
        keywords: &KeywordList,
    ) -> Result<StoreOutcome, PipelineError> {
        let mut trace = StoreTrace::default();
        let mut seen = HashSet::new();
        let mut unique: Vec<SOQuestion> = Vec::new();
        for keyword in keywords {
            let hits = with_backoff(|| self.client.search_questions(keyword)).await?;
            trace.raw_hits += hits.len();
            unique.extend(hits.into_iter().filter(|q| seen.insert(q.id)));
        }
        trace.unique = unique.len();

        let texts: Vec<(usize, String)> = unique
            .iter()
            .enumerate()
            .map(|(i, q)| (i, format!("{} {}", q.title, strip_html(&q.body))))
            .collect();
        let ranked: Vec<&SOQuestion> = bm25_topk(query.as_str(), &texts, self.config.bm25_top_k)
            .into_iter()
            .map(|s| &unique[s.doc_id])
            .collect();
        trace.bm25_kept = ranked.len();

        let (answered, unanswered): (Vec<&SOQuestion>, Vec<&SOQuestion>) =
            ranked.into_iter().partition(|q| q.has_accepted_answer());
        trace.answered = answered.len();
        trace.unanswered = unanswered.len();
        let unanswered_links = unanswered.iter().map(|q| q.link_ref()).collect();

        let to_fetch: Vec<&SOQuestion> = {
            let store = self.store.read().unwrap();
            answered.into_iter().filter(|q| !store.contains(q.id)).collect()
        };
        trace.already_cached = trace.answered - to_fetch.len();

        if !to_fetch.is_empty() {
            let ids: Vec<u64> = to_fetch.iter().map(|q| q.id).collect();
            let answers = with_backoff(|| self.client.fetch_answers(&ids)).await?;
            for question in to_fetch {
                let selected = select_answers(answers.get(&question.id).map_or(&[][..], Vec::as_slice));
                let text = truncate_chars(&build_document(question, &selected), self.gateway.max_embed_chars());
                let embedding = self.gateway.embed(&text).await?;
                self.store.write().unwrap().upsert(StoredDocument {
                    question_id: question.id,
                    title: question.title.clone(),
                    link: question.link.clone(),
                    document_text: text,
                    embedding,
                })?;
                trace.stored += 1;
            }
        }
        Ok(StoreOutcome { stored: trace.stored, unanswered_links, trace })
    }

    pub async fn ask(&self, query: &UserQuery) -> Result<GeneratedAnswer, AskError> {
        self.ask_traced(query).await.result
    }

    /// Runs up to `max_loop_iterations` passes, extracting keywords afresh
    /// each time, and reports what every pass did.
    pub async fn ask_traced(&self, query: &UserQuery) -> AskReport {
        let mut iterations = Vec::new();
        let result = self.run(query, &mut iterations).await;
        AskReport { result, iterations }
    }

    async fn run(&self, query: &UserQuery, iterations: &mut Vec<IterationTrace>) -> Result<GeneratedAnswer, AskError> {
        for round in 1..=self.config.max_loop_iterations {
            iterations.push(IterationTrace::default());
            let trace = iterations.last_mut().expect("just pushed");

            let keywords = match self.analyzer.analyze(query).await {
                Ok(k) => k,
                Err(AnalysisError::Parse { output }) => {
                    tracing::warn!(round, %output, "no usable keywords");
                    continue;
                }
                Err(AnalysisError::Gateway(e)) => return Err(PipelineError::from(e).into()),
            };
            trace.keywords = keywords.as_slice().to_vec();

            let stored = self.search_and_store(query, &keywords).await?;
            trace.store = Some(stored.trace.clone());

            let (outcome, gather) =
                self.gatherer.gather_traced(query, &stored.unanswered_links).await.map_err(PipelineError::from)?;
            trace.gather = Some(gather);
            trace.sufficient = outcome.is_sufficient();
            if outcome.is_sufficient() {
                return self.generator.generate(query, outcome.bundle()).await.map_err(|e| PipelineError::from(e).into());
            }
            tracing::info!(round, "evidence insufficient, restarting");
        }
        Err(AskError::NoResults { iterations: self.config.max_loop_iterations })
    }
}
