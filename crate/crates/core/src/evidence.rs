//! Evidence gathering: cosine retrieval, MMR diversification, per-item LLM
//! scoring, bundle selection and the sufficiency gate.

use std::cmp::Ordering;
use std::sync::Arc;

use futures::stream::{self, StreamExt};
use thiserror::Error;

use crate::domain::{EvidenceBundle, EvidenceItem, LinkRef, Relevance, UserQuery};
use crate::llm_gateway::{Gateway, GatewayError};
use crate::prompts::{self, render};
use crate::question_analysis::parse_verdict;
use crate::ranking::{mmr_select, RankingError};
use crate::vector_store::{SharedStore, StoreError};

pub const DEFAULT_SCORING_CONCURRENCY: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvidenceError {
    #[error("the vector store is empty")]
    EmptyStore,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("ranking failed: {0}")]
    Ranking(#[from] RankingError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceConfig {
    pub cosine_top_k: usize,
    pub mmr_k: usize,
    pub mmr_lambda: f64,
    pub evidence_n: usize,
    pub scoring_concurrency: usize,
}

impl Default for EvidenceConfig {
    fn default() -> Self {
        Self {
            cosine_top_k: 30,
            mmr_k: 15,
            mmr_lambda: 0.5,
            evidence_n: 3,
            scoring_concurrency: DEFAULT_SCORING_CONCURRENCY,
        }
    }
}

/// Stage sizes from one gather.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct GatherTrace {
    pub cosine_hits: usize,
    pub mmr_kept: usize,
    pub scored: usize,
    pub bundle_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GatherOutcome {
    Sufficient(EvidenceBundle),
    Insufficient(EvidenceBundle),
}

impl GatherOutcome {
    pub fn is_sufficient(&self) -> bool {
        matches!(self, Self::Sufficient(_))
    }

    pub fn bundle(&self) -> &EvidenceBundle {
        match self {
            Self::Sufficient(b) | Self::Insufficient(b) => b,
        }
    }
}

/// Parses the scorer's reply: an integer 1 through 5 or exactly `not useful`.
pub fn parse_relevance(output: &str) -> Option<Relevance> {
    let output = output.trim();
    if output == "not useful" {
        return Some(Relevance::NotUseful);
    }
    output.parse::<u8>().ok().and_then(Relevance::from_score)
}

/// One item as shown to the models: a delimiter line naming the source, then
/// the document.
pub fn format_item(index: usize, item: &EvidenceItem) -> String {
    format!("--- Evidence {index}: {} ---\n{}", item.link_ref(), item.document_text)
}

/// Keeps the best `n` scored items: NotUseful and unscored items are dropped,
/// then relevance descending, cosine descending, input order.
pub fn select_bundle(scored: &[EvidenceItem], unanswered: &[LinkRef], n: usize) -> EvidenceBundle {
    let mut kept: Vec<&EvidenceItem> =
        scored.iter().filter(|i| matches!(i.relevance, Relevance::Score(_))).collect();
    kept.sort_by(|a, b| {
        b.relevance
            .cmp(&a.relevance)
            .then_with(|| b.cosine_score.partial_cmp(&a.cosine_score).unwrap_or(Ordering::Equal))
    });
    let items: Vec<EvidenceItem> = kept.into_iter().take(n).cloned().collect();
    let combined_text = items
        .iter()
        .enumerate()
        .map(|(i, item)| format_item(i + 1, item))
        .collect::<Vec<_>>()
        .join("\n\n");
    EvidenceBundle { items, unanswered_links: unanswered.to_vec(), combined_text }
}

pub struct EvidenceGatherer {
    gateway: Arc<Gateway>,
    store: SharedStore,
    config: EvidenceConfig,
}

impl EvidenceGatherer {
    pub fn new(gateway: Arc<Gateway>, store: SharedStore, config: EvidenceConfig) -> Self {
        Self { gateway, store, config }
    }

    pub fn config(&self) -> &EvidenceConfig {
        &self.config
    }

    /// Cosine top-k from the store, narrowed by MMR. Returns the MMR-ordered
    /// items and the number of cosine hits.
    pub async fn retrieve_candidates(&self, query: &UserQuery) -> Result<(Vec<EvidenceItem>, usize), EvidenceError> {
        if self.store.read().unwrap().is_empty() {
            return Err(EvidenceError::EmptyStore);
        }
        let embedding = self.gateway.embed(query.as_str()).await?;
        let hits = self.store.read().unwrap().query(&embedding.values, self.config.cosine_top_k)?;
        let candidates: Vec<(usize, &[f64])> =
            hits.iter().enumerate().map(|(i, h)| (i, h.document.embedding.values.as_slice())).collect();
        let picked = mmr_select(&embedding.values, &candidates, self.config.mmr_k, self.config.mmr_lambda)?;
        let items = picked
            .into_iter()
            .map(|i| {
                let hit = &hits[i];
                EvidenceItem {
                    question_id: hit.document.question_id,
                    title: hit.document.title.clone(),
                    link: hit.document.link.clone(),
                    document_text: hit.document.document_text.clone(),
                    cosine_score: hit.score,
                    relevance: Relevance::Unscored,
                }
            })
            .collect();
        Ok((items, hits.len()))
    }

    /// Malformed scorer output is re-asked once and then treated as NotUseful.
    pub async fn score_item(&self, query: &UserQuery, item: &EvidenceItem) -> Result<Relevance, EvidenceError> {
        let prompt = render(
            prompts::EVIDENCE_SCORER,
            &[("evidence", &format_item(1, item)), ("question", query.as_str())],
        );
        for _ in 0..2 {
            let output = self.gateway.chat(prompt.as_str()).await?;
            if let Some(relevance) = parse_relevance(&output) {
                return Ok(relevance);
            }
            tracing::debug!(%output, question_id = item.question_id, "unparseable evidence score");
        }
        Ok(Relevance::NotUseful)
    }

    pub async fn check_sufficiency(&self, query: &UserQuery, bundle: &EvidenceBundle) -> Result<bool, EvidenceError> {
        if bundle.is_empty() {
            return Ok(false);
        }
        let prompt = render(
            prompts::EVIDENCE_CHECKER,
            &[("evidence", &bundle.combined_text), ("question", query.as_str())],
        );
        for _ in 0..2 {
            let output = self.gateway.chat(prompt.as_str()).await?;
            if let Some(verdict) = parse_verdict(&output) {
                return Ok(verdict);
            }
        }
        Ok(false)
    }

    pub async fn gather(&self, query: &UserQuery, unanswered: &[LinkRef]) -> Result<GatherOutcome, EvidenceError> {
        self.gather_traced(query, unanswered).await.map(|(outcome, _)| outcome)
    }

    /// Like [`gather`](Self::gather), also reporting stage sizes. An empty
    /// store is insufficient evidence, not an error.
    pub async fn gather_traced(
        &self,
        query: &UserQuery,
        unanswered: &[LinkRef],
    ) -> Result<(GatherOutcome, GatherTrace), EvidenceError> {
        let mut trace = GatherTrace::default();
        let (mut items, cosine_hits) = match self.retrieve_candidates(query).await {
            Ok(found) => found,
            Err(EvidenceError::EmptyStore) => {
                let bundle = select_bundle(&[], unanswered, self.config.evidence_n);
                return Ok((GatherOutcome::Insufficient(bundle), trace));
            }
            Err(e) => return Err(e),
        };
        trace.cosine_hits = cosine_hits;
        trace.mmr_kept = items.len();

        let scores: Vec<Result<Relevance, EvidenceError>> = stream::iter(items.iter())
            .map(|item| self.score_item(query, item))
            .buffered(self.config.scoring_concurrency.max(1))
            .collect()
            .await;
        for (item, score) in items.iter_mut().zip(scores) {
            item.relevance = score?;
        }
        trace.scored = items.len();

        let bundle = select_bundle(&items, unanswered, self.config.evidence_n);
        trace.bundle_size = bundle.len();
        let outcome = if self.check_sufficiency(query, &bundle).await? {
            GatherOutcome::Sufficient(bundle)
        } else {
            GatherOutcome::Insufficient(bundle)
        };
        Ok((outcome, trace))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm_gateway::{hash_embedding, EmbeddingVector, MockBackend, MockScript, ScriptedChat};
    use crate::vector_store::{StoredDocument, VectorStore};
    use std::sync::RwLock;

    const SCORER: &str = "Rate the given evidence";
    const CHECKER: &str = "whether you have enough evidence";
    const DIM: usize = 16;

    fn item(id: u64, relevance: Relevance, cosine: f64) -> EvidenceItem {
        EvidenceItem {
            question_id: id,
            title: format!("Q{id}"),
            link: format!("https://stackoverflow.com/q/{id}"),
            document_text: format!("doc {id}"),
            cosine_score: cosine,
            relevance,
        }
    }

    fn ids(bundle: &EvidenceBundle) -> Vec<u64> {
        bundle.items.iter().map(|i| i.question_id).collect()
    }

    fn setup(docs: usize, chat: Vec<ScriptedChat>) -> (EvidenceGatherer, Arc<Gateway>) {
        let script = MockScript { chat, ..MockScript::new(DIM) };
        let gateway = Arc::new(Gateway::mock(Arc::new(MockBackend::new(script))));
        let mut store = VectorStore::in_memory(DIM);
        for id in 1..=docs as u64 {
            let text = format!("document number {id}");
            store
                .upsert(StoredDocument {
                    question_id: id,
                    title: format!("Q{id}"),
                    link: format!("https://stackoverflow.com/q/{id}"),
                    embedding: EmbeddingVector::new(hash_embedding(&text, DIM), "mock"),
                    document_text: text,
                })
                .unwrap();
        }
        let store = Arc::new(RwLock::new(store));
        (EvidenceGatherer::new(gateway.clone(), store, EvidenceConfig::default()), gateway)
    }

    fn q() -> UserQuery {
        UserQuery::new("how do I do the thing").unwrap()
    }

    #[test]
    fn relevance_parsing() {
        assert_eq!(parse_relevance("5"), Some(Relevance::Score(5)));
        assert_eq!(parse_relevance(" 1\n"), Some(Relevance::Score(1)));
        assert_eq!(parse_relevance("not useful"), Some(Relevance::NotUseful));
        for bad in ["0", "6", "seven", "Not Useful", "4/5", ""] {
            assert_eq!(parse_relevance(bad), None, "{bad}");
        }
    }

    #[test]
    fn bundle_takes_top_three() {
        let scored = vec![
            item(1, Relevance::Score(5), 0.1),
            item(2, Relevance::Score(4), 0.2),
            item(3, Relevance::Score(4), 0.3),
            item(4, Relevance::Score(2), 0.9),
            item(5, Relevance::NotUseful, 1.0),
        ];
        assert_eq!(ids(&select_bundle(&scored, &[], 3)), vec![1, 3, 2]);
    }

    #[test]
    fn bundle_tie_breaks() {
        let scored = vec![item(1, Relevance::Score(4), 0.8), item(2, Relevance::Score(4), 0.9)];
        assert_eq!(ids(&select_bundle(&scored, &[], 3)), vec![2, 1]);
        let same = vec![item(7, Relevance::Score(3), 0.5), item(8, Relevance::Score(3), 0.5)];
        assert_eq!(ids(&select_bundle(&same, &[], 3)), vec![7, 8]);
    }

    #[test]
    fn bundle_drops_not_useful_and_keeps_links() {
        let scored = vec![item(1, Relevance::NotUseful, 0.8), item(2, Relevance::NotUseful, 0.9)];
        let unanswered = vec![LinkRef::new("Open", "https://stackoverflow.com/q/99")];
        let bundle = select_bundle(&scored, &unanswered, 3);
        assert!(bundle.is_empty());
        assert_eq!(bundle.unanswered_links, unanswered);

        let bundle = select_bundle(&[item(3, Relevance::Score(2), 0.1)], &[], 3);
        assert!(bundle.combined_text.starts_with("--- Evidence 1: - [Q3] https://stackoverflow.com/q/3 ---\ndoc 3"));
    }

    #[tokio::test]
    async fn retrieval_clamps_to_store_size() {
        let (g, _) = setup(4, vec![]);
        let (items, hits) = g.retrieve_candidates(&q()).await.unwrap();
        assert_eq!((items.len(), hits), (4, 4));
        assert!(items.iter().all(|i| i.relevance == Relevance::Unscored));

        let (g, _) = setup(40, vec![]);
        let (items, hits) = g.retrieve_candidates(&q()).await.unwrap();
        assert_eq!((items.len(), hits), (15, 30));
        let query = hash_embedding(q().as_str(), DIM);
        let top30: Vec<u64> =
            g.store.read().unwrap().query(&query, 30).unwrap().iter().map(|h| h.document.question_id).collect();
        assert!(items.iter().all(|i| top30.contains(&i.question_id)));
        // the first MMR pick is the closest document
        assert_eq!(items[0].question_id, top30[0]);

        let (g, _) = setup(0, vec![]);
        assert_eq!(g.retrieve_candidates(&q()).await.unwrap_err(), EvidenceError::EmptyStore);
    }

    #[tokio::test]
    async fn scoring_reasks_then_gives_up() {
        let (g, _) = setup(1, vec![ScriptedChat::once(SCORER, "seven"), ScriptedChat::once(SCORER, "3")]);
        assert_eq!(g.score_item(&q(), &item(1, Relevance::Unscored, 0.0)).await.unwrap(), Relevance::Score(3));

        let (g, gw) = setup(1, vec![ScriptedChat::always(SCORER, "great!")]);
        assert_eq!(g.score_item(&q(), &item(1, Relevance::Unscored, 0.0)).await.unwrap(), Relevance::NotUseful);
        assert_eq!(gw.stats().chat_calls, 2);
    }

    #[tokio::test]
    async fn sufficiency_rules() {
        let bundle = select_bundle(&[item(1, Relevance::Score(5), 0.9)], &[], 3);
        let (g, _) = setup(1, vec![ScriptedChat::once(CHECKER, "TRUE")]);
        assert!(g.check_sufficiency(&q(), &bundle).await.unwrap());

        let (g, gw) = setup(1, vec![ScriptedChat::once(CHECKER, "True."), ScriptedChat::once(CHECKER, "FALSE")]);
        assert!(!g.check_sufficiency(&q(), &bundle).await.unwrap());
        assert_eq!(gw.stats().chat_calls, 2);

        let (g, gw) = setup(1, vec![ScriptedChat::always(CHECKER, "TRUE")]);
        assert!(!g.check_sufficiency(&q(), &EvidenceBundle::default()).await.unwrap());
        assert_eq!(gw.stats().chat_calls, 0);
    }

    #[tokio::test]
    async fn gather_call_counts() {
        let (g, gw) = setup(20, vec![ScriptedChat::always(SCORER, "5"), ScriptedChat::always(CHECKER, "TRUE")]);
        let (outcome, trace) = g.gather_traced(&q(), &[]).await.unwrap();
        assert!(outcome.is_sufficient());
        assert_eq!(outcome.bundle().len(), 3);
        assert_eq!(trace, GatherTrace { cosine_hits: 20, mmr_kept: 15, scored: 15, bundle_size: 3 });
        assert_eq!(gw.stats().chat_calls, 16);

        let (g, _) = setup(20, vec![ScriptedChat::always(SCORER, "5"), ScriptedChat::always(CHECKER, "FALSE")]);
        assert!(!g.gather(&q(), &[]).await.unwrap().is_sufficient());
    }

    #[tokio::test]
    async fn gather_on_empty_store_is_insufficient() {
        let (g, gw) = setup(0, vec![]);
        assert!(!g.gather(&q(), &[]).await.unwrap().is_sufficient());
        assert_eq!(gw.stats().chat_calls + gw.stats().embed_calls, 0);
    }

    fn relevance_strategy() -> impl proptest::strategy::Strategy<Value = Relevance> {
        use proptest::prelude::*;
        prop_oneof![Just(Relevance::NotUseful), (1u8..=5).prop_map(Relevance::Score)]
    }

    proptest::proptest! {
        #[test]
        fn bundle_is_small_sorted_and_useful(
            scored in proptest::collection::vec((relevance_strategy(), 0.0f64..1.0), 0..15),
            n in 1usize..5,
        ) {
            let items: Vec<EvidenceItem> =
                scored.iter().enumerate().map(|(i, (r, c))| item(i as u64, *r, *c)).collect();
            let bundle = select_bundle(&items, &[], n);
            proptest::prop_assert!(bundle.len() <= n);
            proptest::prop_assert!(bundle.items.iter().all(|i| i.relevance != Relevance::NotUseful));
            proptest::prop_assert!(bundle.items.windows(2).all(|w| w[0].relevance >= w[1].relevance));
            let useful = items.iter().filter(|i| i.relevance != Relevance::NotUseful).count();
            proptest::prop_assert_eq!(bundle.len(), useful.min(n));
        }
    }
}
