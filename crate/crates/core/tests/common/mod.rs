#![allow(dead_code)]

use std::sync::{Arc, RwLock};

use serde_json::{json, Value};
use stackrag::llm_gateway::{Gateway, MockBackend, MockScript, ScriptedChat};
use stackrag::orchestrator::{Pipeline, SessionConfig};
use stackrag::stackexchange::{ClientConfig, StackExchangeClient};
use stackrag::transport::{Exchange, ExchangeLog, FixtureTransport, HttpRequest, HttpResponse, FIXTURE_FORMAT_VERSION};
use stackrag::vector_store::VectorStore;

pub const COMPLEX: &str = "complex enough to be divided";
pub const KEYWORDS: &str = "question-to-query parser";
pub const SCORER: &str = "Rate the given evidence";
pub const CHECKER: &str = "whether you have enough evidence";
pub const GENERATOR: &str = "construct the final answer";

/// Reference implementations written straight from the formulas, sharing no
/// code with the library.
pub mod oracle {
    pub fn bm25(query: &[&str], docs: &[Vec<&str>], k1: f64, b: f64) -> Vec<f64> {
        let n = docs.len() as f64;
        let avgdl = docs.iter().map(Vec::len).sum::<usize>() as f64 / n;
        docs.iter()
            .map(|doc| {
                let mut score = 0.0;
                for term in query {
                    let tf = doc.iter().filter(|t| *t == term).count() as f64;
                    if tf == 0.0 {
                        continue;
                    }
                    let df = docs.iter().filter(|d| d.contains(term)).count() as f64;
                    let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                    let dl = doc.len() as f64;
                    score += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / avgdl));
                }
                score
            })
            .collect()
    }

    /// Indices by descending value; equal values keep index order.
    pub fn order_desc(values: &[f64]) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..values.len()).collect();
        for i in 1..idx.len() {
            let mut j = i;
            while j > 0 && values[idx[j]] > values[idx[j - 1]] {
                idx.swap(j, j - 1);
                j -= 1;
            }
        }
        idx
    }

    pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let mut ab = 0.0;
        let mut aa = 0.0;
        let mut bb = 0.0;
        for (x, y) in a.iter().zip(b) {
            ab += x * y;
            aa += x * x;
            bb += y * y;
        }
        ab / (aa.sqrt() * bb.sqrt())
    }

    /// Greedy MMR recomputing every marginal score from scratch each round.
    pub fn mmr(query: &[f64], cands: &[Vec<f64>], k: usize, lambda: f64) -> Vec<usize> {
        let mut selected: Vec<usize> = Vec::new();
        while selected.len() < k.min(cands.len()) {
            let mut best: Option<(usize, f64)> = None;
            for i in 0..cands.len() {
                if selected.contains(&i) {
                    continue;
                }
                let redundancy = selected
                    .iter()
                    .map(|&s| cosine(&cands[i], &cands[s]))
                    .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))))
                    .unwrap_or(0.0);
                let value = lambda * cosine(query, &cands[i]) - (1.0 - lambda) * redundancy;
                if best.is_none() || value > best.unwrap().1 {
                    best = Some((i, value));
                }
            }
            selected.push(best.unwrap().0);
        }
        selected
    }
}

pub fn question(id: u64, title: &str, body: &str, accepted: bool) -> Value {
    let mut q = json!({
        "question_id": id,
        "link": format!("https://stackoverflow.com/questions/{id}"),
        "title": title,
        "body": body,
        "creation_date": 1_500_000_000 + id as i64,
    });
    if accepted {
        q["accepted_answer_id"] = json!(id * 10);
    }
    q
}

pub fn answer(question_id: u64, answer_id: u64, score: i64, accepted: bool) -> Value {
    json!({
        "answer_id": answer_id,
        "question_id": question_id,
        "body": format!("<p>answer {answer_id} for question {question_id}</p>"),
        "score": score,
        "creation_date": 1_600_000_000 + answer_id as i64,
        "is_accepted": accepted,
    })
}

/// Canned StackExchange responses keyed the way the client will ask.
pub struct SeFixtures {
    probe: StackExchangeClient,
    pub log: ExchangeLog,
}

impl Default for SeFixtures {
    fn default() -> Self {
        Self {
            probe: StackExchangeClient::new(Arc::new(FixtureTransport::default()), ClientConfig::default()),
            log: ExchangeLog { version: FIXTURE_FORMAT_VERSION, exchanges: Vec::new() },
        }
    }
}

impl SeFixtures {
    fn reply(&mut self, url: String, items: Vec<Value>) {
        let body = json!({"items": items, "has_more": false, "quota_max": 10000, "quota_remaining": 9000});
        let sig = HttpRequest::get(url).signature();
        self.log.exchanges.push(Exchange::new(sig, &HttpResponse { status: 200, body: body.to_string() }));
    }

    pub fn search(&mut self, keyword: &str, items: Vec<Value>) {
        let url = self.probe.search_url(keyword);
        self.reply(url, items);
    }

    /// `ids` must be ascending, as the client requests them.
    pub fn answers(&mut self, ids: &[u64], items: Vec<Value>) {
        let url = self.probe.answers_url(ids, 1);
        self.reply(url, items);
    }

    pub fn client(&self) -> Arc<StackExchangeClient> {
        Arc::new(StackExchangeClient::new(
            Arc::new(FixtureTransport::new(self.log.clone())),
            ClientConfig::default(),
        ))
    }
}

pub struct Harness {
    pub pipeline: Pipeline,
    pub backend: Arc<MockBackend>,
}

pub fn harness(se: &SeFixtures, chat: Vec<ScriptedChat>, dimension: usize, store: VectorStore) -> Harness {
    harness_with(se, chat, dimension, store, SessionConfig::default())
}

pub fn harness_with(
    se: &SeFixtures,
    chat: Vec<ScriptedChat>,
    dimension: usize,
    store: VectorStore,
    config: SessionConfig,
) -> Harness {
    let backend = Arc::new(MockBackend::new(MockScript { chat, ..MockScript::new(dimension) }));
    let gateway = Arc::new(Gateway::mock(backend.clone()));
    let pipeline = Pipeline::new(gateway, se.client(), Arc::new(RwLock::new(store)), config).unwrap();
    Harness { pipeline, backend }
}

pub fn chat_script(keywords: &str, checker: &str) -> Vec<ScriptedChat> {
    vec![
        ScriptedChat::always(COMPLEX, "FALSE"),
        ScriptedChat::always(KEYWORDS, keywords),
        ScriptedChat::always(CHECKER, checker),
        ScriptedChat::always(
            GENERATOR,
            "Walk both lists with two pointers.\n\nLinks used:\n- [Merge sorted linked lists 1] https://stackoverflow.com/questions/1001\n",
        ),
        ScriptedChat::always(SCORER, "4"),
    ]
}

pub const FUNNEL_QUERY: &str = "How do I merge two sorted linked lists?";
pub const FUNNEL_KEYWORDS: [&str; 3] = ["merge linked lists", "sorted list merge", "merge in place"];

pub fn relevant_id(i: u64) -> u64 {
    1000 + i
}

pub fn unrelated_id(i: u64) -> u64 {
    5000 + i
}

/// Three keyword searches of 30 hits each: 90 raw hits, 20 of them repeats,
/// so 70 unique questions. Fifty mention the query terms and the other
/// twenty share no term with it. Of the fifty, 35 have an accepted answer.
pub fn funnel_fixtures() -> SeFixtures {
    let relevant = |i: u64| {
        question(
            relevant_id(i),
            &format!("Merge sorted linked lists {i}"),
            &format!("<p>I need to merge two sorted linked lists, attempt {i}.</p>"),
            i <= 35,
        )
    };
    let unrelated = |i: u64| {
        question(unrelated_id(i), &format!("Centering a flexbox child {i}"), "<p>CSS alignment question.</p>", true)
    };
    let mut se = SeFixtures::default();
    se.search(FUNNEL_KEYWORDS[0], (1..=30).map(relevant).collect());
    se.search(FUNNEL_KEYWORDS[1], (21..=50).map(relevant).collect());
    se.search(FUNNEL_KEYWORDS[2], (1..=20).map(unrelated).chain((1..=10).map(relevant)).collect());
    let ids: Vec<u64> = (1..=35).map(relevant_id).collect();
    let answers = ids
        .iter()
        .flat_map(|&id| {
            vec![answer(id, id * 10, 12, true), answer(id, id * 10 + 1, 30, false), answer(id, id * 10 + 2, 4, false), answer(id, id * 10 + 3, 1, false)]
        })
        .collect();
    se.answers(&ids, answers);
    se
}

pub fn funnel_keywords_json() -> String {
    serde_json::to_string(&FUNNEL_KEYWORDS).unwrap()
}
