//! Ranking math: Okapi BM-25 top-k, cosine similarity and Maximal Marginal
//! Relevance re-ranking.
//!
//! BM-25 uses the smoothed IDF `ln(1 + (N - df + 0.5) / (df + 0.5))`, which is
//! never negative, so every score is `>= 0`. Query terms are summed per
//! occurrence: a term repeated in the query contributes once per repetition.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::tokenize;

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RankingError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("cosine similarity is undefined for a zero vector")]
    ZeroVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDoc<T> {
    pub doc_id: T,
    pub score: f64,
}

/// Okapi BM-25 over `docs`, returning at most `k` documents by descending
/// score. Equal scores keep input order.
pub fn bm25_topk<T, S>(query: &str, docs: &[(T, S)], k: usize) -> Vec<ScoredDoc<T>>
where
    T: Clone,
    S: AsRef<str>,
{
    if docs.is_empty() || k == 0 {
        return Vec::new();
    }
    let query_terms = tokenize(query);

    let term_counts: Vec<HashMap<String, usize>> = docs
        .iter()
        .map(|(_, text)| {
            let mut counts = HashMap::new();
            for token in tokenize(text.as_ref()) {
                *counts.entry(token).or_insert(0) += 1;
            }
            counts
        })
        .collect();
    let lengths: Vec<usize> = term_counts.iter().map(|c| c.values().sum()).collect();
    let total_len: usize = lengths.iter().sum();
    let n = docs.len() as f64;
    let avgdl = total_len as f64 / n;

    let mut idf: HashMap<&str, f64> = HashMap::new();
    for term in &query_terms {
        idf.entry(term.as_str()).or_insert_with(|| {
            let df = term_counts.iter().filter(|c| c.contains_key(term)).count() as f64;
            (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
        });
    }

    let mut scored: Vec<ScoredDoc<T>> = docs
        .iter()
        .zip(term_counts.iter().zip(&lengths))
        .map(|((id, _), (counts, &len))| {
            let dl = len as f64;
            let score = query_terms.iter().fold(0.0, |acc, term| {
                let tf = counts.get(term).copied().unwrap_or(0) as f64;
                if tf == 0.0 {
                    return acc;
                }
                let norm = if avgdl > 0.0 { dl / avgdl } else { 0.0 };
                acc + idf[term.as_str()] * (tf * (BM25_K1 + 1.0))
                    / (tf + BM25_K1 * (1.0 - BM25_B + BM25_B * norm))
            });
            ScoredDoc { doc_id: id.clone(), score }
        })
        .collect();

    // stable: ties keep input order
    scored.sort_by(|a, b| b.score.total_cmp(&a.score));
    scored.truncate(k);
    scored
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, RankingError> {
    if a.len() != b.len() {
        return Err(RankingError::DimensionMismatch { left: a.len(), right: b.len() });
    }
    let denom = norm(a) * norm(b);
    if denom == 0.0 {
        return Err(RankingError::ZeroVector);
    }
    Ok((dot(a, b) / denom).clamp(-1.0, 1.0))
}

/// Greedy Maximal Marginal Relevance selection.
///
/// Each step picks the unselected candidate maximizing
/// `lambda * sim(query, d) - (1 - lambda) * max_{s in selected} sim(d, s)`;
/// the redundancy term is 0 for the first pick. Ties go to the earlier
/// candidate.
pub fn mmr_select<T, V>(
    query: &[f64],
    candidates: &[(T, V)],
    k: usize,
    lambda: f64,
) -> Result<Vec<T>, RankingError>
where
    T: Clone,
    V: AsRef<[f64]>,
{
    let relevance = candidates
        .iter()
        .map(|(_, v)| cosine(query, v.as_ref()))
        .collect::<Result<Vec<_>, _>>()?;

    let take = k.min(candidates.len());
    let mut selected: Vec<usize> = Vec::with_capacity(take);
    let mut taken = vec![false; candidates.len()];
    // max similarity of each candidate to anything selected so far
    let mut redundancy = vec![f64::NEG_INFINITY; candidates.len()];

    while selected.len() < take {
        let mut best: Option<(usize, f64)> = None;
        for (i, &rel) in relevance.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let penalty = if selected.is_empty() { 0.0 } else { redundancy[i] };
            let value = lambda * rel - (1.0 - lambda) * penalty;
            if best.is_none_or(|(_, b)| value > b) {
                best = Some((i, value));
            }
        }
        let Some((pick, _)) = best else { break };
        taken[pick] = true;
        selected.push(pick);
        let picked = candidates[pick].1.as_ref();
        for (i, (_, v)) in candidates.iter().enumerate() {
            if !taken[i] {
                redundancy[i] = redundancy[i].max(cosine(v.as_ref(), picked)?);
            }
        }
    }

    Ok(selected.into_iter().map(|i| candidates[i].0.clone()).collect())
}


#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn docs(texts: &[&str]) -> Vec<(usize, String)> {
        texts.iter().enumerate().map(|(i, t)| (i, t.to_string())).collect()
    }

    #[test]
    fn zero_overlap_keeps_input_order() {
        let corpus = docs(&["alpha beta", "gamma", "delta", "epsilon"]);
        let top = bm25_topk("zeta", &corpus, 3);
        assert_eq!(top.iter().map(|d| d.doc_id).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(top.iter().all(|d| d.score == 0.0));
    }

    #[test]
    fn only_matching_doc_ranks_first() {
        let corpus = docs(&["nothing here", "websocket scaling"]);
        let top = bm25_topk("websocket", &corpus, 2);
        assert_eq!(top[0].doc_id, 1);
        assert!(top[0].score > 0.0);
        assert_eq!(top[1].score, 0.0);
    }

    #[test]
    fn three_doc_cat_corpus_matches_hand_computation() {
        // N=3, df(cat)=2, idf = ln(1 + 1.5/2.5) = ln(1.6)
        // lengths 3,3,1 -> avgdl = 7/3
        // d0: tf=1, dl=3: 1*2.2 / (1 + 1.2*(0.25 + 0.75*9/7))
        // d1: tf=3, dl=3: 3*2.2 / (3 + 1.2*(0.25 + 0.75*9/7))
        let idf = 1.6f64.ln();
        let denom_norm = 1.2 * (0.25 + 0.75 * 9.0 / 7.0);
        let s0 = idf * 2.2 / (1.0 + denom_norm);
        let s1 = idf * 6.6 / (3.0 + denom_norm);
        assert!((s0 - 0.420_817_202_929_321_4).abs() < 1e-12, "{s0}");
        assert!((s1 - 0.695_966_912_536_954_6).abs() < 1e-12, "{s1}");

        let corpus = docs(&["the cat sat", "cat cat cat", "dog"]);
        let top = bm25_topk("cat", &corpus, 3);
        assert_eq!(top.iter().map(|d| d.doc_id).collect::<Vec<_>>(), vec![1, 0, 2]);
        assert!((top[0].score - s1).abs() < 1e-12);
        assert!((top[1].score - s0).abs() < 1e-12);
        assert_eq!(top[2].score, 0.0);
    }

    #[test]
    fn bm25_edge_cases() {
        let empty: Vec<(usize, String)> = Vec::new();
        assert!(bm25_topk("q", &empty, 5).is_empty());
        let corpus = docs(&["", ""]);
        let top = bm25_topk("anything", &corpus, 5);
        assert_eq!(top.len(), 2);
        assert!(top.iter().all(|d| d.score == 0.0));
        assert_eq!(bm25_topk("a", &docs(&["a", "a b", "c"]), 1).len(), 1);
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(
            cosine(&[1.0], &[1.0, 0.0]),
            Err(RankingError::DimensionMismatch { left: 1, right: 2 })
        );
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(RankingError::ZeroVector));
    }

    #[test]
    fn mmr_first_pick_is_most_similar() {
        let cands = vec![("a", vec![0.0, 1.0]), ("b", vec![1.0, 0.2]), ("c", vec![1.0, 1.0])];
        assert_eq!(mmr_select(&[1.0, 0.0], &cands, 1, 0.5).unwrap(), vec!["b"]);
    }

    #[test]
    fn mmr_hand_traced_instance() {
        // query (1,0); a=(1,0) b=(0.9,0.1) c=(0,1) d=(0.7,0.7), lambda 0.5
        // relevance: a=1, b=.99388, c=0, d=.70711
        // step1: a (0.5*1)
        // step2 objectives are all ~0 (b: .497-.497, c: 0-0, d: .354-.354), so
        // rounding decides; compare against the oracle rather than hand values
        let q = [1.0, 0.0];
        let cands = vec![
            vec![1.0, 0.0],
            vec![0.9, 0.1],
            vec![0.0, 1.0],
            vec![0.7, 0.7],
        ];
        let labelled: Vec<(usize, Vec<f64>)> = cands.iter().cloned().enumerate().collect();
        let got = mmr_select(&q, &labelled, 3, 0.5).unwrap();
        assert_eq!(got, oracle::mmr(&q, &cands, 3, 0.5));
        assert_eq!(got[0], 0);
        assert_eq!(got.len(), 3);
    }

    #[test]
    fn mmr_diversity_skips_duplicate() {
        // a and b are identical; with lambda 0.3 the second pick is the distinct c
        let cands = vec![("a", vec![1.0, 0.1]), ("b", vec![1.0, 0.1]), ("c", vec![0.2, 1.0])];
        let got = mmr_select(&[1.0, 0.0], &cands, 2, 0.3).unwrap();
        assert_eq!(got, vec!["a", "c"]);
        let pure = mmr_select(&[1.0, 0.0], &cands, 2, 1.0).unwrap();
        assert_eq!(pure, vec!["a", "b"]);
    }

    #[test]
    fn mmr_dimension_mismatch() {
        let cands = vec![("a", vec![1.0, 0.0, 0.0])];
        assert!(matches!(
            mmr_select(&[1.0, 0.0], &cands, 1, 0.5),
            Err(RankingError::DimensionMismatch { .. })
        ));
    }

    fn vector(dim: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-1.0f64..1.0, dim)
            .prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-6))
    }

    fn corpus_text() -> impl Strategy<Value = String> {
        proptest::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e", "f"]), 0..12)
            .prop_map(|w| w.join(" "))
    }

    proptest! {
        #[test]
        fn bm25_matches_direct_formula(
            texts in proptest::collection::vec(corpus_text(), 1..8),
            query in proptest::collection::vec(prop::sample::select(vec!["a", "b", "c", "x"]), 0..6),
            k in 1usize..10,
        ) {
            let query = query.join(" ");
            let corpus: Vec<(usize, String)> = texts.iter().cloned().enumerate().collect();
            let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            let expected = oracle::bm25_scores(&query, &refs, BM25_K1, BM25_B);
            let order = oracle::rank_desc(&expected);
            let got = bm25_topk(&query, &corpus, k);
            prop_assert_eq!(got.len(), k.min(texts.len()));
            for (doc, &idx) in got.iter().zip(&order) {
                prop_assert_eq!(doc.doc_id, idx);
                prop_assert!((doc.score - expected[idx]).abs() < 1e-9);
                prop_assert!(doc.score >= 0.0);
            }
        }

        #[test]
        fn cosine_self_is_one_and_symmetric(a in vector(6), b in vector(6)) {
            prop_assert!((cosine(&a, &a).unwrap() - 1.0).abs() < 1e-9);
            prop_assert_eq!(cosine(&a, &b).unwrap(), cosine(&b, &a).unwrap());
        }

        #[test]
        fn mmr_lambda_one_is_top_k_by_cosine(
            q in vector(4),
            cands in proptest::collection::vec(vector(4), 1..10),
            k in 1usize..6,
        ) {
            let labelled: Vec<(usize, Vec<f64>)> = cands.iter().cloned().enumerate().collect();
            let got = mmr_select(&q, &labelled, k, 1.0).unwrap();
            let sims: Vec<f64> = cands.iter().map(|c| cosine(&q, c).unwrap()).collect();
            let mut order: Vec<usize> = (0..cands.len()).collect();
            order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]));
            order.truncate(k);
            prop_assert_eq!(got, order);
        }

        #[test]
        fn mmr_output_is_duplicate_free_subset(
            q in vector(3),
            cands in proptest::collection::vec(vector(3), 0..10),
            k in 1usize..12,
            lambda in 0.0f64..=1.0,
        ) {
            let labelled: Vec<(usize, Vec<f64>)> = cands.iter().cloned().enumerate().collect();
            let got = mmr_select(&q, &labelled, k, lambda).unwrap();
            prop_assert_eq!(got.len(), k.min(cands.len()));
            let mut seen = std::collections::HashSet::new();
            for id in &got {
                prop_assert!(*id < cands.len());
                prop_assert!(seen.insert(*id));
            }
        }
    }
}
