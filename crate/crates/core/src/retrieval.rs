//! Cosine similarity and per-region vocabulary retrieval.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge::{KnowledgeStore, NO_OBJECT};
use crate::tensor::dot;

/// Default number of image-level terms kept at inference.
pub const DEFAULT_TOP_K: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionFeature {
    pub region_index: usize,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTerm {
    pub term: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    /// One retrieved term per region, in region order.
    pub per_region: Vec<ScoredTerm>,
    /// Store index of each region's term.
    pub per_region_index: Vec<usize>,
    /// Deduplicated image-level vocabulary, best first.
    pub top_vocab: Vec<ScoredTerm>,
}

impl RetrievalResult {
    pub fn terms(&self) -> Vec<&str> {
        self.per_region.iter().map(|s| s.term.as_str()).collect()
    }

    pub fn top_terms(&self) -> Vec<String> {
        self.top_vocab.iter().map(|s| s.term.clone()).collect()
    }
}

/// `a·b / (‖a‖‖b‖)`, with 0 when exactly one side is zero and 1 when both are.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(cosine_unchecked(a, b))
}

pub(crate) fn cosine_unchecked(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a);
    let nb = dot(b, b);
    match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (dot(a, b) / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0),
    }
}

/// Best store entry for one vector: `(index, score)`, lowest index on ties.
pub fn best_entry(vector: &[f64], store: &KnowledgeStore) -> Result<(usize, f64)> {
    if store.is_empty() {
        return Err(Error::EmptyStore);
    }
    if vector.len() != store.dimension() {
        return Err(Error::DimensionMismatch {
            expected: store.dimension(),
            got: vector.len(),
        });
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (j, e) in store.entries().iter().enumerate() {
        let s = cosine_unchecked(vector, &e.embedding);
        if s > best.1 {
            best = (j, s);
        }
    }
    Ok(best)
}

/// Argmax retrieval for every region. Several regions may retrieve the same
/// term. `top_vocab` is filled with the default `k`.
pub fn retrieve_per_region(
    features: &[RegionFeature],
    store: &KnowledgeStore,
) -> Result<RetrievalResult> {
    retrieve_with_k(features, store, DEFAULT_TOP_K)
}

pub fn retrieve_with_k(
    features: &[RegionFeature],
    store: &KnowledgeStore,
    k: usize,
) -> Result<RetrievalResult> {
    let mut per_region = Vec::with_capacity(features.len());
    let mut per_region_index = Vec::with_capacity(features.len());
    for f in features {
        let (j, score) = best_entry(&f.vector, store)?;
        per_region.push(ScoredTerm {
            term: store.entry(j).term.clone(),
            score,
        });
        per_region_index.push(j);
    }
    let mut result = RetrievalResult {
        per_region,
        per_region_index,
        top_vocab: Vec::new(),
    };
    result.top_vocab = top_k_vocab(&result, k.max(1));
    Ok(result)
}

/// Pools the per-region terms, drops `NO_OBJECT`, keeps each term's best
/// score, sorts by score (then term) and truncates to `k`.
pub fn top_k_vocab(result: &RetrievalResult, k: usize) -> Vec<ScoredTerm> {
    let mut best: Vec<ScoredTerm> = Vec::new();
    for st in &result.per_region {
        if st.term == NO_OBJECT {
            continue;
        }
        match best.iter_mut().find(|b| b.term == st.term) {
            Some(b) => b.score = b.score.max(st.score),
            None => best.push(st.clone()),
        }
    }
    best.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.term.cmp(&b.term))
    });
    best.truncate(k);
    best
}

/// Wraps raw vectors as region features in slot order.
pub fn region_features(rows: &[Vec<f64>]) -> Vec<RegionFeature> {
    rows.iter()
        .enumerate()
        .map(|(i, v)| RegionFeature {
            region_index: i,
            vector: v.clone(),
        })
        .collect()
}
