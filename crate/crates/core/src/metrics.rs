//! Caption evaluation: CIDEr consensus scoring and per-class mention F1.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest n-gram order used by CIDEr.
pub const MAX_NGRAM: usize = 4;
const CIDER_SCALE: f64 = 10.0;

/// Lowercases, splits on whitespace and strips terminal punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(normalize_token)
        .collect()
}

/// Applies the [`tokenize`] normalization to an existing token sequence.
pub fn normalize_tokens<S: AsRef<str>>(tokens: &[S]) -> Vec<String> {
    tokens
        .iter()
        .filter_map(|t| normalize_token(t.as_ref()))
        .collect()
}

fn normalize_token(t: &str) -> Option<String> {
    let t = t
        .trim_end_matches(|c: char| c.is_ascii_punctuation())
        .to_lowercase();
    (!t.is_empty()).then_some(t)
}

/// True iff `needle` occurs as a contiguous run in `haystack`.
pub fn contains_phrase<S: AsRef<str>, T: AsRef<str>>(haystack: &[S], needle: &[T]) -> bool {
    if needle.is_empty() || needle.len() > haystack.len() {
        return false;
    }
    haystack
        .windows(needle.len())
        .any(|w| w.iter().zip(needle).all(|(a, b)| a.as_ref() == b.as_ref()))
}

/// True iff the (possibly multi-word) term occurs in the caption.
pub fn mentions<S: AsRef<str>>(caption: &[S], term: &str) -> bool {
    let needle: Vec<&str> = term.split_whitespace().collect();
    contains_phrase(caption, &needle)
}

type NGram = Vec<String>;

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<NGram, f64> {
    let mut m = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w.to_vec()).or_insert(0.0) += 1.0;
        }
    }
    m
}

/// Document frequencies of reference n-grams over a corpus; the IDF side of
/// CIDEr, reusable for scoring captions outside the corpus.
#[derive(Debug, Clone, Default)]
pub struct CiderScorer {
    doc_freq: [BTreeMap<NGram, usize>; MAX_NGRAM],
    n_items: usize,
}

impl CiderScorer {
    pub fn from_references(references: &[Vec<Vec<String>>]) -> Result<Self> {
        if references.len() < 2 {
            return Err(Error::CorpusTooSmall(references.len()));
        }
        let mut s = CiderScorer {
            n_items: references.len(),
            ..Default::default()
        };
        for (i, refs) in references.iter().enumerate() {
            if refs.is_empty() {
                return Err(Error::EmptyReferenceSet(i));
            }
            for n in 1..=MAX_NGRAM {
                let mut present = HashSet::new();
                for r in refs {
                    let r = normalize_tokens(r);
                    for g in ngram_counts(&r, n).into_keys() {
                        present.insert(g);
                    }
                }
                for g in present {
                    *s.doc_freq[n - 1].entry(g).or_insert(0) += 1;
                }
            }
        }
        Ok(s)
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    /// `ln(|corpus| / (1 + df))`.
    pub fn idf(&self, ngram: &[String]) -> f64 {
        let n = ngram.len();
        let df = self.doc_freq[n - 1].get(ngram).copied().unwrap_or(0);
        (self.n_items as f64 / (1.0 + df as f64)).ln()
    }

    fn tfidf(&self, tokens: &[String], n: usize) -> BTreeMap<NGram, f64> {
        ngram_counts(tokens, n)
            .into_iter()
            .map(|(g, c)| {
                let w = c * self.idf(&g);
                (g, w)
            })
            .collect()
    }

    /// CIDEr of one candidate against its references.
    pub fn score<S: AsRef<str>>(&self, candidate: &[S], references: &[Vec<String>]) -> Result<f64> {
        if references.is_empty() {
            return Err(Error::EmptyReferenceSet(0));
        }
        let cand = normalize_tokens(candidate);
        let refs: Vec<Vec<String>> = references.iter().map(|r| normalize_tokens(r)).collect();
        let mut total = 0.0;
        for n in 1..=MAX_NGRAM {
            let cv = self.tfidf(&cand, n);
            let per_ref: f64 = refs
                .iter()
                .map(|r| sparse_cosine(&cv, &self.tfidf(r, n)))
                .sum();
            total += CIDER_SCALE * per_ref / refs.len() as f64;
        }
        Ok(total / MAX_NGRAM as f64)
    }
}

fn sparse_cosine(a: &BTreeMap<NGram, f64>, b: &BTreeMap<NGram, f64>) -> f64 {
    let na: f64 = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let d: f64 = a.iter().filter_map(|(k, v)| b.get(k).map(|w| v * w)).sum();
    d / (na * nb)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiderScores {
    pub per_item: Vec<f64>,
    pub mean: f64,
}

/// Corpus CIDEr; IDF statistics come from the given references.
pub fn cider(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<CiderScores> {
    if candidates.len() != references.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} candidates vs {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    let scorer = CiderScorer::from_references(references)?;
    let per_item = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| scorer.score(c, r))
        .collect::<Result<Vec<_>>>()?;
    let mean = per_item.iter().sum::<f64>() / per_item.len() as f64;
    Ok(CiderScores { per_item, mean })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassF1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ClassF1 {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ClassF1 {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
        }
    }
}

/// One evaluated scene: its ground-truth classes and the generated caption.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredScene {
    pub gt_classes: HashSet<String>,
    pub caption: Vec<String>,
}

/// Mention F1 for one class: a scene is predicted positive when the caption
/// mentions the class, actually positive when the class is in its ground
/// truth.
pub fn novel_f1(scenes: &[ScoredScene], class: &str) -> Result<ClassF1> {
    if scenes.is_empty() {
        return Err(Error::EmptySceneList);
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for s in scenes {
        let predicted = mentions(&normalize_tokens(&s.caption), class);
        let actual = s.gt_classes.contains(class);
        match (predicted, actual) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(ClassF1::from_counts(tp, fp, fn_))
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cider_mean: f64,
    pub per_class_f1: BTreeMap<String, ClassF1>,
    pub avg_f1: f64,
}

impl EvalReport {
    /// F1 for each class plus their unweighted mean.
    pub fn build(cider_mean: f64, scenes: &[ScoredScene], classes: &[String]) -> Result<Self> {
        let mut per_class_f1 = BTreeMap::new();
        for c in classes {
            per_class_f1.insert(c.clone(), novel_f1(scenes, c)?);
        }
        let avg_f1 = if per_class_f1.is_empty() {
            0.0
        } else {
            per_class_f1.values().map(|c| c.f1).sum::<f64>() / per_class_f1.len() as f64
        };
        Ok(EvalReport {
            cider_mean,
            per_class_f1,
            avg_f1,
        })
    }

    pub fn mean_f1_over<'a>(&self, classes: impl IntoIterator<Item = &'a String>) -> f64 {
        let vals: Vec<f64> = classes
            .into_iter()
            .filter_map(|c| self.per_class_f1.get(c).map(|s| s.f1))
            .collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }

    /// One row per class: `term,tp,fp,fn,precision,recall,f1`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "term,tp,fp,fn,precision,recall,f1")?;
        for (term, s) in &self.per_class_f1 {
            writeln!(
                out,
                "{term},{},{},{},{},{},{}",
                s.tp, s.fp, s.fn_, s.precision, s.recall, s.f1
            )?;
        }
        Ok(())
    }
}
