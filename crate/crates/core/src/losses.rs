//! Retrieval and generation losses.
//!
//! The retrieval loss compares each matched region feature with its target's
//! definition embedding through `−log((1 + cos) / 2)`, clamped away from
//! zero; `NoObject` targets are weighted by 0.1 and, having a zero embedding,
//! contribute a constant. Generation uses masked cross-entropy in the first
//! stage and a self-critical reward (CIDEr plus a bonus per retrieved term
//! mentioned) in the second.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge::KnowledgeStore;
use crate::matching::{Assignment, TargetSet};
use crate::metrics::{mentions, normalize_tokens, CiderScorer};
use crate::retrieval::RegionFeature;
use crate::tensor::{dot, log_sum_exp, Matrix};

/// Lower clamp on the mapped similarity before taking the log.
pub const SIM_EPS: f64 = 1e-6;
/// Weight of `NoObject` terms in the retrieval loss.
pub const NO_OBJECT_WEIGHT: f64 = 0.1;
/// Default weight of the retrieved-vocabulary bonus.
pub const DEFAULT_ALPHA: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub retrieval_loss: f64,
    pub generation_loss: f64,
    pub total: f64,
    pub grad_region_features: Matrix,
}

impl LossReport {
    pub fn new(retrieval_loss: f64, generation_loss: f64, grad_region_features: Matrix) -> Self {
        LossReport {
            retrieval_loss,
            generation_loss,
            total: retrieval_loss + generation_loss,
            grad_region_features,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub cider: f64,
    pub vocab_hits: usize,
    pub alpha: f64,
    pub total: f64,
}

/// One term of the retrieval loss and its gradient with respect to `r`.
fn matched_term(r: &[f64], d: &[f64], weight: f64) -> (f64, Vec<f64>) {
    let rr = dot(r, r);
    let dd = dot(d, d);
    let mut grad = vec![0.0; r.len()];
    if rr == 0.0 || dd == 0.0 {
        // cosine is pinned at 0 by the zero-vector convention
        return (weight * -(0.5f64).ln(), grad);
    }
    let (rn, dn) = (rr.sqrt(), dd.sqrt());
    let cos = (dot(r, d) / (rn * dn)).clamp(-1.0, 1.0);
    let s = (1.0 + cos) / 2.0;
    if s < SIM_EPS {
        return (weight * -SIM_EPS.ln(), grad);
    }
    let s = s.min(1.0);
    // d(−ln s)/d cos = −1/(2s);  d cos/dr = d/(|r||d|) − cos·r/|r|²
    let coef = -weight / (2.0 * s);
    for ((g, &ri), &di) in grad.iter_mut().zip(r).zip(d) {
        *g = coef * (di / (rn * dn) - cos * ri / rr);
    }
    (weight * -s.ln(), grad)
}

/// Retrieval loss over the optimal matching, with its exact gradient with
/// respect to every region feature (K × D).
pub fn hungarian_loss(
    targets: &TargetSet,
    assignment: &Assignment,
    region_features: &[RegionFeature],
    store: &KnowledgeStore,
) -> Result<(f64, Matrix)> {
    let k = targets.len();
    assignment.validate(k)?;
    if region_features.len() != k {
        return Err(Error::InvalidAssignment(format!(
            "{} region features for {k} targets",
            region_features.len()
        )));
    }
    let dim = store.dimension();
    let zero = vec![0.0; dim];
    let mut grad = Matrix::zeros(k, dim);
    let mut loss = 0.0;
    for (i, label) in targets.targets.iter().enumerate() {
        let j = assignment.permutation[i];
        let r = &region_features[j].vector;
        if r.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: r.len(),
            });
        }
        let (d, w) = match label.term() {
            Some(t) => (store.embedding(t)?, 1.0),
            None => (zero.as_slice(), NO_OBJECT_WEIGHT),
        };
        let (l, g) = matched_term(r, d, w);
        loss += l;
        for (acc, v) in grad.row_mut(j).iter_mut().zip(&g) {
            *acc += v;
        }
    }
    Ok((loss, grad))
}

/// Mean cross-entropy of the ground-truth token at each masked position,
/// with the softmax-minus-one-hot gradient (scaled by the mean).
pub fn masked_ce_loss(
    token_logits: &[(usize, Vec<f64>)],
    gt_tokens: &[usize],
) -> Result<(f64, Vec<Vec<f64>>)> {
    if token_logits.is_empty() {
        return Err(Error::EmptyMaskSet);
    }
    if token_logits.len() != gt_tokens.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} logit rows vs {} targets",
            token_logits.len(),
            gt_tokens.len()
        )));
    }
    let m = token_logits.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(token_logits.len());
    for ((_, logits), &t) in token_logits.iter().zip(gt_tokens) {
        if t >= logits.len() {
            return Err(Error::ShapeMismatch(format!(
                "target token {t} outside vocabulary of {}",
                logits.len()
            )));
        }
        let lse = log_sum_exp(logits);
        loss += lse - logits[t];
        let mut g: Vec<f64> = logits.iter().map(|z| (z - lse).exp() / m).collect();
        g[t] -= 1.0 / m;
        grads.push(g);
    }
    Ok((loss / m, grads))
}

/// Number of distinct terms from `retrieved_vocab` appearing contiguously in
/// the caption.
pub fn vocab_hits<S: AsRef<str>>(caption: &[S], retrieved_vocab: &[String]) -> usize {
    let caption = normalize_tokens(caption);
    let mut seen: Vec<&str> = Vec::new();
    for t in retrieved_vocab {
        if !seen.contains(&t.as_str()) && mentions(&caption, t) {
            seen.push(t);
        }
    }
    seen.len()
}

/// Stage-two reward: CIDEr of the caption plus `alpha` per retrieved term it
/// mentions.
pub fn scst_reward<S: AsRef<str>>(
    caption: &[S],
    references: &[Vec<String>],
    retrieved_vocab: &[String],
    alpha: f64,
    idf_corpus: &CiderScorer,
) -> Result<RewardBreakdown> {
    if normalize_tokens(caption).is_empty() {
        return Err(Error::EmptyCaption);
    }
    let cider = idf_corpus.score(caption, references)?;
    let hits = vocab_hits(caption, retrieved_vocab);
    Ok(RewardBreakdown {
        cider,
        vocab_hits: hits,
        alpha,
        total: cider + alpha * hits as f64,
    })
}

/// Multiplier for the gradient of the sampled caption's log-probability:
/// `−(sample_reward − baseline_reward)`. Descending along
/// `multiplier · ∇ log p(sample)` raises the probability of samples that beat
/// the greedy baseline.
pub fn scst_gradient(sample_logprob: f64, sample_reward: f64, baseline_reward: f64) -> f64 {
    debug_assert!(sample_logprob.is_finite());
    -(sample_reward - baseline_reward)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::DefinitionRecord;
    use crate::matching::TargetLabel;
    use crate::retrieval::region_features;

    fn store() -> KnowledgeStore {
        KnowledgeStore::from_records(
            3,
            vec![
                DefinitionRecord {
                    term: "cat".into(),
                    definition: "cat".into(),
                    embedding: Some(vec![1.0, 0.0, 0.0]),
                },
                DefinitionRecord {
                    term: "dog".into(),
                    definition: "dog".into(),
                    embedding: Some(vec![0.0, 0.6, 0.8]),
                },
            ],
        )
        .unwrap()
    }

    fn identity(k: usize) -> Assignment {
        Assignment {
            permutation: (0..k).collect(),
            total_cost: 0.0,
        }
    }

    #[test]
    fn perfect_alignment_costs_nothing() {
        let targets = TargetSet {
            targets: vec![TargetLabel::GroundTruth("dog".into())],
            n_gt: 1,
            n_null: 0,
            n_injected: 0,
        };
        let feats = region_features(&[vec![0.0, 1.2, 1.6]]);
        let (l, g) = hungarian_loss(&targets, &identity(1), &feats, &store()).unwrap();
        assert!(l.abs() < 1e-15);
        assert!(g.data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn no_object_term_is_constant_and_down_weighted() {
        let targets = TargetSet {
            targets: vec![TargetLabel::NoObject],
            n_gt: 0,
            n_null: 1,
            n_injected: 0,
        };
        let feats = region_features(&[vec![0.3, -2.0, 0.1]]);
        let (l, g) = hungarian_loss(&targets, &identity(1), &feats, &store()).unwrap();
        assert_eq!(l, 0.1 * -(0.5f64).ln());
        assert!(g.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn opposite_vector_hits_the_clamp() {
        let targets = TargetSet {
            targets: vec![TargetLabel::GroundTruth("cat".into())],
            n_gt: 1,
            n_null: 0,
            n_injected: 0,
        };
        let feats = region_features(&[vec![-1.0, 0.0, 0.0]]);
        let (l, g) = hungarian_loss(&targets, &identity(1), &feats, &store()).unwrap();
        assert_eq!(l, -SIM_EPS.ln());
        assert!(g.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn invalid_assignment_is_rejected() {
        let targets = TargetSet {
            targets: vec![TargetLabel::NoObject; 2],
            n_gt: 0,
            n_null: 2,
            n_injected: 0,
        };
        let feats = region_features(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        let bad = Assignment {
            permutation: vec![1, 1],
            total_cost: 0.0,
        };
        assert!(matches!(
            hungarian_loss(&targets, &bad, &feats, &store()),
            Err(Error::InvalidAssignment(_))
        ));
    }

    #[test]
    fn ce_reference_values() {
        let (l, _) = masked_ce_loss(&[(0, vec![0.0, 100.0, 0.0])], &[1]).unwrap();
        assert!(l < 1e-30);
        let w = 7;
        let (l, g) = masked_ce_loss(&[(3, vec![0.25; w])], &[2]).unwrap();
        assert!((l - (w as f64).ln()).abs() < 1e-12);
        assert!((g[0].iter().sum::<f64>()).abs() < 1e-12);
        assert!(matches!(masked_ce_loss(&[], &[]), Err(Error::EmptyMaskSet)));
    }

    #[test]
    fn hits_count_distinct_terms() {
        let cap: Vec<String> = "a zebra near a zebra".split(' ').map(String::from).collect();
        assert_eq!(vocab_hits(&cap, &["zebra".into(), "fence".into()]), 1);
        assert_eq!(vocab_hits(&cap, &["zebra".into(), "zebra".into()]), 1);
        assert_eq!(vocab_hits(&cap, &["fence".into()]), 0);
    }

    #[test]
    fn reward_adds_alpha_per_hit() {
        let refs = vec![
            vec![vec!["a".to_string(), "zebra".into(), "grazing".into()]],
            vec![vec!["a".to_string(), "bus".into()]],
        ];
        let scorer = CiderScorer::from_references(&refs).unwrap();
        let cap = ["a", "zebra", "near", "a", "fence"];
        let r = scst_reward(&cap, &refs[0], &["zebra".into(), "fence".into()], DEFAULT_ALPHA, &scorer)
            .unwrap();
        assert_eq!(r.vocab_hits, 2);
        assert!((r.total - (r.cider + 0.6)).abs() < 1e-12);
        let r0 = scst_reward(&cap, &refs[0], &["bus".into()], 0.3, &scorer).unwrap();
        assert_eq!(r0.total, r0.cider);
        assert!(matches!(
            scst_reward(&["."], &refs[0], &[], 0.3, &scorer),
            Err(Error::EmptyCaption)
        ));
    }

    #[test]
    fn self_critical_multiplier() {
        assert_eq!(scst_gradient(-3.0, 1.2, 1.2), 0.0);
        assert!(scst_gradient(-3.0, 1.5, 1.0) < 0.0);
        assert!((scst_gradient(-1.0, 1.7, 1.0) + 0.7).abs() < 1e-12);
    }
}
