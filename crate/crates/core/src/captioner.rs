//! Caption generation: retrieval, then left-to-right decoding with
//! constraint-tracking beam search over the retrieved vocabulary.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge::KnowledgeStore;
use crate::model::{
    forward_retrieval, image_memory, DecodeState, Decoder, Lexicon, ModelParams, RoiVector,
    TagInput,
};
use crate::retrieval::{region_features, retrieve_with_k, RetrievalResult};
use crate::tensor::log_softmax;
use crate::vocab::Vocabulary;

/// Most retrieved terms tracked as decoding constraints.
pub const MAX_CONSTRAINTS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub k_vocab: usize,
    pub min_constraints: usize,
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 5,
            k_vocab: 5,
            min_constraints: 1,
            max_len: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamState {
    pub tokens: Vec<usize>,
    pub logprob: f64,
    /// Bit `i` set once constraint `i` appears contiguously in `tokens`.
    pub satisfied: u8,
    pub finished: bool,
    /// Log-softmax value of each chosen token.
    pub step_logprobs: Vec<f64>,
}

impl BeamState {
    fn root() -> Self {
        BeamState {
            tokens: Vec::new(),
            logprob: 0.0,
            satisfied: 0,
            finished: false,
            step_logprobs: Vec::new(),
        }
    }

    fn extend(&self, token: usize, lp: f64, stop: usize, max_len: usize, constraints: &[Vec<usize>]) -> Self {
        let mut tokens = self.tokens.clone();
        tokens.push(token);
        let mut satisfied = self.satisfied;
        for (i, c) in constraints.iter().enumerate() {
            if tokens.ends_with(c) {
                satisfied |= 1 << i;
            }
        }
        let mut step_logprobs = self.step_logprobs.clone();
        step_logprobs.push(lp);
        BeamState {
            finished: token == stop || tokens.len() >= max_len,
            tokens,
            logprob: self.logprob + lp,
            satisfied,
            step_logprobs,
        }
    }

    pub fn n_satisfied(&self) -> u32 {
        self.satisfied.count_ones()
    }
}

/// Higher log-probability first, then lexicographically smaller tokens.
fn rank(a: &BeamState, b: &BeamState) -> Ordering {
    b.logprob
        .total_cmp(&a.logprob)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Caption {
    /// Token ids as decoded, including a trailing stop token if emitted.
    pub tokens: Vec<usize>,
    /// Words without the stop token.
    pub words: Vec<String>,
    pub logprob: f64,
    pub constraints: Vec<String>,
    pub satisfied: u8,
    /// No finished beam met `min_constraints`; the best overall was used.
    pub fallback: bool,
    pub retrieval: RetrievalResult,
}

/// Read-only view of a trained model, a store and the vocabulary.
pub struct Captioner<'a> {
    params: &'a ModelParams,
    store: &'a KnowledgeStore,
    vocab: &'a Vocabulary,
    lexicon: Lexicon,
}

impl<'a> Captioner<'a> {
    pub fn new(params: &'a ModelParams, store: &'a KnowledgeStore, vocab: &'a Vocabulary) -> Result<Self> {
        if vocab.len() != params.config().word_vocab_size {
            return Err(Error::ShapeMismatch(format!(
                "vocabulary of {} tokens for a model of {}",
                vocab.len(),
                params.config().word_vocab_size
            )));
        }
        Ok(Captioner {
            params,
            store,
            vocab,
            lexicon: Lexicon::new(store, vocab),
        })
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }

    /// Retrieval pass with masked tag slots, then per-region retrieval.
    pub fn retrieve(&self, rois: &[RoiVector], k_vocab: usize) -> Result<RetrievalResult> {
        if self.store.is_empty() {
            return Err(Error::EmptyStore);
        }
        let tags = TagInput::masks(self.params.config().max_tags);
        let pass = forward_retrieval(self.params, self.store, &self.lexicon, None, &tags, rois)?;
        let regions = pass.regions().expect("regions requested").to_rows();
        retrieve_with_k(&region_features(&regions), self.store, k_vocab)
    }

    /// Prepared decoding context for a scene given its retrieved vocabulary.
    pub fn memory(&self, rois: &[RoiVector], retrieved: &RetrievalResult) -> Result<crate::model::ImageMemory> {
        let tags = TagInput::terms(&retrieved.top_terms());
        image_memory(self.params, self.store, &tags, rois)
    }

    pub fn decoder<'m>(&'m self, memory: &'m crate::model::ImageMemory) -> Decoder<'m> {
        Decoder::new(self.params, memory, &self.lexicon)
    }

    fn max_len(&self, max_len: usize) -> usize {
        max_len.min(self.params.config().max_words).max(1)
    }

    /// Full inference for one scene.
    pub fn generate(&self, rois: &[RoiVector], cfg: &DecodeConfig) -> Result<Caption> {
        if cfg.beam_size == 0 || cfg.max_len == 0 {
            return Err(Error::ConfigInvalid("beam_size and max_len must be positive".into()));
        }
        let retrieval = self.retrieve(rois, cfg.k_vocab)?;
        let memory = self.memory(rois, &retrieval)?;
        let decoder = self.decoder(&memory);
        let (names, seqs) = if cfg.min_constraints == 0 {
            (Vec::new(), Vec::new())
        } else {
            self.constraints(&retrieval)
        };
        let (best, fallback) = constrained_beam_search(
            &decoder,
            &seqs,
            cfg.beam_size,
            cfg.min_constraints,
            self.max_len(cfg.max_len),
            self.vocab.stop_id(),
        );
        Ok(self.caption(best, names, fallback, retrieval))
    }

    /// Plain beam search over the same retrieval and decoder.
    pub fn generate_unconstrained(&self, rois: &[RoiVector], cfg: &DecodeConfig) -> Result<Caption> {
        let retrieval = self.retrieve(rois, cfg.k_vocab)?;
        let memory = self.memory(rois, &retrieval)?;
        let decoder = self.decoder(&memory);
        let best = beam_search(
            &decoder,
            cfg.beam_size,
            self.max_len(cfg.max_len),
            self.vocab.stop_id(),
        );
        Ok(self.caption(best, Vec::new(), false, retrieval))
    }

    /// Top `min(3, k)` retrieved terms whose words are all in the vocabulary.
    pub fn constraints(&self, retrieval: &RetrievalResult) -> (Vec<String>, Vec<Vec<usize>>) {
        let mut names = Vec::new();
        let mut seqs = Vec::new();
        for t in retrieval.top_vocab.iter().take(MAX_CONSTRAINTS) {
            if let Ok(ids) = self.vocab.term_ids(&t.term) {
                names.push(t.term.clone());
                seqs.push(ids);
            }
        }
        (names, seqs)
    }

    fn caption(&self, best: BeamState, constraints: Vec<String>, fallback: bool, retrieval: RetrievalResult) -> Caption {
        let stop = self.vocab.stop_id();
        let words = best
            .tokens
            .iter()
            .filter(|&&t| t != stop)
            .map(|&t| self.vocab.token(t).to_string())
            .collect();
        Caption {
            tokens: best.tokens,
            words,
            logprob: best.logprob,
            constraints,
            satisfied: best.satisfied,
            fallback,
            retrieval,
        }
    }

    /// Samples a caption from `softmax(logits / temperature)` with the
    /// retrieved vocabulary in the tag slots.
    pub fn sample_caption<R: Rng + ?Sized>(
        &self,
        rois: &[RoiVector],
        retrieval: &RetrievalResult,
        temperature: f64,
        max_len: usize,
        rng: &mut R,
    ) -> Result<(Vec<usize>, f64)> {
        let memory = self.memory(rois, retrieval)?;
        let decoder = self.decoder(&memory);
        sample_caption(&decoder, temperature, self.max_len(max_len), self.vocab.stop_id(), rng)
    }

    pub fn greedy(&self, rois: &[RoiVector], retrieval: &RetrievalResult, max_len: usize) -> Result<Vec<usize>> {
        let memory = self.memory(rois, retrieval)?;
        let decoder = self.decoder(&memory);
        Ok(greedy(&decoder, self.max_len(max_len), self.vocab.stop_id()))
    }
}

/// Indices of the `n` largest values, ties to the lower index.
fn top_indices(values: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

/// Longest suffix of `tokens` that is a proper prefix of `target`.
fn progress(tokens: &[usize], target: &[usize]) -> usize {
    (1..target.len())
        .rev()
        .find(|&n| n <= tokens.len() && tokens[tokens.len() - n..] == target[..n])
        .unwrap_or(0)
}

/// Grouped beam search. One pool of `beam_size` beams per satisfied-constraint
/// bitmask; every beam proposes its top tokens plus the next token of each
/// unsatisfied constraint. Returns the best finished beam meeting
/// `min_constraints` and whether it had to fall back to the best overall.
pub fn constrained_beam_search(
    decoder: &Decoder<'_>,
    constraints: &[Vec<usize>],
    beam_size: usize,
    min_constraints: usize,
    max_len: usize,
    stop: usize,
) -> (BeamState, bool) {
    assert!(constraints.len() <= MAX_CONSTRAINTS);
    let mut active: Vec<(BeamState, DecodeState)> = vec![(BeamState::root(), decoder.start())];
    let mut finished: Vec<BeamState> = Vec::new();
    while !active.is_empty() {
        let mut groups: BTreeMap<u8, Vec<(BeamState, usize)>> = BTreeMap::new();
        for (parent, (beam, state)) in active.iter().enumerate() {
            let lps = log_softmax(&decoder.logits(state));
            let mut proposals = top_indices(&lps, beam_size);
            for (i, c) in constraints.iter().enumerate() {
                if beam.satisfied & (1 << i) == 0 {
                    let next = c[progress(&beam.tokens, c)];
                    if !proposals.contains(&next) {
                        proposals.push(next);
                    }
                }
            }
            for tok in proposals {
                let child = beam.extend(tok, lps[tok], stop, max_len, constraints);
                groups.entry(child.satisfied).or_default().push((child, parent));
            }
        }
        let mut next_active = Vec::new();
        for (_, mut cands) in groups {
            cands.sort_by(|a, b| rank(&a.0, &b.0));
            cands.dedup_by(|a, b| a.0.tokens == b.0.tokens);
            for (child, parent) in cands.into_iter().take(beam_size) {
                if child.finished {
                    finished.push(child);
                } else {
                    let mut state = active[parent].1.clone();
                    decoder.push(&mut state, *child.tokens.last().expect("non-empty"));
                    next_active.push((child, state));
                }
            }
        }
        active = next_active;
    }
    finished.sort_by(rank);
    match finished
        .iter()
        .find(|b| b.n_satisfied() as usize >= min_constraints)
    {
        Some(b) => (b.clone(), false),
        None => (finished[0].clone(), true),
    }
}

/// Standard beam search: keep the `beam_size` best partial captions, move
/// finished ones aside, stop when none remain active.
pub fn beam_search(decoder: &Decoder<'_>, beam_size: usize, max_len: usize, stop: usize) -> BeamState {
    let mut beams = vec![(BeamState::root(), decoder.start())];
    let mut done = Vec::new();
    while !beams.is_empty() {
        let mut cands: Vec<(BeamState, usize)> = Vec::new();
        for (parent, (beam, state)) in beams.iter().enumerate() {
            let lps = log_softmax(&decoder.logits(state));
            for tok in top_indices(&lps, beam_size) {
                cands.push((beam.extend(tok, lps[tok], stop, max_len, &[]), parent));
            }
        }
        cands.sort_by(|a, b| rank(&a.0, &b.0));
        let mut next = Vec::new();
        for (child, parent) in cands.into_iter().take(beam_size) {
            if child.finished {
                done.push(child);
            } else {
                let mut state = beams[parent].1.clone();
                decoder.push(&mut state, *child.tokens.last().expect("non-empty"));
                next.push((child, state));
            }
        }
        beams = next;
    }
    done.sort_by(rank);
    done.swap_remove(0)
}

pub fn greedy(decoder: &Decoder<'_>, max_len: usize, stop: usize) -> Vec<usize> {
    let mut state = decoder.start();
    let mut tokens = Vec::new();
    while tokens.len() < max_len {
        let logits = decoder.logits(&state);
        let tok = top_indices(&logits, 1)[0];
        tokens.push(tok);
        if tok == stop {
            break;
        }
        decoder.push(&mut state, tok);
    }
    tokens
}

/// Multinomial sampling from `softmax(logits / temperature)`; returns the
/// tokens and their summed log-probability under that distribution.
pub fn sample_caption<R: Rng + ?Sized>(
    decoder: &Decoder<'_>,
    temperature: f64,
    max_len: usize,
    stop: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, f64)> {
    if !(temperature > 0.0) {
        return Err(Error::ConfigInvalid("temperature must be positive".into()));
    }
    let mut state = decoder.start();
    let mut tokens = Vec::new();
    let mut total = 0.0;
    while tokens.len() < max_len {
        let scaled: Vec<f64> = decoder
            .logits(&state)
            .iter()
            .map(|l| l / temperature)
            .collect();
        let lps = log_softmax(&scaled);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut tok = top_indices(&lps, 1)[0];
        for (i, lp) in lps.iter().enumerate() {
            acc += lp.exp();
            if u < acc {
                tok = i;
                break;
            }
        }
        total += lps[tok];
        tokens.push(tok);
        if tok == stop {
            break;
        }
        decoder.push(&mut state, tok);
    }
    Ok((tokens, total))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn progress_finds_partial_matches() {
        assert_eq!(progress(&[4, 7, 8], &[7, 8, 9]), 2);
        assert_eq!(progress(&[4, 7], &[7, 8, 9]), 1);
        assert_eq!(progress(&[4], &[7, 8, 9]), 0);
        assert_eq!(progress(&[7, 7], &[7, 8]), 1);
    }

    #[test]
    fn top_indices_breaks_ties_low() {
        assert_eq!(top_indices(&[1.0, 3.0, 3.0, 0.5], 2), vec![1, 2]);
    }
}
