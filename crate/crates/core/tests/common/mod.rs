#![allow(dead_code)]

use nocrek_core::model::BOX_DIM;
use nocrek_core::{Activation, DefinitionRecord, KnowledgeStore, ModelConfig, ModelParams, RoiVector, Vocabulary};
use rand::Rng;

pub const WORDS: [&str; 10] = ["a", "the", "cat", "dog", "fire", "hydrant", "on", "grass", "red", "sits"];
pub const TERMS: [&str; 5] = ["cat", "dog", "fire hydrant", "grass", "zebra"];
pub const DIM: usize = 4;

pub fn unit<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.1 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn store_with<R: Rng>(rng: &mut R, terms: &[&str], d: usize) -> KnowledgeStore {
    let records = terms
        .iter()
        .map(|t| DefinitionRecord {
            term: t.to_string(),
            definition: format!("about {t}"),
            embedding: Some(unit(rng, d)),
        })
        .collect();
    KnowledgeStore::from_records(d, records).unwrap()
}

pub fn vocab() -> Vocabulary {
    Vocabulary::from_tokens(WORDS)
}

pub fn config(vocab: &Vocabulary, activation: Activation, n_layers: usize) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_layers,
        d_ff: 8,
        word_vocab_size: vocab.len(),
        max_words: 6,
        max_tags: 3,
        n_rois: 3,
        roi_dim: DIM + BOX_DIM,
        knowledge_dim: DIM,
        roi_positions: true,
        activation,
        zero_init_residual: false,
    }
}

pub fn model(vocab: &Vocabulary, seed: u64) -> ModelParams {
    let act = if seed % 2 == 0 { Activation::Gelu } else { Activation::Tanh };
    ModelParams::init(config(vocab, act, 1 + seed as usize % 2), seed).unwrap()
}

pub fn rois<R: Rng>(rng: &mut R, n: usize) -> Vec<RoiVector> {
    (0..n)
        .map(|_| {
            let x1 = rng.gen_range(0.0..0.5);
            let y1 = rng.gen_range(0.0..0.5);
            let x2 = x1 + rng.gen_range(0.1..0.5);
            let y2 = y1 + rng.gen_range(0.1..0.5);
            let f = (0..DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
            RoiVector::new(f, x1, y1, x2, y2).unwrap()
        })
        .collect()
}
