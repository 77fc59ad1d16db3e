//! Shared-parameter sequence encoder.
//!
//! One parameter set serves both passes. The input sequence is
//! `words · [SEP] · tags · [SEP] · ROIs`:
//!
//! * Retrieval pass: tag slots carry ground-truth tags (training) or `[MASK]`
//!   (inference); the ROI-slot outputs go through the region head.
//! * Generation pass: tag slots carry retrieved vocabulary; masked word slots
//!   produce token logits.
//!
//! Word slots come in two streams. A context slot holds a real token; a query
//! slot holds `[MASK]` and predicts the token at its position. Word slots see
//! the whole image side and context slots to their left, which makes
//! left-to-right decoding with cached keys exact. ROI and separator
//! slots see only each other, so region features never depend on tag input.

mod checkpoint;
mod decode;
mod forward;
mod optim;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge::KnowledgeStore;
use crate::tensor::Matrix;
use crate::vocab::Vocabulary;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT};
pub use decode::{DecodeState, Decoder, ImageMemory};
pub use forward::{
    forward_generation, forward_retrieval, image_memory, ForwardPass, TagInput,
};
pub use optim::{clip_global_norm, optimizer_step, AdamState, AdamW};

/// Share of caption words masked per training example.
pub const MASK_PERCENT: usize = 15;
/// Upper bound on masked words per caption.
pub const MAX_MASKED: usize = 3;
/// Captions shorter than this would get zero masks from the percentage rule.
const FORCE_MASK_BELOW: usize = 4;
/// Geometry values appended to every ROI feature.
pub const BOX_DIM: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub word_vocab_size: usize,
    /// Word slots (maximum caption length).
    pub max_words: usize,
    /// Tag slots in the retrieval pass.
    pub max_tags: usize,
    /// ROI slots.
    pub n_rois: usize,
    pub roi_dim: usize,
    /// Knowledge embedding dimension.
    pub knowledge_dim: usize,
    /// Learned position encodings on ROI slots.
    #[serde(default = "yes")]
    pub roi_positions: bool,
    #[serde(default)]
    pub activation: Activation,
    /// Start attention and feed-forward output projections at zero, so every
    /// layer begins as the identity on the residual stream.
    #[serde(default)]
    pub zero_init_residual: bool,
}

/// Feed-forward nonlinearity.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Tanh,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Gelu => crate::autodiff::gelu(z),
            Activation::Tanh => z.tanh(),
        }
    }
}

fn yes() -> bool {
    true
}

impl ModelConfig {
    /// Small configuration used for the reference runs.
    pub fn desk(word_vocab_size: usize, knowledge_dim: usize, roi_dim: usize) -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 2,
            n_layers: 2,
            d_ff: 128,
            word_vocab_size,
            max_words: 20,
            max_tags: 4,
            n_rois: 8,
            roi_dim,
            knowledge_dim,
            roi_positions: true,
            activation: Activation::Gelu,
            zero_init_residual: false,
        }
    }

    /// Full-scale sequence sizes (35 words, 20 tags, 50 regions of 2048-d
    /// features plus box), with the small encoder kept.
    pub fn full_scale(word_vocab_size: usize, knowledge_dim: usize) -> Self {
        ModelConfig {
            max_words: 35,
            max_tags: 20,
            n_rois: 50,
            roi_dim: 2048 + BOX_DIM,
            ..ModelConfig::desk(word_vocab_size, knowledge_dim, 2048 + BOX_DIM)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("word_vocab_size", self.word_vocab_size),
            ("max_words", self.max_words),
            ("max_tags", self.max_tags),
            ("n_rois", self.n_rois),
            ("knowledge_dim", self.knowledge_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::ConfigInvalid(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::ConfigInvalid(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.roi_dim < BOX_DIM + 1 {
            return Err(Error::ConfigInvalid(format!(
                "roi_dim {} must be at least {}",
                self.roi_dim,
                BOX_DIM + 1
            )));
        }
        Ok(())
    }

    /// Tag slots available in either pass.
    pub fn tag_slots(&self) -> usize {
        self.max_tags.max(self.n_rois)
    }

    pub fn n_positions(&self) -> usize {
        self.max_words + 2 + self.tag_slots() + self.n_rois
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Indices of the parameter tensors of one encoder layer.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerSlots {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Where every tensor lives in [`ModelParams::tensors`].
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub tok_emb: usize,
    /// Rows: `[MASK]`, `[SEP]`.
    pub special: usize,
    pub pos: usize,
    pub roi_w: usize,
    pub roi_b: usize,
    pub tag_w: usize,
    pub layers: Vec<LayerSlots>,
    pub final_g: usize,
    pub final_b: usize,
    pub out_w: usize,
    pub out_b: usize,
    pub term_bias: usize,
    pub reg_w: usize,
    pub reg_b: usize,
    pub names: Vec<String>,
    pub shapes: Vec<(usize, usize)>,
}

impl Layout {
    pub fn new(c: &ModelConfig) -> Self {
        let mut names = Vec::new();
        let mut shapes = Vec::new();
        let mut add = |name: String, shape: (usize, usize)| {
            names.push(name);
            shapes.push(shape);
            names.len() - 1
        };
        let dm = c.d_model;
        let tok_emb = add("tok_emb".into(), (c.word_vocab_size, dm));
        let special = add("special".into(), (2, dm));
        let pos = add("pos".into(), (c.n_positions(), dm));
        let roi_w = add("roi_w".into(), (c.roi_dim, dm));
        let roi_b = add("roi_b".into(), (1, dm));
        let tag_w = add("tag_w".into(), (c.knowledge_dim, dm));
        let mut layers = Vec::new();
        for l in 0..c.n_layers {
            let mut p = |n: &str, shape| add(format!("layer{l}.{n}"), shape);
            layers.push(LayerSlots {
                ln1_g: p("ln1_g", (1, dm)),
                ln1_b: p("ln1_b", (1, dm)),
                wq: p("wq", (dm, dm)),
                bq: p("bq", (1, dm)),
                wk: p("wk", (dm, dm)),
                bk: p("bk", (1, dm)),
                wv: p("wv", (dm, dm)),
                bv: p("bv", (1, dm)),
                wo: p("wo", (dm, dm)),
                bo: p("bo", (1, dm)),
                ln2_g: p("ln2_g", (1, dm)),
                ln2_b: p("ln2_b", (1, dm)),
                w1: p("w1", (dm, c.d_ff)),
                b1: p("b1", (1, c.d_ff)),
                w2: p("w2", (c.d_ff, dm)),
                b2: p("b2", (1, dm)),
            });
        }
        let final_g = add("final_g".into(), (1, dm));
        let final_b = add("final_b".into(), (1, dm));
        let out_w = add("out_w".into(), (dm, c.word_vocab_size));
        let out_b = add("out_b".into(), (1, c.word_vocab_size));
        let term_bias = add("term_bias".into(), (1, 1));
        let reg_w = add("reg_w".into(), (dm, c.knowledge_dim));
        let reg_b = add("reg_b".into(), (1, c.knowledge_dim));
        Layout {
            tok_emb,
            special,
            pos,
            roi_w,
            roi_b,
            tag_w,
            layers,
            final_g,
            final_b,
            out_w,
            out_b,
            term_bias,
            reg_w,
            reg_b,
            names,
            shapes,
        }
    }
}

/// The single named parameter set read by both passes.
#[derive(Debug, Clone)]
pub struct ModelParams {
    config: ModelConfig,
    pub(crate) layout: Layout,
    tensors: Vec<Matrix>,
}

impl ModelParams {
    /// Random initialization: unit-fan-in Gaussian weights, 0.1-scale
    /// embeddings, unit layer-norm gains, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = Vec::with_capacity(layout.shapes.len());
        for (name, &(r, c)) in layout.names.iter().zip(&layout.shapes) {
            let base = name.rsplit('.').next().unwrap_or(name);
            let std = match base {
                "tok_emb" | "special" | "pos" => 0.1,
                "wo" | "w2" if config.zero_init_residual => 0.0,
                _ if base.ends_with("_g") => {
                    tensors.push(Matrix::from_vec(r, c, vec![1.0; r * c]));
                    continue;
                }
                _ if r == 1 => 0.0,
                _ => 1.0 / (r as f64).sqrt(),
            };
            tensors.push(gaussian(&mut rng, r, c, std));
        }
        Ok(ModelParams {
            config,
            layout,
            tensors,
        })
    }

    /// Every tensor set to zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let tensors = layout
            .shapes
            .iter()
            .map(|&(r, c)| Matrix::zeros(r, c))
            .collect();
        Ok(ModelParams {
            config,
            layout,
            tensors,
        })
    }

    pub(crate) fn from_tensors(config: ModelConfig, tensors: Vec<Matrix>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if tensors.len() != layout.shapes.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} tensors, got {}",
                layout.shapes.len(),
                tensors.len()
            )));
        }
        for ((t, s), n) in tensors.iter().zip(&layout.shapes).zip(&layout.names) {
            if t.shape() != *s {
                return Err(Error::ShapeMismatch(format!(
                    "{n}: expected {s:?}, got {:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::ShapeMismatch(format!("{n}: non-finite values")));
            }
        }
        Ok(ModelParams {
            config,
            layout,
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.layout.names
    }

    pub fn shapes(&self) -> &[(usize, usize)] {
        &self.layout.shapes
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.layout.names.iter().position(|n| n == name)
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data().len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::is_finite)
    }

    pub(crate) fn t(&self, i: usize) -> &Matrix {
        &self.tensors[i]
    }
}

fn gaussian<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Matrix {
    if std == 0.0 {
        return Matrix::zeros(rows, cols);
    }
    let normal = Normal::new(0.0, std).expect("positive std");
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| normal.sample(rng)).collect())
}

/// One region proposal: appearance feature plus normalized box geometry
/// `(x1, y1, x2, y2, height, width)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiVector {
    pub feature: Vec<f64>,
    #[serde(rename = "box")]
    pub bbox: [f64; BOX_DIM],
}

impl RoiVector {
    /// Builds the box from corners; height and width are derived.
    pub fn new(feature: Vec<f64>, x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let r = RoiVector {
            feature,
            bbox: [x1, y1, x2, y2, y2 - y1, x2 - x1],
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let [x1, y1, x2, y2, h, w] = self.bbox;
        let in_unit = self.bbox.iter().all(|v| (0.0..=1.0).contains(v));
        if !in_unit || x2 < x1 || y2 < y1 || (h - (y2 - y1)).abs() > 1e-6 || (w - (x2 - x1)).abs() > 1e-6
        {
            return Err(Error::ShapeMismatch(format!("invalid box {:?}", self.bbox)));
        }
        if self.feature.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("non-finite ROI feature".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.feature.len() + BOX_DIM
    }

    /// Feature followed by the box.
    pub fn to_input(&self) -> Vec<f64> {
        let mut v = self.feature.clone();
        v.extend_from_slice(&self.bbox);
        v
    }
}

/// A caption with some positions hidden from the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedWords {
    /// Original token ids.
    pub tokens: Vec<usize>,
    /// Hidden positions, ascending.
    pub positions: Vec<usize>,
}

impl MaskedWords {
    /// Every position hidden, as used for scoring whole captions.
    pub fn all(tokens: Vec<usize>) -> Self {
        let positions = (0..tokens.len()).collect();
        MaskedWords { tokens, positions }
    }

    /// The caption as the model's query slots see it: `None` marks `[MASK]`.
    pub fn masked_view(&self) -> Vec<Option<usize>> {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, &t)| (!self.positions.contains(&i)).then_some(t))
            .collect()
    }

    pub fn targets(&self) -> Vec<usize> {
        self.positions.iter().map(|&p| self.tokens[p]).collect()
    }
}

/// Number of positions [`mask_words`] hides in a caption of `len` words.
pub fn mask_count(len: usize) -> usize {
    let rounded = (MASK_PERCENT * len + 50) / 100;
    let n = rounded.min(MAX_MASKED);
    if len < FORCE_MASK_BELOW {
        n.max(1)
    } else {
        n
    }
}

/// Hides `mask_count(len)` positions chosen uniformly without replacement.
pub fn mask_words<R: Rng + ?Sized>(words: &[usize], rng: &mut R) -> Result<MaskedWords> {
    if words.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut positions = sample(rng, words.len(), mask_count(words.len())).into_vec();
    positions.sort_unstable();
    Ok(MaskedWords {
        tokens: words.to_vec(),
        positions,
    })
}

/// Single-token store terms that the output layer scores through their
/// knowledge embedding instead of a free output column.
#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    pub token_ids: Vec<usize>,
    pub terms: Vec<String>,
    /// `terms.len() × D`.
    pub embeddings: Matrix,
}

impl Lexicon {
    pub fn new(store: &KnowledgeStore, vocab: &Vocabulary) -> Self {
        let mut token_ids = Vec::new();
        let mut terms = Vec::new();
        let mut rows = Vec::new();
        for e in store.entries() {
            if e.is_reserved() || e.term.contains(' ') {
                continue;
            }
            if let Some(id) = vocab.id(&e.term) {
                token_ids.push(id);
                terms.push(e.term.clone());
                rows.push(e.embedding.clone());
            }
        }
        let embeddings = if rows.is_empty() {
            Matrix::zeros(0, store.dimension())
        } else {
            Matrix::from_rows(&rows)
        };
        Lexicon {
            token_ids,
            terms,
            embeddings,
        }
    }

    pub fn empty(dimension: usize) -> Self {
        Lexicon {
            token_ids: Vec::new(),
            terms: Vec::new(),
            embeddings: Matrix::zeros(0, dimension),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}
