//! Recorded forward passes over the concatenated sequence.

use serde::{Deserialize, Serialize};

use super::decode::ImageMemory;
use super::{Lexicon, MaskedWords, ModelParams, RoiVector};
use crate::autodiff::{Graph, ParamGrads, Var};
use crate::error::{Error, Result};
use crate::knowledge::KnowledgeStore;
use crate::tensor::Matrix;

/// Content of one tag slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TagInput {
    Term(String),
    Mask,
}

impl TagInput {
    pub fn terms<S: AsRef<str>>(terms: &[S]) -> Vec<TagInput> {
        terms
            .iter()
            .map(|t| TagInput::Term(t.as_ref().to_string()))
            .collect()
    }

    /// `n` masked tag slots.
    pub fn masks(n: usize) -> Vec<TagInput> {
        vec![TagInput::Mask; n]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Slot {
    Context(usize),
    Query(usize),
    Sep,
    Tag,
    Roi,
}

impl Slot {
    fn is_image(self) -> bool {
        matches!(self, Slot::Sep | Slot::Tag | Slot::Roi)
    }
}

/// A recorded forward pass, ready for one backward sweep.
#[derive(Debug)]
pub struct ForwardPass {
    pub graph: Graph,
    /// `K × D`, when requested.
    pub region_features: Option<Var>,
    /// One row per masked position, `word_vocab_size` columns.
    pub token_logits: Option<Var>,
    /// Attention probabilities, per layer and head.
    pub attention: Vec<Var>,
    pub(crate) keys: Vec<Var>,
    pub(crate) values: Vec<Var>,
    param_shapes: Vec<(usize, usize)>,
}

impl ForwardPass {
    pub fn regions(&self) -> Option<&Matrix> {
        self.region_features.map(|v| self.graph.value(v))
    }

    pub fn logits(&self) -> Option<&Matrix> {
        self.token_logits.map(|v| self.graph.value(v))
    }

    /// Gradients of every parameter given upstream gradients for the region
    /// features and/or the token logits.
    pub fn backward(
        &mut self,
        region_grad: Option<Matrix>,
        logit_grad: Option<Matrix>,
    ) -> Result<ParamGrads> {
        let mut seeds = Vec::new();
        for (var, grad) in [
            (self.region_features, region_grad),
            (self.token_logits, logit_grad),
        ] {
            if let Some(g) = grad {
                let v = var.ok_or_else(|| {
                    Error::ShapeMismatch("gradient for an output that was not computed".into())
                })?;
                if g.shape() != self.graph.value(v).shape() {
                    return Err(Error::ShapeMismatch(format!(
                        "gradient shape {:?} vs output {:?}",
                        g.shape(),
                        self.graph.value(v).shape()
                    )));
                }
                seeds.push((v, g));
            }
        }
        if seeds.is_empty() {
            return Err(Error::NoForwardRecorded);
        }
        self.graph.backward(seeds, &self.param_shapes)
    }
}

/// Retrieval pass: region features for the ROIs, plus logits at the masked
/// word positions when `words` is given.
pub fn forward_retrieval(
    params: &ModelParams,
    store: &KnowledgeStore,
    lexicon: &Lexicon,
    words: Option<&MaskedWords>,
    tags: &[TagInput],
    rois: &[RoiVector],
) -> Result<ForwardPass> {
    run(params, store, lexicon, words, tags, rois, true)
}

/// Generation pass: logits at the masked word positions with the retrieved
/// vocabulary in the tag slots.
pub fn forward_generation(
    params: &ModelParams,
    store: &KnowledgeStore,
    lexicon: &Lexicon,
    words: &MaskedWords,
    retrieved_vocab: &[TagInput],
    rois: &[RoiVector],
) -> Result<ForwardPass> {
    run(params, store, lexicon, Some(words), retrieved_vocab, rois, false)
}

/// Encodes the image side once and keeps each layer's keys and values for
/// incremental decoding.
pub fn image_memory(
    params: &ModelParams,
    store: &KnowledgeStore,
    tags: &[TagInput],
    rois: &[RoiVector],
) -> Result<ImageMemory> {
    let lexicon = Lexicon::empty(store.dimension());
    let pass = run(params, store, &lexicon, None, tags, rois, false)?;
    let keys = pass.keys.iter().map(|&k| pass.graph.value(k).clone()).collect();
    let values = pass
        .values
        .iter()
        .map(|&v| pass.graph.value(v).clone())
        .collect();
    Ok(ImageMemory { keys, values })
}

fn run(
    params: &ModelParams,
    store: &KnowledgeStore,
    lexicon: &Lexicon,
    words: Option<&MaskedWords>,
    tags: &[TagInput],
    rois: &[RoiVector],
    want_regions: bool,
) -> Result<ForwardPass> {
    let c = params.config();
    let lay = &params.layout;
    let dm = c.d_model;
    let vocab = c.word_vocab_size;
    if store.dimension() != c.knowledge_dim {
        return Err(Error::DimensionMismatch {
            expected: c.knowledge_dim,
            got: store.dimension(),
        });
    }
    if rois.len() != c.n_rois {
        return Err(Error::ShapeMismatch(format!(
            "expected {} ROIs, got {}",
            c.n_rois,
            rois.len()
        )));
    }
    if let Some(r) = rois.iter().find(|r| r.dim() != c.roi_dim) {
        return Err(Error::ShapeMismatch(format!(
            "ROI dimension {} vs configured {}",
            r.dim(),
            c.roi_dim
        )));
    }
    if tags.len() > c.tag_slots() {
        return Err(Error::TooManyTags {
            tags: tags.len(),
            slots: c.tag_slots(),
        });
    }
    let empty = MaskedWords {
        tokens: Vec::new(),
        positions: Vec::new(),
    };
    let words = words.unwrap_or(&empty);
    if words.tokens.len() > c.max_words {
        return Err(Error::ShapeMismatch(format!(
            "caption of {} words exceeds {} slots",
            words.tokens.len(),
            c.max_words
        )));
    }
    if let Some(&t) = words.tokens.iter().find(|&&t| t >= vocab) {
        return Err(Error::ShapeMismatch(format!("token id {t} out of vocabulary")));
    }
    if words.positions.iter().any(|&p| p >= words.tokens.len()) {
        return Err(Error::ShapeMismatch("masked position past caption end".into()));
    }

    // Slot order: context words, query words, [SEP], tags, [SEP], ROIs.
    let mask_row = vocab;
    let sep_row = vocab + 1;
    let zero_row = vocab + 2;
    let sep_a_pos = c.max_words;
    let tag_pos0 = sep_a_pos + 1;
    let sep_b_pos = tag_pos0 + c.tag_slots();
    let roi_pos0 = sep_b_pos + 1;
    let no_pos = c.n_positions();

    let mut slots = Vec::new();
    let mut emb_ids = Vec::new();
    let mut pos_ids = Vec::new();
    for (p, &t) in words.tokens.iter().enumerate() {
        slots.push(Slot::Context(p));
        emb_ids.push(t);
        pos_ids.push(p);
    }
    for &p in &words.positions {
        slots.push(Slot::Query(p));
        emb_ids.push(mask_row);
        pos_ids.push(p);
    }
    let image_start = slots.len();
    slots.push(Slot::Sep);
    emb_ids.push(sep_row);
    pos_ids.push(sep_a_pos);
    let mut tag_vectors = Matrix::zeros(tags.len(), c.knowledge_dim);
    for (i, t) in tags.iter().enumerate() {
        slots.push(Slot::Tag);
        pos_ids.push(tag_pos0 + i);
        match t {
            TagInput::Term(term) => {
                emb_ids.push(zero_row);
                tag_vectors
                    .row_mut(i)
                    .copy_from_slice(store.embedding(term)?);
            }
            TagInput::Mask => emb_ids.push(mask_row),
        }
    }
    slots.push(Slot::Sep);
    emb_ids.push(sep_row);
    pos_ids.push(sep_b_pos);
    let roi_start = slots.len();
    for j in 0..rois.len() {
        slots.push(Slot::Roi);
        emb_ids.push(zero_row);
        pos_ids.push(if c.roi_positions { roi_pos0 + j } else { no_pos });
    }
    let n = slots.len();

    let mut g = Graph::new();
    let p: Vec<Var> = params
        .tensors()
        .iter()
        .enumerate()
        .map(|(i, t)| g.param(i, t))
        .collect();

    // Input embeddings.
    let zero_dm = g.constant(Matrix::zeros(1, dm));
    let table = g.concat_rows(&[p[lay.tok_emb], p[lay.special], zero_dm]);
    let base = g.gather_rows(table, &emb_ids);
    let pos_table = g.concat_rows(&[p[lay.pos], zero_dm]);
    let pos = g.gather_rows(pos_table, &pos_ids);
    let mut x = g.add(base, pos);

    // Tag and ROI projections; word and separator rows get nothing extra.
    let mut parts = vec![g.constant(Matrix::zeros(image_start + 1, dm))];
    if !tags.is_empty() {
        let tv = g.constant(tag_vectors);
        parts.push(g.matmul(tv, p[lay.tag_w]));
    }
    parts.push(g.constant(Matrix::zeros(1, dm)));
    let roi_in = Matrix::from_rows(&rois.iter().map(RoiVector::to_input).collect::<Vec<_>>());
    let roi_in = g.constant(roi_in);
    let roi_proj = g.matmul(roi_in, p[lay.roi_w]);
    parts.push(g.add_row(roi_proj, p[lay.roi_b]));
    let extra = g.concat_rows(&parts);
    x = g.add(x, extra);

    let allowed = attention_mask(&slots);
    let dh = c.head_dim();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut attention = Vec::new();
    let mut keys = Vec::new();
    let mut values = Vec::new();
    for ls in &lay.layers {
        let h = g.layer_norm(x, p[ls.ln1_g], p[ls.ln1_b]);
        let q = g.matmul(h, p[ls.wq]);
        let q = g.add_row(q, p[ls.bq]);
        let k = g.matmul(h, p[ls.wk]);
        let k = g.add_row(k, p[ls.bk]);
        let v = g.matmul(h, p[ls.wv]);
        let v = g.add_row(v, p[ls.bv]);
        keys.push(k);
        values.push(v);
        let mut heads = Vec::with_capacity(c.n_heads);
        for hd in 0..c.n_heads {
            let qh = g.slice_cols(q, hd * dh, dh);
            let kh = g.slice_cols(k, hd * dh, dh);
            let vh = g.slice_cols(v, hd * dh, dh);
            let s = g.matmul_t(qh, kh);
            let s = g.scale(s, inv_sqrt);
            let a = g.masked_softmax(s, allowed.clone());
            attention.push(a);
            heads.push(g.matmul(a, vh));
        }
        let o = g.concat_cols(&heads);
        let o = g.matmul(o, p[ls.wo]);
        let o = g.add_row(o, p[ls.bo]);
        x = g.add(x, o);
        let h2 = g.layer_norm(x, p[ls.ln2_g], p[ls.ln2_b]);
        let f = g.matmul(h2, p[ls.w1]);
        let f = g.add_row(f, p[ls.b1]);
        let f = match c.activation {
            super::Activation::Gelu => g.gelu(f),
            super::Activation::Tanh => g.tanh(f),
        };
        let f = g.matmul(f, p[ls.w2]);
        let f = g.add_row(f, p[ls.b2]);
        x = g.add(x, f);
    }
    let hidden = g.layer_norm(x, p[lay.final_g], p[lay.final_b]);

    let region_features = if want_regions {
        let rows: Vec<usize> = (roi_start..n).collect();
        let hr = g.gather_rows(hidden, &rows);
        let r = g.matmul(hr, p[lay.reg_w]);
        Some(g.add_row(r, p[lay.reg_b]))
    } else {
        None
    };

    let token_logits = if words.positions.is_empty() {
        None
    } else {
        let rows: Vec<usize> = (words.tokens.len()..image_start).collect();
        let hq = g.gather_rows(hidden, &rows);
        let wl = g.matmul(hq, p[lay.out_w]);
        let wl = g.add_row(wl, p[lay.out_b]);
        Some(if lexicon.is_empty() {
            wl
        } else {
            let te = g.constant(lexicon.embeddings.clone());
            let tw = g.matmul(te, p[lay.tag_w]);
            let tied = g.matmul_t(hq, tw);
            let tied = g.add_scalar(tied, p[lay.term_bias]);
            g.replace_cols(wl, tied, &lexicon.token_ids)
        })
    };

    Ok(ForwardPass {
        graph: g,
        region_features,
        token_logits,
        attention,
        keys,
        values,
        param_shapes: params.shapes().to_vec(),
    })
}

/// Row-major `n × n` visibility matrix.
fn attention_mask(slots: &[Slot]) -> Vec<bool> {
    let n = slots.len();
    let mut allowed = vec![false; n * n];
    for (r, &row) in slots.iter().enumerate() {
        for (c, &col) in slots.iter().enumerate() {
            allowed[r * n + c] = match (row, col) {
                (Slot::Roi | Slot::Sep, col) => matches!(col, Slot::Sep | Slot::Roi),
                (Slot::Tag, col) => col.is_image(),
                (Slot::Context(p), Slot::Context(q)) => q <= p,
                (Slot::Query(p), Slot::Context(q)) => q < p,
                (Slot::Query(_), Slot::Query(_)) => r == c,
                (Slot::Context(_), Slot::Query(_)) => false,
                (Slot::Context(_) | Slot::Query(_), _) => true,
            };
        }
    }
    allowed
}
