//! Incremental left-to-right decoding with cached keys and values.
//!
//! Mirrors the word-slot computation of the recorded forward pass one slot at
//! a time. The image side is encoded once; every emitted token appends its
//! per-layer key and value to the state.

use super::{Lexicon, ModelParams};
use crate::autodiff::layer_norm_row;
use crate::tensor::{dot, Matrix};

/// Per-layer keys and values of the image-side slots.
#[derive(Debug, Clone)]
pub struct ImageMemory {
    pub keys: Vec<Matrix>,
    pub values: Vec<Matrix>,
}

/// Keys and values of the tokens emitted so far.
#[derive(Debug, Clone, Default)]
pub struct DecodeState {
    keys: Vec<Vec<Vec<f64>>>,
    values: Vec<Vec<Vec<f64>>>,
    tokens: Vec<usize>,
}

impl DecodeState {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }
}

pub struct Decoder<'a> {
    params: &'a ModelParams,
    memory: &'a ImageMemory,
    lexicon: &'a Lexicon,
    /// Output rows for lexicon terms: knowledge embedding through the tag
    /// projection.
    tied: Matrix,
}

struct SlotOutput {
    hidden: Vec<f64>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl<'a> Decoder<'a> {
    pub fn new(params: &'a ModelParams, memory: &'a ImageMemory, lexicon: &'a Lexicon) -> Self {
        let tied = if lexicon.is_empty() {
            Matrix::zeros(0, params.config().d_model)
        } else {
            lexicon.embeddings.matmul(params.t(params.layout.tag_w))
        };
        Decoder {
            params,
            memory,
            lexicon,
            tied,
        }
    }

    pub fn start(&self) -> DecodeState {
        let n = self.params.config().n_layers;
        DecodeState {
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            tokens: Vec::new(),
        }
    }

    /// Whether another token fits in the word slots.
    pub fn has_room(&self, state: &DecodeState) -> bool {
        state.len() < self.params.config().max_words
    }

    /// Logits for the next position given the emitted prefix.
    pub fn logits(&self, state: &DecodeState) -> Vec<f64> {
        let c = self.params.config();
        let lay = &self.params.layout;
        let mask = self.params.t(lay.special).row(0);
        let out = self.run_slot(state, mask, false);
        let mut logits = vec_mat(&out.hidden, self.params.t(lay.out_w));
        for (l, b) in logits.iter_mut().zip(self.params.t(lay.out_b).data()) {
            *l += b;
        }
        let term_bias = self.params.t(lay.term_bias).get(0, 0);
        for (j, &tok) in self.lexicon.token_ids.iter().enumerate() {
            logits[tok] = dot(&out.hidden, self.tied.row(j)) + term_bias;
        }
        debug_assert_eq!(logits.len(), c.word_vocab_size);
        logits
    }

    /// Appends `token` at the next position.
    pub fn push(&self, state: &mut DecodeState, token: usize) {
        let emb = self.params.t(self.params.layout.tok_emb).row(token);
        let out = self.run_slot(state, emb, true);
        for (l, (k, v)) in out.keys.into_iter().zip(out.values).enumerate() {
            state.keys[l].push(k);
            state.values[l].push(v);
        }
        state.tokens.push(token);
    }

    fn run_slot(&self, state: &DecodeState, input: &[f64], is_context: bool) -> SlotOutput {
        let c = self.params.config();
        let lay = &self.params.layout;
        let p = |i: usize| self.params.t(i);
        let act = c.activation;
        let pos = state.len();
        let dh = c.head_dim();
        let inv_sqrt = 1.0 / (dh as f64).sqrt();

        let mut x: Vec<f64> = input
            .iter()
            .zip(p(lay.pos).row(pos))
            .map(|(a, b)| a + b)
            .collect();
        let mut keys = Vec::with_capacity(c.n_layers);
        let mut values = Vec::with_capacity(c.n_layers);
        for (l, ls) in lay.layers.iter().enumerate() {
            let h = layer_norm_row(&x, p(ls.ln1_g).data(), p(ls.ln1_b).data());
            let q = affine(&h, p(ls.wq), p(ls.bq));
            let k = affine(&h, p(ls.wk), p(ls.bk));
            let v = affine(&h, p(ls.wv), p(ls.bv));
            let img_k = &self.memory.keys[l];
            let img_v = &self.memory.values[l];
            let prev_k = &state.keys[l];
            let prev_v = &state.values[l];
            let mut attended = vec![0.0; c.d_model];
            for hd in 0..c.n_heads {
                let r = hd * dh..(hd + 1) * dh;
                let qh = &q[r.clone()];
                let mut scores: Vec<f64> = Vec::with_capacity(img_k.rows() + prev_k.len() + 1);
                scores.extend((0..img_k.rows()).map(|i| dot(qh, &img_k.row(i)[r.clone()]) * inv_sqrt));
                scores.extend(prev_k.iter().map(|kr| dot(qh, &kr[r.clone()]) * inv_sqrt));
                scores.push(dot(qh, &k[r.clone()]) * inv_sqrt);
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    total += *s;
                }
                let out = &mut attended[r.clone()];
                let mut add = |w: f64, vrow: &[f64]| {
                    let w = w / total;
                    for (o, vv) in out.iter_mut().zip(vrow) {
                        *o += w * vv;
                    }
                };
                for i in 0..img_v.rows() {
                    add(scores[i], &img_v.row(i)[r.clone()]);
                }
                for (j, vr) in prev_v.iter().enumerate() {
                    add(scores[img_v.rows() + j], &vr[r.clone()]);
                }
                add(scores[scores.len() - 1], &v[r.clone()]);
            }
            let o = affine(&attended, p(ls.wo), p(ls.bo));
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
            let h2 = layer_norm_row(&x, p(ls.ln2_g).data(), p(ls.ln2_b).data());
            let mut f = affine(&h2, p(ls.w1), p(ls.b1));
            f.iter_mut().for_each(|z| *z = act.apply(*z));
            let f = affine(&f, p(ls.w2), p(ls.b2));
            x.iter_mut().zip(&f).for_each(|(a, b)| *a += b);
            if is_context {
                keys.push(k);
                values.push(v);
            }
        }
        let hidden = layer_norm_row(&x, p(lay.final_g).data(), p(lay.final_b).data());
        SlotOutput {
            hidden,
            keys,
            values,
        }
    }
}

fn vec_mat(v: &[f64], m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for (i, &a) in v.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        for (o, b) in out.iter_mut().zip(m.row(i)) {
            *o += a * b;
        }
    }
    out
}

fn affine(v: &[f64], w: &Matrix, b: &Matrix) -> Vec<f64> {
    let mut out = vec_mat(v, w);
    for (o, bb) in out.iter_mut().zip(b.data()) {
        *o += bb;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::{DefinitionRecord, KnowledgeStore};
    use crate::model::{
        forward_generation, image_memory, MaskedWords, ModelConfig, RoiVector, TagInput,
    };
    use crate::vocab::Vocabulary;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cached_decoding_matches_recorded_forward() {
        let store = KnowledgeStore::from_records(
            8,
            vec![
                DefinitionRecord::new("cat", "a small furry pet"),
                DefinitionRecord::new("dog", "a loyal barking pet"),
            ],
        )
        .unwrap();
        let vocab = Vocabulary::from_tokens(["a", "cat", "dog", "sits", "on", "mat"]);
        let lex = Lexicon::new(&store, &vocab);
        let mut c = ModelConfig::desk(vocab.len(), 8, 10);
        c.d_model = 12;
        c.n_heads = 3;
        c.d_ff = 10;
        c.max_words = 7;
        c.max_tags = 2;
        c.n_rois = 3;
        let params = crate::model::ModelParams::init(c, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rois: Vec<RoiVector> = (0..3)
            .map(|_| {
                let f = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
                RoiVector::new(f, 0.0, 0.2, 0.5, 0.7).unwrap()
            })
            .collect();
        let tags = TagInput::terms(&["dog", "cat"]);
        let caption = vec![2, 4, 5, 6, 3, 1];
        let pass = forward_generation(
            &params,
            &store,
            &lex,
            &MaskedWords::all(caption.clone()),
            &tags,
            &rois,
        )
        .unwrap();
        let want = pass.logits().unwrap();

        let memory = image_memory(&params, &store, &tags, &rois).unwrap();
        let dec = Decoder::new(&params, &memory, &lex);
        let mut state = dec.start();
        for (p, &tok) in caption.iter().enumerate() {
            let got = dec.logits(&state);
            for (a, b) in got.iter().zip(want.row(p)) {
                assert!((a - b).abs() < 1e-10, "position {p}: {a} vs {b}");
            }
            dec.push(&mut state, tok);
        }
        assert_eq!(state.tokens(), caption.as_slice());
    }
}
