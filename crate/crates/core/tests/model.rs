mod common;

use nocrek_core::autodiff::Graph;
use nocrek_core::model::{
    forward_generation, forward_retrieval, mask_count, mask_words, Lexicon, MaskedWords, TagInput,
};
use nocrek_core::{load_checkpoint, save_checkpoint, Activation, Checkpoint, Matrix, ModelParams, RoiVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn setup(seed: u64) -> (ModelParams, nocrek_core::KnowledgeStore, Lexicon, Vec<RoiVector>) {
    let vocab = common::vocab();
    let params = common::model(&vocab, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = common::store_with(&mut rng, &common::TERMS, common::DIM);
    let lexicon = Lexicon::new(&store, &vocab);
    let rois = common::rois(&mut rng, 3);
    (params, store, lexicon, rois)
}

fn tags() -> Vec<TagInput> {
    vec![TagInput::Term("fire hydrant".into()), TagInput::Mask, TagInput::Term("cat".into())]
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut worst = 0.0f64;
    for seed in 0..12 {
        let (mut params, store, lexicon, rois) = setup(seed);
        for m in params.tensors_mut() {
            for v in m.data_mut() {
                *v += rng.gen_range(-0.1..0.1);
            }
        }
        let words = MaskedWords { tokens: vec![2, 5, 4, 7], positions: vec![1, 3] };
        let mut pass = forward_retrieval(&params, &store, &lexicon, Some(&words), &tags(), &rois).unwrap();
        let (rr, rc) = pass.regions().unwrap().shape();
        let (lr, lc) = pass.logits().unwrap().shape();
        let rg = Matrix::from_vec(rr, rc, (0..rr * rc).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let lg = Matrix::from_vec(lr, lc, (0..lr * lc).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let grads = pass.backward(Some(rg.clone()), Some(lg.clone())).unwrap();
        assert_eq!(grads.len(), params.tensors().len());
        let objective = |p: &ModelParams| {
            let f = forward_retrieval(p, &store, &lexicon, Some(&words), &tags(), &rois).unwrap();
            let a: f64 = f.regions().unwrap().data().iter().zip(rg.data()).map(|(x, y)| x * y).sum();
            let b: f64 = f.logits().unwrap().data().iter().zip(lg.data()).map(|(x, y)| x * y).sum();
            a + b
        };
        let h = 1e-5;
        for t in 0..params.tensors().len() {
            assert_eq!(grads[t].shape(), params.tensors()[t].shape(), "{}", params.names()[t]);
            let n = params.tensors()[t].data().len();
            let i = rng.gen_range(0..n);
            let orig = params.tensors()[t].data()[i];
            params.tensors_mut()[t].data_mut()[i] = orig + h;
            let up = objective(&params);
            params.tensors_mut()[t].data_mut()[i] = orig - h;
            let down = objective(&params);
            params.tensors_mut()[t].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grads[t].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(rel);
            assert!(rel <= 1e-4, "{}[{i}]: {a} vs {numeric}", params.names()[t]);
        }
    }
    assert!(worst.is_finite());
}

#[test]
fn generation_pass_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (mut params, store, lexicon, rois) = setup(3);
    let words = MaskedWords::all(vec![2, 6, 7, 1]);
    let tags = TagInput::terms(&["cat", "grass"]);
    let mut pass = forward_generation(&params, &store, &lexicon, &words, &tags, &rois).unwrap();
    assert!(pass.regions().is_none());
    let (lr, lc) = pass.logits().unwrap().shape();
    assert_eq!((lr, lc), (4, common::vocab().len()));
    let lg = Matrix::from_vec(lr, lc, (0..lr * lc).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let grads = pass.backward(None, Some(lg.clone())).unwrap();
    let objective = |p: &ModelParams| -> f64 {
        let f = forward_generation(p, &store, &lexicon, &words, &tags, &rois).unwrap();
        f.logits().unwrap().data().iter().zip(lg.data()).map(|(x, y)| x * y).sum()
    };
    let h = 1e-5;
    for t in 0..params.tensors().len() {
        let i = rng.gen_range(0..params.tensors()[t].data().len());
        let orig = params.tensors()[t].data()[i];
        params.tensors_mut()[t].data_mut()[i] = orig + h;
        let up = objective(&params);
        params.tensors_mut()[t].data_mut()[i] = orig - h;
        let down = objective(&params);
        params.tensors_mut()[t].data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = grads[t].data()[i];
        assert!((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3) <= 1e-4, "{}", params.names()[t]);
    }
    assert!(pass.backward(Some(Matrix::zeros(1, 1)), None).is_err());
}

#[test]
fn both_passes_read_one_parameter_set() {
    let (mut params, store, lexicon, rois) = setup(4);
    let words = MaskedWords { tokens: vec![2, 5, 4], positions: vec![1] };
    let gen = |p: &ModelParams| forward_generation(p, &store, &lexicon, &words, &tags(), &rois).unwrap().logits().unwrap().clone();
    let ret = |p: &ModelParams| forward_retrieval(p, &store, &lexicon, Some(&words), &tags(), &rois).unwrap().logits().unwrap().clone();
    let (g0, r0) = (gen(&params), ret(&params));
    let w = params.index_of("layer0.wq").unwrap();
    for v in params.tensors_mut()[w].data_mut() {
        *v *= 1.5;
    }
    assert_ne!(gen(&params), g0);
    assert_ne!(ret(&params), r0);
}

#[test]
fn same_seed_same_everything() {
    let (a, store, lexicon, rois) = setup(5);
    let (b, _, _, _) = setup(5);
    assert_eq!(a.tensors(), b.tensors());
    let words = MaskedWords { tokens: vec![2, 5, 4], positions: vec![0, 2] };
    let run = |p: &ModelParams| {
        let mut f = forward_retrieval(p, &store, &lexicon, Some(&words), &tags(), &rois).unwrap();
        let regions = f.regions().unwrap().clone();
        let logits = f.logits().unwrap().clone();
        let g = f.backward(Some(regions.clone()), Some(logits.clone())).unwrap();
        (regions, logits, g)
    };
    assert_eq!(run(&a), run(&b));
    let other = common::model(&common::vocab(), 7);
    assert_ne!(a.tensors(), other.tensors());
}

#[test]
fn outputs_have_consistent_shapes() {
    let (params, store, lexicon, rois) = setup(6);
    let words = MaskedWords { tokens: vec![2, 5, 4, 3, 1], positions: vec![4] };
    let f = forward_retrieval(&params, &store, &lexicon, Some(&words), &TagInput::masks(3), &rois).unwrap();
    assert_eq!(f.regions().unwrap().shape(), (3, common::DIM));
    assert_eq!(f.logits().unwrap().shape(), (1, common::vocab().len()));
    assert!(f.regions().unwrap().is_finite());
    let no_words = forward_retrieval(&params, &store, &lexicon, None, &TagInput::masks(3), &rois).unwrap();
    assert!(no_words.logits().is_none());
    assert_eq!(no_words.regions().unwrap().shape(), (3, common::DIM));
}

#[test]
fn bad_inputs_are_rejected() {
    let (params, store, lexicon, rois) = setup(7);
    let words = MaskedWords { tokens: vec![2], positions: vec![0] };
    assert!(forward_retrieval(&params, &store, &lexicon, Some(&words), &TagInput::masks(9), &rois).is_err());
    assert!(forward_retrieval(&params, &store, &lexicon, Some(&words), &tags(), &rois[..2]).is_err());
    let unknown = vec![TagInput::Term("okapi".into())];
    assert!(forward_retrieval(&params, &store, &lexicon, Some(&words), &unknown, &rois).is_err());
    let long = MaskedWords::all(vec![2; 20]);
    assert!(forward_generation(&params, &store, &lexicon, &long, &tags(), &rois).is_err());
}

#[test]
fn config_validation() {
    let vocab = common::vocab();
    let mut c = common::config(&vocab, Activation::Gelu, 1);
    assert!(c.validate().is_ok());
    c.n_heads = 3;
    assert!(c.validate().is_err());
    let mut c = common::config(&vocab, Activation::Tanh, 1);
    c.roi_dim = 6;
    assert!(ModelParams::init(c, 0).is_err());
}

#[test]
fn attention_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    for _ in 0..50 {
        let (r, c) = (rng.gen_range(1..8), rng.gen_range(1..12));
        let mut g = Graph::new();
        let x = g.constant(Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-30.0..30.0)).collect()));
        let mut allowed: Vec<bool> = (0..r * c).map(|_| rng.gen_bool(0.7)).collect();
        for row in 0..r {
            allowed[row * c] = true;
        }
        let y = g.masked_softmax(x, allowed.clone());
        let out = g.value(y);
        for row in 0..r {
            let s: f64 = out.row(row).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            for col in 0..c {
                if !allowed[row * c + col] {
                    assert_eq!(out.get(row, col), 0.0);
                }
            }
        }
    }
}

#[test]
fn checkpoint_round_trip() {
    let vocab = common::vocab();
    let params = common::model(&vocab, 8);
    let ckpt = Checkpoint { params, vocab, optimizer: None, knowledge_revision: 3, stage: 1, epoch: 4 };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    save_checkpoint(&path, &ckpt).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.params.tensors(), ckpt.params.tensors());
    assert_eq!(back.params.config(), ckpt.params.config());
    assert_eq!((back.knowledge_revision, back.stage, back.epoch), (3, 1, 4));
    let again = dir.path().join("m2.json");
    save_checkpoint(&again, &back).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

proptest! {
    #[test]
    fn boxes_keep_derived_sides(x1 in 0.0f64..1.0, y1 in 0.0f64..1.0, dx in 0.0f64..1.0, dy in 0.0f64..1.0) {
        let (x2, y2) = ((x1 + dx).min(1.0), (y1 + dy).min(1.0));
        let r = RoiVector::new(vec![0.5; 3], x1, y1, x2, y2).unwrap();
        prop_assert!((r.bbox[4] - (y2 - y1)).abs() < 1e-6);
        prop_assert!((r.bbox[5] - (x2 - x1)).abs() < 1e-6);
        prop_assert_eq!(r.dim(), 9);
        prop_assert!(RoiVector::new(vec![0.5; 3], x2, y1, x1 - 1e-3, y2).is_err());
    }

    #[test]
    fn masking_hides_the_advertised_count(len in 1usize..40, seed in any::<u64>()) {
        let words: Vec<usize> = (0..len).collect();
        let m = mask_words(&words, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(m.positions.len(), mask_count(len));
        prop_assert!(m.positions.len() >= 1 && m.positions.len() <= 3);
        prop_assert!(m.positions.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(m.targets(), m.positions.clone());
        let view = m.masked_view();
        prop_assert_eq!(view.iter().filter(|v| v.is_none()).count(), m.positions.len());
    }
}
