mod common;

use nocrek_core::captioner::{beam_search, constrained_beam_search, greedy, sample_caption, BeamState};
use nocrek_core::model::{forward_generation, MaskedWords, TagInput};
use nocrek_core::tensor::log_softmax;
use nocrek_core::{Captioner, DecodeConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn contains(hay: &[usize], needle: &[usize]) -> bool {
    hay.windows(needle.len()).any(|w| w == needle)
}

fn check_beam(b: &BeamState, constraints: &[Vec<usize>], max_len: usize, stop: usize) -> Result<(), TestCaseError> {
    prop_assert!(!b.tokens.is_empty() && b.tokens.len() <= max_len);
    prop_assert!(b.tokens[..b.tokens.len() - 1].iter().all(|&t| t != stop), "stop before the end");
    prop_assert_eq!(b.step_logprobs.len(), b.tokens.len());
    prop_assert!(b.step_logprobs.iter().all(|&lp| lp <= 0.0), "log-prob rose along the beam");
    let sum: f64 = b.step_logprobs.iter().sum();
    prop_assert!((sum - b.logprob).abs() <= 1e-9);
    for (i, c) in constraints.iter().enumerate() {
        prop_assert_eq!(b.satisfied & (1 << i) != 0, contains(&b.tokens, c), "bit {} for {:?} in {:?}", i, c, b.tokens);
    }
    prop_assert_eq!(b.satisfied >> constraints.len(), 0);
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(60))]

    #[test]
    fn beams_are_sound(seed in any::<u64>(), beam in 1usize..5, n_c in 0usize..4, min_c in 0usize..4) {
        let vocab = common::vocab();
        let params = common::model(&vocab, seed % 7);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = common::store_with(&mut rng, &common::TERMS, common::DIM);
        let cap = Captioner::new(&params, &store, &vocab).unwrap();
        let rois = common::rois(&mut rng, 3);
        let retrieval = cap.retrieve(&rois, 3).unwrap();
        let memory = cap.memory(&rois, &retrieval).unwrap();
        let dec = cap.decoder(&memory);
        let constraints: Vec<Vec<usize>> = (0..n_c)
            .map(|_| (0..rng.gen_range(1..=2)).map(|_| rng.gen_range(2..vocab.len())).collect())
            .collect();
        let max_len = params.config().max_words;
        let stop = vocab.stop_id();
        let (best, fallback) = constrained_beam_search(&dec, &constraints, beam, min_c, max_len, stop);
        check_beam(&best, &constraints, max_len, stop)?;
        if !fallback {
            prop_assert!(best.n_satisfied() as usize >= min_c);
        } else {
            prop_assert!(min_c > 0);
        }
        let plain = beam_search(&dec, beam, max_len, stop);
        check_beam(&plain, &[], max_len, stop)?;
        let (free, fb) = constrained_beam_search(&dec, &[], beam, 0, max_len, stop);
        prop_assert!(!fb);
        prop_assert_eq!(free.tokens, plain.tokens);
    }

    #[test]
    fn caption_log_probability_matches_a_full_pass(seed in any::<u64>(), min_c in 0usize..2) {
        let vocab = common::vocab();
        let params = common::model(&vocab, seed % 5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = common::store_with(&mut rng, &common::TERMS, common::DIM);
        let cap = Captioner::new(&params, &store, &vocab).unwrap();
        let rois = common::rois(&mut rng, 3);
        let c = cap.generate(&rois, &DecodeConfig { beam_size: 3, k_vocab: 3, min_constraints: min_c, max_len: 6 }).unwrap();
        let tags = TagInput::terms(&c.retrieval.top_terms());
        let pass = forward_generation(&params, &store, cap.lexicon(), &MaskedWords::all(c.tokens.clone()), &tags, &rois).unwrap();
        let logits = pass.logits().unwrap();
        let lp: f64 = c.tokens.iter().enumerate().map(|(p, &t)| log_softmax(logits.row(p))[t]).sum();
        prop_assert!((lp - c.logprob).abs() <= 1e-9, "{lp} vs {}", c.logprob);
        prop_assert!(c.words.iter().all(|w| w != "."));
        prop_assert!(c.words.len() <= 6);
    }

    #[test]
    fn zero_minimum_matches_plain_beam_search(seed in any::<u64>(), beam in 1usize..6) {
        let vocab = common::vocab();
        let params = common::model(&vocab, seed % 9);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = common::store_with(&mut rng, &common::TERMS, common::DIM);
        let cap = Captioner::new(&params, &store, &vocab).unwrap();
        let rois = common::rois(&mut rng, 3);
        let cfg = DecodeConfig { beam_size: beam, k_vocab: 5, min_constraints: 0, max_len: 6 };
        let a = cap.generate(&rois, &cfg).unwrap();
        let b = cap.generate_unconstrained(&rois, &cfg).unwrap();
        prop_assert_eq!(a.tokens, b.tokens);
        prop_assert_eq!(a.logprob, b.logprob);
    }
}

#[test]
fn sampling_is_seeded_and_cold_sampling_is_greedy() {
    let vocab = common::vocab();
    let params = common::model(&vocab, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let store = common::store_with(&mut rng, &common::TERMS, common::DIM);
    let cap = Captioner::new(&params, &store, &vocab).unwrap();
    let rois = common::rois(&mut rng, 3);
    let retrieval = cap.retrieve(&rois, 3).unwrap();
    let a = cap.sample_caption(&rois, &retrieval, 1.0, 6, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let b = cap.sample_caption(&rois, &retrieval, 1.0, 6, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(a, b);

    let memory = cap.memory(&rois, &retrieval).unwrap();
    let dec = cap.decoder(&memory);
    let g = greedy(&dec, 6, vocab.stop_id());
    let (cold, _) = sample_caption(&dec, 1e-9, 6, vocab.stop_id(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(cold, g);
    assert_eq!(cap.greedy(&rois, &retrieval, 6).unwrap(), g);
    assert!(sample_caption(&dec, 0.0, 6, vocab.stop_id(), &mut ChaCha8Rng::seed_from_u64(9)).is_err());
}

#[test]
fn constraints_keep_only_terms_spelled_in_the_vocabulary() {
    let vocab = common::vocab();
    let params = common::model(&vocab, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let store = common::store_with(&mut rng, &common::TERMS, common::DIM);
    let cap = Captioner::new(&params, &store, &vocab).unwrap();
    let rois = common::rois(&mut rng, 3);
    let retrieval = cap.retrieve(&rois, 5).unwrap();
    let (names, seqs) = cap.constraints(&retrieval);
    assert!(names.len() <= 3);
    assert!(!names.contains(&"zebra".to_string()));
    for (n, s) in names.iter().zip(&seqs) {
        assert_eq!(&vocab.decode(s).join(" "), n);
    }
}

#[test]
fn invalid_decode_settings_are_rejected() {
    let vocab = common::vocab();
    let params = common::model(&vocab, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let store = common::store_with(&mut rng, &common::TERMS, common::DIM);
    let cap = Captioner::new(&params, &store, &vocab).unwrap();
    let rois = common::rois(&mut rng, 3);
    assert!(cap.generate(&rois, &DecodeConfig { beam_size: 0, ..DecodeConfig::default() }).is_err());
    let other = nocrek_core::Vocabulary::from_tokens(["x"]);
    assert!(Captioner::new(&params, &store, &other).is_err());
}
