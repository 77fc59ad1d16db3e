use nocrek_core::metrics::{cider, contains_phrase, mentions, novel_f1, normalize_tokens, tokenize, CiderScorer, ScoredScene};
use nocrek_core::{ClassF1, EvalReport};
use proptest::prelude::*;

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn scene(gt: &[&str], caption: &str) -> ScoredScene {
    ScoredScene { gt_classes: gt.iter().map(|s| s.to_string()).collect(), caption: toks(caption) }
}

const WORDS: [&str; 8] = ["a", "cat", "dog", "on", "the", "mat", "red", "bus"];

fn sentence() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(&WORDS[..]), 1..8).prop_map(|v| v.into_iter().map(str::to_string).collect())
}

fn corpus() -> impl Strategy<Value = (Vec<Vec<String>>, Vec<Vec<Vec<String>>>)> {
    (2usize..6).prop_flat_map(|n| {
        (
            prop::collection::vec(sentence(), n),
            prop::collection::vec(prop::collection::vec(sentence(), 1..4), n),
        )
    })
}

fn scenes() -> impl Strategy<Value = Vec<ScoredScene>> {
    let one = (prop::collection::hash_set(prop::sample::select(vec!["cat", "dog", "bus"]), 0..3), sentence())
        .prop_map(|(gt, caption)| ScoredScene { gt_classes: gt.into_iter().map(str::to_string).collect(), caption });
    prop::collection::vec(one, 1..20)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn f1_is_bounded_and_consistent(scenes in scenes()) {
        for class in ["cat", "dog", "bus"] {
            let f = novel_f1(&scenes, class).unwrap();
            for v in [f.precision, f.recall, f.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let expect = if f.precision + f.recall == 0.0 { 0.0 } else { 2.0 * f.precision * f.recall / (f.precision + f.recall) };
            prop_assert!((f.f1 - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn f1_is_invariant_under_duplication(scenes in scenes(), copies in 2usize..4) {
        let many: Vec<ScoredScene> = (0..copies).flat_map(|_| scenes.clone()).collect();
        for class in ["cat", "dog", "bus"] {
            let a = novel_f1(&scenes, class).unwrap();
            let b = novel_f1(&many, class).unwrap();
            prop_assert_eq!((b.tp, b.fp, b.fn_), (a.tp * copies, a.fp * copies, a.fn_ * copies));
            prop_assert!((a.f1 - b.f1).abs() < 1e-15);
        }
    }

    #[test]
    fn cider_is_order_independent((cands, refs) in corpus()) {
        let fwd = cider(&cands, &refs).unwrap();
        let rc: Vec<_> = cands.iter().rev().cloned().collect();
        let rr: Vec<_> = refs.iter().rev().cloned().collect();
        let rev = cider(&rc, &rr).unwrap();
        let mut back = rev.per_item.clone();
        back.reverse();
        prop_assert_eq!(&fwd.per_item, &back);
        prop_assert!((fwd.mean - rev.mean).abs() < 1e-12);
        prop_assert!(fwd.per_item.iter().all(|s| s.is_finite()));
    }

    #[test]
    fn self_match_beats_a_one_token_change((_, refs) in corpus(), item in 0usize..6, pos in 0usize..8) {
        let item = item % refs.len();
        let cand = refs[item][0].clone();
        let scorer = CiderScorer::from_references(&refs).unwrap();
        // non-degenerate: some n-gram of the candidate carries positive weight
        prop_assume!(cand.iter().any(|w| scorer.idf(std::slice::from_ref(w)) > 0.0));
        let mut changed = cand.clone();
        changed[pos % cand.len()] = "oov".into();
        let a = scorer.score(&cand, &refs[item]).unwrap();
        let b = scorer.score(&changed, &refs[item]).unwrap();
        prop_assert!(a > b, "{a} vs {b}");
    }
}

#[test]
fn disjoint_candidate_scores_zero() {
    let refs = vec![vec![toks("a cat on a mat")], vec![toks("the red bus")], vec![toks("a dog")]];
    let s = cider(&[toks("zebra grazing"), toks("the red bus"), toks("a dog")], &refs).unwrap();
    assert_eq!(s.per_item[0], 0.0);
    assert!(s.per_item[1] > 0.0);
}

#[test]
fn hand_computed_unigram_weights() {
    // two items; "cat" occurs in one of them, so idf = ln(2 / 2) = 0
    let refs = vec![vec![toks("cat")], vec![toks("dog")]];
    let scorer = CiderScorer::from_references(&refs).unwrap();
    assert_eq!(scorer.n_items(), 2);
    assert_eq!(scorer.idf(&toks("cat")), 0.0);
    assert!((scorer.idf(&toks("zebra")) - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn cider_errors() {
    assert!(cider(&[toks("a")], &[vec![toks("a")]]).is_err());
    assert!(cider(&[toks("a"), toks("b")], &[vec![toks("a")], vec![]]).is_err());
    assert!(cider(&[toks("a")], &[vec![toks("a")], vec![toks("b")]]).is_err());
}

#[test]
fn f1_corner_cases() {
    let perfect = vec![scene(&["cat"], "a cat"), scene(&[], "a dog"), scene(&["cat", "dog"], "the cat")];
    assert_eq!(novel_f1(&perfect, "cat").unwrap().f1, 1.0);
    assert_eq!(novel_f1(&perfect, "bus").unwrap().f1, 0.0);
    // "dog" is mentioned only where absent and absent from the one caption that needs it
    let dog = novel_f1(&perfect, "dog").unwrap();
    assert_eq!((dog.tp, dog.fp, dog.fn_), (0, 1, 1));
    assert!(novel_f1(&[], "cat").is_err());
    assert_eq!(ClassF1::from_counts(0, 0, 0).f1, 0.0);
}

#[test]
fn mentions_are_contiguous_and_normalized() {
    let cap = normalize_tokens(&toks("A Fire Hydrant, near the bus."));
    assert!(mentions(&cap, "fire hydrant"));
    assert!(mentions(&cap, "bus"));
    assert!(!mentions(&cap, "hydrant fire"));
    assert!(!mentions(&toks("buses"), "bus"));
    assert!(contains_phrase(&["x", "y", "z"], &["y", "z"]));
    assert_eq!(tokenize("The Cat sat."), toks("the cat sat"));
}

#[test]
fn report_average_is_unweighted() {
    let scenes = vec![scene(&["cat"], "a cat"), scene(&["dog"], "a cat"), scene(&["bus"], "a bus")];
    let classes: Vec<String> = ["cat", "dog", "bus"].iter().map(|s| s.to_string()).collect();
    let r = EvalReport::build(1.0, &scenes, &classes).unwrap();
    let expect = (r.per_class_f1["cat"].f1 + r.per_class_f1["dog"].f1 + r.per_class_f1["bus"].f1) / 3.0;
    assert!((r.avg_f1 - expect).abs() < 1e-15);
    let mut csv = Vec::new();
    r.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().next().unwrap().starts_with("term,tp,fp,fn"));
}
