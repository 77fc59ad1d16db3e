mod common;

use nocrek_core::matching::{
    brute_force_assignment, expand_targets, hungarian, injection_count, matching_cost_matrix, BRUTE_FORCE_MAX,
};
use nocrek_core::retrieval::{region_features, retrieve_per_region};
use nocrek_core::{Matrix, TargetLabel};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn int_matrix(k: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-4i32..5, k * k).prop_map(move |v| Matrix::from_vec(k, k, v.into_iter().map(f64::from).collect()))
}

fn real_matrix(k: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-10.0f64..10.0, k * k).prop_map(move |v| Matrix::from_vec(k, k, v))
}

fn is_permutation(p: &[usize]) -> bool {
    let mut s = p.to_vec();
    s.sort_unstable();
    s.iter().enumerate().all(|(i, &v)| i == v)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn hungarian_matches_brute_force(m in (1usize..=7).prop_flat_map(|k| prop_oneof![int_matrix(k), real_matrix(k)])) {
        let fast = hungarian(&m).unwrap();
        let slow = brute_force_assignment(&m).unwrap();
        prop_assert!(is_permutation(&fast.permutation));
        prop_assert_eq!(fast.total_cost, slow.total_cost);
        prop_assert_eq!(fast.permutation, slow.permutation);
    }

    #[test]
    fn constant_shift_keeps_the_permutation(m in (1usize..=8).prop_flat_map(int_matrix), c in -20i32..20) {
        let k = m.rows();
        let shifted = Matrix::from_vec(k, k, m.data().iter().map(|v| v + f64::from(c)).collect());
        let a = hungarian(&m).unwrap();
        let b = hungarian(&shifted).unwrap();
        prop_assert_eq!(&a.permutation, &b.permutation);
        prop_assert_eq!(b.total_cost, a.total_cost + k as f64 * f64::from(c));
    }

    #[test]
    fn row_permutation_keeps_the_optimal_cost(m in (2usize..=7).prop_flat_map(real_matrix), seed in any::<u64>()) {
        let k = m.rows();
        let mut order: Vec<usize> = (0..k).collect();
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut ChaCha8Rng::seed_from_u64(seed));
        let rows: Vec<Vec<f64>> = order.iter().map(|&i| m.row(i).to_vec()).collect();
        let a = hungarian(&m).unwrap().total_cost;
        let b = hungarian(&Matrix::from_rows(&rows)).unwrap().total_cost;
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn no_object_rows_are_zero(seed in any::<u64>(), k in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names: Vec<String> = (0..12).map(|i| format!("c{i}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let store = common::store_with(&mut rng, &refs, 5);
        let n = rng.gen_range(0..=k);
        let targets = expand_targets(&names[..n], k, &store, &mut rng).unwrap();
        let rows: Vec<Vec<f64>> = (0..k).map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let retrieved = retrieve_per_region(&region_features(&rows), &store).unwrap();
        let cost = matching_cost_matrix(&targets, &retrieved, &store).unwrap();
        for (i, t) in targets.targets.iter().enumerate() {
            if t.is_no_object() {
                prop_assert!(cost.row(i).iter().all(|&v| v == 0.0));
            } else {
                prop_assert!(cost.row(i).iter().all(|&v| (-1.0..=1.0).contains(&v)));
            }
        }
    }
}

#[test]
fn expansion_counts_for_every_size() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let names: Vec<String> = (0..80).map(|i| format!("c{i}")).collect();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let store = common::store_with(&mut rng, &refs, 4);
    for k in 0..=64 {
        for n in 0..=k {
            let set = expand_targets(&names[..n], k, &store, &mut rng).unwrap();
            let padding = k - n;
            let expected = (3 * padding + 10) / 20;
            assert_eq!(set.n_injected, expected, "K={k} N={n}");
            assert_eq!(set.n_null, padding - expected);
            assert_eq!(set.len(), k);
            // ground truth first, then injections, then padding
            for (i, t) in set.targets.iter().enumerate() {
                match t {
                    TargetLabel::GroundTruth(g) => assert!(i < n && *g == names[i]),
                    TargetLabel::InjectedNovel(v) => {
                        assert!(i >= n && i < n + expected);
                        assert!(!names[..n].contains(v));
                    }
                    TargetLabel::NoObject => assert!(i >= n + expected),
                }
            }
        }
    }
}

#[test]
fn injection_rounds_half_up() {
    assert_eq!(injection_count(30), 5); // 4.5
    assert_eq!(injection_count(10), 2); // 1.5
    assert_eq!(injection_count(3), 0); // 0.45
    assert_eq!(injection_count(4), 1); // 0.6
    assert_eq!(injection_count(0), 0);
}

#[test]
fn injection_is_capped_by_the_pool() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let store = common::store_with(&mut rng, &["a", "b"], 3);
    let set = expand_targets(&["a".to_string()], 40, &store, &mut rng).unwrap();
    assert_eq!(set.n_injected, 1);
    assert_eq!(set.n_null, 38);
}

#[test]
fn expansion_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let store = common::store_with(&mut rng, &["a", "b"], 3);
    assert!(expand_targets(&["a".into(), "b".into()], 1, &store, &mut rng).is_err());
    assert!(expand_targets(&["zebra".into()], 3, &store, &mut rng).is_err());
}

#[test]
fn single_entry_and_size_limit() {
    let one = Matrix::from_vec(1, 1, vec![-2.5]);
    let a = brute_force_assignment(&one).unwrap();
    assert_eq!((a.permutation, a.total_cost), (vec![0], -2.5));
    let big = Matrix::zeros(BRUTE_FORCE_MAX + 1, BRUTE_FORCE_MAX + 1);
    assert!(brute_force_assignment(&big).is_err());
    assert!(hungarian(&big).is_ok());
}

#[test]
fn ties_take_the_lexicographically_smallest_permutation() {
    let all_equal = Matrix::zeros(5, 5);
    assert_eq!(hungarian(&all_equal).unwrap().permutation, vec![0, 1, 2, 3, 4]);
    let m = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
    // zero-cost optima are [1, 2, 0] and [2, 0, 1]
    assert_eq!(hungarian(&m).unwrap().permutation, vec![1, 2, 0]);
}

#[test]
fn large_instances_are_valid() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let k = 50;
    let m = Matrix::from_vec(k, k, (0..k * k).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let a = hungarian(&m).unwrap();
    assert!(is_permutation(&a.permutation));
    let own: f64 = (0..k).map(|i| m.get(i, a.permutation[i])).sum();
    assert!((own - a.total_cost).abs() < 1e-9);
    // no improving swap of two assignments
    for i in 0..k {
        for j in i + 1..k {
            let (pi, pj) = (a.permutation[i], a.permutation[j]);
            assert!(m.get(i, pj) + m.get(j, pi) >= m.get(i, pi) + m.get(j, pj) - 1e-12);
        }
    }
}
