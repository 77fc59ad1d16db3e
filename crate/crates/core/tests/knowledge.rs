mod common;

use nocrek_core::knowledge::{embed_definition, read_definitions_file, write_definitions};
use nocrek_core::{DefinitionRecord, Error, KnowledgeStore, SharedStore, NO_OBJECT};
use proptest::prelude::*;

fn definition() -> impl Strategy<Value = String> {
    "[a-z]{1,10}( [a-z]{1,10}){0,8}"
}

fn term() -> impl Strategy<Value = String> {
    "[a-z]{2,8}( [a-z]{2,8})?"
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stored_embeddings_are_unit(defs in prop::collection::vec(definition(), 1..12), dim in 2usize..80) {
        let records = defs
            .iter()
            .enumerate()
            .map(|(i, d)| DefinitionRecord::new(format!("t{i}"), d.clone()))
            .collect();
        let store = KnowledgeStore::from_records(dim, records).unwrap();
        for e in store.entries().iter().filter(|e| !e.is_reserved()) {
            let n = e.embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-9, "{} has norm {n}", e.term);
        }
    }

    #[test]
    fn add_then_remove_restores_entries(
        base in prop::collection::btree_map(term(), definition(), 0..6),
        extra in prop::collection::btree_map(term(), definition(), 1..6),
    ) {
        let base: Vec<DefinitionRecord> =
            base.into_iter().map(|(t, d)| DefinitionRecord::new(t, d)).collect();
        let mut store = KnowledgeStore::from_records(16, base).unwrap();
        let before = store.entries().to_vec();
        let extra: Vec<(String, String)> =
            extra.into_iter().filter(|(t, _)| !store.contains(t)).collect();
        prop_assume!(!extra.is_empty());
        store.add_entries(&extra).unwrap();
        prop_assert_eq!(store.len(), before.len() + extra.len());
        let terms: Vec<String> = extra.iter().map(|(t, _)| t.clone()).collect();
        store.remove_entries(&terms).unwrap();
        prop_assert_eq!(store.entries(), &before[..]);
    }

    #[test]
    fn explicit_embeddings_are_normalized(v in prop::collection::vec(-5.0f64..5.0, 6)) {
        prop_assume!(v.iter().any(|x| x.abs() > 1e-3));
        let rec = DefinitionRecord { term: "x".into(), definition: "d".into(), embedding: Some(v.clone()) };
        let store = KnowledgeStore::from_records(6, vec![rec]).unwrap();
        let e = store.embedding("x").unwrap();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (a, b) in e.iter().zip(&v) {
            prop_assert!((a - b / n).abs() < 1e-12);
        }
    }
}

#[test]
fn embedder_is_pure() {
    let first = embed_definition("a small striped animal of the plains", 64).unwrap();
    for _ in 0..1000 {
        assert_eq!(embed_definition("a small striped animal of the plains", 64).unwrap(), first);
    }
}

#[test]
fn similar_definitions_embed_closer_than_unrelated_ones() {
    let a = embed_definition("striped wild horse of africa", 64).unwrap();
    let b = embed_definition("striped wild horse of the savanna", 64).unwrap();
    let c = embed_definition("kitchen appliance for baking bread", 64).unwrap();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    assert!(dot(&a, &b) > dot(&a, &c));
}

#[test]
fn no_object_is_pinned_and_protected() {
    let mut store = KnowledgeStore::from_records(8, vec![DefinitionRecord::new("cat", "small pet")]).unwrap();
    assert_eq!(store.entry(0).term, NO_OBJECT);
    assert!(store.entry(0).embedding.iter().all(|&x| x == 0.0));
    assert!(matches!(store.remove_entries(&[NO_OBJECT.into()]), Err(Error::ReservedTerm(_))));
    assert!(store.add_records(vec![DefinitionRecord::new(NO_OBJECT, "x")]).is_err());
}

#[test]
fn terms_are_normalized_and_duplicates_rejected() {
    let mut store = KnowledgeStore::new(8).unwrap();
    store.add_entries(&[("  Fire   Hydrant ".into(), "red street valve".into())]).unwrap();
    assert!(store.contains("fire hydrant"));
    let err = store.add_entries(&[("fire hydrant".into(), "again".into())]).unwrap_err();
    assert!(matches!(err, Error::DuplicateTerm(_)));
    assert!(matches!(store.remove_entries(&["zebra".into()]), Err(Error::UnknownTerm(_))));
}

#[test]
fn failed_batch_leaves_store_untouched() {
    let mut store = KnowledgeStore::from_records(8, vec![DefinitionRecord::new("cat", "pet")]).unwrap();
    let before = store.clone();
    let bad = vec![DefinitionRecord::new("dog", "pet"), DefinitionRecord::new("cat", "dup")];
    assert!(store.add_records(bad).is_err());
    assert_eq!(store, before);
}

#[test]
fn revision_counts_edits() {
    let mut store = KnowledgeStore::new(8).unwrap();
    let r0 = store.revision();
    store.add_entries(&[("cat".into(), "pet".into())]).unwrap();
    store.remove_entries(&["cat".into()]).unwrap();
    assert_eq!(store.revision(), r0 + 2);
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("k.jsonl");
    let mut store = KnowledgeStore::from_records(
        12,
        vec![DefinitionRecord::new("cat", "small pet"), DefinitionRecord::new("fire hydrant", "red valve")],
    )
    .unwrap();
    store.add_entries(&[("zebra".into(), "striped horse".into())]).unwrap();
    store.save(&path).unwrap();
    let back = KnowledgeStore::load(&path).unwrap();
    assert_eq!(back.entries(), store.entries());
    assert_eq!(back.revision(), store.revision());
    assert_eq!(back.dimension(), 12);
}

#[test]
fn definitions_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("defs.jsonl");
    let records = vec![
        DefinitionRecord::new("cat", "small pet"),
        DefinitionRecord { term: "dog".into(), definition: "loyal pet".into(), embedding: Some(vec![0.0, 1.0, 0.0]) },
    ];
    write_definitions(&path, 3, &records).unwrap();
    let (dim, back) = read_definitions_file(&path).unwrap();
    assert_eq!(dim, 3);
    assert_eq!(back, records);
}

#[test]
fn wrong_embedding_dimension_is_rejected() {
    let rec = DefinitionRecord { term: "x".into(), definition: "d".into(), embedding: Some(vec![1.0, 0.0]) };
    assert!(KnowledgeStore::from_records(3, vec![rec]).is_err());
    let zero = DefinitionRecord { term: "x".into(), definition: "d".into(), embedding: Some(vec![0.0; 3]) };
    assert!(KnowledgeStore::from_records(3, vec![zero]).is_err());
}

#[test]
fn readers_see_whole_revisions() {
    let shared = SharedStore::new(KnowledgeStore::new(8).unwrap());
    let before = shared.snapshot();
    shared
        .update(|s| s.add_entries(&[("cat".into(), "pet".into()), ("dog".into(), "pet".into())]))
        .unwrap();
    let after = shared.snapshot();
    assert_eq!(before.len(), 1);
    assert_eq!(after.len(), 3);
    assert!(after.revision() > before.revision());
}
