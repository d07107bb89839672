use std::time::Duration;

use gecprep_annosvc::{AnnotationStore, Label, Sampling};
use gecprep_core::corpus::SentencePair;
use gecprep_core::detok::DetokOutcome;

/// A corpus of `size` pairs with `n_modified` LLM changes, a seeded sample of
/// which is labeled with the given counts (essential, optional, erroneous,
/// not assessable).
fn labeled_store(size: usize, n_modified: usize, counts: [usize; 4]) -> AnnotationStore {
    let pairs: Vec<_> = (0..size)
        .map(|i| SentencePair::new(format!("p{i}"), "a b .", "a b .").tokenized(true))
        .collect();
    let outcomes: Vec<_> = (0..size)
        .map(|i| DetokOutcome {
            pair_id: format!("p{i}"),
            rule_text: "a b.".into(),
            llm_text: Some(if i < n_modified { "a c.".into() } else { "a b.".into() }),
            modified: i < n_modified,
        })
        .collect();
    let k: usize = counts.iter().sum();
    let mut store = AnnotationStore::from_outcomes(&outcomes, &pairs, Some(Sampling { k, seed: 11 }), Duration::from_secs(60));
    let mut id = 1;
    for (label, n) in Label::ALL.into_iter().zip(counts) {
        for _ in 0..n {
            store.submit_label(id, label, "ann", String::new()).unwrap();
            id += 1;
        }
    }
    store
}

fn pct(x: f64) -> f64 {
    100.0 * x
}

#[test]
fn bea_train_bound() {
    let s = labeled_store(34300, 2133, [225, 14, 28, 19]).stats();
    assert!((pct(s.modified_ratio) - 6.22).abs() < 0.005);
    assert!((pct(s.essential) - 78.67).abs() < 0.005);
    assert!((pct(s.wrong_annotations_lower_bound) - 4.89).abs() <= 0.01);
}

#[test]
fn fce_train_bound() {
    let s = labeled_store(28400, 2391, [205, 35, 35, 11]).stats();
    assert!((pct(s.modified_ratio) - 8.42).abs() < 0.005);
    assert!((pct(s.essential) - 71.68).abs() < 0.005);
    assert!((pct(s.wrong_annotations_lower_bound) - 6.04).abs() <= 0.01);
}

#[test]
fn bea_dev_bound() {
    let s = labeled_store(4387, 286, [231, 8, 36, 11]).stats();
    assert!((pct(s.modified_ratio) - 6.52).abs() < 0.005);
    assert!((pct(s.essential) - 80.77).abs() < 0.005);
    // the product of the rounded ratios is 5.27
    assert!((pct(s.wrong_annotations_lower_bound) - 5.27).abs() < 0.01);
}

#[test]
fn fractions_sum_to_one() {
    let s = labeled_store(500, 50, [3, 5, 7, 11]).stats();
    assert_eq!((s.n_tasks, s.n_labeled, s.pending), (26, 26, 0));
    assert!((s.essential + s.optional + s.erroneous + s.not_assessable - 1.0).abs() < 1e-12);
}
