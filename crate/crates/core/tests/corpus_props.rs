use std::collections::{BTreeMap, BTreeSet};

use medtag::corpus::{
    corpus_stats, generate_synthetic_corpus, parse_corpus, stratified_split, validate_corpus, AnnotatedSpan, Corpus,
    LabelSchema, Post,
};
use medtag::tokenize::whitespace_tokenize;
use proptest::prelude::*;

fn synth(schema: &LabelSchema, counts: &[usize], seed: u64) -> Corpus {
    let map: BTreeMap<String, usize> = schema.labels.iter().cloned().zip(counts.iter().copied()).collect();
    generate_synthetic_corpus(schema, &map, seed).unwrap()
}

fn any_schema() -> impl Strategy<Value = LabelSchema> {
    prop_oneof![Just(LabelSchema::subtask1()), Just(LabelSchema::subtask2())]
}

fn any_corpus() -> impl Strategy<Value = Corpus> {
    (any_schema(), prop::collection::vec(0usize..15, 4), any::<u64>()).prop_map(|(schema, counts, seed)| {
        let counts: Vec<usize> = counts.into_iter().take(schema.labels.len()).collect();
        synth(&schema, &counts, seed)
    })
}

/// Independent recount straight from the posts.
fn recount(corpus: &Corpus) -> (BTreeMap<String, usize>, BTreeMap<String, f64>) {
    let mut counts = BTreeMap::new();
    let mut lengths: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for post in &corpus.posts {
        for span in &post.spans {
            *counts.entry(span.label.clone()).or_insert(0) += 1;
            let n = whitespace_tokenize(&post.span_text(span), 0).len();
            lengths.entry(span.label.clone()).or_default().push(n);
        }
    }
    let means = lengths
        .into_iter()
        .map(|(k, v)| (k, v.iter().sum::<usize>() as f64 / v.len() as f64))
        .collect();
    (counts, means)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn synthetic_corpora_are_valid_and_recount(corpus in any_corpus()) {
        let report = validate_corpus(&corpus);
        prop_assert!(report.is_valid(), "{:?}", report.errors);
        let stats = corpus_stats(&corpus).unwrap();
        let (counts, means) = recount(&corpus);
        prop_assert_eq!(&stats.entity_counts, &counts);
        for (label, mean) in &means {
            prop_assert!((stats.mean_entity_length_tokens[label] - mean).abs() < 1e-12);
        }
        prop_assert_eq!(stats.posts_per_condition.values().sum::<usize>(), corpus.posts.len());
        prop_assert_eq!(stats.overlap_fraction, 0.0);
    }

    #[test]
    fn split_partitions_posts(corpus in any_corpus(), f in 0.05f64..0.95, seed in any::<u64>()) {
        prop_assume!(corpus.posts.len() >= 2);
        let (train, val) = stratified_split(&corpus, f, seed).unwrap();
        prop_assert!(!train.posts.is_empty() && !val.posts.is_empty());
        let ids = |c: &Corpus| c.posts.iter().map(|p| p.post_id.clone()).collect::<BTreeSet<_>>();
        let (a, b) = (ids(&train), ids(&val));
        prop_assert!(a.is_disjoint(&b));
        prop_assert_eq!(a.union(&b).cloned().collect::<BTreeSet<_>>(), ids(&corpus));
        prop_assert_eq!(train.posts.len() + val.posts.len(), corpus.posts.len());
        prop_assert_eq!(stratified_split(&corpus, f, seed).unwrap(), (train, val));
    }

    #[test]
    fn jsonl_round_trips(corpus in any_corpus()) {
        let text = corpus.to_jsonl();
        let back = parse_corpus(text.as_bytes(), &corpus.schema).unwrap();
        prop_assert_eq!(back, corpus);
    }

    #[test]
    fn every_mutation_is_reported(corpus in any_corpus(), which in 0usize..5, pick in any::<prop::sample::Index>()) {
        prop_assume!(corpus.span_count() >= 2);
        let mut broken = corpus.clone();
        let with_spans: Vec<usize> = (0..broken.posts.len()).filter(|&i| !broken.posts[i].spans.is_empty()).collect();
        let pi = with_spans[pick.index(with_spans.len())];
        let expected = match which {
            0 => {
                let dup = broken.posts[pi].clone();
                broken.posts.push(dup);
                "duplicate_post_id"
            }
            1 => {
                broken.posts[pi].spans[0].label = "diagnosis".into();
                "unknown_label"
            }
            2 => {
                let s = &mut broken.posts[pi].spans[0];
                s.end = s.start;
                "empty_span"
            }
            3 => {
                let len = broken.posts[pi].char_len();
                broken.posts[pi].spans[0].end = len + 1;
                "offset_out_of_range"
            }
            _ => {
                let post = &mut broken.posts[pi];
                post.spans.insert(0, AnnotatedSpan { start: post.char_len() - 1, end: post.char_len(), label: corpus.schema.labels[0].clone() });
                "unsorted_spans"
            }
        };
        let report = validate_corpus(&broken);
        prop_assert!(report.errors.iter().any(|e| e.code == expected), "{} missing from {:?}", expected, report.errors);
        prop_assert!(corpus_stats(&broken).is_err());
        prop_assert!(validate_corpus(&corpus).is_valid());
    }
}

#[test]
fn overlap_is_a_warning_and_counted() {
    let schema = LabelSchema::subtask2();
    let post = Post {
        post_id: "p".into(),
        condition: "Gout".into(),
        text: "my gout flare".into(),
        spans: vec![
            AnnotatedSpan { start: 0, end: 7, label: "population".into() },
            AnnotatedSpan { start: 3, end: 13, label: "outcome".into() },
            AnnotatedSpan { start: 8, end: 13, label: "outcome".into() },
        ],
    };
    let corpus = Corpus::new(schema, vec![post]);
    let report = validate_corpus(&corpus);
    assert!(report.is_valid());
    assert_eq!(report.counts["overlap"], 2);
    let stats = corpus_stats(&corpus).unwrap();
    assert_eq!(stats.overlap_fraction, 1.0);
}

#[test]
fn synthetic_generation_is_deterministic() {
    let schema = LabelSchema::subtask1();
    assert_eq!(synth(&schema, &[3, 3, 3, 3], 9), synth(&schema, &[3, 3, 3, 3], 9));
    assert_ne!(synth(&schema, &[3, 3, 3, 3], 9), synth(&schema, &[3, 3, 3, 3], 10));
}
