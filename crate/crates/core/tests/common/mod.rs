#![allow(dead_code)]

use medtag::augment::{KnowledgeKind, KnowledgeSpan};
use medtag::backend::TagSpace;
use medtag::corpus::{AnnotatedSpan, LabelSchema};
use medtag::tokenize::{repair_bio, whitespace_tokenize, BioLabel, SentenceSpan};
use proptest::prelude::*;

/// Reference subtask-1 confusion counts. Rows are gold, columns
/// predicted, both in the order of `CM1_LABELS` followed by no label.
pub const CM1_LABELS: [&str; 4] = ["claim", "claim_per_exp", "per_exp", "question"];
pub const CM1: [[u64; 5]; 5] = [
    [525, 30, 170, 75, 1507],
    [37, 1964, 2762, 86, 3466],
    [26, 968, 20681, 403, 13202],
    [37, 19, 373, 10715, 1549],
    [639, 1678, 14009, 2184, 61036],
];

pub const CM2_LABELS: [&str; 3] = ["population", "intervention", "outcome"];
pub const CM2: [[u64; 4]; 4] = [
    [42, 1, 12, 51],
    [4, 67, 1, 136],
    [4, 0, 45, 120],
    [104, 128, 320, 18269],
];

/// One-token sentences realizing every cell of a confusion table.
pub fn streams_from_table<const N: usize>(names: &[&str], table: &[[u64; N]; N]) -> (Vec<Vec<BioLabel>>, Vec<Vec<BioLabel>>) {
    let label = |i: usize| names.get(i).map_or(BioLabel::O, |n| BioLabel::B(n.to_string()));
    let (mut gold, mut pred) = (Vec::new(), Vec::new());
    for (g, row) in table.iter().enumerate() {
        for (p, &count) in row.iter().enumerate() {
            for _ in 0..count {
                gold.push(vec![label(g)]);
                pred.push(vec![label(p)]);
            }
        }
    }
    (gold, pred)
}

/// Reference counts permuted into the matrix order of `schema`.
pub fn table_in_schema_order<const N: usize>(schema: &LabelSchema, names: &[&str], table: &[[u64; N]; N]) -> Vec<Vec<u64>> {
    let pos = |i: usize| {
        if i < schema.labels.len() {
            names.iter().position(|n| *n == schema.labels[i]).expect("label in table")
        } else {
            N - 1
        }
    };
    (0..N).map(|r| (0..N).map(|c| table[pos(r)][pos(c)]).collect()).collect()
}

pub fn schema_with(k: usize) -> LabelSchema {
    LabelSchema::new("t", (0..k).map(|i| format!("l{i}")).collect()).unwrap()
}

/// Exhaustive search over every well-formed tag path; returns (score, path).
pub fn brute_force_decode(space: &TagSpace, rows: &[Vec<f64>]) -> (f64, Vec<usize>) {
    fn go(space: &TagSpace, rows: &[Vec<f64>], path: &mut Vec<usize>, acc: f64, best: &mut (f64, Vec<usize>)) {
        let t = path.len();
        if t == rows.len() {
            if acc > best.0 {
                *best = (acc, path.clone());
            }
            return;
        }
        for c in 0..space.len() {
            if space.allowed(path.last().copied(), c) {
                path.push(c);
                go(space, rows, path, acc + rows[t][c], best);
                path.pop();
            }
        }
    }
    let mut best = (f64::NEG_INFINITY, Vec::new());
    go(space, rows, &mut Vec::new(), 0.0, &mut best);
    best
}

pub fn path_score(rows: &[Vec<f64>], path: &[usize]) -> f64 {
    path.iter().enumerate().map(|(t, &c)| rows[t][c]).sum()
}

pub fn word() -> impl Strategy<Value = String> {
    prop_oneof![
        "[a-z]{1,6}",
        "[A-Z][a-z]{0,5}",
        "[0-9]{1,3}",
        Just("café".to_string()),
        Just("naïve".to_string()),
        Just("(ok)".to_string()),
    ]
}

/// Text built from words joined by one to three spaces, plus its tokens.
pub fn sentence() -> impl Strategy<Value = SentenceSpan> {
    prop::collection::vec((word(), 1usize..4), 1..12).prop_map(|parts| {
        let mut text = String::new();
        for (i, (w, gap)) in parts.iter().enumerate() {
            if i > 0 {
                text.push_str(&" ".repeat(*gap));
            }
            text.push_str(w);
        }
        let tokens = whitespace_tokenize(&text, 0);
        SentenceSpan {
            start: 0,
            end: text.chars().count(),
            tokens,
        }
    })
}

/// A sentence with non-overlapping, token-aligned spans.
pub fn aligned_spans(schema: LabelSchema) -> impl Strategy<Value = (SentenceSpan, Vec<AnnotatedSpan>)> {
    sentence().prop_flat_map(move |s| {
        let n = s.tokens.len();
        let k = schema.labels.len();
        (Just(s), prop::collection::vec((0..4usize, 0..k), n), Just(schema.clone()))
    })
    .prop_map(|(s, picks, schema)| {
        // picks[i].0: 0 starts a span, 1 extends the previous one, else outside
        let mut spans: Vec<AnnotatedSpan> = Vec::new();
        let mut open = false;
        for (tok, (action, label)) in s.tokens.iter().zip(picks) {
            match action {
                1 if open => spans.last_mut().unwrap().end = tok.end,
                0 | 1 => {
                    spans.push(AnnotatedSpan {
                        start: tok.start,
                        end: tok.end,
                        label: schema.labels[label].clone(),
                    });
                    open = true;
                }
                _ => open = false,
            }
        }
        (s, spans)
    })
}

/// A sentence with arbitrary, possibly overlapping character spans.
pub fn arbitrary_spans(schema: LabelSchema) -> impl Strategy<Value = (SentenceSpan, Vec<AnnotatedSpan>)> {
    sentence().prop_flat_map(move |s| {
        let len = s.end;
        let k = schema.labels.len();
        let labels = schema.labels.clone();
        let span = (0..len, 1..=len, 0..k).prop_map(move |(a, b, l)| {
            let (start, end) = if a < b { (a, b) } else { (b.saturating_sub(1), b) };
            AnnotatedSpan {
                start,
                end: end.max(start + 1),
                label: labels[l].clone(),
            }
        });
        (Just(s), prop::collection::vec(span, 0..5))
    })
}

pub fn any_label(k: usize) -> impl Strategy<Value = BioLabel> {
    prop_oneof![
        Just(BioLabel::O),
        (0..k).prop_map(|i| BioLabel::B(format!("l{i}"))),
        (0..k).prop_map(|i| BioLabel::I(format!("l{i}"))),
    ]
}

pub fn label_seq(k: usize, max_len: usize) -> impl Strategy<Value = Vec<BioLabel>> {
    prop::collection::vec(any_label(k), 0..max_len)
}

/// Tokens, well-formed labels and sorted non-overlapping knowledge spans.
pub fn augmentation_case() -> impl Strategy<Value = (Vec<String>, Vec<BioLabel>, Vec<KnowledgeSpan>)> {
    prop::collection::vec(("[a-z]{1,6}", any_label(3), 0..6u8), 1..15).prop_map(|rows| {
        let tokens: Vec<String> = rows.iter().map(|r| r.0.clone()).collect();
        let labels = repair_bio(&rows.iter().map(|r| r.1.clone()).collect::<Vec<_>>());
        // r.2: 0 disease start, 1 chemical start, 2 extend, else none
        let mut kspans: Vec<KnowledgeSpan> = Vec::new();
        let mut open = false;
        for (i, r) in rows.iter().enumerate() {
            match r.2 {
                2 if open => kspans.last_mut().unwrap().last_token = i,
                0 | 1 => {
                    let kind = if r.2 == 0 { KnowledgeKind::Disease } else { KnowledgeKind::Chemical };
                    kspans.push(KnowledgeSpan { first_token: i, last_token: i, kind });
                    open = true;
                }
                _ => open = false,
            }
        }
        (tokens, labels, kspans)
    })
}
