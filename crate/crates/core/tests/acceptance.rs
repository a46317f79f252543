//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use medtag::augment::{augment, project_back, Gazetteer, KnowledgeKind, Origin};
use medtag::backend::perceptron::train_perceptron;
use medtag::backend::{viterbi_decode, HyperParams, TagSpace, TrainingSentence};
use medtag::corpus::{generate_synthetic_corpus, stratified_split, LabelSchema};
use medtag::evaluation::{paired_bootstrap, token_confusion, token_prf, BootstrapMetric, BootstrapUnit};
use medtag::pipeline::corpus_sentences;
use medtag::tokenize::{decode_bio, encode_bio, is_well_formed, repair_bio, BioLabel};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

type Outcome = Result<String, String>;

struct Report {
    failed: usize,
}

impl Report {
    fn check(&mut self, name: &str, f: impl FnOnce() -> Outcome) {
        let t = Instant::now();
        let outcome = f();
        let ms = t.elapsed().as_millis();
        match outcome {
            Ok(detail) => println!("PASS  {name:<28} {detail} ({ms} ms)"),
            Err(detail) => {
                self.failed += 1;
                println!("FAIL  {name:<28} {detail} ({ms} ms)");
            }
        }
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    if elapsed < limit {
        Ok(())
    } else {
        Err(format!("took {elapsed:?}, limit {limit:?}"))
    }
}

fn expect_prf(report: &medtag::evaluation::MetricsReport, label: &str, want: [f64; 3]) -> Result<String, String> {
    let got = report.per_label[label];
    let got = [got.precision, got.recall, got.f1];
    if got.iter().zip(want).all(|(g, w)| (g - w).abs() <= 1e-4) {
        Ok(format!("{label} P={:.4} R={:.4} F1={:.4}", got[0], got[1], got[2]))
    } else {
        Err(format!("{label} got {got:?}, want {want:?}"))
    }
}

fn metric_oracle<const N: usize>(schema: LabelSchema, names: &[&str], table: &[[u64; N]; N], want: &[(&str, [f64; 3])]) -> Outcome {
    let t = Instant::now();
    let (gold, pred) = streams_from_table(names, table);
    let report = token_prf(&token_confusion(&gold, &pred, &schema).map_err(|e| e.to_string())?);
    let mut parts = Vec::new();
    for (label, w) in want {
        parts.push(expect_prf(&report, label, *w)?);
    }
    within(t.elapsed(), Duration::from_secs(1))?;
    Ok(parts.join("; "))
}

fn confusion_round_trip() -> Outcome {
    let mut cells = 0;
    for (schema, names, counts) in [
        (LabelSchema::subtask1(), &CM1_LABELS[..], CM1.iter().map(|r| r.to_vec()).collect::<Vec<_>>()),
        (LabelSchema::subtask2(), &CM2_LABELS[..], CM2.iter().map(|r| r.to_vec()).collect::<Vec<_>>()),
    ] {
        let (gold, pred) = if names.len() == 4 {
            streams_from_table(names, &CM1)
        } else {
            streams_from_table(names, &CM2)
        };
        let m = token_confusion(&gold, &pred, &schema).map_err(|e| e.to_string())?;
        let idx = |i: usize| {
            if i < names.len() {
                schema.label_index(names[i]).unwrap()
            } else {
                schema.labels.len()
            }
        };
        for (r, row) in counts.iter().enumerate() {
            for (c, &want) in row.iter().enumerate() {
                let got = m.counts[idx(r)][idx(c)];
                if got != want {
                    return Err(format!("{} cell ({r},{c}): got {got}, want {want}", schema.name));
                }
                cells += 1;
            }
        }
    }
    Ok(format!("{cells} cells reproduced"))
}

fn run_cases<S: Strategy>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String>
where
    S::Value: std::fmt::Debug,
{
    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn bio_suite() -> Outcome {
    let t = Instant::now();
    let s1 = LabelSchema::subtask1();
    run_cases(1000, aligned_spans(s1.clone()), |(s, spans)| {
        let labels = encode_bio(&s, &spans, &s1);
        prop_assert!(is_well_formed(&labels));
        prop_assert_eq!(decode_bio(&s, &labels).unwrap(), spans);
        prop_assert_eq!(repair_bio(&repair_bio(&labels)), labels);
        Ok(())
    })?;
    run_cases(1000, label_seq(4, 20), |raw| {
        let once = repair_bio(&raw);
        prop_assert!(is_well_formed(&once));
        prop_assert_eq!(repair_bio(&once), once);
        Ok(())
    })?;
    let s2 = LabelSchema::subtask2();
    run_cases(1000, arbitrary_spans(s2.clone()), |(s, spans)| {
        let labels = encode_bio(&s, &spans, &s2);
        for (tok, label) in s.tokens.iter().zip(&labels) {
            let winner = spans
                .iter()
                .filter(|sp| tok.start < sp.end && sp.start < tok.end)
                .min_by_key(|sp| (sp.start, s2.label_index(&sp.label).unwrap()));
            prop_assert_eq!(label.entity(), winner.map(|w| w.label.as_str()));
        }
        Ok(())
    })?;
    within(t.elapsed(), Duration::from_secs(5))?;
    Ok("1000 cases each: encode/decode identity, repair idempotence, any-overlap".into())
}

fn augmentation_suite() -> Outcome {
    run_cases(1000, augmentation_case(), |(tokens, labels, kspans)| {
        let aug = augment(&tokens, Some(&labels), &kspans).unwrap();
        prop_assert_eq!(aug.strip(), tokens.clone());
        for kind in [KnowledgeKind::Disease, KnowledgeKind::Chemical] {
            let n = kspans.iter().filter(|k| k.kind == kind).count();
            let markers = aug.origin.iter().filter(|o| **o == Origin::Marker(kind)).count();
            prop_assert_eq!(markers, 2 * n);
        }
        prop_assert_eq!(project_back(&aug, aug.labels.as_ref().unwrap()).unwrap(), labels);
        Ok(())
    })?;
    let tokens: Vec<String> = ["Gout", "flare", "after", "allopurinol"].map(String::from).to_vec();
    let labels: Vec<BioLabel> = ["B-population", "O", "O", "B-intervention"].map(|l| l.parse().unwrap()).to_vec();
    let kspans = Gazetteer::builtin().annotate_strs(&["Gout", "flare", "after", "allopurinol"]);
    let aug = augment(&tokens, Some(&labels), &kspans).map_err(|e| e.to_string())?;
    let rendered: Vec<String> = aug
        .tokens
        .iter()
        .zip(aug.labels.as_ref().unwrap())
        .map(|(t, l)| format!("{t}\t{l}"))
        .collect();
    let want = "$$\tO\nGout\tB-population\n$$\tO\nflare\tO\nafter\tO\n@@\tO\nallopurinol\tB-intervention\n@@\tO";
    if rendered.join("\n") != want {
        return Err(format!("worked example rendered as {rendered:?}"));
    }
    Ok("1000 cases: strip, marker balance, project_back identity; worked example exact".into())
}

fn decoder_oracle() -> Outcome {
    let strategy = (1usize..=4, 1usize..=6).prop_flat_map(|(k, len)| {
        (Just(k), prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 2 * k + 1), len))
    });
    run_cases(500, strategy, |(k, rows)| {
        let schema = schema_with(k);
        let space = TagSpace::new(&schema);
        let decoded = viterbi_decode(&rows, &schema).unwrap();
        let path: Vec<usize> = decoded.iter().map(|l| space.index_of(l).unwrap()).collect();
        let (best, best_path) = brute_force_decode(&space, &rows);
        prop_assert!((path_score(&rows, &path) - best).abs() < 1e-9);
        prop_assert_eq!(path, best_path);
        Ok(())
    })?;
    Ok("500 cases up to 6 tokens x 4 labels match exhaustive search".into())
}

fn learning_sanity() -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| e.to_string())?;
    pool.install(|| {
        let t = Instant::now();
        let schema = LabelSchema::subtask1();
        let counts = BTreeMap::from([
            ("question".to_string(), 200),
            ("claim".to_string(), 200),
            ("per_exp".to_string(), 200),
        ]);
        let corpus = generate_synthetic_corpus(&schema, &counts, 3).map_err(|e| e.to_string())?;
        let (train, val) = stratified_split(&corpus, 0.2, 3).map_err(|e| e.to_string())?;
        let to_inputs = |c: &medtag::corpus::Corpus| -> Vec<TrainingSentence> {
            corpus_sentences(c)
                .into_iter()
                .map(|s| TrainingSentence::new(s.sentence.token_texts(), s.gold))
                .collect()
        };
        let (train, val) = (to_inputs(&train), to_inputs(&val));
        let hyper = HyperParams { epochs: 10, seed: 3, ..HyperParams::for_schema(&schema) };
        let (model, per_epoch) = train_perceptron(&schema, &train, &val, &hyper).map_err(|e| e.to_string())?;
        let gold: Vec<Vec<BioLabel>> = val.iter().map(|s| s.labels.clone()).collect();
        let pred: Vec<Vec<BioLabel>> = val.iter().map(|s| model.tag(&s.tokens)).collect();
        let f1 = token_prf(&token_confusion(&gold, &pred, &schema).map_err(|e| e.to_string())?).micro.f1;
        within(t.elapsed(), Duration::from_secs(60))?;
        let detail = format!("final validation micro-F1 {f1:.4}, per epoch {per_epoch:.3?}");
        if f1 >= 0.95 {
            Ok(detail)
        } else {
            Err(detail)
        }
    })
}

fn bootstrap_suite() -> Outcome {
    let entity = |i: usize| BioLabel::B(["population", "intervention", "outcome"][i % 3].to_string());
    let units: Vec<BootstrapUnit> = (0..100)
        .map(|i| {
            let gold = vec![BioLabel::O, entity(i), BioLabel::O];
            BootstrapUnit {
                pred_a: gold.clone(),
                pred_b: vec![BioLabel::O; 3],
                gold,
            }
        })
        .collect();
    let same: Vec<BootstrapUnit> = units.iter().map(|u| BootstrapUnit { pred_b: u.pred_a.clone(), ..u.clone() }).collect();
    let p_same = paired_bootstrap(&same, BootstrapMetric::TokenMicroF1, 999, 1).map_err(|e| e.to_string())?.p_value;
    if p_same != 1.0 {
        return Err(format!("identical systems gave p={p_same}"));
    }
    let p_dom = paired_bootstrap(&units, BootstrapMetric::TokenMicroF1, 999, 1).map_err(|e| e.to_string())?.p_value;
    if p_dom != 1.0 / 1000.0 {
        return Err(format!("dominant system gave p={p_dom}"));
    }
    let mixed: Vec<BootstrapUnit> = units
        .iter()
        .enumerate()
        .map(|(i, u)| BootstrapUnit {
            pred_b: if i % 3 == 0 { u.gold.clone() } else { vec![BioLabel::O, entity(i + 1), BioLabel::O] },
            ..u.clone()
        })
        .collect();
    let mut results = Vec::new();
    for threads in [1, 2, 4, 8] {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| e.to_string())?;
        results.push(pool.install(|| paired_bootstrap(&mixed, BootstrapMetric::TokenMicroF1, 2000, 77)).map_err(|e| e.to_string())?);
    }
    if results.windows(2).any(|w| w[0] != w[1]) {
        return Err(format!("thread count changed the result: {results:?}"));
    }
    Ok(format!("identical p=1, dominant p={p_dom}, 1/2/4/8 threads agree (p={})", results[0].p_value))
}

fn end_to_end() -> Outcome {
    let t = Instant::now();
    let bin = env!("CARGO_BIN_EXE_medtag");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let run = |args: &[&str]| -> Result<String, String> {
        let o = Command::new(bin).current_dir(d).args(args).output().map_err(|e| e.to_string())?;
        match o.status.code() {
            Some(0) => Ok(String::from_utf8_lossy(&o.stdout).into_owned()),
            c => Err(format!("{args:?} exited {c:?}: {}", String::from_utf8_lossy(&o.stderr))),
        }
    };
    run(&[
        "synth",
        "--schema",
        "subtask2",
        "--counts",
        "population=200,intervention=300,outcome=200",
        "--seed",
        "7",
        "--gazetteer-out",
        "--out",
        "syn",
    ])?;
    run(&["run", "--corpus", "syn/corpus.jsonl", "--augment", "--gazetteer", "syn/gazetteer.txt", "--out", "aug"])?;
    run(&["run", "--corpus", "syn/corpus.jsonl", "--out", "plain"])?;
    run(&["compare", "aug", "plain", "--out", "cmp"])?;
    let cmp: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("cmp/compare.json")).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let p = cmp["p_value"].as_f64().ok_or("no p_value")?;
    let delta = cmp["observed_delta"].as_f64().ok_or("no observed_delta")?;
    within(t.elapsed(), Duration::from_secs(120))?;
    let detail = format!("delta micro-F1 {delta:.4}, p={p:.5}, B={}", cmp["resamples"]);
    if p < 0.05 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    let mut r = Report { failed: 0 };
    r.check("metric oracle subtask2", || {
        metric_oracle(
            LabelSchema::subtask2(),
            &CM2_LABELS,
            &CM2,
            &[("population", [0.2727, 0.3962, 0.3231]), ("intervention", [0.3418, 0.3221, 0.3317])],
        )
    });
    r.check("metric oracle subtask1", || {
        metric_oracle(
            LabelSchema::subtask1(),
            &CM1_LABELS,
            &CM1,
            &[("question", [0.7959, 0.8442, 0.8193]), ("claim", [0.4153, 0.2276, 0.2941])],
        )
    });
    r.check("confusion round-trip", confusion_round_trip);
    r.check("BIO property suite", bio_suite);
    r.check("augmentation suite", augmentation_suite);
    r.check("decoder oracle", decoder_oracle);
    r.check("learning sanity", learning_sanity);
    r.check("bootstrap suite", bootstrap_suite);
    r.check("end-to-end run/compare", end_to_end);
    println!("{} criteria failed", r.failed);
    if r.failed > 0 {
        std::process::exit(1);
    }
}
