//! Protocol conformance checks for backend adapters.
//!
//! Runs a fixed toy session against an adapter executable and reports one
//! result per check. Any adapter, in-repo or external, must pass all of them.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Command, Stdio};

use serde_json::{json, Value};

use super::{HyperParams, TrainingSentence};
use crate::corpus::{generate_synthetic_corpus, LabelSchema};
use crate::pipeline::corpus_sentences;
use crate::tokenize::{is_well_formed, repair_bio, BioLabel};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn toy_sentences() -> Vec<TrainingSentence> {
    let counts = BTreeMap::from([
        ("population".to_string(), 8),
        ("intervention".to_string(), 8),
        ("outcome".to_string(), 8),
    ]);
    let corpus = generate_synthetic_corpus(&LabelSchema::subtask2(), &counts, 5).expect("known labels");
    corpus_sentences(&corpus)
        .into_iter()
        .take(50)
        .map(|s| TrainingSentence::new(s.sentence.token_texts(), s.gold))
        .collect()
}

struct Session {
    child: std::process::Child,
    stdin: std::process::ChildStdin,
    stdout: BufReader<std::process::ChildStdout>,
}

impl Session {
    fn send_raw(&mut self, line: &str) -> Result<Value, String> {
        writeln!(self.stdin, "{line}").map_err(|e| e.to_string())?;
        self.stdin.flush().map_err(|e| e.to_string())?;
        let mut resp = String::new();
        match self.stdout.read_line(&mut resp) {
            Ok(0) => Err("adapter closed its output".into()),
            Ok(_) => serde_json::from_str(&resp).map_err(|e| format!("unparseable response {resp:?}: {e}")),
            Err(e) => Err(e.to_string()),
        }
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn check(name: &'static str, outcome: Result<(), String>) -> CheckResult {
    CheckResult {
        name,
        passed: outcome.is_ok(),
        detail: outcome.err().unwrap_or_default(),
    }
}

fn expect_error(v: &Value, code: Option<&str>) -> Result<(), String> {
    if v["ok"] != json!(false) || !v["code"].is_string() || !v["message"].is_string() {
        return Err(format!("expected an error object, got {v}"));
    }
    match code {
        Some(c) if v["code"] != json!(c) => Err(format!("expected code {c:?}, got {}", v["code"])),
        _ => Ok(()),
    }
}

/// Runs the suite against `program args...`.
pub fn run_suite(program: &Path, args: &[String]) -> Vec<CheckResult> {
    let spawned = Command::new(program)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn();
    let mut child = match spawned {
        Ok(c) => c,
        Err(e) => return vec![check("launch", Err(e.to_string()))],
    };
    let mut s = Session {
        stdin: child.stdin.take().expect("piped"),
        stdout: BufReader::new(child.stdout.take().expect("piped")),
        child,
    };
    let schema = LabelSchema::subtask2();
    let data = toy_sentences();
    let mut results = Vec::new();

    results.push(check(
        "hello",
        s.send_raw(r#"{"op":"hello"}"#).and_then(|v| {
            if v["ok"] == json!(true) && v["protocol"] == json!(1) && v["backend"].is_string() {
                Ok(())
            } else {
                Err(format!("bad hello response {v}"))
            }
        }),
    ));
    results.push(check(
        "predict_before_train",
        s.send_raw(r#"{"op":"predict","model_ref":"nope","sentences":[["a"]]}"#)
            .and_then(|v| expect_error(&v, Some("untrained"))),
    ));
    results.push(check(
        "malformed_json",
        s.send_raw("{this is not json").and_then(|v| expect_error(&v, None)),
    ));
    results.push(check(
        "unknown_op",
        s.send_raw(r#"{"op":"frobnicate"}"#).and_then(|v| expect_error(&v, None)),
    ));
    results.push(check(
        "alive_after_errors",
        s.send_raw(r#"{"op":"hello"}"#).and_then(|v| {
            if v["ok"] == json!(true) {
                Ok(())
            } else {
                Err(format!("{v}"))
            }
        }),
    ));

    let hyper = HyperParams {
        epochs: 1,
        ..HyperParams::for_schema(&schema)
    };
    let train_req = json!({
        "op": "train",
        "schema": schema.labels,
        "hyper": hyper,
        "train": data,
        "dev": data[..10],
    });
    let mut model_ref = None;
    results.push(check(
        "train_shape",
        s.send_raw(&train_req.to_string()).and_then(|v| {
            let r = v["model_ref"].as_str().ok_or(format!("no model_ref in {v}"))?;
            let f1 = v["dev_f1_per_epoch"].as_array().ok_or(format!("no dev_f1_per_epoch in {v}"))?;
            if v["ok"] != json!(true) || f1.len() != 1 {
                return Err(format!("bad train response {v}"));
            }
            model_ref = Some(r.to_string());
            Ok(())
        }),
    ));

    let sentences: Vec<Vec<String>> = data.iter().map(|d| d.tokens.clone()).collect();
    let predict_req = json!({"op": "predict", "model_ref": model_ref.clone().unwrap_or_default(), "sentences": sentences});
    let predicted = s.send_raw(&predict_req.to_string());
    results.push(check(
        "predict_label_count",
        predicted.clone().and_then(|v| {
            let labels = v["labels"].as_array().ok_or(format!("no labels in {v}"))?;
            if labels.len() != sentences.len() {
                return Err(format!("{} sequences for {} sentences", labels.len(), sentences.len()));
            }
            for (l, s) in labels.iter().zip(&sentences) {
                let n = l.as_array().map_or(usize::MAX, Vec::len);
                if n != s.len() {
                    return Err(format!("{n} labels for {} tokens", s.len()));
                }
            }
            Ok(())
        }),
    ));
    results.push(check(
        "predict_labels_valid",
        predicted.and_then(|v| {
            let labels: Vec<Vec<BioLabel>> =
                serde_json::from_value(v["labels"].clone()).map_err(|e| format!("unparseable labels: {e}"))?;
            for l in &labels {
                if let Some(x) = l.iter().find_map(|l| l.entity().filter(|x| !schema.contains(x))) {
                    return Err(format!("label type {x:?} outside schema"));
                }
                if !is_well_formed(&repair_bio(l)) {
                    return Err("ill-formed after repair".into());
                }
            }
            Ok(())
        }),
    ));
    results.push(check(
        "predict_empty",
        s.send_raw(&json!({"op": "predict", "model_ref": model_ref.unwrap_or_default(), "sentences": []}).to_string())
            .and_then(|v| {
                if v["ok"] == json!(true) && v["labels"] == json!([]) {
                    Ok(())
                } else {
                    Err(format!("{v}"))
                }
            }),
    ));
    results
}
