//! Line-delimited JSON protocol for out-of-process backends.
//!
//! The pipeline launches the backend as a child process and talks to it
//! over stdin/stdout, one JSON object per line, answered in order:
//!
//! ```text
//! {"op":"hello"}                                   -> {"ok":true,"backend":..,"protocol":1}
//! {"op":"train","schema":[..],"hyper":{..},"train":[..],"dev":[..]}
//!                                                  -> {"ok":true,"model_ref":..,"dev_f1_per_epoch":[..]}
//! {"op":"predict","model_ref":..,"sentences":[[..]]} -> {"ok":true,"labels":[[..]]}
//! failures                                         -> {"ok":false,"code":..,"message":..}
//! ```

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    check_training_data, fingerprint_sentences, BackendError, HyperParams, ModelHandle, TaggerBackend, TrainingMeta,
    TrainingSentence,
};
use crate::corpus::LabelSchema;
use crate::tokenize::{repair_bio, BioLabel};

pub const PROTOCOL_VERSION: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Request {
    Hello,
    Train {
        schema: Vec<String>,
        hyper: HyperParams,
        train: Vec<TrainingSentence>,
        #[serde(default)]
        dev: Vec<TrainingSentence>,
    },
    Predict {
        model_ref: String,
        sentences: Vec<Vec<String>>,
    },
}

pub fn error_response(code: &str, message: impl Into<String>) -> Value {
    json!({"ok": false, "code": code, "message": message.into()})
}

/// Client side of the protocol, owning the child process.
pub struct ExternalBackend {
    name: String,
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl ExternalBackend {
    /// Launches `program` and performs the `hello` handshake.
    pub fn spawn(program: &Path, args: &[String]) -> Result<Self, BackendError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| BackendError::Unreachable(format!("{}: {e}", program.display())))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let mut backend = Self {
            name: String::new(),
            child,
            stdin,
            stdout,
        };
        let hello = backend.call(&json!({"op": "hello"}))?;
        if hello.get("protocol").and_then(Value::as_u64) != Some(PROTOCOL_VERSION) {
            return Err(BackendError::Protocol(format!("unsupported hello response {hello}")));
        }
        backend.name = hello
            .get("backend")
            .and_then(Value::as_str)
            .ok_or_else(|| BackendError::Protocol("hello response lacks backend name".into()))?
            .to_string();
        Ok(backend)
    }

    /// Sends one request and returns the successful response object.
    pub fn call(&mut self, request: &Value) -> Result<Value, BackendError> {
        let unreachable = |e: std::io::Error| BackendError::Unreachable(e.to_string());
        writeln!(self.stdin, "{request}").map_err(unreachable)?;
        self.stdin.flush().map_err(unreachable)?;
        let mut line = String::new();
        if self.stdout.read_line(&mut line).map_err(unreachable)? == 0 {
            return Err(BackendError::Unreachable("backend closed its output".into()));
        }
        let v: Value = serde_json::from_str(&line).map_err(|e| BackendError::Protocol(format!("bad response: {e}")))?;
        match v.get("ok").and_then(Value::as_bool) {
            Some(true) => Ok(v),
            Some(false) => Err(BackendError::Remote {
                code: v.get("code").and_then(Value::as_str).unwrap_or("unknown").to_string(),
                message: v.get("message").and_then(Value::as_str).unwrap_or("").to_string(),
            }),
            None => Err(BackendError::Protocol(format!("response lacks \"ok\": {v}"))),
        }
    }
}

impl Drop for ExternalBackend {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl TaggerBackend for ExternalBackend {
    fn id(&self) -> String {
        format!("external:{}", self.name)
    }

    fn train(
        &mut self,
        schema: &LabelSchema,
        train: &[TrainingSentence],
        dev: &[TrainingSentence],
        hyper: &HyperParams,
    ) -> Result<ModelHandle, BackendError> {
        hyper.validate()?;
        check_training_data(schema, train, dev)?;
        let req = serde_json::to_value(Request::Train {
            schema: schema.labels.clone(),
            hyper: hyper.clone(),
            train: train.to_vec(),
            dev: dev.to_vec(),
        })
        .expect("request serializes");
        let resp = self.call(&req)?;
        let model_ref = resp
            .get("model_ref")
            .and_then(Value::as_str)
            .ok_or_else(|| BackendError::Protocol("train response lacks model_ref".into()))?;
        let dev_f1 = resp
            .get("dev_f1_per_epoch")
            .and_then(Value::as_array)
            .ok_or_else(|| BackendError::Protocol("train response lacks dev_f1_per_epoch".into()))?
            .iter()
            .map(|v| v.as_f64().ok_or_else(|| BackendError::Protocol("non-numeric dev F1".into())))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ModelHandle {
            backend_id: self.id(),
            schema: schema.clone(),
            parameters: model_ref.as_bytes().to_vec(),
            training_meta: TrainingMeta {
                hyper: hyper.clone(),
                corpus_fingerprint: fingerprint_sentences(train),
                dev_f1_per_epoch: dev_f1,
            },
        })
    }

    /// Labels come back repaired; the count per sentence must match exactly.
    fn predict(
        &mut self,
        model: &ModelHandle,
        schema: &LabelSchema,
        sentences: &[Vec<String>],
    ) -> Result<Vec<Vec<BioLabel>>, BackendError> {
        if model.backend_id != self.id() {
            return Err(BackendError::WrongBackend {
                model: model.backend_id.clone(),
                backend: self.id(),
            });
        }
        model.ensure_schema(schema)?;
        if sentences.is_empty() {
            return Ok(Vec::new());
        }
        let model_ref = String::from_utf8(model.parameters.clone())
            .map_err(|_| BackendError::Protocol("model_ref is not UTF-8".into()))?;
        let req = serde_json::to_value(Request::Predict {
            model_ref,
            sentences: sentences.to_vec(),
        })
        .expect("request serializes");
        let resp = self.call(&req)?;
        let labels: Vec<Vec<BioLabel>> = resp
            .get("labels")
            .cloned()
            .map(serde_json::from_value)
            .transpose()
            .map_err(|e| BackendError::Protocol(format!("bad labels: {e}")))?
            .ok_or_else(|| BackendError::Protocol("predict response lacks labels".into()))?;
        if labels.len() != sentences.len() {
            return Err(BackendError::Protocol(format!(
                "{} label sequences for {} sentences",
                labels.len(),
                sentences.len()
            )));
        }
        for (i, (l, s)) in labels.iter().zip(sentences).enumerate() {
            if l.len() != s.len() {
                return Err(BackendError::Protocol(format!(
                    "sentence {i}: {} labels for {} tokens",
                    l.len(),
                    s.len()
                )));
            }
            if let Some(x) = l.iter().find_map(|l| l.entity().filter(|x| !schema.contains(x))) {
                return Err(BackendError::LabelOutsideSchema(x.to_string()));
            }
        }
        Ok(labels.iter().map(|l| repair_bio(l)).collect())
    }
}

/// Serves the protocol on `reader`/`writer` with an in-process backend
/// until EOF. Bad input is answered with an error object, never a crash.
pub fn serve<B: TaggerBackend, R: BufRead, W: Write>(backend: &mut B, reader: R, mut writer: W) -> std::io::Result<()> {
    let mut models: HashMap<String, ModelHandle> = HashMap::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = handle_line(backend, &mut models, &line);
        writeln!(writer, "{resp}")?;
        writer.flush()?;
    }
    Ok(())
}

fn handle_line<B: TaggerBackend>(backend: &mut B, models: &mut HashMap<String, ModelHandle>, line: &str) -> Value {
    let value: Value = match serde_json::from_str(line) {
        Ok(v) => v,
        Err(e) => return error_response("bad_json", e.to_string()),
    };
    let op = value.get("op").and_then(Value::as_str).unwrap_or_default().to_string();
    let request: Request = match serde_json::from_value(value) {
        Ok(r) => r,
        Err(e) if !matches!(op.as_str(), "hello" | "train" | "predict") => {
            return error_response("unknown_op", format!("unsupported op {op:?}: {e}"))
        }
        Err(e) => return error_response("bad_request", e.to_string()),
    };
    match request {
        Request::Hello => json!({"ok": true, "backend": backend.id(), "protocol": PROTOCOL_VERSION}),
        Request::Train {
            schema,
            hyper,
            train,
            dev,
        } => {
            let schema = match LabelSchema::new("wire", schema) {
                Ok(s) => s,
                Err(e) => return error_response("bad_schema", e.to_string()),
            };
            match backend.train(&schema, &train, &dev, &hyper) {
                Ok(model) => {
                    let model_ref = format!("m{}", models.len() + 1);
                    let dev_f1 = model.training_meta.dev_f1_per_epoch.clone();
                    models.insert(model_ref.clone(), model);
                    json!({"ok": true, "model_ref": model_ref, "dev_f1_per_epoch": dev_f1})
                }
                Err(e) => error_response(e.code(), e.to_string()),
            }
        }
        Request::Predict { model_ref, sentences } => {
            let Some(model) = models.get(&model_ref) else {
                return error_response("untrained", format!("no trained model {model_ref:?} in this session"));
            };
            let schema = model.schema.clone();
            match backend.predict(model, &schema, &sentences) {
                Ok(labels) => json!({"ok": true, "labels": labels}),
                Err(e) => error_response(e.code(), e.to_string()),
            }
        }
    }
}
