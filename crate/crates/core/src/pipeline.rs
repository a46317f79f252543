//! End-to-end experiment runs and run comparison.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{augment, project_back, AugmentedSentence, Gazetteer, KnowledgeAnnotator};
use crate::backend::{
    save_model, BackendError, ExternalBackend, HyperParams, PerceptronBackend, TaggerBackend, TrainingSentence,
};
use crate::corpus::{load_corpus, stratified_split, validate_corpus, Corpus, LabelSchema};
use crate::evaluation::{
    paired_bootstrap, sentence_labels, sentence_prf, token_confusion, token_prf, BootstrapMetric, BootstrapResult,
    BootstrapUnit, ConfusionMatrix, MetricsReport, SentenceEvidence,
};
use crate::tokenize::{encode_bio, segment_sentences, BioLabel, SentenceSpan};

/// Process exit codes used by the CLI.
pub mod exit {
    pub const OK: i32 = 0;
    pub const DATA: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const BACKEND: i32 = 3;
    pub const COMPARE: i32 = 4;
}

#[derive(Debug, thiserror::Error)]
#[error("[{stage}] {message}")]
pub struct StageError {
    pub stage: &'static str,
    pub exit_code: i32,
    pub message: String,
}

impl StageError {
    pub fn new(stage: &'static str, exit_code: i32, message: impl ToString) -> Self {
        Self {
            stage,
            exit_code,
            message: message.to_string(),
        }
    }

    pub fn backend(stage: &'static str, e: BackendError) -> Self {
        let code = match e {
            BackendError::Unreachable(_)
            | BackendError::Protocol(_)
            | BackendError::Remote { .. }
            | BackendError::Untrained
            | BackendError::WrongBackend { .. }
            | BackendError::SchemaMismatch { .. }
            | BackendError::ModelFile(_) => exit::BACKEND,
            BackendError::InvalidHyperParams(_) => exit::USAGE,
            BackendError::Io(_) => exit::BACKEND,
            BackendError::EmptyTrainingSet | BackendError::LabelOutsideSchema(_) | BackendError::InvalidSentence(_) => {
                exit::DATA
            }
        };
        let message = match &e {
            BackendError::Unreachable(_) => format!("backend unreachable: {e}"),
            _ => e.to_string(),
        };
        Self::new(stage, code, message)
    }
}

pub type StageResult<T> = Result<T, StageError>;

/// One sentence of a post with its gold BIO labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentenceRecord {
    pub post_id: String,
    pub index: usize,
    pub sentence: SentenceSpan,
    pub gold: Vec<BioLabel>,
}

/// Segments every post and encodes its spans per sentence. Entities crossing
/// a sentence boundary restart with `B-` in the next sentence.
pub fn corpus_sentences(corpus: &Corpus) -> Vec<SentenceRecord> {
    let mut out = Vec::new();
    for post in &corpus.posts {
        for (index, sentence) in segment_sentences(&post.text).into_iter().enumerate() {
            let gold = encode_bio(&sentence, &post.spans, &corpus.schema);
            out.push(SentenceRecord {
                post_id: post.post_id.clone(),
                index,
                sentence,
                gold,
            });
        }
    }
    out
}

pub fn augment_records(records: &[SentenceRecord], annotator: &dyn KnowledgeAnnotator) -> crate::Result<Vec<AugmentedSentence>> {
    records
        .iter()
        .map(|r| {
            let tokens = r.sentence.token_texts();
            let strs: Vec<&str> = tokens.iter().map(String::as_str).collect();
            augment(&tokens, Some(&r.gold), &annotator.annotate(&strs))
        })
        .collect()
}

/// Training inputs, augmented or plain.
pub fn training_inputs(augmented: Option<&[AugmentedSentence]>, records: &[SentenceRecord]) -> Vec<TrainingSentence> {
    match augmented {
        Some(aug) => aug
            .iter()
            .map(|a| TrainingSentence::new(a.tokens.clone(), a.labels.clone().unwrap_or_default()))
            .collect(),
        None => records
            .iter()
            .map(|r| TrainingSentence::new(r.sentence.token_texts(), r.gold.clone()))
            .collect(),
    }
}

/// A per-sentence prediction as stored in `predictions.jsonl`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub post_id: String,
    pub sentence: usize,
    pub tokens: Vec<String>,
    pub gold: Vec<BioLabel>,
    pub pred: Vec<BioLabel>,
}

/// Predicts `records` and maps labels back onto the original tokens.
pub fn predict_records(
    backend: &mut dyn TaggerBackend,
    model: &crate::backend::ModelHandle,
    schema: &LabelSchema,
    records: &[SentenceRecord],
    annotator: Option<&dyn KnowledgeAnnotator>,
) -> StageResult<Vec<PredictionRecord>> {
    let aug = match annotator {
        Some(a) => Some(augment_records(records, a).map_err(|e| StageError::new("augment", exit::DATA, e))?),
        None => None,
    };
    let inputs: Vec<Vec<String>> = match &aug {
        Some(aug) => aug.iter().map(|a| a.tokens.clone()).collect(),
        None => records.iter().map(|r| r.sentence.token_texts()).collect(),
    };
    let raw = backend
        .predict(model, schema, &inputs)
        .map_err(|e| StageError::backend("predict", e))?;
    let mut out = Vec::with_capacity(records.len());
    for (i, (r, labels)) in records.iter().zip(raw).enumerate() {
        let pred = match &aug {
            Some(aug) => project_back(&aug[i], &labels).map_err(|e| StageError::new("predict", exit::BACKEND, e))?,
            None => labels,
        };
        out.push(PredictionRecord {
            post_id: r.post_id.clone(),
            sentence: r.index,
            tokens: r.sentence.token_texts(),
            gold: r.gold.clone(),
            pred,
        });
    }
    Ok(out)
}

pub fn write_predictions(path: &Path, preds: &[PredictionRecord]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for p in preds {
        writeln!(f, "{}", serde_json::to_string(p).expect("record serializes"))?;
    }
    f.flush()
}

pub fn read_predictions(path: &Path) -> StageResult<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| StageError::new("load", exit::DATA, format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| StageError::new("load", exit::DATA, format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub metrics: MetricsReport,
    /// Sentence-level report, for the patient-experience schema only.
    pub sentence_metrics: Option<MetricsReport>,
}

pub fn evaluate_predictions(schema: &LabelSchema, preds: &[PredictionRecord]) -> StageResult<Evaluation> {
    let gold: Vec<Vec<BioLabel>> = preds.iter().map(|p| p.gold.clone()).collect();
    let pred: Vec<Vec<BioLabel>> = preds.iter().map(|p| p.pred.clone()).collect();
    let confusion = token_confusion(&gold, &pred, schema).map_err(|e| StageError::new("evaluate", exit::DATA, e))?;
    let metrics = token_prf(&confusion);
    let sentence_metrics = if schema.name == "subtask1" {
        let mut g = Vec::new();
        let mut p = Vec::new();
        for r in preds {
            let sentence = pseudo_sentence(&r.tokens);
            let spans = crate::tokenize::decode_bio(&sentence, &r.gold).map_err(|e| StageError::new("evaluate", exit::DATA, e))?;
            g.push(sentence_labels(&sentence, SentenceEvidence::Spans(&spans), schema));
            p.push(sentence_labels(&sentence, SentenceEvidence::Labels(&r.pred), schema));
        }
        Some(sentence_prf(&g, &p, schema).map_err(|e| StageError::new("evaluate", exit::DATA, e))?)
    } else {
        None
    };
    Ok(Evaluation {
        confusion,
        metrics,
        sentence_metrics,
    })
}

/// Rebuilds token offsets for a stored token list (single-space joined).
fn pseudo_sentence(tokens: &[String]) -> SentenceSpan {
    let text = tokens.join(" ");
    SentenceSpan {
        start: 0,
        end: text.chars().count(),
        tokens: crate::tokenize::whitespace_tokenize(&text, 0),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub schema: String,
    pub corpus: PathBuf,
    pub validation_fraction: f64,
    pub gazetteer: Option<PathBuf>,
    pub augment: bool,
    pub backend: String,
    pub adapter: Option<PathBuf>,
    pub adapter_args: Vec<String>,
    pub hyper: HyperParams,
    pub bootstrap_resamples: usize,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema: "subtask2".into(),
            corpus: PathBuf::new(),
            validation_fraction: 0.2,
            gazetteer: None,
            augment: false,
            backend: "perceptron".into(),
            adapter: None,
            adapter_args: Vec::new(),
            hyper: HyperParams::for_schema(&LabelSchema::subtask2()),
            bootstrap_resamples: 10_000,
            seed: 13,
            out: PathBuf::from("run"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: RunConfig,
    pub backend_id: String,
    pub corpus_fingerprint: String,
    pub train_fingerprint: String,
    pub validation_fingerprint: String,
    pub train_posts: usize,
    pub validation_posts: usize,
    pub train_sentences: usize,
    pub validation_sentences: usize,
    pub dev_f1_per_epoch: Vec<f64>,
    pub crate_version: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn open_backend(config: &RunConfig) -> StageResult<Box<dyn TaggerBackend>> {
    match config.backend.as_str() {
        "perceptron" => Ok(Box::new(PerceptronBackend)),
        "external" => {
            let program = config
                .adapter
                .as_ref()
                .ok_or_else(|| StageError::new("train", exit::BACKEND, "backend unreachable: no adapter executable configured"))?;
            let b = ExternalBackend::spawn(program, &config.adapter_args).map_err(|e| StageError::backend("train", e))?;
            Ok(Box::new(b))
        }
        other => Err(StageError::new("config", exit::USAGE, format!("unknown backend {other:?}"))),
    }
}

pub fn load_gazetteer(path: Option<&Path>) -> StageResult<Gazetteer> {
    match path {
        Some(p) => Gazetteer::load(p).map_err(|e| StageError::new("augment", exit::DATA, format!("{}: {e}", p.display()))),
        None => Ok(Gazetteer::builtin()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> StageResult<()> {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    fs::write(path, s).map_err(|e| StageError::new("write", exit::DATA, format!("{}: {e}", path.display())))
}

fn log_line(out: &Path, msg: &str) {
    let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    if let Ok(mut f) = fs::OpenOptions::new().create(true).append(true).open(out.join("run.log")) {
        let _ = writeln!(f, "{ts} {msg}");
    }
    log::info!("{msg}");
}

/// split → (augment) → train → predict on validation → project back →
/// evaluate, writing every artifact into `config.out`.
pub fn run_experiment(config: &RunConfig) -> StageResult<Manifest> {
    let schema = LabelSchema::by_name(&config.schema).map_err(|e| StageError::new("config", exit::USAGE, e))?;
    let out = &config.out;
    fs::create_dir_all(out).map_err(|e| StageError::new("write", exit::DATA, format!("{}: {e}", out.display())))?;
    let _ = fs::remove_file(out.join("run.log"));
    log_line(out, &format!("run started, corpus {}", config.corpus.display()));

    let raw = fs::read(&config.corpus)
        .map_err(|e| StageError::new("load", exit::USAGE, format!("{}: {e}", config.corpus.display())))?;
    let corpus = load_corpus(&config.corpus, &schema).map_err(|e| StageError::new("load", exit::DATA, e))?;
    let report = validate_corpus(&corpus);
    if !report.is_valid() {
        return Err(StageError::new(
            "validate",
            exit::DATA,
            format!("{} validation error(s), first: {:?}", report.errors.len(), report.errors[0]),
        ));
    }

    let (train, validation) = stratified_split(&corpus, config.validation_fraction, config.seed)
        .map_err(|e| StageError::new("split", exit::USAGE, e))?;
    log_line(out, &format!("split: {} train / {} validation posts", train.posts.len(), validation.posts.len()));

    let train_records = corpus_sentences(&train);
    let val_records = corpus_sentences(&validation);
    let gazetteer = if config.augment {
        Some(load_gazetteer(config.gazetteer.as_deref())?)
    } else {
        None
    };
    let annotator = gazetteer.as_ref().map(|g| g as &dyn KnowledgeAnnotator);
    let (train_inputs, dev_inputs) = match annotator {
        Some(a) => {
            let t = augment_records(&train_records, a).map_err(|e| StageError::new("augment", exit::DATA, e))?;
            let d = augment_records(&val_records, a).map_err(|e| StageError::new("augment", exit::DATA, e))?;
            (training_inputs(Some(&t), &train_records), training_inputs(Some(&d), &val_records))
        }
        None => (training_inputs(None, &train_records), training_inputs(None, &val_records)),
    };

    let mut backend = open_backend(config)?;
    let model = backend
        .train(&schema, &train_inputs, &dev_inputs, &config.hyper)
        .map_err(|e| StageError::backend("train", e))?;
    log_line(out, &format!("trained {} for {} epochs", model.backend_id, config.hyper.epochs));
    save_model(&model, out.join("model.rhtm")).map_err(|e| StageError::new("write", exit::DATA, e))?;

    let preds = predict_records(backend.as_mut(), &model, &schema, &val_records, annotator)?;
    write_predictions(&out.join("predictions.jsonl"), &preds).map_err(|e| StageError::new("write", exit::DATA, e))?;

    let eval = evaluate_predictions(&schema, &preds)?;
    write_json(&out.join("metrics.json"), &eval.metrics)?;
    write_json(&out.join("confusion.json"), &eval.confusion)?;
    fs::write(out.join("confusion.csv"), eval.confusion.to_csv()).map_err(|e| StageError::new("write", exit::DATA, e))?;
    if let Some(s) = &eval.sentence_metrics {
        write_json(&out.join("sentence_metrics.json"), s)?;
    }
    log_line(out, &format!("validation micro-F1 {:.4}", eval.metrics.micro.f1));

    let manifest = Manifest {
        config: config.clone(),
        backend_id: model.backend_id.clone(),
        corpus_fingerprint: sha256_hex(&raw),
        train_fingerprint: sha256_hex(train.to_jsonl().as_bytes()),
        validation_fingerprint: sha256_hex(validation.to_jsonl().as_bytes()),
        train_posts: train.posts.len(),
        validation_posts: validation.posts.len(),
        train_sentences: train_records.len(),
        validation_sentences: val_records.len(),
        dev_f1_per_epoch: model.training_meta.dev_f1_per_epoch.clone(),
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    log_line(out, "run finished");
    Ok(manifest)
}

pub fn read_manifest(run_dir: &Path) -> StageResult<Manifest> {
    let p = run_dir.join("manifest.json");
    let text = fs::read_to_string(&p).map_err(|e| StageError::new("load", exit::USAGE, format!("{}: {e}", p.display())))?;
    serde_json::from_str(&text).map_err(|e| StageError::new("load", exit::DATA, format!("{}: {e}", p.display())))
}

/// Paired bootstrap of run A against run B on their shared validation set.
pub fn compare_runs(run_a: &Path, run_b: &Path, resamples: usize, seed: u64) -> StageResult<BootstrapResult> {
    let (ma, mb) = (read_manifest(run_a)?, read_manifest(run_b)?);
    if ma.validation_fingerprint != mb.validation_fingerprint {
        return Err(StageError::new(
            "compare",
            exit::COMPARE,
            "validation fingerprints differ; runs were not evaluated on the same data",
        ));
    }
    let pa = read_predictions(&run_a.join("predictions.jsonl"))?;
    let pb = read_predictions(&run_b.join("predictions.jsonl"))?;
    if pa.len() != pb.len() {
        return Err(StageError::new("compare", exit::COMPARE, "prediction files differ in length"));
    }
    let mut units = Vec::with_capacity(pa.len());
    for (a, b) in pa.into_iter().zip(pb) {
        if (&a.post_id, a.sentence, &a.gold) != (&b.post_id, b.sentence, &b.gold) {
            return Err(StageError::new(
                "compare",
                exit::COMPARE,
                format!("sentence {}#{} differs between runs", a.post_id, a.sentence),
            ));
        }
        units.push(BootstrapUnit {
            gold: a.gold,
            pred_a: a.pred,
            pred_b: b.pred,
        });
    }
    paired_bootstrap(&units, BootstrapMetric::TokenMicroF1, resamples, seed)
        .map_err(|e| StageError::new("compare", exit::USAGE, e))
}

pub fn write_bootstrap(path: &Path, result: &BootstrapResult) -> StageResult<()> {
    write_json(path, result)
}
