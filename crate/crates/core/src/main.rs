use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use medtag::augment::{Gazetteer, KnowledgeAnnotator};
use medtag::backend::{load_model, save_model, HyperParams, PerceptronBackend};
use medtag::corpus::{
    corpus_stats, generate_synthetic_corpus, load_corpus, load_corpus_unchecked, stratified_split, synthetic,
    validate_corpus, Corpus, LabelSchema,
};
use medtag::pipeline::{
    augment_records, compare_runs, corpus_sentences, evaluate_predictions, exit, load_gazetteer, open_backend,
    predict_records, read_manifest, read_predictions, run_experiment, training_inputs, write_bootstrap, write_predictions, RunConfig,
    StageError, StageResult,
};
use medtag::tokenize::write_conll;

#[derive(Parser)]
#[command(name = "medtag", version, about = "BIO tagging pipeline for health forum posts")]
struct Cli {
    /// Label schema: subtask1 (patient experience) or subtask2 (PIO).
    #[arg(long, global = true)]
    schema: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// JSON run configuration (or a run manifest) for `run`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ModelOpts {
    /// Insert disease/chemical marker tokens before tagging.
    #[arg(long)]
    augment: bool,
    /// Gazetteer file; the bundled lexicon is used when omitted.
    #[arg(long)]
    gazetteer: Option<PathBuf>,
    /// perceptron | external
    #[arg(long)]
    backend: Option<String>,
    /// Adapter executable for the external backend.
    #[arg(long)]
    adapter: Option<PathBuf>,
    #[arg(long = "adapter-arg")]
    adapter_args: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Check a corpus and write validation.json.
    Validate { corpus: PathBuf },
    /// Entity frequencies and lengths; writes validation.json and stats.json.
    Stats { corpus: PathBuf },
    /// Label-balanced train/validation split.
    Split {
        corpus: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        fraction: f64,
    },
    /// Write the marker-augmented corpus as CoNLL.
    Augment {
        corpus: PathBuf,
        #[arg(long)]
        gazetteer: Option<PathBuf>,
    },
    /// Train on a whole corpus and write model.rhtm.
    Train {
        corpus: PathBuf,
        #[command(flatten)]
        opts: ModelOpts,
    },
    /// Tag a corpus with a saved model.
    Predict {
        #[arg(long)]
        model: PathBuf,
        corpus: PathBuf,
        #[arg(long)]
        augment: bool,
        #[arg(long)]
        gazetteer: Option<PathBuf>,
    },
    /// Score a predictions.jsonl file.
    Evaluate { predictions: PathBuf },
    /// Full experiment: split, augment, train, predict, evaluate.
    Run {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        fraction: Option<f64>,
        /// Bootstrap resamples recorded for a later `compare`.
        #[arg(long)]
        resamples: Option<usize>,
        #[command(flatten)]
        opts: ModelOpts,
    },
    /// Paired bootstrap test of run A against run B.
    Compare {
        run_a: PathBuf,
        run_b: PathBuf,
        #[arg(long)]
        resamples: Option<usize>,
    },
    /// Generate a synthetic template corpus.
    Synth {
        /// Comma-separated label=count pairs.
        #[arg(long, value_delimiter = ',')]
        counts: Vec<String>,
        /// Also write a gazetteer covering the synthetic lexicon.
        #[arg(long)]
        gazetteer_out: bool,
    },
}

fn usage(msg: impl ToString) -> StageError {
    StageError::new("usage", exit::USAGE, msg)
}

fn schema_of(cli: &Cli) -> StageResult<LabelSchema> {
    LabelSchema::by_name(cli.schema.as_deref().unwrap_or("subtask2")).map_err(usage)
}

fn out_dir(cli: &Cli) -> StageResult<PathBuf> {
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out).map_err(|e| StageError::new("write", exit::DATA, format!("{}: {e}", out.display())))?;
    Ok(out)
}

fn ensure_exists(p: &Path) -> StageResult<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(usage(format!("no such file: {}", p.display())))
    }
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> StageResult<()> {
    let s = serde_json::to_string_pretty(v).expect("serializable") + "\n";
    fs::write(path, s).map_err(|e| StageError::new("write", exit::DATA, format!("{}: {e}", path.display())))
}

fn load_checked(path: &Path, schema: &LabelSchema) -> StageResult<Corpus> {
    ensure_exists(path)?;
    load_corpus(path, schema).map_err(|e| StageError::new("load", exit::DATA, e))
}

/// Writes validation.json and returns the corpus when it has no errors.
fn validate_to(path: &Path, schema: &LabelSchema, out: &Path) -> StageResult<Option<Corpus>> {
    ensure_exists(path)?;
    let corpus = load_corpus_unchecked(path, schema).map_err(|e| StageError::new("load", exit::DATA, e))?;
    let report = validate_corpus(&corpus);
    write_json(&out.join("validation.json"), &report)?;
    for e in &report.errors {
        eprintln!("error: {} [{}] {}", e.post_id, e.code, e.message);
    }
    for w in &report.warnings {
        eprintln!("warning: {} [{}] {}", w.post_id, w.code, w.message);
    }
    println!(
        "{} posts, {} error(s), {} warning(s)",
        corpus.posts.len(),
        report.errors.len(),
        report.warnings.len()
    );
    Ok(report.is_valid().then_some(corpus))
}

fn resolve_run_config(cli: &Cli, corpus: &Option<PathBuf>, fraction: Option<f64>, resamples: Option<usize>, opts: &ModelOpts) -> StageResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            // a run manifest nests its resolved config
            let v = v.get("config").cloned().unwrap_or(v);
            serde_json::from_value(v).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => {
            let schema = schema_of(cli)?;
            RunConfig {
                schema: schema.name.clone(),
                hyper: HyperParams::for_schema(&schema),
                ..RunConfig::default()
            }
        }
    };
    if let Some(s) = &cli.schema {
        let schema = LabelSchema::by_name(s).map_err(usage)?;
        if cli.config.is_some() && cfg.schema != schema.name {
            cfg.hyper.epochs = HyperParams::for_schema(&schema).epochs;
        }
        cfg.schema = schema.name;
    }
    LabelSchema::by_name(&cfg.schema).map_err(usage)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.hyper.seed = seed;
    } else if cli.config.is_none() {
        cfg.hyper.seed = cfg.seed;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(c) = corpus {
        cfg.corpus = c.clone();
    }
    if let Some(f) = fraction {
        cfg.validation_fraction = f;
    }
    if let Some(r) = resamples {
        cfg.bootstrap_resamples = r;
    }
    if opts.augment {
        cfg.augment = true;
    }
    if let Some(g) = &opts.gazetteer {
        cfg.gazetteer = Some(g.clone());
    }
    if let Some(b) = &opts.backend {
        cfg.backend = b.clone();
    }
    if let Some(a) = &opts.adapter {
        cfg.adapter = Some(a.clone());
    }
    if !opts.adapter_args.is_empty() {
        cfg.adapter_args = opts.adapter_args.clone();
    }
    if let Some(e) = opts.epochs {
        cfg.hyper.epochs = e;
    }
    if cfg.corpus.as_os_str().is_empty() {
        return Err(usage("no corpus given (use --corpus or --config)"));
    }
    ensure_exists(&cfg.corpus)?;
    Ok(cfg)
}

fn run(cli: &Cli) -> StageResult<i32> {
    match &cli.command {
        Command::Validate { corpus } => {
            let schema = schema_of(cli)?;
            let out = out_dir(cli)?;
            let ok = validate_to(corpus, &schema, &out)?.is_some();
            Ok(if ok { exit::OK } else { exit::DATA })
        }
        Command::Stats { corpus } => {
            let schema = schema_of(cli)?;
            let out = out_dir(cli)?;
            let Some(c) = validate_to(corpus, &schema, &out)? else {
                return Ok(exit::DATA);
            };
            let stats = corpus_stats(&c).map_err(|e| StageError::new("stats", exit::DATA, e))?;
            write_json(&out.join("stats.json"), &stats)?;
            println!("{}", serde_json::to_string_pretty(&stats).expect("serializable"));
            Ok(exit::OK)
        }
        Command::Split { corpus, fraction } => {
            let schema = schema_of(cli)?;
            let c = load_checked(corpus, &schema)?;
            let (train, val) = stratified_split(&c, *fraction, cli.seed.unwrap_or(13)).map_err(usage)?;
            let out = out_dir(cli)?;
            for (name, part) in [("train.jsonl", &train), ("validation.jsonl", &val)] {
                part.save(out.join(name)).map_err(|e| StageError::new("write", exit::DATA, e))?;
            }
            println!("{} train / {} validation posts", train.posts.len(), val.posts.len());
            Ok(exit::OK)
        }
        Command::Augment { corpus, gazetteer } => {
            let schema = schema_of(cli)?;
            let c = load_checked(corpus, &schema)?;
            let g = load_gazetteer(gazetteer.as_deref())?;
            let records = corpus_sentences(&c);
            let aug = augment_records(&records, &g).map_err(|e| StageError::new("augment", exit::DATA, e))?;
            let rows: Vec<_> = aug.into_iter().map(|a| (a.tokens, a.labels.unwrap_or_default())).collect();
            let out = out_dir(cli)?;
            let f = fs::File::create(out.join("augmented.conll")).map_err(|e| StageError::new("write", exit::DATA, e))?;
            write_conll(std::io::BufWriter::new(f), &rows).map_err(|e| StageError::new("write", exit::DATA, e))?;
            println!("{} sentences augmented", rows.len());
            Ok(exit::OK)
        }
        Command::Train { corpus, opts } => {
            let schema = schema_of(cli)?;
            let c = load_checked(corpus, &schema)?;
            let records = corpus_sentences(&c);
            let aug = if opts.augment {
                let g = load_gazetteer(opts.gazetteer.as_deref())?;
                Some(augment_records(&records, &g).map_err(|e| StageError::new("augment", exit::DATA, e))?)
            } else {
                None
            };
            let inputs = training_inputs(aug.as_deref(), &records);
            let mut hyper = HyperParams::for_schema(&schema);
            hyper.seed = cli.seed.unwrap_or(13);
            if let Some(e) = opts.epochs {
                hyper.epochs = e;
            }
            let cfg = RunConfig {
                backend: opts.backend.clone().unwrap_or_else(|| "perceptron".into()),
                adapter: opts.adapter.clone(),
                adapter_args: opts.adapter_args.clone(),
                ..RunConfig::default()
            };
            let mut backend = open_backend(&cfg)?;
            let model = backend
                .train(&schema, &inputs, &[], &hyper)
                .map_err(|e| StageError::backend("train", e))?;
            let out = out_dir(cli)?;
            save_model(&model, out.join("model.rhtm")).map_err(|e| StageError::new("write", exit::DATA, e))?;
            println!("trained {} on {} sentences", model.backend_id, inputs.len());
            Ok(exit::OK)
        }
        Command::Predict { model, corpus, augment, gazetteer } => {
            ensure_exists(model)?;
            let handle = load_model(model).map_err(|e| StageError::new("load", exit::BACKEND, e))?;
            let schema = handle.schema.clone();
            let c = load_checked(corpus, &schema)?;
            let g: Option<Gazetteer> = if *augment { Some(load_gazetteer(gazetteer.as_deref())?) } else { None };
            let mut backend = PerceptronBackend;
            let records = corpus_sentences(&c);
            let preds = predict_records(
                &mut backend,
                &handle,
                &schema,
                &records,
                g.as_ref().map(|g| g as &dyn KnowledgeAnnotator),
            )?;
            let out = out_dir(cli)?;
            write_predictions(&out.join("predictions.jsonl"), &preds).map_err(|e| StageError::new("write", exit::DATA, e))?;
            let rows: Vec<_> = preds.iter().map(|p| (p.tokens.clone(), p.pred.clone())).collect();
            let f = fs::File::create(out.join("predictions.conll")).map_err(|e| StageError::new("write", exit::DATA, e))?;
            write_conll(std::io::BufWriter::new(f), &rows).map_err(|e| StageError::new("write", exit::DATA, e))?;
            println!("{} sentences tagged", preds.len());
            Ok(exit::OK)
        }
        Command::Evaluate { predictions } => {
            ensure_exists(predictions)?;
            let schema = schema_of(cli)?;
            let preds = read_predictions(predictions)?;
            let eval = evaluate_predictions(&schema, &preds)?;
            let out = out_dir(cli)?;
            write_json(&out.join("metrics.json"), &eval.metrics)?;
            fs::write(out.join("confusion.csv"), eval.confusion.to_csv()).map_err(|e| StageError::new("write", exit::DATA, e))?;
            if let Some(s) = &eval.sentence_metrics {
                write_json(&out.join("sentence_metrics.json"), s)?;
            }
            println!("micro P {:.4} R {:.4} F1 {:.4}", eval.metrics.micro.precision, eval.metrics.micro.recall, eval.metrics.micro.f1);
            Ok(exit::OK)
        }
        Command::Run { corpus, fraction, resamples, opts } => {
            let cfg = resolve_run_config(cli, corpus, *fraction, *resamples, opts)?;
            let manifest = run_experiment(&cfg)?;
            println!(
                "run written to {} ({} validation sentences)",
                cfg.out.display(),
                manifest.validation_sentences
            );
            Ok(exit::OK)
        }
        Command::Compare { run_a, run_b, resamples } => {
            // defaults come from run A's recorded configuration
            let recorded = read_manifest(run_a)?.config;
            let resamples = resamples.unwrap_or(recorded.bootstrap_resamples);
            let seed = cli.seed.unwrap_or(recorded.seed);
            let result = compare_runs(run_a, run_b, resamples, seed)?;
            let out = out_dir(cli)?;
            write_bootstrap(&out.join("compare.json"), &result)?;
            println!("delta {:.6} p {:.6}", result.observed_delta, result.p_value);
            Ok(exit::OK)
        }
        Command::Synth { counts, gazetteer_out } => {
            let schema = schema_of(cli)?;
            let mut map = BTreeMap::new();
            for c in counts {
                let (label, n) = c.split_once('=').ok_or_else(|| usage(format!("expected label=count, got {c:?}")))?;
                let n: usize = n.parse().map_err(|_| usage(format!("bad count in {c:?}")))?;
                map.insert(label.to_string(), n);
            }
            let corpus = generate_synthetic_corpus(&schema, &map, cli.seed.unwrap_or(13)).map_err(usage)?;
            let out = out_dir(cli)?;
            corpus.save(out.join("corpus.jsonl")).map_err(|e| StageError::new("write", exit::DATA, e))?;
            if *gazetteer_out {
                let g = Gazetteer::new(synthetic::CONDITIONS.iter(), synthetic::DRUGS.iter().map(|d| d.to_string()).chain(synthetic::pseudo_chemicals().iter().cloned()))
                    .map_err(|e| StageError::new("write", exit::DATA, e))?;
                fs::write(out.join("gazetteer.txt"), g.to_text()).map_err(|e| StageError::new("write", exit::DATA, e))?;
            }
            println!("{} posts written", corpus.posts.len());
            Ok(exit::OK)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code as u8)
        }
    }
}
