//! Span-annotated post corpora: loading, validation, statistics, splitting
//! and synthetic generation.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenize::whitespace_tokenize;

pub const OUTSIDE: &str = "O";

/// Named, ordered set of entity types. Order fixes every tie-break downstream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSchema {
    pub name: String,
    pub labels: Vec<String>,
}

impl LabelSchema {
    /// Patient-experience entities.
    pub fn subtask1() -> Self {
        Self::from_parts("subtask1", &["claim", "per_exp", "claim_per_exp", "question"])
    }

    /// Population, intervention, outcome.
    pub fn subtask2() -> Self {
        Self::from_parts("subtask2", &["population", "intervention", "outcome"])
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "subtask1" => Ok(Self::subtask1()),
            "subtask2" => Ok(Self::subtask2()),
            other => Err(Error::UnknownSchema(other.to_string())),
        }
    }

    fn from_parts(name: &str, labels: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            labels: labels.iter().map(|l| l.to_string()).collect(),
        }
    }

    /// Custom schema; labels must be unique, non-empty and not `O`.
    pub fn new(name: impl Into<String>, labels: Vec<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        for l in &labels {
            if l.is_empty() || l == OUTSIDE || l.contains(char::is_whitespace) || !seen.insert(l) {
                return Err(Error::Argument(format!("invalid or duplicate label {l:?}")));
            }
        }
        Ok(Self { name: name.into(), labels })
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn contains(&self, label: &str) -> bool {
        self.label_index(label).is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedSpan {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Post {
    pub post_id: String,
    pub condition: String,
    pub text: String,
    pub spans: Vec<AnnotatedSpan>,
}

impl Post {
    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }

    pub fn span_text(&self, span: &AnnotatedSpan) -> String {
        self.text.chars().skip(span.start).take(span.end.saturating_sub(span.start)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub schema: LabelSchema,
    pub posts: Vec<Post>,
}

impl Corpus {
    pub fn new(schema: LabelSchema, posts: Vec<Post>) -> Self {
        Self { schema, posts }
    }

    pub fn span_count(&self) -> usize {
        self.posts.iter().map(|p| p.spans.len()).sum()
    }

    /// Serializes to JSONL, one post per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for post in &self.posts {
            out.push_str(&serde_json::to_string(post).expect("post serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(self.to_jsonl().as_bytes())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }
}

pub fn load_corpus(path: impl AsRef<Path>, schema: &LabelSchema) -> Result<Corpus> {
    parse_corpus(BufReader::new(File::open(path)?), schema)
}

/// Reads JSONL posts. Blank lines are skipped; spans are re-sorted by start.
pub fn parse_corpus<R: BufRead>(reader: R, schema: &LabelSchema) -> Result<Corpus> {
    let mut posts = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut post: Post = serde_json::from_str(&line).map_err(|source| Error::Json { line: i + 1, source })?;
        let len = post.char_len();
        for span in &post.spans {
            if !schema.contains(&span.label) {
                return Err(Error::UnknownLabel {
                    post_id: post.post_id.clone(),
                    label: span.label.clone(),
                });
            }
            if span.start >= span.end || span.end > len {
                return Err(Error::OffsetOutOfRange {
                    post_id: post.post_id.clone(),
                    start: span.start,
                    end: span.end,
                    len,
                });
            }
        }
        post.spans.sort_by_key(|s| s.start);
        posts.push(post);
    }
    Ok(Corpus::new(schema.clone(), posts))
}

/// Reads JSONL posts without label or offset checks, so a broken corpus can
/// still be handed to [`validate_corpus`]. Only malformed JSON fails.
pub fn load_corpus_unchecked(path: impl AsRef<Path>, schema: &LabelSchema) -> Result<Corpus> {
    let reader = BufReader::new(File::open(path)?);
    let mut posts = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        posts.push(serde_json::from_str(&line).map_err(|source| Error::Json { line: i + 1, source })?);
    }
    Ok(Corpus::new(schema.clone(), posts))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub post_id: String,
    pub code: String,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub errors: Vec<Finding>,
    pub warnings: Vec<Finding>,
    pub counts: BTreeMap<String, usize>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.errors.is_empty()
    }

    fn push(&mut self, warning: bool, post_id: &str, code: &str, message: String) {
        let finding = Finding {
            post_id: post_id.to_string(),
            code: code.to_string(),
            message,
        };
        *self.counts.entry(code.to_string()).or_default() += 1;
        if warning {
            self.warnings.push(finding);
        } else {
            self.errors.push(finding);
        }
    }
}

/// Checks every post and span invariant. Overlapping spans are warnings.
pub fn validate_corpus(corpus: &Corpus) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut ids = HashSet::new();
    for post in &corpus.posts {
        let id = post.post_id.as_str();
        if !ids.insert(id) {
            report.push(false, id, "duplicate_post_id", format!("post_id {id:?} appears more than once"));
        }
        let len = post.char_len();
        for span in &post.spans {
            if !corpus.schema.contains(&span.label) {
                report.push(
                    false,
                    id,
                    "unknown_label",
                    format!("label {:?} not in schema {}", span.label, corpus.schema.name),
                );
            }
            if span.start >= span.end {
                report.push(false, id, "empty_span", format!("span [{},{}) is empty", span.start, span.end));
            } else if span.end > len {
                report.push(
                    false,
                    id,
                    "offset_out_of_range",
                    format!("span [{},{}) exceeds text length {len}", span.start, span.end),
                );
            }
        }
        if post.spans.windows(2).any(|w| w[0].start > w[1].start) {
            report.push(false, id, "unsorted_spans", "spans are not sorted by start".to_string());
        }
        for (i, a) in post.spans.iter().enumerate() {
            for b in &post.spans[i + 1..] {
                if a.start < b.end && b.start < a.end {
                    report.push(
                        true,
                        id,
                        "overlap",
                        format!("[{},{}) {} overlaps [{},{}) {}", a.start, a.end, a.label, b.start, b.end, b.label),
                    );
                }
            }
        }
    }
    report
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub posts_per_condition: BTreeMap<String, usize>,
    pub entity_counts: BTreeMap<String, usize>,
    pub mean_entity_length_tokens: BTreeMap<String, f64>,
    /// Spans involved in at least one overlapping pair, over all spans.
    pub overlap_fraction: f64,
}

/// Frequencies and mean lengths (in whitespace tokens) per entity type.
pub fn corpus_stats(corpus: &Corpus) -> Result<CorpusStats> {
    let report = validate_corpus(corpus);
    if !report.is_valid() {
        return Err(Error::InvalidCorpus(report.errors.len()));
    }
    let mut stats = CorpusStats::default();
    let mut token_totals: BTreeMap<String, usize> = BTreeMap::new();
    let mut overlapping = 0usize;
    let mut total = 0usize;
    for post in &corpus.posts {
        *stats.posts_per_condition.entry(post.condition.clone()).or_default() += 1;
        let tokens = whitespace_tokenize(&post.text, 0);
        for (i, span) in post.spans.iter().enumerate() {
            total += 1;
            *stats.entity_counts.entry(span.label.clone()).or_default() += 1;
            let n = tokens.iter().filter(|t| t.overlaps(span.start, span.end)).count();
            *token_totals.entry(span.label.clone()).or_default() += n;
            let overlaps_any = post
                .spans
                .iter()
                .enumerate()
                .any(|(j, o)| j != i && o.start < span.end && span.start < o.end);
            if overlaps_any {
                overlapping += 1;
            }
        }
    }
    for (label, n) in &stats.entity_counts {
        stats.mean_entity_length_tokens.insert(label.clone(), token_totals[label] as f64 / *n as f64);
    }
    stats.overlap_fraction = if total == 0 { 0.0 } else { overlapping as f64 / total as f64 };
    Ok(stats)
}

/// Greedy label-balanced train/validation split.
///
/// Posts are visited in a seeded shuffle (posts with more spans first) and
/// each goes to validation only when that strictly lowers the summed distance
/// between every label's validation share, the post share, and `validation_fraction`.
pub fn stratified_split(corpus: &Corpus, validation_fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
        return Err(Error::Argument(format!(
            "validation fraction must lie in (0,1), got {validation_fraction}"
        )));
    }
    let n = corpus.posts.len();
    if n < 2 {
        return Err(Error::Argument("need at least two posts to split".to_string()));
    }
    let labels = &corpus.schema.labels;
    let per_post: Vec<Vec<usize>> = corpus
        .posts
        .iter()
        .map(|p| {
            let mut c = vec![0; labels.len()];
            for s in &p.spans {
                if let Some(k) = corpus.schema.label_index(&s.label) {
                    c[k] += 1;
                }
            }
            c
        })
        .collect();
    let totals: Vec<usize> = (0..labels.len()).map(|k| per_post.iter().map(|c| c[k]).sum()).collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.sort_by_key(|&i| std::cmp::Reverse(corpus.posts[i].spans.len()));

    let objective = |val: &[usize], posts: usize| -> f64 {
        let mut d = (posts as f64 / n as f64 - validation_fraction).abs();
        for (k, &t) in totals.iter().enumerate() {
            if t > 0 {
                d += (val[k] as f64 / t as f64 - validation_fraction).abs();
            }
        }
        d
    };

    let mut in_val = vec![false; n];
    let mut val_counts = vec![0usize; labels.len()];
    let mut val_posts = 0usize;
    for &i in &order {
        let with: Vec<usize> = val_counts.iter().zip(&per_post[i]).map(|(a, b)| a + b).collect();
        if objective(&with, val_posts + 1) < objective(&val_counts, val_posts) - 1e-12 {
            in_val[i] = true;
            val_counts = with;
            val_posts += 1;
        }
    }
    // both sides must be non-empty
    if val_posts == 0 {
        in_val[order[order.len() - 1]] = true;
    } else if val_posts == n {
        in_val[order[0]] = false;
    }

    let mut train = Vec::new();
    let mut validation = Vec::new();
    for (post, v) in corpus.posts.iter().zip(in_val) {
        if v {
            validation.push(post.clone());
        } else {
            train.push(post.clone());
        }
    }
    Ok((
        Corpus::new(corpus.schema.clone(), train),
        Corpus::new(corpus.schema.clone(), validation),
    ))
}

pub mod synthetic {
    //! Template vocabulary for desk-scale synthetic corpora.

    use std::sync::OnceLock;

    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub const CONDITIONS: &[&str] = &[
        "gout",
        "lupus",
        "POTS",
        "MS",
        "IBS",
        "CF",
        "multiple sclerosis",
        "cystic fibrosis",
        "T1D",
    ];

    pub const DRUGS: &[&str] = &[
        "allopurinol",
        "metoclopramide",
        "hydroxychloroquine",
        "pantoprazole",
        "tobramycin",
    ];

    pub const SYMPTOMS: &[&str] = &[
        "pain",
        "swelling",
        "fatigue",
        "nausea",
        "joint pain",
        "brain fog",
        "heart rate",
        "blood sugar levels",
    ];

    pub(super) const QUESTION: &[&str] = &[
        "Has anyone tried {drug} for {cond}?",
        "Does {drug} help with {sym}?",
        "What do you take when your {sym} gets bad?",
        "How long did {drug} take to work for you?",
        "Is {sym} normal with {cond}?",
    ];

    pub(super) const CLAIM: &[&str] = &[
        "{Drug} is known to reduce {sym} in most people.",
        "Cutting out sugar generally lowers {sym} for {cond} patients.",
        "Doctors say {drug} works better than diet alone.",
        "Regular exercise usually improves {sym} over time.",
    ];

    pub(super) const PER_EXP: &[&str] = &[
        "I was diagnosed with {cond} three years ago.",
        "Last night my {sym} kept me awake until morning.",
        "I spent the whole weekend in bed with {sym}.",
        "My mom drove me to the clinic yesterday.",
    ];

    pub(super) const CLAIM_PER_EXP: &[&str] = &[
        "Ever since I started {drug} my {sym} is basically gone, so it really works.",
        "After switching to {drug} my {sym} improved, which proves it helps.",
        "I quit dairy and my {sym} disappeared, so diet definitely matters.",
    ];

    pub(super) const FILLERS: &[&str] = &[
        "Thanks for reading.",
        "Sorry for the long post.",
        "Any advice is welcome.",
        "Hope you all have a good day.",
    ];

    /// `(prefix, suffix)` around the entity phrase.
    pub(super) const POPULATION: &[(&str, &str)] = &[
        ("My ", " flared up again this week."),
        ("People with ", " should get more rest."),
        ("I have had ", " since college."),
    ];

    pub(super) const INTERVENTION: &[(&str, &str)] = &[
        ("I started ", " last month."),
        ("My doctor prescribed ", " yesterday."),
        ("I have been taking ", " every morning."),
    ];

    pub(super) const OUTCOME: &[(&str, &str)] = &[
        ("Now my ", " is much better."),
        ("The ", " finally went away."),
        ("It made my ", " worse."),
    ];

    const ONSETS: &[&str] = &["b", "c", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
    const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];
    const CODAS: &[&str] = &["l", "n", "x", "r", "m", "t", "d", "s"];

    struct Pool {
        chemicals: Vec<String>,
        nouns: Vec<String>,
    }

    /// 4000 pseudo-words split evenly into chemical names and plain nouns.
    /// Both halves come from the same generator, so only a lexicon can tell
    /// them apart.
    fn pool() -> &'static Pool {
        static POOL: OnceLock<Pool> = OnceLock::new();
        POOL.get_or_init(|| {
            let mut words = Vec::new();
            for a in ONSETS {
                for b in VOWELS {
                    for c in ONSETS {
                        for d in VOWELS {
                            for e in CODAS {
                                words.push(format!("{a}{b}{c}{d}{e}"));
                            }
                        }
                    }
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
            words.shuffle(&mut rng);
            words.truncate(4000);
            let nouns = words.split_off(2000);
            Pool { chemicals: words, nouns }
        })
    }

    pub fn pseudo_chemicals() -> &'static [String] {
        &pool().chemicals
    }

    pub fn pseudo_nouns() -> &'static [String] {
        &pool().nouns
    }
}

/// Deterministic template corpus with exactly one labeled span per post.
///
/// Subtask-1 style schemas get a full-sentence entity plus a filler
/// sentence. Subtask-2 posts pair a phrase-level entity with a distractor
/// sentence that reuses the intervention contexts around a non-chemical
/// pseudo-word; intervention spans are always chemical names, so a chemical
/// lexicon fully separates them from the distractors.
pub fn generate_synthetic_corpus(
    schema: &LabelSchema,
    counts: &BTreeMap<String, usize>,
    seed: u64,
) -> Result<Corpus> {
    for label in counts.keys() {
        if !schema.contains(label) {
            return Err(Error::UnknownLabel {
                post_id: String::new(),
                label: label.clone(),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut drafts = Vec::new();
    for label in &schema.labels {
        for _ in 0..counts.get(label).copied().unwrap_or(0) {
            let condition = synthetic::CONDITIONS[rng.gen_range(0..synthetic::CONDITIONS.len())].to_string();
            let (entity_text, phrase) = synth_entity(label, &condition, &mut rng);
            let filler = synth_filler(schema, &mut rng);
            drafts.push((condition, entity_text, phrase, filler, rng.gen_bool(0.5)));
        }
    }
    drafts.shuffle(&mut rng);

    let posts = drafts
        .into_iter()
        .enumerate()
        .map(|(i, (condition, (entity, label), (p_start, p_end), filler, filler_first))| {
            let (text, offset) = if filler_first {
                (format!("{filler} {entity}"), filler.chars().count() + 1)
            } else {
                (format!("{entity} {filler}"), 0)
            };
            Post {
                post_id: format!("syn{i:05}"),
                condition,
                text,
                spans: vec![AnnotatedSpan {
                    start: offset + p_start,
                    end: offset + p_end,
                    label,
                }],
            }
        })
        .collect();
    Ok(Corpus::new(schema.clone(), posts))
}

fn pick<'a, T>(items: &'a [T], rng: &mut ChaCha8Rng) -> &'a T {
    &items[rng.gen_range(0..items.len())]
}

fn fill(template: &str, condition: &str, rng: &mut ChaCha8Rng) -> String {
    let drug = pick(synthetic::DRUGS, rng).to_string();
    let mut upper = drug.clone();
    upper[..1].make_ascii_uppercase();
    template
        .replace("{Drug}", &upper)
        .replace("{drug}", &drug)
        .replace("{cond}", condition)
        .replace("{sym}", pick(synthetic::SYMPTOMS, rng))
}

/// Returns `((sentence, label), (span_start, span_end))` in characters
/// relative to the sentence.
fn synth_entity(label: &str, condition: &str, rng: &mut ChaCha8Rng) -> ((String, String), (usize, usize)) {
    let sentence_templates = match label {
        "question" => Some(synthetic::QUESTION),
        "claim" => Some(synthetic::CLAIM),
        "per_exp" => Some(synthetic::PER_EXP),
        "claim_per_exp" => Some(synthetic::CLAIM_PER_EXP),
        _ => None,
    };
    if let Some(templates) = sentence_templates {
        let s = fill(pick(templates, rng), condition, rng);
        let n = s.chars().count();
        return ((s, label.to_string()), (0, n));
    }
    let (frames, phrase): (&[(&str, &str)], String) = match label {
        "population" => (synthetic::POPULATION, condition.to_string()),
        "intervention" => {
            let chems = synthetic::pseudo_chemicals();
            let phrase = if rng.gen_bool(0.1) {
                pick(synthetic::DRUGS, rng).to_string()
            } else {
                pick(chems, rng).clone()
            };
            (synthetic::INTERVENTION, phrase)
        }
        "outcome" => (synthetic::OUTCOME, pick(synthetic::SYMPTOMS, rng).to_string()),
        // custom schema label: generic frame
        other => (&[("This is about ", " here.")][..], other.replace('_', " ")),
    };
    let (pre, post) = pick(frames, rng);
    let start = pre.chars().count();
    let end = start + phrase.chars().count();
    ((format!("{pre}{phrase}{post}"), label.to_string()), (start, end))
}

fn synth_filler(schema: &LabelSchema, rng: &mut ChaCha8Rng) -> String {
    if schema.contains("intervention") {
        let (pre, post) = pick(synthetic::INTERVENTION, rng);
        format!("{pre}{}{post}", pick(synthetic::pseudo_nouns(), rng))
    } else {
        pick(synthetic::FILLERS, rng).to_string()
    }
}
