//! Disease/chemical knowledge annotation and marker-token augmentation.
//!
//! Each disease mention is bracketed by `$$` tokens and each chemical mention
//! by `@@` tokens. Predictions made on augmented text are projected back onto
//! the original tokens with [`project_back`].

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenize::{repair_bio, BioLabel, Token};

pub const DISEASE_MARKER: &str = "$$";
pub const CHEMICAL_MARKER: &str = "@@";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum KnowledgeKind {
    Disease,
    Chemical,
}

impl KnowledgeKind {
    pub fn marker(self) -> &'static str {
        match self {
            KnowledgeKind::Disease => DISEASE_MARKER,
            KnowledgeKind::Chemical => CHEMICAL_MARKER,
        }
    }
}

pub fn is_marker(token: &str) -> bool {
    token == DISEASE_MARKER || token == CHEMICAL_MARKER
}

/// Inclusive token range inside one sentence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeSpan {
    pub first_token: usize,
    pub last_token: usize,
    pub kind: KnowledgeKind,
}

/// Anything that can mark disease/chemical mentions in a token sequence.
pub trait KnowledgeAnnotator {
    fn annotate(&self, tokens: &[&str]) -> Vec<KnowledgeSpan>;
}

/// Lowercases and strips leading/trailing punctuation.
pub fn normalize_token(token: &str) -> String {
    token.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase()
}

fn normalize_term(term: &str) -> Option<String> {
    let parts: Vec<String> = term.split_whitespace().map(normalize_token).collect();
    if parts.is_empty() || parts.iter().any(|p| p.is_empty()) {
        None
    } else {
        Some(parts.join(" "))
    }
}

/// Lexicon of normalized disease and chemical terms.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Gazetteer {
    disease_terms: BTreeSet<String>,
    chemical_terms: BTreeSet<String>,
    index: BTreeMap<String, KnowledgeKind>,
    max_len: usize,
}

const DEFAULT_GAZETTEER: &str = include_str!("../data/default_gazetteer.txt");

impl Gazetteer {
    pub fn new<I, J, S, T>(diseases: I, chemicals: J) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        J: IntoIterator<Item = T>,
        S: AsRef<str>,
        T: AsRef<str>,
    {
        let mut g = Gazetteer::default();
        for d in diseases {
            g.insert(d.as_ref(), KnowledgeKind::Disease)?;
        }
        for c in chemicals {
            g.insert(c.as_ref(), KnowledgeKind::Chemical)?;
        }
        Ok(g)
    }

    fn insert(&mut self, term: &str, kind: KnowledgeKind) -> Result<()> {
        let norm = normalize_term(term).ok_or_else(|| Error::Argument(format!("empty gazetteer term {term:?}")))?;
        if let Some(existing) = self.index.get(&norm) {
            if *existing != kind {
                return Err(Error::Argument(format!("term {norm:?} listed as both disease and chemical")));
            }
            return Ok(());
        }
        self.max_len = self.max_len.max(norm.split(' ').count());
        self.index.insert(norm.clone(), kind);
        match kind {
            KnowledgeKind::Disease => self.disease_terms.insert(norm),
            KnowledgeKind::Chemical => self.chemical_terms.insert(norm),
        };
        Ok(())
    }

    /// Parses the `[disease]` / `[chemical]` sectioned text format.
    pub fn parse(text: &str) -> Result<Self> {
        let mut g = Gazetteer::default();
        let mut section = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line {
                "[disease]" => section = Some(KnowledgeKind::Disease),
                "[chemical]" => section = Some(KnowledgeKind::Chemical),
                term => {
                    let kind = section.ok_or_else(|| {
                        Error::Argument(format!("gazetteer line {}: term before any section header", i + 1))
                    })?;
                    g.insert(term, kind)?;
                }
            }
        }
        Ok(g)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Condition names, abbreviations and chemical names shipped with the crate.
    pub fn builtin() -> Self {
        Self::parse(DEFAULT_GAZETTEER).expect("bundled gazetteer parses")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("[disease]\n");
        for t in &self.disease_terms {
            out.push_str(t);
            out.push('\n');
        }
        out.push_str("[chemical]\n");
        for t in &self.chemical_terms {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn disease_terms(&self) -> &BTreeSet<String> {
        &self.disease_terms
    }

    pub fn chemical_terms(&self) -> &BTreeSet<String> {
        &self.chemical_terms
    }

    /// Leftmost-longest, non-overlapping, case-insensitive n-gram match.
    pub fn annotate_strs(&self, tokens: &[&str]) -> Vec<KnowledgeSpan> {
        let norm: Vec<String> = tokens.iter().map(|t| normalize_token(t)).collect();
        let mut spans = Vec::new();
        let mut i = 0;
        while i < norm.len() {
            let longest = self.max_len.min(norm.len() - i);
            let hit = (1..=longest).rev().find_map(|n| {
                let gram = &norm[i..i + n];
                if gram.iter().any(|t| t.is_empty()) {
                    return None;
                }
                self.index.get(&gram.join(" ")).map(|kind| (n, *kind))
            });
            match hit {
                Some((n, kind)) => {
                    spans.push(KnowledgeSpan {
                        first_token: i,
                        last_token: i + n - 1,
                        kind,
                    });
                    i += n;
                }
                None => i += 1,
            }
        }
        spans
    }
}

impl KnowledgeAnnotator for Gazetteer {
    fn annotate(&self, tokens: &[&str]) -> Vec<KnowledgeSpan> {
        self.annotate_strs(tokens)
    }
}

pub fn gazetteer_annotate(tokens: &[Token], gazetteer: &Gazetteer) -> Vec<KnowledgeSpan> {
    let strs: Vec<&str> = tokens.iter().map(|t| t.text.as_str()).collect();
    gazetteer.annotate_strs(&strs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Origin {
    Token(usize),
    Marker(KnowledgeKind),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedSentence {
    pub tokens: Vec<String>,
    pub labels: Option<Vec<BioLabel>>,
    pub origin: Vec<Origin>,
}

impl AugmentedSentence {
    /// Original tokens with markers removed.
    pub fn strip(&self) -> Vec<String> {
        self.tokens
            .iter()
            .zip(&self.origin)
            .filter(|(_, o)| matches!(o, Origin::Token(_)))
            .map(|(t, _)| t.clone())
            .collect()
    }
}

/// Brackets each knowledge span with its marker token.
///
/// A marker inherits `I-x` when the original token right after it is `I-x`
/// (the marker sits inside an entity); otherwise it gets `O`.
pub fn augment(tokens: &[String], labels: Option<&[BioLabel]>, kspans: &[KnowledgeSpan]) -> Result<AugmentedSentence> {
    if let Some(l) = labels {
        if l.len() != tokens.len() {
            return Err(Error::Argument(format!(
                "label count {} does not match token count {}",
                l.len(),
                tokens.len()
            )));
        }
    }
    let mut sorted = kspans.to_vec();
    sorted.sort_by_key(|k| k.first_token);
    for (i, k) in sorted.iter().enumerate() {
        if k.first_token > k.last_token || k.last_token >= tokens.len() {
            return Err(Error::Argument(format!(
                "knowledge span [{}..={}] out of range for {} tokens",
                k.first_token,
                k.last_token,
                tokens.len()
            )));
        }
        if i > 0 && sorted[i - 1].last_token >= k.first_token {
            return Err(Error::Argument("overlapping knowledge spans".to_string()));
        }
    }

    let marker_label = |next: usize| -> BioLabel {
        match labels.and_then(|l| l.get(next)) {
            Some(BioLabel::I(x)) => BioLabel::I(x.clone()),
            _ => BioLabel::O,
        }
    };

    let cap = tokens.len() + 2 * sorted.len();
    let mut out_tokens = Vec::with_capacity(cap);
    let mut out_labels = labels.map(|_| Vec::with_capacity(cap));
    let mut origin = Vec::with_capacity(cap);
    let push_marker = |kind: KnowledgeKind,
                       next: usize,
                       toks: &mut Vec<String>,
                       labs: &mut Option<Vec<BioLabel>>,
                       origin: &mut Vec<Origin>| {
        toks.push(kind.marker().to_string());
        origin.push(Origin::Marker(kind));
        if let Some(l) = labs.as_mut() {
            l.push(marker_label(next));
        }
    };

    let mut spans = sorted.iter().peekable();
    let mut open: Option<&KnowledgeSpan> = None;
    for (i, tok) in tokens.iter().enumerate() {
        if let Some(k) = spans.next_if(|k| k.first_token == i) {
            push_marker(k.kind, i, &mut out_tokens, &mut out_labels, &mut origin);
            open = Some(k);
        }
        out_tokens.push(tok.clone());
        origin.push(Origin::Token(i));
        if let (Some(l), Some(src)) = (out_labels.as_mut(), labels) {
            l.push(src[i].clone());
        }
        if let Some(k) = open.filter(|k| k.last_token == i) {
            push_marker(k.kind, i + 1, &mut out_tokens, &mut out_labels, &mut origin);
            open = None;
        }
    }
    Ok(AugmentedSentence {
        tokens: out_tokens,
        labels: out_labels,
        origin,
    })
}

/// Drops marker positions and repairs the remaining sequence.
pub fn project_back(aug: &AugmentedSentence, predicted: &[BioLabel]) -> Result<Vec<BioLabel>> {
    if predicted.len() != aug.tokens.len() {
        return Err(Error::Argument(format!(
            "prediction length {} does not match augmented length {}",
            predicted.len(),
            aug.tokens.len()
        )));
    }
    let n = aug.origin.iter().filter(|o| matches!(o, Origin::Token(_))).count();
    let mut out = vec![BioLabel::O; n];
    for (o, label) in aug.origin.iter().zip(predicted) {
        if let Origin::Token(i) = o {
            out[*i] = label.clone();
        }
    }
    Ok(repair_bio(&out))
}
