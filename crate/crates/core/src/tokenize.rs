//! Sentence segmentation, whitespace tokenization and span/BIO alignment.
//!
//! All offsets are character (Unicode scalar value) indices into the post
//! text, end-exclusive.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::corpus::{AnnotatedSpan, LabelSchema};
use crate::error::{Error, Result};

/// A maximal run of non-whitespace characters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

impl Token {
    pub fn overlaps(&self, start: usize, end: usize) -> bool {
        self.start < end && start < self.end
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceSpan {
    pub start: usize,
    pub end: usize,
    pub tokens: Vec<Token>,
}

impl SentenceSpan {
    pub fn token_texts(&self) -> Vec<String> {
        self.tokens.iter().map(|t| t.text.clone()).collect()
    }
}

/// One BIO tag. Serialized as `O`, `B-type` or `I-type`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BioLabel {
    O,
    B(String),
    I(String),
}

impl BioLabel {
    pub fn entity(&self) -> Option<&str> {
        match self {
            BioLabel::O => None,
            BioLabel::B(x) | BioLabel::I(x) => Some(x),
        }
    }

    pub fn is_outside(&self) -> bool {
        matches!(self, BioLabel::O)
    }
}

impl fmt::Display for BioLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BioLabel::O => f.write_str("O"),
            BioLabel::B(x) => write!(f, "B-{x}"),
            BioLabel::I(x) => write!(f, "I-{x}"),
        }
    }
}

impl FromStr for BioLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "O" => Ok(BioLabel::O),
            _ => match s.split_once('-') {
                Some(("B", x)) if !x.is_empty() => Ok(BioLabel::B(x.to_string())),
                Some(("I", x)) if !x.is_empty() => Ok(BioLabel::I(x.to_string())),
                _ => Err(Error::Argument(format!("malformed BIO label {s:?}"))),
            },
        }
    }
}

impl Serialize for BioLabel {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BioLabel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Splits post text into sentences.
pub trait SentenceSegmenter {
    fn segment(&self, text: &str) -> Vec<SentenceSpan>;
}

/// Splits after `.`, `?`, `!` or a newline when the following whitespace run
/// ends in an uppercase letter, a digit or the end of the text.
#[derive(Clone, Copy, Debug, Default)]
pub struct RuleSegmenter;

impl SentenceSegmenter for RuleSegmenter {
    fn segment(&self, text: &str) -> Vec<SentenceSpan> {
        let chars: Vec<char> = text.chars().collect();
        let mut boundaries = Vec::new();
        for (i, &c) in chars.iter().enumerate() {
            let candidate = match c {
                '.' | '?' | '!' => chars.get(i + 1).is_some_and(|n| n.is_whitespace()),
                '\n' => true,
                _ => false,
            };
            if !candidate {
                continue;
            }
            let mut j = i + 1;
            while j < chars.len() && chars[j].is_whitespace() {
                j += 1;
            }
            if j == chars.len() || chars[j].is_uppercase() || chars[j].is_ascii_digit() {
                boundaries.push(i + 1);
            }
        }
        boundaries.push(chars.len());

        let mut out = Vec::new();
        let mut from = 0;
        for cut in boundaries {
            if cut <= from {
                continue;
            }
            let mut s = from;
            let mut e = cut;
            while s < e && chars[s].is_whitespace() {
                s += 1;
            }
            while e > s && chars[e - 1].is_whitespace() {
                e -= 1;
            }
            if s < e {
                let piece: String = chars[s..e].iter().collect();
                out.push(SentenceSpan {
                    start: s,
                    end: e,
                    tokens: whitespace_tokenize(&piece, s),
                });
            }
            from = cut;
        }
        out
    }
}

pub fn segment_sentences(text: &str) -> Vec<SentenceSpan> {
    RuleSegmenter.segment(text)
}

/// Maximal non-whitespace runs; offsets are shifted by `base_offset`.
pub fn whitespace_tokenize(text: &str, base_offset: usize) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    let mut start = 0;
    let mut n = 0;
    for (i, c) in text.chars().enumerate() {
        n = i + 1;
        if c.is_whitespace() {
            if !current.is_empty() {
                tokens.push(Token {
                    text: std::mem::take(&mut current),
                    start: base_offset + start,
                    end: base_offset + i,
                });
            }
        } else {
            if current.is_empty() {
                start = i;
            }
            current.push(c);
        }
    }
    if !current.is_empty() {
        tokens.push(Token {
            text: current,
            start: base_offset + start,
            end: base_offset + n,
        });
    }
    tokens
}

/// Per-token BIO labels for one sentence.
///
/// A token takes a span's type when it overlaps the span by at least one
/// character. Contested tokens go to the span that starts first, then to the
/// label earlier in the schema. A span restarts with `B-` whenever the token
/// before it was assigned to a different span.
pub fn encode_bio(sentence: &SentenceSpan, spans: &[AnnotatedSpan], schema: &LabelSchema) -> Vec<BioLabel> {
    let mut owner: Vec<Option<usize>> = Vec::with_capacity(sentence.tokens.len());
    for token in &sentence.tokens {
        let winner = spans
            .iter()
            .enumerate()
            .filter(|(_, s)| token.overlaps(s.start, s.end))
            .min_by_key(|(idx, s)| (s.start, schema.label_index(&s.label).unwrap_or(usize::MAX), *idx))
            .map(|(idx, _)| idx);
        owner.push(winner);
    }
    owner
        .iter()
        .enumerate()
        .map(|(i, o)| match o {
            None => BioLabel::O,
            Some(idx) => {
                let label = spans[*idx].label.clone();
                if i > 0 && owner[i - 1] == Some(*idx) {
                    BioLabel::I(label)
                } else {
                    BioLabel::B(label)
                }
            }
        })
        .collect()
}

/// Inverse of [`encode_bio`]: each `B-x (I-x)*` run becomes one span.
pub fn decode_bio(sentence: &SentenceSpan, labels: &[BioLabel]) -> Result<Vec<AnnotatedSpan>> {
    if labels.len() != sentence.tokens.len() {
        return Err(Error::Argument(format!(
            "label count {} does not match token count {}",
            labels.len(),
            sentence.tokens.len()
        )));
    }
    let mut spans: Vec<AnnotatedSpan> = Vec::new();
    let mut open: Option<AnnotatedSpan> = None;
    for (token, label) in sentence.tokens.iter().zip(labels) {
        match label {
            BioLabel::O => spans.extend(open.take()),
            BioLabel::I(x) if open.as_ref().is_some_and(|s| &s.label == x) => {
                if let Some(s) = open.as_mut() {
                    s.end = token.end;
                }
            }
            BioLabel::B(x) | BioLabel::I(x) => {
                spans.extend(open.take());
                open = Some(AnnotatedSpan {
                    start: token.start,
                    end: token.end,
                    label: x.clone(),
                });
            }
        }
    }
    spans.extend(open);
    Ok(spans)
}

pub fn is_well_formed(labels: &[BioLabel]) -> bool {
    let mut prev: Option<&str> = None;
    for label in labels {
        if let BioLabel::I(x) = label {
            if prev != Some(x.as_str()) {
                return false;
            }
        }
        prev = label.entity();
    }
    true
}

/// Rewrites every `I-x` without a `B-x`/`I-x` predecessor to `B-x`.
pub fn repair_bio(labels: &[BioLabel]) -> Vec<BioLabel> {
    let mut out: Vec<BioLabel> = Vec::with_capacity(labels.len());
    for label in labels {
        let fixed = match label {
            BioLabel::I(x) if out.last().and_then(|p| p.entity()) != Some(x.as_str()) => BioLabel::B(x.clone()),
            other => other.clone(),
        };
        out.push(fixed);
    }
    out
}

/// Writes `token<TAB>tag` lines with a blank line after each sentence.
pub fn write_conll<W: Write>(mut w: W, sentences: &[(Vec<String>, Vec<BioLabel>)]) -> std::io::Result<()> {
    for (tokens, labels) in sentences {
        for (t, l) in tokens.iter().zip(labels) {
            writeln!(w, "{t}\t{l}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_conll<R: BufRead>(r: R) -> Result<Vec<(Vec<String>, Vec<BioLabel>)>> {
    let mut out = Vec::new();
    let mut tokens = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            if !tokens.is_empty() {
                out.push((std::mem::take(&mut tokens), std::mem::take(&mut labels)));
            }
            continue;
        }
        let (tok, tag) = line
            .split_once('\t')
            .ok_or_else(|| Error::Argument(format!("line {}: expected token<TAB>tag", lineno + 1)))?;
        tokens.push(tok.to_string());
        labels.push(tag.parse()?);
    }
    if !tokens.is_empty() {
        out.push((tokens, labels));
    }
    Ok(out)
}
