//! BIO-constrained Viterbi decoding.

use crate::corpus::LabelSchema;
use crate::error::{Error, Result};
use crate::tokenize::BioLabel;

/// Tag inventory: `O` first, then `B-x`, `I-x` per label in schema order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TagSpace {
    tags: Vec<BioLabel>,
}

impl TagSpace {
    pub fn new(schema: &LabelSchema) -> Self {
        let mut tags = vec![BioLabel::O];
        for l in &schema.labels {
            tags.push(BioLabel::B(l.clone()));
            tags.push(BioLabel::I(l.clone()));
        }
        Self { tags }
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn tag(&self, i: usize) -> &BioLabel {
        &self.tags[i]
    }

    pub fn tags(&self) -> &[BioLabel] {
        &self.tags
    }

    pub fn index_of(&self, label: &BioLabel) -> Option<usize> {
        self.tags.iter().position(|t| t == label)
    }

    fn is_inside(i: usize) -> bool {
        i > 0 && i.is_multiple_of(2)
    }

    /// Whether tag `cur` may follow `prev` (`None` = sentence start).
    pub fn allowed(&self, prev: Option<usize>, cur: usize) -> bool {
        if !Self::is_inside(cur) {
            return true;
        }
        match prev {
            Some(p) => p != 0 && p.div_ceil(2) == cur / 2,
            None => false,
        }
    }
}

/// First-order transition scores; row `n_tags` holds start scores.
#[derive(Clone, Debug, PartialEq)]
pub struct Transitions {
    pub n_tags: usize,
    pub scores: Vec<f64>,
}

impl Transitions {
    pub fn zeros(n_tags: usize) -> Self {
        Self {
            n_tags,
            scores: vec![0.0; (n_tags + 1) * n_tags],
        }
    }

    pub fn index(&self, prev: Option<usize>, cur: usize) -> usize {
        prev.unwrap_or(self.n_tags) * self.n_tags + cur
    }

    pub fn get(&self, prev: Option<usize>, cur: usize) -> f64 {
        self.scores[self.index(prev, cur)]
    }
}

/// Best constrained path over a flat `tokens × n_tags` emission matrix.
/// Ties resolve toward the lower tag index.
pub fn decode_indices(space: &TagSpace, emissions: &[f64], transitions: Option<&Transitions>) -> Vec<usize> {
    let n = space.len();
    let len = emissions.len() / n;
    if len == 0 {
        return Vec::new();
    }
    let trans = |p: Option<usize>, c: usize| transitions.map_or(0.0, |t| t.get(p, c));
    let mut score = vec![f64::NEG_INFINITY; n];
    for (c, s) in score.iter_mut().enumerate() {
        if space.allowed(None, c) {
            *s = emissions[c] + trans(None, c);
        }
    }
    let mut back = vec![0usize; len * n];
    for t in 1..len {
        let mut next = vec![f64::NEG_INFINITY; n];
        for c in 0..n {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for (p, &sp) in score.iter().enumerate() {
                if sp == f64::NEG_INFINITY || !space.allowed(Some(p), c) {
                    continue;
                }
                let v = sp + trans(Some(p), c);
                if v > best {
                    best = v;
                    arg = p;
                }
            }
            if best > f64::NEG_INFINITY {
                next[c] = best + emissions[t * n + c];
                back[t * n + c] = arg;
            }
        }
        score = next;
    }
    let mut last = 0;
    for c in 1..n {
        if score[c] > score[last] {
            last = c;
        }
    }
    let mut path = vec![0; len];
    path[len - 1] = last;
    for t in (1..len).rev() {
        path[t - 1] = back[t * n + path[t]];
    }
    path
}

/// Decodes per-token emission scores (columns in [`TagSpace`] order) into a
/// well-formed BIO sequence.
pub fn viterbi_decode(emission_scores: &[Vec<f64>], schema: &LabelSchema) -> Result<Vec<BioLabel>> {
    let space = TagSpace::new(schema);
    let mut flat = Vec::with_capacity(emission_scores.len() * space.len());
    for (t, row) in emission_scores.iter().enumerate() {
        if row.len() != space.len() {
            return Err(Error::Argument(format!(
                "row {t} has {} scores, expected {}",
                row.len(),
                space.len()
            )));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument(format!("row {t} contains a non-finite score")));
        }
        flat.extend_from_slice(row);
    }
    Ok(decode_indices(&space, &flat, None)
        .into_iter()
        .map(|i| space.tag(i).clone())
        .collect())
}
