//! Averaged structured perceptron with a first-order BIO-constrained decoder.

use std::collections::HashMap;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::viterbi::{decode_indices, TagSpace, Transitions};
use super::{
    check_training_data, fingerprint_sentences, BackendError, HyperParams, ModelHandle, TaggerBackend, TrainingMeta,
    TrainingSentence,
};
use crate::augment::is_marker;
use crate::corpus::LabelSchema;
use crate::evaluation::{token_confusion, token_prf};
use crate::tokenize::BioLabel;

pub const BACKEND_ID: &str = "perceptron";

/// `Xx`-style shape with repeated classes collapsed.
pub fn word_shape(token: &str) -> String {
    let mut out = String::new();
    let mut last = None;
    for c in token.chars() {
        let k = if c.is_uppercase() {
            'X'
        } else if c.is_lowercase() {
            'x'
        } else if c.is_numeric() {
            'd'
        } else {
            c
        };
        if last != Some(k) {
            out.push(k);
            last = Some(k);
        }
    }
    out
}

fn suffix(s: &str, n: usize) -> String {
    let chars: Vec<char> = s.chars().collect();
    chars[chars.len().saturating_sub(n)..].iter().collect()
}

/// Emission feature strings for every token of a sentence.
pub fn sentence_features(tokens: &[String]) -> Vec<Vec<String>> {
    let lower: Vec<String> = tokens.iter().map(|t| t.to_lowercase()).collect();
    let ctx = |i: isize| -> &str {
        if i < 0 {
            "<s>"
        } else if i as usize >= lower.len() {
            "</s>"
        } else {
            &lower[i as usize]
        }
    };
    (0..tokens.len())
        .map(|i| {
            let w = &lower[i];
            let at = i as isize;
            vec![
                "bias".to_string(),
                format!("w={w}"),
                format!("s3={}", suffix(w, 3)),
                format!("s4={}", suffix(w, 4)),
                format!("shape={}", word_shape(&tokens[i])),
                format!("marker={}", is_marker(&tokens[i])),
                format!("w-1={}", ctx(at - 1)),
                format!("w+1={}", ctx(at + 1)),
                format!("w-2={}", ctx(at - 2)),
                format!("w+2={}", ctx(at + 2)),
            ]
        })
        .collect()
}

/// Averaged weights ready for decoding.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptronModel {
    space: TagSpace,
    weights: HashMap<String, Vec<f64>>,
    transitions: Transitions,
}

impl PerceptronModel {
    pub fn tag_space(&self) -> &TagSpace {
        &self.space
    }

    fn decode_features(&self, feats: &[Vec<String>]) -> Vec<usize> {
        let em = emissions(self.space.len(), feats, |f| self.weights.get(f).map(Vec::as_slice));
        decode_indices(&self.space, &em, Some(&self.transitions))
    }

    pub fn tag(&self, tokens: &[String]) -> Vec<BioLabel> {
        self.decode_features(&sentence_features(tokens))
            .into_iter()
            .map(|i| self.space.tag(i).clone())
            .collect()
    }

    /// Little-endian payload: tag count, transition table, then features in
    /// sorted order with their weight rows. Zero rows are dropped.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.space.len();
        let mut out = Vec::new();
        out.extend_from_slice(&(n as u32).to_le_bytes());
        for v in &self.transitions.scores {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let mut names: Vec<&String> = self
            .weights
            .iter()
            .filter(|(_, w)| w.iter().any(|v| *v != 0.0))
            .map(|(k, _)| k)
            .collect();
        names.sort();
        out.extend_from_slice(&(names.len() as u32).to_le_bytes());
        for name in names {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            for v in &self.weights[name] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(schema: &LabelSchema, bytes: &[u8]) -> Result<Self, BackendError> {
        let space = TagSpace::new(schema);
        let mut r = Reader { buf: bytes, pos: 0 };
        let n = r.u32()? as usize;
        if n != space.len() {
            return Err(BackendError::Protocol(format!(
                "payload has {n} tags, schema needs {}",
                space.len()
            )));
        }
        let mut transitions = Transitions::zeros(n);
        for v in transitions.scores.iter_mut() {
            *v = r.f64()?;
        }
        let count = r.u32()? as usize;
        let mut weights = HashMap::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| BackendError::Protocol("feature name is not UTF-8".into()))?;
            let row = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
            weights.insert(name, row);
        }
        if r.pos != bytes.len() {
            return Err(BackendError::Protocol("trailing bytes in perceptron payload".into()));
        }
        Ok(Self {
            space,
            weights,
            transitions,
        })
    }
}

fn emissions<'a>(n: usize, feats: &[Vec<String>], lookup: impl Fn(&str) -> Option<&'a [f64]>) -> Vec<f64> {
    let mut em = vec![0.0; feats.len() * n];
    for (t, fs) in feats.iter().enumerate() {
        let row = &mut em[t * n..(t + 1) * n];
        for f in fs {
            if let Some(w) = lookup(f) {
                for (r, v) in row.iter_mut().zip(w) {
                    *r += v;
                }
            }
        }
    }
    em
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], BackendError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| BackendError::Protocol("truncated perceptron payload".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, BackendError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, BackendError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Weights plus the running sums needed for averaging (`avg = w - u / c`).
struct Trainer {
    space: TagSpace,
    weights: HashMap<String, (Vec<f64>, Vec<f64>)>,
    trans: Vec<f64>,
    trans_acc: Vec<f64>,
    step: f64,
}

impl Trainer {
    fn new(space: TagSpace) -> Self {
        let n = space.len();
        Self {
            space,
            weights: HashMap::new(),
            trans: vec![0.0; (n + 1) * n],
            trans_acc: vec![0.0; (n + 1) * n],
            step: 1.0,
        }
    }

    fn decode(&self, feats: &[Vec<String>], transitions: &mut Transitions) -> Vec<usize> {
        let em = emissions(self.space.len(), feats, |f| self.weights.get(f).map(|(w, _)| w.as_slice()));
        transitions.scores.copy_from_slice(&self.trans);
        decode_indices(&self.space, &em, Some(transitions))
    }

    fn averaged(&self) -> PerceptronModel {
        let n = self.space.len();
        let c = self.step;
        let avg = |w: &[f64], u: &[f64]| -> Vec<f64> { w.iter().zip(u).map(|(w, u)| w - u / c).collect() };
        PerceptronModel {
            space: self.space.clone(),
            weights: self
                .weights
                .iter()
                .map(|(k, (w, u))| (k.clone(), avg(w, u)))
                .collect(),
            transitions: Transitions {
                n_tags: n,
                scores: avg(&self.trans, &self.trans_acc),
            },
        }
    }

    fn bump_feature(&mut self, feat: &str, tag: usize, delta: f64) {
        let n = self.space.len();
        let (w, u) = self
            .weights
            .entry(feat.to_string())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        w[tag] += delta;
        u[tag] += self.step * delta;
    }

    fn bump_transition(&mut self, prev: Option<usize>, cur: usize, delta: f64) {
        let n = self.space.len();
        let idx = prev.unwrap_or(n) * n + cur;
        self.trans[idx] += delta;
        self.trans_acc[idx] += self.step * delta;
    }

    fn update(&mut self, feats: &[Vec<String>], gold: &[usize], pred: &[usize]) {
        for t in 0..gold.len() {
            if gold[t] != pred[t] {
                for f in &feats[t] {
                    self.bump_feature(f, gold[t], 1.0);
                    self.bump_feature(f, pred[t], -1.0);
                }
            }
            let gp = t.checked_sub(1).map(|p| gold[p]);
            let pp = t.checked_sub(1).map(|p| pred[p]);
            if (gp, gold[t]) != (pp, pred[t]) {
                self.bump_transition(gp, gold[t], 1.0);
                self.bump_transition(pp, pred[t], -1.0);
            }
        }
    }
}

/// Micro-F1 of `model` on `dev`, 0 when there are no entity tokens at all.
fn dev_micro_f1(model: &PerceptronModel, schema: &LabelSchema, dev: &[TrainingSentence]) -> f64 {
    let gold: Vec<Vec<BioLabel>> = dev.iter().map(|s| s.labels.clone()).collect();
    let pred: Vec<Vec<BioLabel>> = dev.iter().map(|s| model.tag(&s.tokens)).collect();
    token_confusion(&gold, &pred, schema)
        .map(|m| token_prf(&m).micro.f1)
        .unwrap_or(0.0)
}

/// Trains a perceptron model. Shuffling uses a ChaCha stream keyed by
/// `(seed, epoch)`.
pub fn train_perceptron(
    schema: &LabelSchema,
    train: &[TrainingSentence],
    dev: &[TrainingSentence],
    hyper: &HyperParams,
) -> Result<(PerceptronModel, Vec<f64>), BackendError> {
    hyper.validate()?;
    check_training_data(schema, train, dev)?;
    let space = TagSpace::new(schema);
    let max_len = hyper.max_sequence_length_tokens;
    let train: Vec<TrainingSentence> = train.iter().map(|s| s.truncated(max_len)).collect();
    let dev: Vec<TrainingSentence> = dev.iter().map(|s| s.truncated(max_len)).collect();
    let feats: Vec<Vec<Vec<String>>> = train.iter().map(|s| sentence_features(&s.tokens)).collect();
    let gold: Vec<Vec<usize>> = train
        .iter()
        .map(|s| {
            s.labels
                .iter()
                .map(|l| space.index_of(l).expect("label checked against schema"))
                .collect()
        })
        .collect();

    let mut scratch = Transitions::zeros(space.len());
    let mut trainer = Trainer::new(space);
    let mut dev_f1 = Vec::with_capacity(hyper.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..hyper.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut mistakes = 0usize;
        for &i in &order {
            if !gold[i].is_empty() {
                let pred = trainer.decode(&feats[i], &mut scratch);
                if pred != gold[i] {
                    mistakes += 1;
                    trainer.update(&feats[i], &gold[i], &pred);
                }
            }
            trainer.step += 1.0;
        }
        let f1 = dev_micro_f1(&trainer.averaged(), schema, &dev);
        info!("epoch {}: {mistakes} mistaken sentences, dev micro-F1 {f1:.4}", epoch + 1);
        dev_f1.push(f1);
    }
    Ok((trainer.averaged(), dev_f1))
}

#[derive(Clone, Copy, Debug, Default)]
pub struct PerceptronBackend;

impl TaggerBackend for PerceptronBackend {
    fn id(&self) -> String {
        BACKEND_ID.to_string()
    }

    fn train(
        &mut self,
        schema: &LabelSchema,
        train: &[TrainingSentence],
        dev: &[TrainingSentence],
        hyper: &HyperParams,
    ) -> Result<ModelHandle, BackendError> {
        let (model, dev_f1) = train_perceptron(schema, train, dev, hyper)?;
        Ok(ModelHandle {
            backend_id: self.id(),
            schema: schema.clone(),
            parameters: model.to_bytes(),
            training_meta: TrainingMeta {
                hyper: hyper.clone(),
                corpus_fingerprint: fingerprint_sentences(train),
                dev_f1_per_epoch: dev_f1,
            },
        })
    }

    fn predict(
        &mut self,
        model: &ModelHandle,
        schema: &LabelSchema,
        sentences: &[Vec<String>],
    ) -> Result<Vec<Vec<BioLabel>>, BackendError> {
        if model.backend_id != BACKEND_ID {
            return Err(BackendError::WrongBackend {
                model: model.backend_id.clone(),
                backend: self.id(),
            });
        }
        if model.parameters.is_empty() {
            return Err(BackendError::Untrained);
        }
        model.ensure_schema(schema)?;
        if sentences.is_empty() {
            return Ok(Vec::new());
        }
        let weights = PerceptronModel::from_bytes(schema, &model.parameters)?;
        let max_len = model.training_meta.hyper.max_sequence_length_tokens;
        Ok(sentences
            .iter()
            .map(|tokens| {
                if tokens.len() > max_len {
                    warn!(
                        "sentence of {} tokens truncated to {max_len}; tail labeled O",
                        tokens.len()
                    );
                    let mut labels = weights.tag(&tokens[..max_len]);
                    labels.resize(tokens.len(), BioLabel::O);
                    labels
                } else {
                    weights.tag(tokens)
                }
            })
            .collect())
    }
}
