//! Token-classifier contract and the backends implementing it.

pub mod conformance;
pub mod external;
pub mod model_file;
pub mod perceptron;
pub mod viterbi;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::LabelSchema;
use crate::tokenize::{is_well_formed, BioLabel};

pub use external::ExternalBackend;
pub use model_file::{load_model, save_model, ModelFileError};
pub use perceptron::PerceptronBackend;
pub use viterbi::{viterbi_decode, TagSpace};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("label {0:?} is outside the schema")]
    LabelOutsideSchema(String),
    #[error("invalid training sentence: {0}")]
    InvalidSentence(String),
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperParams(String),
    #[error("backend unreachable: {0}")]
    Unreachable(String),
    #[error("untrained model")]
    Untrained,
    #[error("schema mismatch: model trained for {expected:?}, called with {found:?}")]
    SchemaMismatch { expected: String, found: String },
    #[error("model belongs to backend {model:?}, not {backend:?}")]
    WrongBackend { model: String, backend: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("backend error {code}: {message}")]
    Remote { code: String, message: String },
    #[error(transparent)]
    ModelFile(#[from] ModelFileError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl BackendError {
    /// Stable machine-readable code, also used on the wire.
    pub fn code(&self) -> &str {
        match self {
            BackendError::EmptyTrainingSet => "empty_training_set",
            BackendError::LabelOutsideSchema(_) => "label_outside_schema",
            BackendError::InvalidSentence(_) => "invalid_sentence",
            BackendError::InvalidHyperParams(_) => "invalid_hyper",
            BackendError::Unreachable(_) => "unreachable",
            BackendError::Untrained => "untrained",
            BackendError::SchemaMismatch { .. } => "schema_mismatch",
            BackendError::WrongBackend { .. } => "wrong_backend",
            BackendError::Protocol(_) => "protocol",
            BackendError::Remote { code, .. } => code,
            BackendError::ModelFile(_) => "model_file",
            BackendError::Io(_) => "io",
        }
    }
}

/// Training hyperparameters. The perceptron reads `epochs`,
/// `max_sequence_length_tokens` and `seed`; external backends get all fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    pub train_batch_size: usize,
    pub eval_batch_size: usize,
    pub max_sequence_length_tokens: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            train_batch_size: 64,
            eval_batch_size: 16,
            max_sequence_length_tokens: 256,
            dropout: 0.2,
            learning_rate: 5e-5,
            epochs: 10,
            seed: 0,
        }
    }
}

impl HyperParams {
    /// Defaults with the per-subtask epoch count (10 for subtask1, 20 for subtask2).
    pub fn for_schema(schema: &LabelSchema) -> Self {
        Self {
            epochs: if schema.name == "subtask2" { 20 } else { 10 },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |m: &str| Err(BackendError::InvalidHyperParams(m.to_string()));
        if self.train_batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be positive");
        }
        if self.max_sequence_length_tokens == 0 {
            return bad("max_sequence_length_tokens must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0,1)");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSentence {
    pub tokens: Vec<String>,
    pub labels: Vec<BioLabel>,
}

impl TrainingSentence {
    pub fn new(tokens: Vec<String>, labels: Vec<BioLabel>) -> Self {
        Self { tokens, labels }
    }

    /// Keeps the first `max_len` tokens; a BIO prefix stays well-formed.
    pub fn truncated(&self, max_len: usize) -> TrainingSentence {
        let n = self.tokens.len().min(max_len);
        TrainingSentence {
            tokens: self.tokens[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub hyper: HyperParams,
    pub corpus_fingerprint: String,
    pub dev_f1_per_epoch: Vec<f64>,
}

/// A trained model: which backend owns it, its schema and an opaque payload.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelHandle {
    pub backend_id: String,
    pub schema: LabelSchema,
    pub parameters: Vec<u8>,
    pub training_meta: TrainingMeta,
}

impl ModelHandle {
    pub fn ensure_schema(&self, schema: &LabelSchema) -> Result<(), BackendError> {
        if &self.schema != schema {
            return Err(BackendError::SchemaMismatch {
                expected: self.schema.name.clone(),
                found: schema.name.clone(),
            });
        }
        Ok(())
    }
}

pub trait TaggerBackend {
    fn id(&self) -> String;

    fn train(
        &mut self,
        schema: &LabelSchema,
        train: &[TrainingSentence],
        dev: &[TrainingSentence],
        hyper: &HyperParams,
    ) -> Result<ModelHandle, BackendError>;

    /// One well-formed label per input token.
    fn predict(
        &mut self,
        model: &ModelHandle,
        schema: &LabelSchema,
        sentences: &[Vec<String>],
    ) -> Result<Vec<Vec<BioLabel>>, BackendError>;
}

/// Shared precondition checks for `train`.
pub fn check_training_data(schema: &LabelSchema, train: &[TrainingSentence], dev: &[TrainingSentence]) -> Result<(), BackendError> {
    if train.is_empty() {
        return Err(BackendError::EmptyTrainingSet);
    }
    for (i, s) in train.iter().chain(dev).enumerate() {
        if s.tokens.len() != s.labels.len() {
            return Err(BackendError::InvalidSentence(format!(
                "sentence {i}: {} tokens but {} labels",
                s.tokens.len(),
                s.labels.len()
            )));
        }
        for l in &s.labels {
            if let Some(x) = l.entity() {
                if !schema.contains(x) {
                    return Err(BackendError::LabelOutsideSchema(x.to_string()));
                }
            }
        }
        if !is_well_formed(&s.labels) {
            return Err(BackendError::InvalidSentence(format!("sentence {i}: ill-formed BIO sequence")));
        }
    }
    Ok(())
}

/// SHA-256 over the tokens and labels, in order.
pub fn fingerprint_sentences(sentences: &[TrainingSentence]) -> String {
    let mut h = Sha256::new();
    for s in sentences {
        for (t, l) in s.tokens.iter().zip(&s.labels) {
            h.update(t.as_bytes());
            h.update(b"\t");
            h.update(l.to_string().as_bytes());
            h.update(b"\n");
        }
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}
