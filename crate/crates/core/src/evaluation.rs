//! Token- and sentence-level P/R/F1, confusion matrices, and the paired
//! bootstrap significance test.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotatedSpan, LabelSchema};
use crate::error::{Error, Result};
use crate::tokenize::{BioLabel, SentenceSpan};

pub const NO_LABEL: &str = "no_label";

/// Rows are gold, columns predicted; the last row/column is `no_label`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(schema: &LabelSchema) -> Self {
        let mut labels = schema.labels.clone();
        labels.push(NO_LABEL.to_string());
        let n = labels.len();
        Self {
            labels,
            counts: vec![vec![0; n]; n],
        }
    }

    /// Builds a matrix from raw counts in schema order (+ `no_label`).
    pub fn from_counts(schema: &LabelSchema, counts: Vec<Vec<u64>>) -> Result<Self> {
        let mut m = Self::zeros(schema);
        let n = m.labels.len();
        if counts.len() != n || counts.iter().any(|r| r.len() != n) {
            return Err(Error::Argument(format!("confusion counts must be {n}x{n}")));
        }
        m.counts = counts;
        Ok(m)
    }

    fn entity_count(&self) -> usize {
        self.labels.len() - 1
    }

    fn index(&self, entity: Option<&str>) -> Result<usize> {
        match entity {
            None => Ok(self.entity_count()),
            Some(x) => self.labels[..self.entity_count()]
                .iter()
                .position(|l| l == x)
                .ok_or_else(|| Error::Argument(format!("label {x:?} not in schema"))),
        }
    }

    pub fn add(&mut self, gold: Option<&str>, pred: Option<&str>) -> Result<()> {
        let (g, p) = (self.index(gold)?, self.index(pred)?);
        self.counts[g][p] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        self.counts.iter().map(|r| r[j]).sum()
    }

    /// Header row holds predicted labels; the first column holds gold labels.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("gold\\predicted");
        for l in &self.labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (l, row) in self.labels.iter().zip(&self.counts) {
            out.push_str(l);
            for c in row {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Counts one cell per token, collapsing `B-x`/`I-x` to `x` and `O` to `no_label`.
pub fn token_confusion(gold: &[Vec<BioLabel>], pred: &[Vec<BioLabel>], schema: &LabelSchema) -> Result<ConfusionMatrix> {
    if gold.len() != pred.len() {
        return Err(Error::Argument(format!(
            "{} gold sentences vs {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    let mut m = ConfusionMatrix::zeros(schema);
    for (i, (g, p)) in gold.iter().zip(pred).enumerate() {
        if g.len() != p.len() {
            return Err(Error::Argument(format!(
                "sentence {i}: {} gold tokens vs {} predicted",
                g.len(),
                p.len()
            )));
        }
        for (g, p) in g.iter().zip(p) {
            m.add(g.entity(), p.entity())?;
        }
    }
    Ok(m)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(tp: u64, predicted: u64, gold: u64) -> Self {
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self { precision, recall, f1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_label: IndexMap<String, Prf>,
    pub micro: Prf,
    #[serde(rename = "macro")]
    pub macro_avg: Prf,
    pub support: IndexMap<String, u64>,
}

/// Per-label, micro (pooled over entity labels) and macro P/R/F1.
pub fn token_prf(matrix: &ConfusionMatrix) -> MetricsReport {
    let k = matrix.entity_count();
    let mut per_label = IndexMap::new();
    let mut support = IndexMap::new();
    let (mut tp, mut predicted, mut gold) = (0, 0, 0);
    for i in 0..k {
        let d = matrix.counts[i][i];
        let (c, r) = (matrix.col_sum(i), matrix.row_sum(i));
        tp += d;
        predicted += c;
        gold += r;
        per_label.insert(matrix.labels[i].clone(), Prf::from_counts(d, c, r));
        support.insert(matrix.labels[i].clone(), r);
    }
    let mean = |f: fn(&Prf) -> f64| {
        if k == 0 {
            0.0
        } else {
            per_label.values().map(f).sum::<f64>() / k as f64
        }
    };
    let macro_avg = Prf {
        precision: mean(|p| p.precision),
        recall: mean(|p| p.recall),
        f1: mean(|p| p.f1),
    };
    MetricsReport {
        micro: Prf::from_counts(tp, predicted, gold),
        macro_avg,
        per_label,
        support,
    }
}

pub enum SentenceEvidence<'a> {
    /// Gold character spans of the post.
    Spans(&'a [AnnotatedSpan]),
    /// Predicted per-token labels of this sentence.
    Labels(&'a [BioLabel]),
}

/// Collapses a sentence to one class.
///
/// Gold: the label of the span covering the most sentence tokens. Predicted:
/// the most frequent entity type among the tokens. `no_label` when nothing
/// applies; ties go to the label earlier in the schema.
pub fn sentence_labels(sentence: &SentenceSpan, evidence: SentenceEvidence<'_>, schema: &LabelSchema) -> String {
    let mut best = vec![0usize; schema.labels.len()];
    match evidence {
        SentenceEvidence::Spans(spans) => {
            for s in spans {
                if let Some(k) = schema.label_index(&s.label) {
                    let covered = sentence.tokens.iter().filter(|t| t.overlaps(s.start, s.end)).count();
                    best[k] = best[k].max(covered);
                }
            }
        }
        SentenceEvidence::Labels(labels) => {
            for l in labels {
                if let Some(k) = l.entity().and_then(|x| schema.label_index(x)) {
                    best[k] += 1;
                }
            }
        }
    }
    let mut winner = None;
    for (k, &n) in best.iter().enumerate() {
        if n > 0 && winner.is_none_or(|w: usize| n > best[w]) {
            winner = Some(k);
        }
    }
    winner.map_or_else(|| NO_LABEL.to_string(), |k| schema.labels[k].clone())
}

pub fn sentence_confusion(gold: &[String], pred: &[String], schema: &LabelSchema) -> Result<ConfusionMatrix> {
    if gold.len() != pred.len() {
        return Err(Error::Argument(format!("{} gold classes vs {} predicted", gold.len(), pred.len())));
    }
    let class = |c: &str| if c == NO_LABEL { None } else { Some(c.to_string()) };
    let mut m = ConfusionMatrix::zeros(schema);
    for (g, p) in gold.iter().zip(pred) {
        m.add(class(g).as_deref(), class(p).as_deref())?;
    }
    Ok(m)
}

pub fn sentence_prf(gold: &[String], pred: &[String], schema: &LabelSchema) -> Result<MetricsReport> {
    Ok(token_prf(&sentence_confusion(gold, pred, schema)?))
}

/// One resampling unit (a sentence) scored by both systems.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootstrapUnit {
    pub gold: Vec<BioLabel>,
    pub pred_a: Vec<BioLabel>,
    pub pred_b: Vec<BioLabel>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootstrapMetric {
    /// Token-level micro-F1 over entity labels.
    #[default]
    TokenMicroF1,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub observed_delta: f64,
    pub resamples: usize,
    pub p_value: f64,
    pub seed: u64,
}

/// (true positives, predicted positives, gold positives)
#[derive(Clone, Copy, Debug, Default)]
struct Counts {
    tp: u64,
    predicted: u64,
    gold: u64,
}

impl Counts {
    fn of(gold: &[BioLabel], pred: &[BioLabel]) -> Self {
        let mut c = Counts::default();
        for (g, p) in gold.iter().zip(pred) {
            let (g, p) = (g.entity(), p.entity());
            c.gold += g.is_some() as u64;
            c.predicted += p.is_some() as u64;
            c.tp += (g.is_some() && g == p) as u64;
        }
        c
    }

    fn add(&mut self, o: &Counts) {
        self.tp += o.tp;
        self.predicted += o.predicted;
        self.gold += o.gold;
    }

    fn f1(&self) -> f64 {
        Prf::from_counts(self.tp, self.predicted, self.gold).f1
    }
}

/// Paired bootstrap test of system A over system B.
///
/// The p-value is `(1 + #{i : delta_i >= 2 * observed_delta}) / (B + 1)`.
/// Resample `i` draws from a ChaCha stream keyed by `(seed, i)`, so the
/// result does not depend on how resamples are scheduled across threads.
pub fn paired_bootstrap(
    units: &[BootstrapUnit],
    metric: BootstrapMetric,
    resamples: usize,
    seed: u64,
) -> Result<BootstrapResult> {
    let BootstrapMetric::TokenMicroF1 = metric;
    if units.is_empty() {
        return Err(Error::Argument("bootstrap needs at least one unit".into()));
    }
    if resamples == 0 {
        return Err(Error::Argument("resample count must be positive".into()));
    }
    let mut per_unit = Vec::with_capacity(units.len());
    for (i, u) in units.iter().enumerate() {
        if u.gold.len() != u.pred_a.len() || u.gold.len() != u.pred_b.len() {
            return Err(Error::Argument(format!("unit {i}: label sequences differ in length")));
        }
        per_unit.push((Counts::of(&u.gold, &u.pred_a), Counts::of(&u.gold, &u.pred_b)));
    }
    let delta = |idx: &mut dyn Iterator<Item = usize>| {
        let (mut a, mut b) = (Counts::default(), Counts::default());
        for i in idx {
            a.add(&per_unit[i].0);
            b.add(&per_unit[i].1);
        }
        a.f1() - b.f1()
    };
    let observed = delta(&mut (0..units.len()));
    let threshold = 2.0 * observed;
    let n = units.len();
    let hits = (0..resamples)
        .into_par_iter()
        .filter(|&i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            delta(&mut (0..n).map(|_| rng.gen_range(0..n))) >= threshold
        })
        .count();
    Ok(BootstrapResult {
        observed_delta: observed,
        resamples,
        p_value: (1 + hits) as f64 / (resamples + 1) as f64,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenize::segment_sentences;

    fn l(s: &str) -> Vec<BioLabel> {
        s.split_whitespace().map(|x| x.parse().unwrap()).collect()
    }

    #[test]
    fn perfect_predictions_are_diagonal() {
        let schema = LabelSchema::subtask2();
        let gold = vec![l("B-population O B-outcome I-outcome"), l("O B-intervention")];
        let m = token_confusion(&gold, &gold, &schema).unwrap();
        for (i, row) in m.counts.iter().enumerate() {
            for (j, c) in row.iter().enumerate() {
                if i != j {
                    assert_eq!(*c, 0);
                }
            }
        }
        assert_eq!(m.total(), 6);
        let r = token_prf(&m);
        assert_eq!(r.micro.f1, 1.0);
    }

    #[test]
    fn single_miss() {
        let schema = LabelSchema::subtask1();
        let m = token_confusion(&[l("B-claim")], &[l("O")], &schema).unwrap();
        assert_eq!(m.counts[0][4], 1);
        assert_eq!(m.total(), 1);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let schema = LabelSchema::subtask1();
        assert!(token_confusion(&[l("O O")], &[l("O")], &schema).is_err());
        assert!(token_confusion(&[l("O")], &[], &schema).is_err());
        assert!(token_confusion(&[l("B-population")], &[l("O")], &schema).is_err());
    }

    #[test]
    fn all_outside_predictions_score_zero() {
        let schema = LabelSchema::subtask2();
        let gold = vec![l("B-population I-population B-outcome B-intervention")];
        let pred = vec![l("O O O O")];
        let r = token_prf(&token_confusion(&gold, &pred, &schema).unwrap());
        for p in r.per_label.values() {
            assert_eq!((p.precision, p.recall, p.f1), (0.0, 0.0, 0.0));
        }
        assert_eq!(r.micro.f1, 0.0);
    }

    #[test]
    fn csv_layout() {
        let schema = LabelSchema::new("t", vec!["a".into()]).unwrap();
        let m = ConfusionMatrix::from_counts(&schema, vec![vec![1, 2], vec![3, 4]]).unwrap();
        assert_eq!(m.to_csv(), "gold\\predicted,a,no_label\na,1,2\nno_label,3,4\n");
    }

    #[test]
    fn report_json_key_order() {
        let schema = LabelSchema::subtask2();
        let r = token_prf(&ConfusionMatrix::zeros(&schema));
        let s = serde_json::to_string(&r).unwrap();
        let keys = ["\"per_label\"", "\"population\"", "\"intervention\"", "\"outcome\"", "\"micro\"", "\"macro\"", "\"support\""];
        let pos: Vec<usize> = keys.iter().map(|k| s.find(k).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]), "{s}");
    }

    #[test]
    fn sentence_class_rules() {
        let schema = LabelSchema::subtask1();
        let s = segment_sentences("Is it gout or not?").remove(0);
        let spans = [AnnotatedSpan { start: 0, end: 18, label: "question".into() }];
        assert_eq!(sentence_labels(&s, SentenceEvidence::Spans(&spans), &schema), "question");
        assert_eq!(sentence_labels(&s, SentenceEvidence::Spans(&[]), &schema), NO_LABEL);
        assert_eq!(sentence_labels(&s, SentenceEvidence::Labels(&l("O O O O O")), &schema), NO_LABEL);
        let pred = l("B-claim I-claim I-claim B-per_exp I-per_exp");
        assert_eq!(sentence_labels(&s, SentenceEvidence::Labels(&pred), &schema), "claim");
        // tie: schema order
        let pred = l("B-per_exp I-per_exp B-claim I-claim O");
        assert_eq!(sentence_labels(&s, SentenceEvidence::Labels(&pred), &schema), "claim");
        // gold: larger overlap wins
        let spans = [
            AnnotatedSpan { start: 0, end: 5, label: "claim".into() },
            AnnotatedSpan { start: 6, end: 18, label: "per_exp".into() },
        ];
        assert_eq!(sentence_labels(&s, SentenceEvidence::Spans(&spans), &schema), "per_exp");
    }

    #[test]
    fn sentence_prf_examples() {
        let schema = LabelSchema::subtask1();
        let g: Vec<String> = ["claim", "question", NO_LABEL].map(String::from).to_vec();
        let r = sentence_prf(&g, &g, &schema).unwrap();
        assert_eq!(r.per_label["claim"].f1, 1.0);
        assert_eq!(r.per_label["question"].f1, 1.0);
        let g = vec!["question".to_string(); 3];
        let p = vec![NO_LABEL.to_string(); 3];
        assert_eq!(sentence_prf(&g, &p, &schema).unwrap().per_label["question"].recall, 0.0);
        assert!(sentence_prf(&g, &p[..2], &schema).is_err());
    }

    fn unit(gold: &str, a: &str, b: &str) -> BootstrapUnit {
        BootstrapUnit { gold: l(gold), pred_a: l(a), pred_b: l(b) }
    }

    #[test]
    fn bootstrap_identical_systems() {
        let units: Vec<_> = (0..20).map(|_| unit("B-claim O", "B-claim B-claim", "B-claim B-claim")).collect();
        let r = paired_bootstrap(&units, BootstrapMetric::TokenMicroF1, 500, 1).unwrap();
        assert_eq!(r.observed_delta, 0.0);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn bootstrap_dominant_system() {
        let units: Vec<_> = (0..100).map(|_| unit("B-claim I-claim", "B-claim I-claim", "O O")).collect();
        let r = paired_bootstrap(&units, BootstrapMetric::TokenMicroF1, 999, 3).unwrap();
        assert_eq!(r.observed_delta, 1.0);
        assert_eq!(r.p_value, 1.0 / 1000.0);
    }

    #[test]
    fn bootstrap_argument_errors() {
        assert!(paired_bootstrap(&[], BootstrapMetric::TokenMicroF1, 10, 1).is_err());
        let u = [unit("O", "O", "O")];
        assert!(paired_bootstrap(&u, BootstrapMetric::TokenMicroF1, 0, 1).is_err());
        let u = [unit("O O", "O", "O O")];
        assert!(paired_bootstrap(&u, BootstrapMetric::TokenMicroF1, 10, 1).is_err());
    }
}
