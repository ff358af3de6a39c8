//! Punctuation accuracy, per-class and end-of-sentence F1, and reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{PunctClass, NUM_CLASSES};
use crate::features::AcousticMode;
use crate::train::{self, Checkpoint, Example, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{preds} predictions for {golds} gold labels")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("checkpoint expects {expected}-wide features, {mode:?} mode gives {got}")]
    ModeMismatch { mode: AcousticMode, expected: usize, got: usize },
    #[error("no runs to aggregate")]
    NoRuns,
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Counts indexed `[gold][predicted]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn from_pairs(preds: &[PunctClass], golds: &[PunctClass]) -> Result<Self, EvalError> {
        let mut m = Self::default();
        m.add(preds, golds)?;
        Ok(m)
    }

    pub fn add(&mut self, preds: &[PunctClass], golds: &[PunctClass]) -> Result<(), EvalError> {
        if preds.len() != golds.len() {
            return Err(EvalError::LengthMismatch { preds: preds.len(), golds: golds.len() });
        }
        for (p, g) in preds.iter().zip(golds) {
            self.counts[g.index()][p.index()] += 1;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn gold_count(&self, c: PunctClass) -> u64 {
        self.counts[c.index()].iter().sum()
    }

    pub fn pred_count(&self, c: PunctClass) -> u64 {
        self.counts.iter().map(|row| row[c.index()]).sum()
    }
}

pub fn confusion(preds: &[PunctClass], golds: &[PunctClass]) -> Result<ConfusionMatrix, EvalError> {
    ConfusionMatrix::from_pairs(preds, golds)
}

/// Fraction of gold-punctuated tokens predicted exactly; `None` when there
/// are no such tokens.
pub fn punct_accuracy(m: &ConfusionMatrix) -> Option<f64> {
    let punct: Vec<PunctClass> = PunctClass::ALL.into_iter().filter(|&c| c != PunctClass::None).collect();
    let total: u64 = punct.iter().map(|&c| m.gold_count(c)).sum();
    if total == 0 {
        return None;
    }
    let correct: u64 = punct.iter().map(|&c| m.counts[c.index()][c.index()]).sum();
    Some(correct as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: u64,
    pub predicted: u64,
    pub support: u64,
}

impl Score {
    /// Zero denominators give zero.
    pub fn from_counts(tp: u64, predicted: u64, support: u64) -> Self {
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Self { precision, recall, f1, true_positives: tp, predicted, support }
    }
}

/// One-vs-rest scores in class order.
pub fn class_scores(m: &ConfusionMatrix) -> [Score; NUM_CLASSES] {
    PunctClass::ALL.map(|c| Score::from_counts(m.counts[c.index()][c.index()], m.pred_count(c), m.gold_count(c)))
}

/// Binary score with the three sentence-final marks as one positive class.
pub fn eos_score(preds: &[PunctClass], golds: &[PunctClass]) -> Result<Score, EvalError> {
    if preds.len() != golds.len() {
        return Err(EvalError::LengthMismatch { preds: preds.len(), golds: golds.len() });
    }
    let mut tp = 0;
    let mut predicted = 0;
    let mut support = 0;
    for (p, g) in preds.iter().zip(golds) {
        predicted += p.is_eos() as u64;
        support += g.is_eos() as u64;
        tp += (p.is_eos() && g.is_eos()) as u64;
    }
    Ok(Score::from_counts(tp, predicted, support))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: String,
    #[serde(flatten)]
    pub score: Score,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub punctuation_accuracy: Option<f64>,
    pub eos: Score,
    pub classes: Vec<ClassReport>,
    pub tokens: u64,
    pub punctuated_tokens: u64,
    pub confusion: ConfusionMatrix,
    pub seed: Option<u64>,
    pub checkpoint: Option<String>,
}

impl EvalReport {
    pub fn class(&self, c: PunctClass) -> &Score {
        &self.classes[c.index()].score
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Fixed-width percentages: Accuracy, EoS, Period, Question mark,
    /// Exclamation mark, Comma.
    pub fn table(&self) -> String {
        let row = [
            self.punctuation_accuracy,
            Some(self.eos.f1),
            Some(self.class(PunctClass::Period).f1),
            Some(self.class(PunctClass::QuestionMark).f1),
            Some(self.class(PunctClass::ExclamationMark).f1),
            Some(self.class(PunctClass::Comma).f1),
        ];
        let mut out = table_header();
        for v in row {
            match v {
                Some(v) => write!(out, "{:>18.1}", 100.0 * v).unwrap(),
                None => write!(out, "{:>18}", "n/a").unwrap(),
            }
        }
        out.push('\n');
        out
    }
}

const COLUMNS: [&str; 6] = ["Accuracy", "EoS", "Period", "Question mark", "Exclamation mark", "Comma"];

fn table_header() -> String {
    let mut out = String::new();
    for c in COLUMNS {
        write!(out, "{c:>18}").unwrap();
    }
    out.push('\n');
    out
}

/// Scores predictions against gold labels, sequence by sequence.
pub fn score(preds: &[Vec<PunctClass>], golds: &[Vec<PunctClass>]) -> Result<EvalReport, EvalError> {
    if preds.len() != golds.len() {
        return Err(EvalError::LengthMismatch { preds: preds.len(), golds: golds.len() });
    }
    let mut m = ConfusionMatrix::default();
    for (p, g) in preds.iter().zip(golds) {
        m.add(p, g)?;
    }
    let flat_p: Vec<PunctClass> = preds.concat();
    let flat_g: Vec<PunctClass> = golds.concat();
    let eos = eos_score(&flat_p, &flat_g)?;
    let classes = PunctClass::ALL
        .iter()
        .zip(class_scores(&m))
        .map(|(c, score)| ClassReport { class: c.name().to_string(), score })
        .collect();
    Ok(EvalReport {
        punctuation_accuracy: punct_accuracy(&m),
        eos,
        classes,
        tokens: m.total(),
        punctuated_tokens: m.total() - m.gold_count(PunctClass::None),
        confusion: m,
        seed: None,
        checkpoint: None,
    })
}

/// Eval-mode inference of `ckpt` over `examples`, then scoring.
pub fn evaluate(ckpt: &Checkpoint, examples: &[Example], mode: AcousticMode) -> Result<EvalReport, EvalError> {
    if mode.feature_dim() != ckpt.model.input_dim {
        return Err(EvalError::ModeMismatch { mode, expected: ckpt.model.input_dim, got: mode.feature_dim() });
    }
    let preds = train::predict(&ckpt.params, &ckpt.model, examples, 64)?;
    let golds: Vec<Vec<PunctClass>> = examples.iter().map(|e| e.labels.clone()).collect();
    let mut report = score(&preds, &golds)?;
    report.seed = Some(ckpt.train.seed);
    report.checkpoint = Some(format!("step-{}-{:016x}", ckpt.step, ckpt.rng_state()));
    Ok(report)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation over runs.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub runs: usize,
    pub punctuation_accuracy: Option<MeanStd>,
    pub eos_f1: MeanStd,
    /// Per-class F1 in class order.
    pub class_f1: Vec<MeanStd>,
}

impl AggregateReport {
    pub fn class_f1(&self, c: PunctClass) -> MeanStd {
        self.class_f1[c.index()]
    }

    pub fn table(&self) -> String {
        let mut cells = vec![self.punctuation_accuracy, Some(self.eos_f1)];
        for c in [PunctClass::Period, PunctClass::QuestionMark, PunctClass::ExclamationMark, PunctClass::Comma] {
            cells.push(Some(self.class_f1(c)));
        }
        let mut out = table_header();
        for v in cells {
            match v {
                Some(v) => write!(out, "{:>18}", format!("{:.1} ({:.1})", 100.0 * v.mean, 100.0 * v.std)).unwrap(),
                None => write!(out, "{:>18}", "n/a").unwrap(),
            }
        }
        out.push('\n');
        out
    }
}

/// Mean and spread of metrics across runs. Accuracy is aggregated only
/// when every run defines it.
pub fn aggregate(reports: &[EvalReport]) -> Result<AggregateReport, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::NoRuns);
    }
    let acc: Option<Vec<f64>> = reports.iter().map(|r| r.punctuation_accuracy).collect();
    let eos: Vec<f64> = reports.iter().map(|r| r.eos.f1).collect();
    let class_f1 = PunctClass::ALL
        .iter()
        .map(|&c| MeanStd::of(&reports.iter().map(|r| r.class(c).f1).collect::<Vec<_>>()))
        .collect();
    Ok(AggregateReport { runs: reports.len(), punctuation_accuracy: acc.map(|a| MeanStd::of(&a)), eos_f1: MeanStd::of(&eos), class_f1 })
}
