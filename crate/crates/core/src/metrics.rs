//! Loss and evaluation metrics shared by the encoder, decoder and labeler.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const BCE_EPS: f64 = 1e-12;

/// Mean binary cross-entropy with probabilities clamped to [ε, 1-ε].
pub fn bce_loss(p: &[f64], y: &[f64]) -> Result<f64> {
    if p.len() != y.len() {
        return Err(Error::invalid(format!("bce_loss: {} probabilities vs {} targets", p.len(), y.len())));
    }
    if p.is_empty() {
        return Err(Error::invalid("bce_loss: empty input"));
    }
    let sum: f64 = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            y * p.ln() + (1.0 - y) * (1.0 - p).ln()
        })
        .sum();
    Ok(-sum / p.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        ConfusionMatrix { tp, fp, fn_, tn }
    }

    pub fn from_predictions(predicted: &[bool], truth: &[bool]) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(Error::invalid(format!(
                "{} predictions vs {} labels",
                predicted.len(),
                truth.len()
            )));
        }
        let mut cm = ConfusionMatrix::default();
        for (&p, &t) in predicted.iter().zip(truth) {
            match (p, t) {
                (true, true) => cm.tp += 1,
                (true, false) => cm.fp += 1,
                (false, true) => cm.fn_ += 1,
                (false, false) => cm.tn += 1,
            }
        }
        Ok(cm)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    /// Also called sensitivity.
    pub fn recall(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> Option<f64> {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn metrics(&self) -> ClassificationMetrics {
        ClassificationMetrics {
            precision: self.precision(),
            recall: self.recall(),
            specificity: self.specificity(),
            accuracy: self.accuracy(),
        }
    }
}

impl std::ops::AddAssign for ConfusionMatrix {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

/// Metrics derived from a confusion matrix; `None` where the denominator is zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub specificity: Option<f64>,
    pub accuracy: Option<f64>,
}

pub fn classification_metrics(cm: &ConfusionMatrix) -> ClassificationMetrics {
    cm.metrics()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    /// (recall, precision) from the highest threshold down.
    pub points: Vec<(f64, f64)>,
    pub area: f64,
}

/// Precision-recall curve over all distinct score thresholds. Equal scores
/// enter together; the area is Σ Δrecall · precision.
pub fn pr_auc(scores: &[f64], truth: &[bool]) -> Result<PrCurve> {
    if scores.len() != truth.len() {
        return Err(Error::invalid(format!("{} scores vs {} labels", scores.len(), truth.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("pr_auc: NaN score"));
    }
    let positives = truth.iter().filter(|&&t| t).count();
    if positives == 0 {
        return Err(Error::Undefined("pr_auc: no positive samples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if truth[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        points.push((recall, precision));
    }
    Ok(PrCurve { points, area })
}

/// Fraction of samples whose thresholded predictions match every label bit.
pub fn exact_match_accuracy(probs: &[Vec<f64>], labels: &[Vec<u8>], threshold: f64) -> Result<f64> {
    check_multilabel(probs, labels)?;
    let hits = probs
        .iter()
        .zip(labels)
        .filter(|(p, y)| p.iter().zip(y.iter()).all(|(&p, &y)| (p >= threshold) == (y == 1)))
        .count();
    Ok(hits as f64 / probs.len() as f64)
}

/// Fraction of individual label bits predicted correctly.
pub fn per_bit_accuracy(probs: &[Vec<f64>], labels: &[Vec<u8>], threshold: f64) -> Result<f64> {
    check_multilabel(probs, labels)?;
    let mut hits = 0usize;
    let mut total = 0usize;
    for (p, y) in probs.iter().zip(labels) {
        for (&p, &y) in p.iter().zip(y) {
            hits += usize::from((p >= threshold) == (y == 1));
            total += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

/// Micro-averaged PR-AUC over all label bits.
pub fn multilabel_pr_auc(probs: &[Vec<f64>], labels: &[Vec<u8>]) -> Result<PrCurve> {
    check_multilabel(probs, labels)?;
    let scores: Vec<f64> = probs.iter().flatten().copied().collect();
    let truth: Vec<bool> = labels.iter().flatten().map(|&y| y == 1).collect();
    pr_auc(&scores, &truth)
}

fn check_multilabel(probs: &[Vec<f64>], labels: &[Vec<u8>]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::invalid("no samples"));
    }
    if probs.len() != labels.len() || probs.iter().zip(labels).any(|(p, y)| p.len() != y.len()) {
        return Err(Error::invalid("prediction and label shapes differ"));
    }
    Ok(())
}
