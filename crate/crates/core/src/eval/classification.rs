use serde::{Deserialize, Serialize};

use crate::data::AnomalyLabel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Two-class screening metrics, anomalous = positive.
///
/// Ratios whose denominator is zero are `None` rather than 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    #[serde(rename = "A", default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(rename = "P", default, skip_serializing_if = "Option::is_none")]
    pub precision: Option<f64>,
    #[serde(rename = "R", default, skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
    #[serde(rename = "F1", default, skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    #[serde(rename = "TP_pct", default, skip_serializing_if = "Option::is_none")]
    pub tp_pct: Option<f64>,
    #[serde(rename = "FP_pct", default, skip_serializing_if = "Option::is_none")]
    pub fp_pct: Option<f64>,
    pub counts: ConfusionCounts,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate: bool,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl PipelineReport {
    pub fn from_counts(counts: ConfusionCounts) -> Self {
        let ConfusionCounts { tp, fp, fn_, tn } = counts;
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            _ => None,
        };
        Self {
            accuracy: ratio(tp + tn, tp + tn + fp + fn_),
            precision,
            recall,
            f1,
            tp_pct: recall.map(|r| 100.0 * r),
            fp_pct: ratio(fp, fp + tn).map(|v| 100.0 * v),
            counts,
            degenerate: counts.total() == 0,
        }
    }

    /// Report for a run that produced nothing to classify.
    pub fn empty() -> Self {
        Self::from_counts(ConfusionCounts::default())
    }
}

/// Confusion counts and derived metrics for paired predicted/true labels.
pub fn classification_report(predicted: &[AnomalyLabel], truth: &[AnomalyLabel]) -> Result<PipelineReport> {
    if predicted.is_empty() {
        return Err(Error::InvalidArgument("classification report needs at least one label".into()));
    }
    if predicted.len() != truth.len() {
        return Err(Error::Shape {
            expected: format!("{} ground-truth labels", predicted.len()),
            actual: truth.len().to_string(),
        });
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in predicted.iter().zip(truth) {
        match (p.is_anomalous(), t.is_anomalous()) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(PipelineReport::from_counts(c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use AnomalyLabel::{Anomalous as A, Benign as B};

    #[test]
    fn perfect_predictions() {
        let labels = [A, B, B, A, B];
        let r = classification_report(&labels, &labels).unwrap();
        assert_eq!(r.accuracy, Some(1.0));
        assert_eq!(r.precision, Some(1.0));
        assert_eq!(r.recall, Some(1.0));
        assert_eq!(r.f1, Some(1.0));
        assert_eq!(r.fp_pct, Some(0.0));
    }

    #[test]
    fn confusion_arithmetic() {
        // TP=3, FP=1, FN=2, TN=4
        let pred = [A, A, A, A, B, B, B, B, B, B];
        let truth = [A, A, A, B, A, A, B, B, B, B];
        let r = classification_report(&pred, &truth).unwrap();
        assert_eq!(r.counts, ConfusionCounts { tp: 3, fp: 1, fn_: 2, tn: 4 });
        assert_eq!(r.accuracy, Some(0.7));
        assert_eq!(r.precision, Some(0.75));
        assert_eq!(r.recall, Some(0.6));
        assert!((r.f1.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.tp_pct, Some(60.0));
        assert_eq!(r.fp_pct, Some(20.0));
    }

    #[test]
    fn undefined_ratios_are_absent() {
        let r = classification_report(&[B, B], &[B, B]).unwrap();
        assert_eq!(r.precision, None);
        assert_eq!(r.recall, None);
        assert_eq!(r.f1, None);
        assert_eq!(r.tp_pct, None);
        assert_eq!(r.fp_pct, Some(0.0));
        let json = serde_json::to_value(&r).unwrap();
        assert!(json.get("P").is_none());
        assert!(json.get("A").is_some());
    }

    #[test]
    fn empty_or_mismatched_input_fails() {
        assert!(classification_report(&[], &[]).is_err());
        assert!(classification_report(&[A], &[A, B]).is_err());
    }

    #[test]
    fn empty_report_is_degenerate() {
        let r = PipelineReport::empty();
        assert!(r.degenerate);
        assert_eq!(r.accuracy, None);
    }
}
