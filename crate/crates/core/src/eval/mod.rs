//! Classification metrics, multi-run aggregation, and paired significance
//! tests.
//!
//! AD is the positive class throughout. Zero-denominator conventions are
//! explicit: precision and recall fall back to 0 when their denominator is
//! empty, and F1 is 0 whenever precision + recall is 0.

pub mod stats;

pub use stats::{paired_t_test, wilcoxon_signed_rank, TestOutcome};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::Label;

/// Confusion counts and the four derived metrics for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub true_negatives: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RunMetrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Result<Self> {
        let n = tp + fp + fn_ + tn;
        if n == 0 {
            return Err(Error::Parameter("metrics need at least one sample".into()));
        }
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Ok(RunMetrics {
            true_positives: tp,
            false_positives: fp,
            false_negatives: fn_,
            true_negatives: tn,
            accuracy: (tp + tn) as f64 / n as f64,
            precision,
            recall,
            f1,
        })
    }

    pub fn total(&self) -> usize {
        self.true_positives + self.false_positives + self.false_negatives + self.true_negatives
    }

    /// Metric value by name, for tabular output.
    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "accuracy" => Some(self.accuracy),
            "precision" => Some(self.precision),
            "recall" => Some(self.recall),
            "f1" => Some(self.f1),
            _ => None,
        }
    }
}

/// The metric names [`RunMetrics::metric`] understands, in report order.
pub const METRIC_NAMES: [&str; 4] = ["accuracy", "precision", "recall", "f1"];

/// Score predictions against gold labels, AD positive.
pub fn compute_metrics(preds: &[Label], golds: &[Label]) -> Result<RunMetrics> {
    if preds.len() != golds.len() {
        return Err(Error::Parameter(format!(
            "{} predictions against {} gold labels",
            preds.len(),
            golds.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Parameter("metrics need at least one sample".into()));
    }
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_ = 0;
    let mut tn = 0;
    for (&p, &g) in preds.iter().zip(golds) {
        match (p, g) {
            (Label::Ad, Label::Ad) => tp += 1,
            (Label::Ad, Label::Hc) => fp += 1,
            (Label::Hc, Label::Ad) => fn_ += 1,
            (Label::Hc, Label::Hc) => tn += 1,
        }
    }
    RunMetrics::from_counts(tp, fp, fn_, tn)
}

/// Mean and sample standard deviation (n − 1 denominator; 0 for a single
/// run, by convention).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    MeanStd { mean, std }
}

/// Per-metric mean ± std over a set of runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub run_count: usize,
    pub accuracy: MeanStd,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1: MeanStd,
}

impl AggregateReport {
    pub fn from_runs(runs: &[RunMetrics]) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::Parameter("cannot aggregate zero runs".into()));
        }
        let collect = |f: fn(&RunMetrics) -> f64| mean_std(&runs.iter().map(f).collect::<Vec<_>>());
        Ok(AggregateReport {
            run_count: runs.len(),
            accuracy: collect(|r| r.accuracy),
            precision: collect(|r| r.precision),
            recall: collect(|r| r.recall),
            f1: collect(|r| r.f1),
        })
    }

    pub fn metric(&self, name: &str) -> Option<MeanStd> {
        match name {
            "accuracy" => Some(self.accuracy),
            "precision" => Some(self.precision),
            "recall" => Some(self.recall),
            "f1" => Some(self.f1),
            _ => None,
        }
    }
}
