//! Frame-level intent metrics: accuracy, macro precision/recall/F1, the
//! false-positive and false-negative rates, and the confusion matrix.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::semantics::IntentState;

const K: usize = IntentState::COUNT;

/// `counts[i][j]` = frames labeled `i` and predicted `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub counts: [[u64; K]; K],
    /// Each nonempty row divided by its total; empty rows stay zero.
    pub normalized: [[f64; K]; K],
    /// Classes with no labeled frames.
    pub empty_rows: Vec<IntentState>,
}

pub fn confusion(preds: &[IntentState], labels: &[IntentState]) -> Result<Confusion> {
    if preds.len() != labels.len() {
        return Err(Error::LengthMismatch(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut counts = [[0u64; K]; K];
    for (p, l) in preds.iter().zip(labels) {
        counts[l.index()][p.index()] += 1;
    }
    Ok(Confusion::from_counts(counts))
}

impl Confusion {
    pub fn from_counts(counts: [[u64; K]; K]) -> Self {
        let mut normalized = [[0.0; K]; K];
        let mut empty_rows = Vec::new();
        for (i, row) in counts.iter().enumerate() {
            let total: u64 = row.iter().sum();
            if total == 0 {
                empty_rows.push(IntentState::ALL[i]);
                continue;
            }
            for (j, &c) in row.iter().enumerate() {
                normalized[i][j] = c as f64 / total as f64;
            }
        }
        Confusion {
            counts,
            normalized,
            empty_rows,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        *self = Confusion::from_counts(self.counts);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: IntentState,
    /// Labeled frames of this class.
    pub support: u64,
    /// Frames predicted as this class.
    pub predicted: u64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Averaging used for precision, recall and F1.
    pub averaging: String,
    pub frames: u64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    /// Harmonic mean of `precision` and `recall`.
    pub f1: f64,
    /// Share of OFF/UNKNOWN frames predicted as any other state.
    pub fp_rate: f64,
    /// Share of LEFT_TURN/RIGHT_TURN/FLASHERS frames predicted as any other state.
    pub fn_rate: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: Confusion,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b > 0.0 {
        2.0 * a * b / (a + b)
    } else {
        0.0
    }
}

pub fn metrics(preds: &[IntentState], labels: &[IntentState]) -> Result<MetricsReport> {
    Ok(MetricsReport::from_confusion(confusion(preds, labels)?))
}

impl MetricsReport {
    /// Precision and recall are averaged over the classes that occur in the
    /// labels; a class that is never predicted has precision 0.
    pub fn from_confusion(confusion: Confusion) -> Self {
        let c = &confusion.counts;
        let frames = confusion.total();
        let correct: u64 = (0..K).map(|i| c[i][i]).sum();
        let per_class: Vec<ClassMetrics> = IntentState::ALL
            .iter()
            .map(|&class| {
                let i = class.index();
                let support: u64 = c[i].iter().sum();
                let predicted: u64 = (0..K).map(|r| c[r][i]).sum();
                ClassMetrics {
                    class,
                    support,
                    predicted,
                    precision: ratio(c[i][i], predicted),
                    recall: ratio(c[i][i], support),
                }
            })
            .collect();
        let present: Vec<&ClassMetrics> = per_class.iter().filter(|m| m.support > 0).collect();
        let mean = |f: fn(&ClassMetrics) -> f64| {
            if present.is_empty() {
                0.0
            } else {
                present.iter().map(|m| f(m)).sum::<f64>() / present.len() as f64
            }
        };
        let precision = mean(|m| m.precision);
        let recall = mean(|m| m.recall);
        let rate = |inactive: bool| {
            let rows = IntentState::ALL.iter().filter(|s| s.is_inactive() == inactive);
            let (wrong, total) = rows.fold((0, 0), |(w, t), s| {
                let i = s.index();
                let row: u64 = c[i].iter().sum();
                (w + row - c[i][i], t + row)
            });
            ratio(wrong, total)
        };
        MetricsReport {
            averaging: "macro over classes present in the labels".into(),
            frames,
            accuracy: ratio(correct, frames),
            precision,
            recall,
            f1: harmonic_mean(precision, recall),
            fp_rate: rate(true),
            fn_rate: rate(false),
            per_class,
            confusion,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    /// Summary row plus the row-normalized confusion matrix, in percent.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "frames {}  (precision/recall/F1: {})", self.frames, self.averaging);
        let _ = writeln!(
            out,
            "{:>10} {:>10} {:>10} {:>10} {:>10} {:>10}",
            "accuracy", "precision", "recall", "F1", "FP", "FN"
        );
        let _ = writeln!(
            out,
            "{:>9.2}% {:>9.2}% {:>9.2}% {:>9.2}% {:>9.2}% {:>9.2}%",
            100.0 * self.accuracy,
            100.0 * self.precision,
            100.0 * self.recall,
            100.0 * self.f1,
            100.0 * self.fp_rate,
            100.0 * self.fn_rate
        );
        let _ = writeln!(out);
        let _ = write!(out, "{:>12}", "label \\ pred");
        for s in IntentState::ALL {
            let _ = write!(out, " {:>10}", s.label());
        }
        let _ = writeln!(out, " {:>8}", "frames");
        for (i, s) in IntentState::ALL.iter().enumerate() {
            let _ = write!(out, "{:>12}", s.label());
            for j in 0..K {
                let _ = write!(out, " {:>9.2}%", 100.0 * self.confusion.normalized[i][j]);
            }
            let total: u64 = self.confusion.counts[i].iter().sum();
            let flag = if total == 0 { " (no frames)" } else { "" };
            let _ = writeln!(out, " {total:>8}{flag}");
        }
        out
    }
}
