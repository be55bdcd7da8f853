use std::fmt;

use crate::error::{Error, Result};

/// Raw counts: `counts[truth][pred]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionCounts {
    counts: Vec<Vec<u64>>,
}

impl ConfusionCounts {
    pub fn new(n: usize) -> Self {
        ConfusionCounts {
            counts: vec![vec![0; n]; n],
        }
    }

    pub fn from_pairs(preds: &[usize], truths: &[usize], n: usize) -> Result<Self> {
        if preds.len() != truths.len() {
            return Err(Error::shape(
                "confusion_matrix",
                format!("{} predictions for {} labels", preds.len(), truths.len()),
            ));
        }
        let mut c = Self::new(n);
        for (&p, &t) in preds.iter().zip(truths) {
            c.add(t, p)?;
        }
        Ok(c)
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        let n = self.n();
        for label in [truth, pred] {
            if label >= n {
                return Err(Error::LabelOutOfRange { label, classes: n });
            }
        }
        self.counts[truth][pred] += 1;
        Ok(())
    }

    /// Element-wise sum; the operation is associative and commutative.
    pub fn merge(&mut self, other: &ConfusionCounts) {
        for (row, o) in self.counts.iter_mut().zip(&other.counts) {
            for (a, b) in row.iter_mut().zip(o) {
                *a += b;
            }
        }
    }

    pub fn n(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Row-normalized matrix and, per row, whether that class occurs in the truth.
    /// Rows of absent classes are all zero.
    pub fn normalized(&self) -> (Vec<Vec<f64>>, Vec<bool>) {
        let mut present = Vec::with_capacity(self.n());
        let rows = self
            .counts
            .iter()
            .map(|row| {
                let total: u64 = row.iter().sum();
                present.push(total > 0);
                row.iter()
                    .map(|&c| if total > 0 { c as f64 / total as f64 } else { 0.0 })
                    .collect()
            })
            .collect();
        (rows, present)
    }
}

/// Row-normalized confusion matrix with absent-class flags.
pub fn confusion_matrix(preds: &[usize], truths: &[usize], n: usize) -> Result<(Vec<Vec<f64>>, Vec<bool>)> {
    Ok(ConfusionCounts::from_pairs(preds, truths, n)?.normalized())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Number of windows whose truth is this class.
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub labels: Vec<String>,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Unweighted means over classes that occur in the truth or the predictions.
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub confusion: Vec<Vec<f64>>,
    /// `false` for classes with no true windows (their confusion row is all zero).
    pub present: Vec<bool>,
    pub counts: ConfusionCounts,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl MetricsReport {
    pub fn from_counts(counts: ConfusionCounts, labels: Vec<String>) -> Result<Self> {
        let n = counts.n();
        if labels.len() != n {
            return Err(Error::shape("metrics", format!("{} labels for {n} classes", labels.len())));
        }
        let total = counts.total();
        if total == 0 {
            return Err(Error::Data("cannot evaluate an empty test set".into()));
        }
        let c = counts.counts();
        let correct: u64 = (0..n).map(|i| c[i][i]).sum();
        let mut per_class = Vec::with_capacity(n);
        let mut active = Vec::new();
        #[allow(clippy::needless_range_loop)]
        for k in 0..n {
            let tp = c[k][k];
            let predicted: u64 = (0..n).map(|i| c[i][k]).sum();
            let actual: u64 = c[k].iter().sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, actual);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            if predicted + actual > 0 {
                active.push(k);
            }
            per_class.push(ClassMetrics {
                precision,
                recall,
                f1,
                support: actual,
            });
        }
        let mean = |f: fn(&ClassMetrics) -> f64| active.iter().map(|&k| f(&per_class[k])).sum::<f64>() / active.len() as f64;
        let (confusion, present) = counts.normalized();
        Ok(MetricsReport {
            labels,
            accuracy: correct as f64 / total as f64,
            macro_precision: mean(|m| m.precision),
            macro_recall: mean(|m| m.recall),
            macro_f1: mean(|m| m.f1),
            per_class,
            confusion,
            present,
            counts,
        })
    }

    pub fn from_predictions(preds: &[usize], truths: &[usize], labels: Vec<String>) -> Result<Self> {
        let counts = ConfusionCounts::from_pairs(preds, truths, labels.len())?;
        Self::from_counts(counts, labels)
    }

    pub fn total(&self) -> u64 {
        self.counts.total()
    }

    /// Comma-separated confusion matrix with a header row of class labels.
    pub fn confusion_csv(&self) -> String {
        let mut out = self.labels.join(",");
        out.push('\n');
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "accuracy,{:.4}", self.accuracy)?;
        writeln!(f, "macro_precision,{:.4}", self.macro_precision)?;
        writeln!(f, "macro_recall,{:.4}", self.macro_recall)?;
        writeln!(f, "macro_f1,{:.4}", self.macro_f1)?;
        writeln!(f, "class,precision,recall,f1,support")?;
        for (label, m) in self.labels.iter().zip(&self.per_class) {
            writeln!(f, "{label},{:.4},{:.4},{:.4},{}", m.precision, m.recall, m.f1, m.support)?;
        }
        writeln!(f, "confusion (rows: truth, columns: prediction)")?;
        writeln!(f, "   {}", self.labels.iter().map(|l| format!("{l:>6}")).collect::<String>())?;
        for ((label, row), present) in self.labels.iter().zip(&self.confusion).zip(&self.present) {
            let cells: String = row.iter().map(|v| format!("{v:>6.2}")).collect();
            let flag = if *present { "" } else { "  (absent)" };
            writeln!(f, "{label:>3}{cells}{flag}")?;
        }
        Ok(())
    }
}
