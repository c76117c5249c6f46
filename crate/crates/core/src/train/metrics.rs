use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Classification report. A precision or recall with a zero denominator is
/// reported as 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub class_names: Vec<String>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_avg: Averages,
    /// Weighted by true-class support.
    pub weighted_avg: Averages,
    /// One-vs-rest trapezoidal ROC AUC per class; `None` when the class has
    /// no positives or no negatives.
    pub per_class_auc: Vec<Option<f64>>,
    /// Mean of the defined per-class AUCs.
    pub auc: Option<f64>,
    pub seconds_per_epoch: Option<f64>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl MetricsReport {
    pub fn from_confusion(confusion: Vec<Vec<usize>>, class_names: Vec<String>) -> Result<Self> {
        let k = confusion.len();
        if k == 0 || confusion.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidArgument("confusion matrix must be square and non-empty".into()));
        }
        if class_names.len() != k {
            return Err(Error::InvalidArgument(format!("{} class names for {k} classes", class_names.len())));
        }
        let total: usize = confusion.iter().flatten().sum();
        let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
        let per_class: Vec<ClassMetrics> = (0..k)
            .map(|c| {
                let tp = confusion[c][c];
                let support: usize = confusion[c].iter().sum();
                let predicted: usize = (0..k).map(|r| confusion[r][c]).sum();
                let precision = ratio(tp, predicted);
                let recall = ratio(tp, support);
                let f1 = if precision + recall > 0.0 {
                    2.0 * precision * recall / (precision + recall)
                } else {
                    0.0
                };
                ClassMetrics {
                    precision,
                    recall,
                    f1,
                    support,
                }
            })
            .collect();
        let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / k as f64;
        let weighted = |f: fn(&ClassMetrics) -> f64| {
            if total == 0 {
                0.0
            } else {
                per_class.iter().map(|m| f(m) * m.support as f64).sum::<f64>() / total as f64
            }
        };
        Ok(Self {
            macro_avg: Averages {
                precision: mean(|m| m.precision),
                recall: mean(|m| m.recall),
                f1: mean(|m| m.f1),
            },
            weighted_avg: Averages {
                precision: weighted(|m| m.precision),
                recall: weighted(|m| m.recall),
                f1: weighted(|m| m.f1),
            },
            accuracy: ratio(correct, total),
            per_class,
            confusion,
            class_names,
            per_class_auc: vec![None; k],
            auc: None,
            seconds_per_epoch: None,
        })
    }

    /// Report from true labels and per-sample class scores; predictions are
    /// the argmax (lowest index on ties).
    pub fn from_scores(labels: &[usize], scores: &[Vec<f64>], class_names: Vec<String>) -> Result<Self> {
        let k = class_names.len();
        if labels.len() != scores.len() {
            return Err(Error::InvalidArgument(format!(
                "{} labels but {} score rows",
                labels.len(),
                scores.len()
            )));
        }
        let mut confusion = vec![vec![0; k]; k];
        for (&l, row) in labels.iter().zip(scores) {
            if row.len() != k || l >= k {
                return Err(Error::InvalidArgument(format!("score row of width {} or label {l} outside {k} classes", row.len())));
            }
            confusion[l][argmax(row)] += 1;
        }
        let mut report = Self::from_confusion(confusion, class_names)?;
        let (per_class, mean) = auc_one_vs_rest(labels, scores, k);
        report.per_class_auc = per_class;
        report.auc = mean;
        Ok(report)
    }

    pub fn confusion_csv(&self) -> String {
        let mut out = String::from("true\\predicted");
        for n in &self.class_names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for (n, row) in self.class_names.iter().zip(&self.confusion) {
            out.push_str(n);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.class_names.iter().map(|n| n.len()).max().unwrap_or(0).max(12);
        writeln!(f, "AUC: one-vs-rest, trapezoidal, macro-averaged over classes with both outcomes")?;
        writeln!(
            f,
            "{:<width$}  {:>9}  {:>9}  {:>9}  {:>7}  {:>7}",
            "class", "precision", "recall", "f1-score", "support", "auc"
        )?;
        let fmt_auc = |a: Option<f64>| a.map_or("-".to_string(), |v| format!("{v:.4}"));
        for (i, m) in self.per_class.iter().enumerate() {
            writeln!(
                f,
                "{:<width$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>7}  {:>7}",
                self.class_names[i],
                m.precision,
                m.recall,
                m.f1,
                m.support,
                fmt_auc(self.per_class_auc[i])
            )?;
        }
        let n: usize = self.per_class.iter().map(|m| m.support).sum();
        for (name, a) in [("Macro-Avg", &self.macro_avg), ("Weight-Avg", &self.weighted_avg)] {
            writeln!(
                f,
                "{name:<width$}  {:>9.4}  {:>9.4}  {:>9.4}  {n:>7}",
                a.precision, a.recall, a.f1
            )?;
        }
        write!(f, "accuracy {:.4}  auc {}", self.accuracy, fmt_auc(self.auc))?;
        if let Some(s) = self.seconds_per_epoch {
            write!(f, "  secs/ep {s:.2}")?;
        }
        Ok(())
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Area under the ROC curve of `scores` for binary `positive` flags, by the
/// trapezoidal rule over every distinct threshold. `None` without both
/// classes present.
pub fn roc_auc(positive: &[bool], scores: &[f64]) -> Option<f64> {
    let p = positive.iter().filter(|&&b| b).count();
    let n = positive.len() - p;
    if p == 0 || n == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let tpr = tp as f64 / p as f64;
        let fpr = fp as f64 / n as f64;
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    Some(area)
}

pub fn auc_one_vs_rest(labels: &[usize], scores: &[Vec<f64>], k: usize) -> (Vec<Option<f64>>, Option<f64>) {
    let per_class: Vec<Option<f64>> = (0..k)
        .map(|c| {
            let positive: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            roc_auc(&positive, &s)
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    (per_class, mean)
}

/// Mean and sample (n − 1) standard deviation. Identical values (including
/// a single one) give exactly that value and 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    if values.iter().all(|&v| v == values[0]) {
        return (values[0], 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_of_separable_scores_is_one() {
        assert_eq!(roc_auc(&[true, false, true, false], &[0.9, 0.1, 0.8, 0.2]), Some(1.0));
        assert_eq!(roc_auc(&[true, true], &[0.9, 0.1]), None);
    }

    #[test]
    fn tied_scores_give_half() {
        assert_eq!(roc_auc(&[true, false], &[0.5, 0.5]), Some(0.5));
    }

    #[test]
    fn mean_std_of_constant_is_zero() {
        assert_eq!(mean_std(&[0.7, 0.7, 0.7]), (0.7, 0.0));
        assert_eq!(mean_std(&[3.0]), (3.0, 0.0));
    }
}
