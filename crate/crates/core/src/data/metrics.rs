//! Count-based classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    /// Test samples whose true label is this class.
    pub support: u64,
    /// Test samples predicted as this class.
    pub predicted: u64,
    pub true_positive: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: usize,
    pub total: u64,
    pub correct: u64,
    pub accuracy: f64,
    pub top_k: usize,
    pub top_k_hits: u64,
    pub top_k_accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean, zero when both inputs are zero.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Position of `label` when classes are sorted by descending probability,
/// ties broken by lower index first.
pub fn rank_of(probs: &[f64], label: usize) -> usize {
    let p = probs[label];
    probs
        .iter()
        .enumerate()
        .filter(|&(j, &q)| q > p || (q == p && j < label))
        .count()
}

impl MetricsReport {
    /// Build from a confusion matrix and a top-k hit count.
    pub fn from_counts(confusion: Vec<Vec<u64>>, top_k: usize, top_k_hits: u64) -> Result<Self> {
        let c = confusion.len();
        if c == 0 || confusion.iter().any(|row| row.len() != c) {
            return Err(Error::config("confusion", "must be a non-empty square matrix"));
        }
        let total: u64 = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(Error::config("confusion", "no samples"));
        }
        let correct: u64 = (0..c).map(|i| confusion[i][i]).sum();
        let per_class: Vec<ClassMetrics> = (0..c)
            .map(|k| {
                let support: u64 = confusion[k].iter().sum();
                let predicted: u64 = confusion.iter().map(|row| row[k]).sum();
                let tp = confusion[k][k];
                let precision = ratio(tp, predicted);
                let recall = ratio(tp, support);
                ClassMetrics {
                    class: k,
                    support,
                    predicted,
                    true_positive: tp,
                    precision,
                    recall,
                    f1: f1_score(precision, recall),
                }
            })
            .collect();
        let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / c as f64;
        Ok(MetricsReport {
            classes: c,
            total,
            correct,
            accuracy: ratio(correct, total),
            top_k,
            top_k_hits,
            top_k_accuracy: ratio(top_k_hits, total),
            macro_precision: mean(|m| m.precision),
            macro_recall: mean(|m| m.recall),
            macro_f1: mean(|m| m.f1),
            per_class,
            confusion,
        })
    }

    /// `probs[i]` is the fused distribution of sample `i`; the prediction is
    /// its argmax with ties to the lowest index.
    pub fn from_probabilities(labels: &[usize], probs: &[Vec<f64>], classes: usize, top_k: usize) -> Result<Self> {
        if labels.is_empty() || labels.len() != probs.len() {
            return Err(Error::config("evaluate", "need one distribution per label, at least one"));
        }
        let mut confusion = vec![vec![0u64; classes]; classes];
        let mut hits = 0;
        for (&y, p) in labels.iter().zip(probs) {
            if y >= classes || p.len() != classes {
                return Err(Error::config("evaluate", "label or distribution outside class range"));
            }
            let pred = crate::nn::argmax(p);
            confusion[y][pred] += 1;
            if rank_of(p, y) < top_k {
                hits += 1;
            }
        }
        Self::from_counts(confusion, top_k, hits)
    }

    /// Sum confusion matrices and top-k hits of reports over the same
    /// classes and k.
    pub fn merge(reports: &[MetricsReport]) -> Result<Self> {
        let first = reports
            .first()
            .ok_or_else(|| Error::config("report", "nothing to merge"))?;
        let mut confusion = vec![vec![0u64; first.classes]; first.classes];
        let mut hits = 0;
        for r in reports {
            if r.classes != first.classes || r.top_k != first.top_k {
                return Err(Error::config(
                    "report",
                    "reports disagree on class count or top-k",
                ));
            }
            for (acc, row) in confusion.iter_mut().zip(&r.confusion) {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
            hits += r.top_k_hits;
        }
        Self::from_counts(confusion, first.top_k, hits)
    }

    pub fn precisions(&self) -> Vec<f64> {
        self.per_class.iter().map(|m| m.precision).collect()
    }

    pub fn f1s(&self) -> Vec<f64> {
        self.per_class.iter().map(|m| m.f1).collect()
    }

    /// One row per class, then `accuracy`, `top_k_accuracy` and `macro`
    /// summary rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,support,predicted,precision,recall,f1,value\n");
        for m in &self.per_class {
            s.push_str(&format!(
                "{},{},{},{},{},{},\n",
                m.class, m.support, m.predicted, m.precision, m.recall, m.f1
            ));
        }
        s.push_str(&format!("accuracy,{},{},,,,{}\n", self.total, self.correct, self.accuracy));
        s.push_str(&format!(
            "top_{}_accuracy,{},{},,,,{}\n",
            self.top_k, self.total, self.top_k_hits, self.top_k_accuracy
        ));
        s.push_str(&format!(
            "macro,{},,{},{},{},\n",
            self.total, self.macro_precision, self.macro_recall, self.macro_f1
        ));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::one_hot;

    #[test]
    fn perfect_predictor() {
        let labels = vec![0, 1, 2, 1, 0];
        let probs: Vec<Vec<f64>> = labels.iter().map(|&y| one_hot(y, 3)).collect();
        let r = MetricsReport::from_probabilities(&labels, &probs, 3, 1).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert!(r.per_class.iter().all(|m| m.f1 == 1.0));
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(r.confusion[i][j] > 0, i == j);
            }
        }
    }

    #[test]
    fn constant_predictor_on_balanced_data() {
        let labels: Vec<usize> = (0..20).map(|i| i % 4).collect();
        let probs = vec![one_hot(2, 4); 20];
        let r = MetricsReport::from_probabilities(&labels, &probs, 4, 1).unwrap();
        assert_eq!(r.accuracy, 0.25);
        for m in &r.per_class {
            assert_eq!(m.recall, if m.class == 2 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn top_k_ties_break_low() {
        // label 2 ties with label 1; label 1 ranks first
        let p = [0.1, 0.45, 0.45];
        assert_eq!(rank_of(&p, 1), 0);
        assert_eq!(rank_of(&p, 2), 1);
        assert_eq!(rank_of(&p, 0), 2);
    }

    #[test]
    fn merge_sums_counts() {
        let r1 = MetricsReport::from_counts(vec![vec![2, 1], vec![0, 3]], 1, 5).unwrap();
        let r2 = MetricsReport::from_counts(vec![vec![1, 0], vec![1, 1]], 1, 2).unwrap();
        let m = MetricsReport::merge(&[r1.clone(), r2]).unwrap();
        assert_eq!(m.confusion, vec![vec![3, 1], vec![1, 4]]);
        assert_eq!(m.top_k_hits, 7);
        assert_eq!(MetricsReport::merge(std::slice::from_ref(&r1)).unwrap(), r1);
    }

    #[test]
    fn csv_has_row_per_class_plus_summaries() {
        let r = MetricsReport::from_counts(vec![vec![2, 1], vec![0, 3]], 1, 5).unwrap();
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 1 + 2 + 3);
        assert!(csv.lines().nth(3).unwrap().starts_with("accuracy,6,5"));
    }
}
