//! Partition classes into poor, average and best groups by F1 rank.

use serde::{Deserialize, Serialize};

use super::metrics::MetricsReport;
use crate::error::{Error, Result};

pub const DEFAULT_CUTS: (f64, f64) = (0.15, 0.68);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub name: String,
    pub classes: Vec<usize>,
    pub count: usize,
    pub mean_f1: f64,
    /// Population standard deviation of member F1.
    pub std_f1: f64,
    pub mean_precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifiedGroups {
    pub cuts: (f64, f64),
    pub poor: GroupStats,
    pub average: GroupStats,
    pub best: GroupStats,
}

fn stats(name: &str, classes: Vec<usize>, f1: &[f64], precision: &[f64]) -> GroupStats {
    let n = classes.len() as f64;
    let mean = classes.iter().map(|&c| f1[c]).sum::<f64>() / n;
    let var = classes.iter().map(|&c| (f1[c] - mean).powi(2)).sum::<f64>() / n;
    GroupStats {
        name: name.to_string(),
        count: classes.len(),
        mean_f1: mean,
        std_f1: var.sqrt(),
        mean_precision: classes.iter().map(|&c| precision[c]).sum::<f64>() / n,
        classes,
    }
}

/// Group boundaries for `n` ranked classes. Each group keeps at least one
/// class.
pub fn boundaries(n: usize, cuts: (f64, f64)) -> (usize, usize) {
    let b1 = ((cuts.0 * n as f64).round() as usize).clamp(1, n - 2);
    let b2 = ((cuts.1 * n as f64).round() as usize).clamp(b1 + 1, n - 1);
    (b1, b2)
}

/// Rank by `f1` ascending (ties by lower class index) and split at the
/// quantile cuts.
pub fn stratify_scores(f1: &[f64], precision: &[f64], cuts: (f64, f64)) -> Result<StratifiedGroups> {
    let n = f1.len();
    if n < 3 {
        return Err(Error::config("stratify", format!("need at least 3 classes, got {n}")));
    }
    if precision.len() != n {
        return Err(Error::config("stratify", "precision and F1 lengths differ"));
    }
    if !(0.0 < cuts.0 && cuts.0 < cuts.1 && cuts.1 < 1.0) {
        return Err(Error::config("cuts", "must satisfy 0 < lower < upper < 1"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| f1[a].total_cmp(&f1[b]).then(a.cmp(&b)));
    let (b1, b2) = boundaries(n, cuts);
    Ok(StratifiedGroups {
        cuts,
        poor: stats("poor", order[..b1].to_vec(), f1, precision),
        average: stats("average", order[b1..b2].to_vec(), f1, precision),
        best: stats("best", order[b2..].to_vec(), f1, precision),
    })
}

pub fn stratify(report: &MetricsReport, cuts: (f64, f64)) -> Result<StratifiedGroups> {
    stratify_scores(&report.f1s(), &report.precisions(), cuts)
}

impl StratifiedGroups {
    pub fn groups(&self) -> [&GroupStats; 3] {
        [&self.poor, &self.average, &self.best]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,count,mean_f1,std_f1,mean_precision\n");
        for g in self.groups() {
            s.push_str(&format!(
                "{},{},{:.4},{:.4},{:.4}\n",
                g.name, g.count, g.mean_f1, g.std_f1, g.mean_precision
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ten_classes() {
        let f1: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).rev().collect();
        let g = stratify_scores(&f1, &f1, (0.3, 0.7)).unwrap();
        assert_eq!(g.poor.classes, vec![9, 8, 7]);
        assert_eq!(g.best.classes, vec![2, 1, 0]);
        assert_eq!(g.average.count, 4);
    }

    #[test]
    fn hundred_and_one_classes() {
        assert_eq!(boundaries(101, DEFAULT_CUTS), (15, 69));
    }

    #[test]
    fn all_equal() {
        let f1 = vec![0.5; 6];
        let g = stratify_scores(&f1, &f1, DEFAULT_CUTS).unwrap();
        assert!(g.groups().iter().all(|s| s.mean_f1 == 0.5 && s.std_f1 == 0.0));
        assert_eq!(g.to_csv().lines().count(), 4);
    }

    #[test]
    fn rejects_small_and_bad_cuts() {
        assert!(stratify_scores(&[0.1, 0.2], &[0.1, 0.2], DEFAULT_CUTS).is_err());
        assert!(stratify_scores(&[0.1; 5], &[0.1; 5], (0.6, 0.4)).is_err());
    }

    proptest! {
        #[test]
        fn partition_and_monotone_means(
            f1 in proptest::collection::vec(0.0f64..=1.0, 3..150),
            a in 0.01f64..0.98,
            gap in 0.005f64..0.5,
        ) {
            let cuts = (a, (a + gap).min(0.99));
            prop_assume!(cuts.0 < cuts.1);
            let g = stratify_scores(&f1, &f1, cuts).unwrap();
            let mut all: Vec<usize> = g.groups().iter().flat_map(|s| s.classes.clone()).collect();
            all.sort();
            prop_assert_eq!(all, (0..f1.len()).collect::<Vec<_>>());
            prop_assert!(g.groups().iter().all(|s| s.count >= 1));
            prop_assert!(g.poor.mean_f1 <= g.average.mean_f1 && g.average.mean_f1 <= g.best.mean_f1);
        }
    }
}
