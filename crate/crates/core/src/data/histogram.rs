//! Distribution of classes over precision bins.

use serde::{Deserialize, Serialize};

use super::metrics::MetricsReport;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub percentage: f64,
}

impl HistogramBin {
    /// Two-decimal label such as `0.60-0.70`.
    pub fn range(&self) -> String {
        format!("{:.2}-{:.2}", self.lo, self.hi)
    }
}

/// Bin count for a width that divides 1, or an error.
fn bin_count(width: f64) -> Result<usize> {
    if !(width > 0.0 && width <= 1.0) {
        return Err(Error::config("bin_width", format!("{width} is outside (0, 1]")));
    }
    let n = (1.0 / width).round();
    if (n * width - 1.0).abs() > 1e-9 {
        return Err(Error::config("bin_width", format!("{width} does not divide 1 evenly")));
    }
    Ok(n as usize)
}

/// Bucket values in `[0, 1]` into `[lo, hi)` bins, the last bin closed.
pub fn histogram(values: &[f64], width: f64) -> Result<Vec<HistogramBin>> {
    let n = bin_count(width)?;
    if values.is_empty() {
        return Err(Error::config("histogram", "no values"));
    }
    let mut counts = vec![0usize; n];
    for &v in values {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::config("histogram", format!("value {v} outside [0, 1]")));
        }
        let i = ((v / width + 1e-9).floor() as usize).min(n - 1);
        counts[i] += 1;
    }
    let total = values.len() as f64;
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            lo: i as f64 * width,
            hi: (i + 1) as f64 * width,
            count,
            percentage: 100.0 * count as f64 / total,
        })
        .collect())
}

pub fn precision_histogram(report: &MetricsReport, width: f64) -> Result<Vec<HistogramBin>> {
    histogram(&report.precisions(), width)
}

pub fn histogram_csv(bins: &[HistogramBin]) -> String {
    let mut s = String::from("range,count,percentage\n");
    for b in bins {
        s.push_str(&format!("{},{},{:.2}\n", b.range(), b.count, b.percentage));
    }
    s
}
