//! Cohort statistics for tables and boxplots.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::percentile_sorted;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    /// Most extreme values inside the 1.5·IQR fences.
    pub whisker_low: f64,
    pub whisker_high: f64,
    /// Values beyond the fences, ascending.
    pub outliers: Vec<f64>,
}

pub fn summarize(values: &[f64]) -> Result<SummaryStats> {
    if values.is_empty() {
        return Err(Error::Empty("cannot summarize an empty list".into()));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Config(format!("cannot summarize non-finite value {v}")));
    }
    let n = values.len();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let (q1, median, q3) = (
        percentile_sorted(&sorted, 25.0),
        percentile_sorted(&sorted, 50.0),
        percentile_sorted(&sorted, 75.0),
    );
    let iqr = q3 - q1;
    let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside = || sorted.iter().copied().filter(|&v| v >= lo && v <= hi);
    Ok(SummaryStats {
        n,
        mean,
        std,
        median,
        q1,
        q3,
        iqr,
        whisker_low: inside().next().unwrap_or(q1),
        whisker_high: inside().next_back().unwrap_or(q3),
        outliers: sorted.iter().copied().filter(|&v| v < lo || v > hi).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_to_five() {
        let s = summarize(&[5.0, 1.0, 4.0, 2.0, 3.0]).unwrap();
        assert_eq!((s.median, s.q1, s.q3, s.iqr), (3.0, 2.0, 4.0, 2.0));
        assert_eq!(s.mean, 3.0);
        assert!((s.std - 2.5f64.sqrt()).abs() < 1e-15);
        assert_eq!((s.whisker_low, s.whisker_high), (1.0, 5.0));
        assert!(s.outliers.is_empty());
    }

    #[test]
    fn far_value_is_outlier() {
        let s = summarize(&[1.0, 1.0, 1.0, 1.0, 100.0]).unwrap();
        assert_eq!(s.outliers, vec![100.0]);
        assert_eq!(s.whisker_high, 1.0);
    }

    #[test]
    fn constant_and_single() {
        let s = summarize(&[0.7; 4]).unwrap();
        assert_eq!((s.std, s.iqr), (0.0, 0.0));
        assert!(s.outliers.is_empty());
        let one = summarize(&[0.3]).unwrap();
        assert_eq!((one.std, one.q1, one.q3), (0.0, 0.3, 0.3));
        assert!(summarize(&[]).is_err());
    }
}
