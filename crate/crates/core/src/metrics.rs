//! Agreement and discrimination metrics: ICC(2,1), R², MAE, MAPE, AUC-ROC
//! and sensitivity/specificity at a threshold.

use std::fmt;
use std::path::Path;

use crate::error::{MimirError, Result};

fn check_pair(a: &[f64], b: &[f64], min_len: usize, what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(MimirError::shape(a.len(), b.len()));
    }
    if a.len() < min_len {
        return Err(MimirError::validation(
            what,
            format!("needs at least {min_len} points, got {}", a.len()),
        ));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(MimirError::validation(what, "inputs must be finite"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Icc {
    pub value: f64,
    /// The ANOVA denominator vanished (e.g. both raters constant and equal);
    /// `value` is then 0.
    pub degenerate: bool,
}

/// ICC(2,1): two-way random effects, absolute agreement, single measures,
/// for two raters over `n` subjects.
///
/// `(MSR − MSE) / (MSR + (k−1)·MSE + k·(MSC − MSE)/n)` with `k = 2`.
pub fn icc_2_1(x: &[f64], y: &[f64]) -> Result<Icc> {
    check_pair(x, y, 3, "icc")?;
    let n = x.len() as f64;
    let k = 2.0;
    let col_x = x.iter().sum::<f64>() / n;
    let col_y = y.iter().sum::<f64>() / n;
    let grand = (col_x + col_y) / 2.0;
    let mut ss_rows = 0.0;
    let mut ss_err = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        let row = (a + b) / 2.0;
        ss_rows += (row - grand).powi(2);
        ss_err += (a - row - col_x + grand).powi(2) + (b - row - col_y + grand).powi(2);
    }
    ss_rows *= k;
    let ss_cols = n * ((col_x - grand).powi(2) + (col_y - grand).powi(2));
    let ms_rows = ss_rows / (n - 1.0);
    let ms_cols = ss_cols / (k - 1.0);
    let ms_err = ss_err / ((n - 1.0) * (k - 1.0));
    let denom = ms_rows + (k - 1.0) * ms_err + k * (ms_cols - ms_err) / n;
    if denom == 0.0 {
        return Ok(Icc {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Icc {
        value: (ms_rows - ms_err) / denom,
        degenerate: false,
    })
}

/// Coefficient of determination `1 − Σ(y−ŷ)²/Σ(y−ȳ)²`; negative when the
/// prediction is worse than the mean.
pub fn r_squared(truth: &[f64], pred: &[f64]) -> Result<f64> {
    check_pair(truth, pred, 2, "r_squared")?;
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|y| (y - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(MimirError::validation("r_squared", "truth is constant"));
    }
    let ss_res: f64 = truth.iter().zip(pred).map(|(y, p)| (y - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn mae(truth: &[f64], pred: &[f64]) -> Result<f64> {
    check_pair(truth, pred, 1, "mae")?;
    Ok(truth.iter().zip(pred).map(|(y, p)| (y - p).abs()).sum::<f64>() / truth.len() as f64)
}

/// MAPE in percent over entries with nonzero truth, plus the number of
/// zero-truth entries that were skipped.
pub fn mape(truth: &[f64], pred: &[f64]) -> Result<(f64, usize)> {
    check_pair(truth, pred, 1, "mape")?;
    let mut sum = 0.0;
    let mut used = 0usize;
    for (&y, &p) in truth.iter().zip(pred) {
        if y == 0.0 {
            continue;
        }
        sum += ((y - p) / y).abs();
        used += 1;
    }
    if used == 0 {
        return Err(MimirError::validation("mape", "undefined: every truth is zero"));
    }
    Ok((100.0 * sum / used as f64, truth.len() - used))
}

/// `(MAE, MAPE %)`.
pub fn mae_mape(truth: &[f64], pred: &[f64]) -> Result<(f64, f64)> {
    Ok((mae(truth, pred)?, mape(truth, pred)?.0))
}

fn split_classes(labels: &[f64], scores: &[f64], what: &str) -> Result<(usize, usize)> {
    check_pair(labels, scores, 2, what)?;
    if let Some(v) = labels.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(MimirError::validation(what, format!("labels must be 0 or 1, got {v}")));
    }
    let pos = labels.iter().filter(|&&v| v == 1.0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MimirError::validation(what, "both classes must be present"));
    }
    Ok((pos, neg))
}

/// Area under the ROC curve via the Mann–Whitney rank statistic; tied
/// scores earn half credit.
pub fn auc_roc(labels: &[f64], scores: &[f64]) -> Result<f64> {
    let (pos, neg) = split_classes(labels, scores, "auc")?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1.0 {
                rank_sum_pos += avg;
            }
        }
        i = j + 1;
    }
    let (p, q) = (pos as f64, neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * q))
}

/// `(sensitivity, specificity)` with positives predicted where `score ≥ threshold`.
pub fn confusion_at_threshold(labels: &[f64], scores: &[f64], threshold: f64) -> Result<(f64, f64)> {
    let (pos, neg) = split_classes(labels, scores, "confusion")?;
    let mut tp = 0usize;
    let mut tn = 0usize;
    for (&y, &s) in labels.iter().zip(scores) {
        let predicted = s >= threshold;
        match (y == 1.0, predicted) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            _ => {}
        }
    }
    Ok((tp as f64 / pos as f64, tn as f64 / neg as f64))
}

/// Reliability band of an ICC value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IccFlag {
    Poor,
    Moderate,
    Good,
    Excellent,
    Degenerate,
}

impl IccFlag {
    pub fn from_icc(icc: Icc) -> Self {
        if icc.degenerate {
            IccFlag::Degenerate
        } else if icc.value > 0.90 {
            IccFlag::Excellent
        } else if icc.value > 0.75 {
            IccFlag::Good
        } else if icc.value >= 0.5 {
            IccFlag::Moderate
        } else {
            IccFlag::Poor
        }
    }
}

impl fmt::Display for IccFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IccFlag::Poor => "poor",
            IccFlag::Moderate => "moderate",
            IccFlag::Good => "good",
            IccFlag::Excellent => "excellent",
            IccFlag::Degenerate => "degenerate",
        })
    }
}

/// One report row. Metrics that are undefined for the data are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMetrics {
    pub target: String,
    pub n: usize,
    pub icc: Option<f64>,
    pub r2: Option<f64>,
    pub mae: Option<f64>,
    pub mape: Option<f64>,
    pub auc: Option<f64>,
    pub coverage: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub icc_flag: Option<IccFlag>,
}

impl TargetMetrics {
    /// Metrics over paired known values. `intervals` adds coverage;
    /// `binary` adds AUC and confusion rates at `threshold` and drops MAPE.
    pub fn compute(
        target: &str,
        truth: &[f64],
        pred: &[f64],
        intervals: Option<&[(f64, f64)]>,
        binary: bool,
        threshold: f64,
    ) -> Result<Self> {
        let icc = icc_2_1(truth, pred).ok();
        let (auc, sens_spec) = if binary {
            (
                auc_roc(truth, pred).ok(),
                confusion_at_threshold(truth, pred, threshold).ok(),
            )
        } else {
            (None, None)
        };
        let coverage = match intervals {
            Some(iv) => crate::uncertainty::coverage(iv, truth, &vec![1; truth.len()]).ok(),
            None => None,
        };
        Ok(TargetMetrics {
            target: target.to_string(),
            n: truth.len(),
            icc: icc.map(|i| i.value),
            r2: r_squared(truth, pred).ok(),
            mae: mae(truth, pred).ok(),
            mape: if binary { None } else { mape(truth, pred).ok().map(|m| m.0) },
            auc,
            coverage,
            sensitivity: sens_spec.map(|s| s.0),
            specificity: sens_spec.map(|s| s.1),
            icc_flag: icc.map(IccFlag::from_icc),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub rows: Vec<TargetMetrics>,
}

pub const REPORT_HEADER: [&str; 11] = [
    "target",
    "n",
    "icc",
    "r2",
    "mae",
    "mape",
    "auc",
    "coverage",
    "sensitivity",
    "specificity",
    "icc_flag",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsReport {
    pub fn row(&self, target: &str) -> Option<&TargetMetrics> {
        self.rows.iter().find(|r| r.target == target)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        w.write_record(REPORT_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.target.clone(),
                r.n.to_string(),
                opt(r.icc),
                opt(r.r2),
                opt(r.mae),
                opt(r.mape),
                opt(r.auc),
                opt(r.coverage),
                opt(r.sensitivity),
                opt(r.specificity),
                r.icc_flag.map(|f| f.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|e| MimirError::io(path.as_ref(), e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn icc_worked_example_and_perfect_agreement() {
        let icc = icc_2_1(&[1.0, 2.0, 3.0, 4.0], &[2.0, 3.0, 4.0, 5.0]).unwrap();
        assert!((icc.value - 10.0 / 13.0).abs() < 1e-15);
        let x = [0.3, -1.2, 4.4, 2.0, 7.5];
        assert_eq!(icc_2_1(&x, &x).unwrap().value, 1.0);
    }

    #[test]
    fn icc_degenerate_and_errors() {
        let c = icc_2_1(&[2.0; 4], &[2.0; 4]).unwrap();
        assert_eq!(c, Icc { value: 0.0, degenerate: true });
        assert_eq!(IccFlag::from_icc(c), IccFlag::Degenerate);
        assert!(icc_2_1(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(icc_2_1(&[1.0, f64::NAN, 2.0], &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn r2_cases() {
        let y = [1.0, 2.0, 4.0, 7.0];
        assert_eq!(r_squared(&y, &y).unwrap(), 1.0);
        assert_eq!(r_squared(&y, &[3.5; 4]).unwrap(), 0.0);
        // Σ(y−ŷ)² = 36+4+1+16 = 57, Σ(y−ȳ)² = 6.25+2.25+0.25+12.25 = 21
        let worse = r_squared(&y, &[7.0, 4.0, 3.0, 3.0]).unwrap();
        assert!((worse - (1.0 - 57.0 / 21.0)).abs() < 1e-15);
        assert!(r_squared(&[2.0; 3], &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn mae_mape_cases() {
        assert_eq!(mae_mape(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), (0.0, 0.0));
        assert!((mae(&[1.0, 2.0, 3.0], &[1.5, 2.0, 2.0]).unwrap() - 0.5).abs() < 1e-15);
        let (m, skipped) = mape(&[1.0, 2.0, 4.0], &[1.1, 1.8, 4.4]).unwrap();
        assert!((m - 10.0).abs() < 1e-12);
        assert_eq!(skipped, 0);
        assert_eq!(mape(&[0.0, 2.0], &[1.0, 1.0]).unwrap(), (50.0, 1));
        assert!(mape(&[0.0, 0.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn auc_cases() {
        assert_eq!(auc_roc(&[0.0, 0.0, 1.0, 1.0], &[0.1, 0.2, 0.8, 0.9]).unwrap(), 1.0);
        assert_eq!(auc_roc(&[0.0, 0.0, 1.0, 1.0], &[0.1, 0.4, 0.35, 0.8]).unwrap(), 0.75);
        assert_eq!(auc_roc(&[0.0, 1.0, 0.0, 1.0], &[0.5; 4]).unwrap(), 0.5);
        assert!(auc_roc(&[1.0, 1.0], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn confusion_cases() {
        let y = [1.0, 1.0, 0.0, 0.0];
        let s = [0.9, 0.3, 0.4, 0.1];
        assert_eq!(confusion_at_threshold(&y, &s, 0.0).unwrap(), (1.0, 0.0));
        assert_eq!(confusion_at_threshold(&y, &s, 1.0).unwrap(), (0.0, 1.0));
        assert_eq!(confusion_at_threshold(&y, &s, 0.5).unwrap(), (0.5, 1.0));
        assert!(confusion_at_threshold(&[0.0, 0.0], &[0.1, 0.2], 0.5).is_err());
    }

    #[test]
    fn flags_follow_thresholds() {
        let f = |v| IccFlag::from_icc(Icc { value: v, degenerate: false });
        assert_eq!(f(0.95), IccFlag::Excellent);
        assert_eq!(f(0.90), IccFlag::Good);
        assert_eq!(f(0.80), IccFlag::Good);
        assert_eq!(f(0.75), IccFlag::Moderate);
        assert_eq!(f(0.2), IccFlag::Poor);
    }
}
