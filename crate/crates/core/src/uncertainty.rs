//! Post-hoc variance calibration, confidence intervals and coverage.

use std::path::Path;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{MimirError, Result};

/// Targets with fewer unmasked points than this keep a factor of 1.
pub const MIN_CALIBRATION_POINTS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationFactors {
    /// Multiplier on the predicted σ, one per target.
    pub factors: Vec<f64>,
    pub n_points: Vec<usize>,
    /// `false` where too few points were available and the factor defaulted to 1.
    pub calibrated: Vec<bool>,
    /// Identifier of the set the factors were fitted on, e.g. `fold-3`.
    pub source: String,
}

impl CalibrationFactors {
    pub fn identity(n_targets: usize) -> Self {
        CalibrationFactors {
            factors: vec![1.0; n_targets],
            n_points: vec![0; n_targets],
            calibrated: vec![false; n_targets],
            source: "none".into(),
        }
    }

    pub fn write_csv(&self, targets: &[String], path: impl AsRef<Path>) -> Result<()> {
        if targets.len() != self.factors.len() {
            return Err(MimirError::shape(self.factors.len(), targets.len()));
        }
        let mut w = csv::Writer::from_path(path.as_ref())?;
        w.write_record(["target", "factor", "n_points"])?;
        for (i, t) in targets.iter().enumerate() {
            w.write_record([t.clone(), self.factors[i].to_string(), self.n_points[i].to_string()])?;
        }
        w.flush().map_err(|e| MimirError::io(path.as_ref(), e))
    }
}

/// Per-target scale `s_t = √(mean over unmasked points of (y − μ)² / σ̂²)`.
///
/// All slices are `n × T` row-major. After scaling, the mean standardized
/// squared residual on the fitting set is exactly 1 (up to rounding).
pub fn fit_calibration(
    mu: &[f64],
    sigma: &[f64],
    y: &[f64],
    masks: &[u8],
    n_targets: usize,
    source: impl Into<String>,
) -> Result<CalibrationFactors> {
    let len = mu.len();
    if n_targets == 0 || len % n_targets != 0 || [sigma.len(), y.len(), masks.len()].iter().any(|&l| l != len) {
        return Err(MimirError::shape(
            format!("n x {n_targets} arrays"),
            format!("{len} / {} / {} / {}", sigma.len(), y.len(), masks.len()),
        ));
    }
    let n = len / n_targets;
    let mut out = CalibrationFactors::identity(n_targets);
    out.source = source.into();
    for t in 0..n_targets {
        let mut sum = 0.0;
        let mut count = 0usize;
        for r in 0..n {
            let i = r * n_targets + t;
            if masks[i] != 1 {
                continue;
            }
            if !(sigma[i] > 0.0 && sigma[i].is_finite()) {
                return Err(MimirError::validation(
                    "sigma",
                    format!("predicted sigma must be positive and finite, got {}", sigma[i]),
                ));
            }
            let z = (y[i] - mu[i]) / sigma[i];
            sum += z * z;
            count += 1;
        }
        out.n_points[t] = count;
        if count < MIN_CALIBRATION_POINTS {
            continue;
        }
        let factor = (sum / count as f64).sqrt();
        if factor > 0.0 && factor.is_finite() {
            out.factors[t] = factor;
            out.calibrated[t] = true;
        }
    }
    Ok(out)
}

/// Two-sided standard-normal quantile for a central `level`.
pub fn z_for_level(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(MimirError::validation(
            "level",
            format!("must lie in (0, 1), got {level}"),
        ));
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(normal.inverse_cdf(0.5 + level / 2.0))
}

/// `[μ − z·σ, μ + z·σ]`.
pub fn confidence_interval(mu: f64, sigma_cal: f64, level: f64) -> Result<(f64, f64)> {
    if !(sigma_cal >= 0.0) {
        return Err(MimirError::validation(
            "sigma_cal",
            format!("must be >= 0, got {sigma_cal}"),
        ));
    }
    let half = z_for_level(level)? * sigma_cal;
    Ok((mu - half, mu + half))
}

/// Fraction of unmasked truths inside their (inclusive) interval.
pub fn coverage(intervals: &[(f64, f64)], truths: &[f64], masks: &[u8]) -> Result<f64> {
    if intervals.len() != truths.len() || truths.len() != masks.len() {
        return Err(MimirError::shape(
            intervals.len(),
            format!("{} truths / {} masks", truths.len(), masks.len()),
        ));
    }
    let mut inside = 0usize;
    let mut total = 0usize;
    for ((&(lo, hi), &y), &m) in intervals.iter().zip(truths).zip(masks) {
        if m != 1 {
            continue;
        }
        total += 1;
        if lo <= y && y <= hi {
            inside += 1;
        }
    }
    if total == 0 {
        return Err(MimirError::validation("coverage", "no unmasked points"));
    }
    Ok(inside as f64 / total as f64)
}
