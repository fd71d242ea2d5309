//! Slow, textbook reference implementations used to check the metrics.
//! Each one takes a different computational route from the library.

#![allow(dead_code)]

/// ICC(2,1) from the full two-way ANOVA table, with the error sum of
/// squares obtained by subtraction `SSE = SST − SSR − SSC`.
pub fn icc_2_1(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let k = 2usize;
    let table: Vec<[f64; 2]> = x.iter().zip(y).map(|(&a, &b)| [a, b]).collect();
    let grand: f64 = table.iter().flat_map(|r| r.iter()).sum::<f64>() / (n * k) as f64;
    let sst: f64 = table
        .iter()
        .flat_map(|r| r.iter())
        .map(|v| (v - grand) * (v - grand))
        .sum();
    let mut ssr = 0.0;
    for row in &table {
        let m = (row[0] + row[1]) / k as f64;
        ssr += k as f64 * (m - grand) * (m - grand);
    }
    let mut ssc = 0.0;
    for j in 0..k {
        let m: f64 = table.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        ssc += n as f64 * (m - grand) * (m - grand);
    }
    let sse = sst - ssr - ssc;
    let msr = ssr / (n - 1) as f64;
    let msc = ssc / (k - 1) as f64;
    let mse = sse / ((n - 1) * (k - 1)) as f64;
    (msr - mse) / (msr + (k - 1) as f64 * mse + k as f64 * (msc - mse) / n as f64)
}

/// `1 − SSres/SStot`, accumulating in reverse order.
pub fn r_squared(truth: &[f64], pred: &[f64]) -> f64 {
    let n = truth.len() as f64;
    let mut mean = 0.0;
    for v in truth.iter().rev() {
        mean += v / n;
    }
    let mut res = 0.0;
    let mut tot = 0.0;
    for i in (0..truth.len()).rev() {
        res += (truth[i] - pred[i]).powi(2);
        tot += (truth[i] - mean).powi(2);
    }
    1.0 - res / tot
}

pub fn mae(truth: &[f64], pred: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..truth.len() {
        s += (pred[i] - truth[i]).abs();
    }
    s / truth.len() as f64
}

/// Percent, over nonzero truths only.
pub fn mape(truth: &[f64], pred: &[f64]) -> f64 {
    let pairs: Vec<(f64, f64)> = truth
        .iter()
        .zip(pred)
        .filter(|(y, _)| **y != 0.0)
        .map(|(&y, &p)| (y, p))
        .collect();
    pairs.iter().map(|(y, p)| ((p - y) / y).abs() * 100.0).sum::<f64>() / pairs.len() as f64
}

/// Probability that a random positive outscores a random negative, ties
/// counted as one half, by enumerating every pair.
pub fn auc(labels: &[f64], scores: &[f64]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..labels.len() {
        for j in 0..labels.len() {
            if labels[i] == 1.0 && labels[j] == 0.0 {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// `(sensitivity, specificity)` with `score ≥ threshold` predicted positive.
pub fn confusion(labels: &[f64], scores: &[f64], threshold: f64) -> (f64, f64) {
    let pos: Vec<bool> = labels
        .iter()
        .zip(scores)
        .filter(|(l, _)| **l == 1.0)
        .map(|(_, s)| *s >= threshold)
        .collect();
    let neg: Vec<bool> = labels
        .iter()
        .zip(scores)
        .filter(|(l, _)| **l == 0.0)
        .map(|(_, s)| *s < threshold)
        .collect();
    let rate = |v: &[bool]| v.iter().filter(|&&b| b).count() as f64 / v.len() as f64;
    (rate(&pos), rate(&neg))
}

/// Relative agreement, with an absolute floor for values that are exactly zero.
pub fn close(actual: f64, expected: f64, rel: f64) -> bool {
    let diff = (actual - expected).abs();
    diff <= rel * expected.abs() || diff <= 1e-12
}
