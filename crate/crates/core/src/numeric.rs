//! Small numeric kernels shared by every scoring and metric module.
//!
//! All reductions over training sets go through [`pairwise_sum`] so that fits
//! are bit-stable: the summation tree depends only on the length of the input,
//! never on thread count.

use crate::error::{Error, Result};

/// Leaf size of the pairwise summation tree. Inputs at or below this length
/// are summed left to right.
pub const PAIRWISE_BLOCK: usize = 128;

/// Pairwise (cascade) summation with a fixed split rule.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= PAIRWISE_BLOCK {
        return values.iter().fold(0.0, |acc, &v| acc + v);
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Pairwise sum of `f(i)` for `i in 0..n`, without materialising a buffer for
/// the leaves.
pub fn pairwise_sum_by<F: Fn(usize) -> f64>(n: usize, f: &F) -> f64 {
    fn rec<F: Fn(usize) -> f64>(lo: usize, hi: usize, f: &F) -> f64 {
        if hi - lo <= PAIRWISE_BLOCK {
            return (lo..hi).fold(0.0, |acc, i| acc + f(i));
        }
        let mid = lo + (hi - lo) / 2;
        rec(lo, mid, f) + rec(mid, hi, f)
    }
    rec(0, n, f)
}

pub fn pairwise_mean(values: &[f64]) -> f64 {
    pairwise_sum(values) / values.len() as f64
}

/// `max + ln Σ exp(x - max)`. Returns `-inf` for an empty slice.
pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum = values.iter().fold(0.0, |acc, &v| acc + (v - max).exp());
    max + sum.ln()
}

/// Numerically stable softmax (max subtracted before exponentiation).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total = exps.iter().sum::<f64>();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the first maximum.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Linear-interpolation percentile over an already sorted slice, `pct` in
/// `[0, 100]`. `pct = 100` returns the maximum exactly.
pub fn percentile_sorted(sorted: &[f64], pct: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::Input("percentile of an empty set".into()));
    }
    if !(0.0..=100.0).contains(&pct) {
        return Err(Error::Parameter(format!(
            "percentile {pct} outside [0, 100]"
        )));
    }
    let n = sorted.len();
    let h = (n - 1) as f64 * pct / 100.0;
    let lo = h.floor() as usize;
    if lo + 1 >= n {
        return Ok(sorted[n - 1]);
    }
    let frac = h - lo as f64;
    if frac == 0.0 {
        return Ok(sorted[lo]);
    }
    Ok(sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]))
}

pub fn percentile(values: &[f64], pct: f64) -> Result<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    percentile_sorted(&sorted, pct)
}

/// Mean computed as `x0 + Σ(x_i - x0)/n`; exact for constant inputs.
pub fn shifted_mean(values: &[f64]) -> f64 {
    let Some(&first) = values.first() else {
        return f64::NAN;
    };
    let dev: f64 = values.iter().map(|&v| v - first).sum();
    first + dev / values.len() as f64
}

pub fn l2_norm(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |acc, &v| acc + v * v).sqrt()
}

pub fn all_finite(values: &[f64]) -> bool {
    values.iter().all(|v| v.is_finite())
}
