//! Scores computed from logits or softmax alone. These apply to every
//! detector architecture.

use crate::error::{Error, Result};
use crate::numeric::{all_finite, logsumexp, softmax};

pub const DEFAULT_TEMPERATURE: f64 = 1.0;
pub const DEFAULT_GEN_LAMBDA: f64 = 0.5;

/// Tolerance on `Σ p = 1` accepted by [`gen_score`].
pub const PROBABILITY_SUM_TOLERANCE: f64 = 1e-6;

fn check_logits(logits: &[f64]) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::Input("empty logits".into()));
    }
    if !all_finite(logits) {
        return Err(Error::Input("non-finite logits".into()));
    }
    Ok(())
}

/// Maximum softmax probability.
pub fn msp_score(logits: &[f64]) -> Result<f64> {
    check_logits(logits)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total = logits.iter().fold(0.0, |acc, &v| acc + (v - max).exp());
    Ok(1.0 / total)
}

/// Negative free energy, `T · log Σ exp(c_j / T)`. Larger means more ID.
pub fn energy_score(logits: &[f64], temperature: f64) -> Result<f64> {
    check_logits(logits)?;
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Parameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if temperature == 1.0 {
        return Ok(logsumexp(logits));
    }
    let scaled: Vec<f64> = logits.iter().map(|c| c / temperature).collect();
    Ok(temperature * logsumexp(&scaled))
}

/// Negated generalized entropy `-Σ (p_j (1 - p_j))^λ`.
pub fn gen_score(probs: &[f64], lambda: f64) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::Input("empty probability vector".into()));
    }
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::Parameter(format!(
            "GEN lambda must lie in (0, 1), got {lambda}"
        )));
    }
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Input("probabilities must lie in [0, 1]".into()));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > PROBABILITY_SUM_TOLERANCE {
        return Err(Error::Input(format!(
            "probabilities sum to {total}, not 1"
        )));
    }
    let entropy = probs
        .iter()
        .fold(0.0, |acc, &p| acc + (p * (1.0 - p)).powf(lambda));
    Ok(-entropy)
}

/// GEN on the softmax of raw logits.
pub fn gen_from_logits(logits: &[f64], lambda: f64) -> Result<f64> {
    check_logits(logits)?;
    gen_score(&softmax(logits), lambda)
}
