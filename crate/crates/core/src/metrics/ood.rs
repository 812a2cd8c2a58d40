//! ID-vs-OOD separation metrics with ID as the positive class.

use serde::{Deserialize, Serialize};

use crate::calibration::calibrate_tau;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetricResult {
    pub auroc: f64,
    pub fpr_at_tpr: f64,
    pub tpr_target: f64,
    pub n_id: usize,
    pub n_ood: usize,
}

fn check_population(name: &str, scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Input(format!("empty {name} score population")));
    }
    if scores.iter().any(|v| v.is_nan()) {
        return Err(Error::Input(format!("NaN in {name} scores")));
    }
    Ok(())
}

/// Twice the Mann-Whitney U statistic of the ID population, in integers:
/// ties receive midranks, kept exact by doubling.
pub fn doubled_u_statistic(id_scores: &[f64], ood_scores: &[f64]) -> Result<u128> {
    check_population("ID", id_scores)?;
    check_population("OOD", ood_scores)?;
    let mut all: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&v| (v, true))
        .chain(ood_scores.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut doubled_rank_sum: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i + 1;
        // -0.0 and 0.0 are equal scores
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let doubled_midrank = (i + 1 + j) as u128;
        let id_in_group = all[i..j].iter().filter(|e| e.1).count() as u128;
        doubled_rank_sum += doubled_midrank * id_in_group;
        i = j;
    }
    let n_id = id_scores.len() as u128;
    Ok(doubled_rank_sum - n_id * (n_id + 1))
}

/// Probability that a random ID score exceeds a random OOD score, ties
/// counted half.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    let twice_u = doubled_u_statistic(id_scores, ood_scores)?;
    let pairs = 2 * id_scores.len() as u128 * ood_scores.len() as u128;
    Ok(twice_u as f64 / pairs as f64)
}

/// Fraction of OOD scores at or above the threshold that keeps
/// `tpr_target` of the ID scores.
pub fn fpr_at_tpr(id_scores: &[f64], ood_scores: &[f64], tpr_target: f64) -> Result<f64> {
    check_population("OOD", ood_scores)?;
    let tau = calibrate_tau(id_scores, tpr_target)?.tau;
    Ok(fraction_at_or_above(ood_scores, tau))
}

pub fn fraction_at_or_above(scores: &[f64], threshold: f64) -> f64 {
    scores.iter().filter(|&&v| v >= threshold).count() as f64 / scores.len() as f64
}

pub fn binary_metrics(id_scores: &[f64], ood_scores: &[f64], tpr_target: f64) -> Result<BinaryMetricResult> {
    Ok(BinaryMetricResult {
        auroc: auroc(id_scores, ood_scores)?,
        fpr_at_tpr: fpr_at_tpr(id_scores, ood_scores, tpr_target)?,
        tpr_target,
        n_id: id_scores.len(),
        n_ood: ood_scores.len(),
    })
}
