//! Threshold selection (τ for OOD flagging, t* for the detector) and the Ω
//! flagging rule.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::osod::map_at_iou;
use crate::record_io::{CategoryTable, DetectionRecord, GroundTruthObject};
use crate::scoring::IdnessScore;

pub const DEFAULT_TPR_TARGET: f64 = 0.95;

/// Calibrated thresholds. Fields not produced by a given calibration are
/// absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ThresholdReport {
    pub tau: Option<f64>,
    pub tpr_target: Option<f64>,
    pub t_star: Option<f64>,
    pub achieved_tpr: Option<f64>,
    /// `(threshold, metric value)`, ascending by threshold.
    pub sweep_table: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TauCalibration {
    pub tau: f64,
    pub achieved_tpr: f64,
    /// Scores required at or above `tau`.
    pub required: usize,
}

impl From<(TauCalibration, f64)> for ThresholdReport {
    fn from((c, target): (TauCalibration, f64)) -> Self {
        ThresholdReport {
            tau: Some(c.tau),
            tpr_target: Some(target),
            achieved_tpr: Some(c.achieved_tpr),
            ..Default::default()
        }
    }
}

/// `⌈target · n⌉` clamped to `[1, n]`, ignoring float noise in the product.
pub fn required_count(target: f64, n: usize) -> usize {
    let raw = target * n as f64;
    let nearest = raw.round();
    let k = if (raw - nearest).abs() <= 1e-9 * raw.abs().max(1.0) {
        nearest
    } else {
        raw.ceil()
    };
    (k as usize).clamp(1, n)
}

/// The largest τ with at least `⌈target · n⌉` scores `≥ τ`.
pub fn calibrate_tau(id_scores: &[f64], tpr_target: f64) -> Result<TauCalibration> {
    if id_scores.is_empty() {
        return Err(Error::Input("cannot calibrate tau on an empty score set".into()));
    }
    if !(tpr_target > 0.0 && tpr_target < 1.0) {
        return Err(Error::Parameter(format!(
            "TPR target must lie in (0, 1), got {tpr_target}"
        )));
    }
    if id_scores.iter().any(|v| v.is_nan()) {
        return Err(Error::Input("NaN in ID scores".into()));
    }
    let mut sorted = id_scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let required = required_count(tpr_target, sorted.len());
    let tau = sorted[required - 1];
    let kept = sorted.iter().filter(|&&v| v >= tau).count();
    Ok(TauCalibration {
        tau,
        achieved_tpr: kept as f64 / sorted.len() as f64,
        required,
    })
}

/// Sweeps detector confidence thresholds and returns the one maximising
/// mAP on ID data; ties go to the larger threshold.
pub fn calibrate_t_star(
    detections: &[DetectionRecord],
    ground_truth: &[GroundTruthObject],
    categories: &CategoryTable,
    candidate_grid: &[f64],
    iou_threshold: f64,
) -> Result<ThresholdReport> {
    if candidate_grid.is_empty() {
        return Err(Error::Parameter("empty t* candidate grid".into()));
    }
    if candidate_grid.iter().any(|t| t.is_nan()) {
        return Err(Error::Parameter("NaN in t* candidate grid".into()));
    }
    let mut grid = candidate_grid.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let sweep = grid
        .par_iter()
        .map(|&t| {
            let kept: Vec<DetectionRecord> = detections
                .iter()
                .filter(|d| d.confidence >= t)
                .cloned()
                .collect();
            map_at_iou(&kept, ground_truth, categories, iou_threshold).map(|m| (t, m))
        })
        .collect::<Result<Vec<_>>>()?;
    let best = sweep
        .iter()
        .fold(None::<(f64, f64)>, |best, &(t, m)| match best {
            Some((_, bm)) if bm > m => best,
            _ => Some((t, m)),
        })
        .expect("non-empty grid");
    Ok(ThresholdReport {
        t_star: Some(best.0),
        sweep_table: sweep,
        ..Default::default()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    IdKeep,
    OodFlag,
}

/// The class a detection carries after flagging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectiveClass {
    Known(usize),
    Unknown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlaggedDetection<'a> {
    pub record: &'a DetectionRecord,
    pub idness: f64,
    pub verdict: Verdict,
    pub effective_class: EffectiveClass,
}

pub fn omega(idness: f64, tau: f64) -> Verdict {
    if idness >= tau {
        Verdict::IdKeep
    } else {
        Verdict::OodFlag
    }
}

/// Joins each record with its score and applies `score ≥ τ ⇒ ID`. Output is
/// ordered by `(image_id, det_index)`.
pub fn apply_omega<'a>(
    records: &'a [DetectionRecord],
    scores: &[IdnessScore],
    tau: f64,
) -> Result<Vec<FlaggedDetection<'a>>> {
    let lookup: HashMap<(&str, u32), f64> = scores
        .iter()
        .map(|s| ((s.image_id.as_str(), s.det_index), s.value))
        .collect();
    let mut flagged = records
        .iter()
        .map(|r| {
            let idness = *lookup
                .get(&(r.image_id.as_str(), r.det_index))
                .ok_or_else(|| Error::Join(format!("no score for detection {}", r.key())))?;
            let verdict = omega(idness, tau);
            Ok(FlaggedDetection {
                record: r,
                idness,
                verdict,
                effective_class: match verdict {
                    Verdict::IdKeep => EffectiveClass::Known(r.pred_class),
                    Verdict::OodFlag => EffectiveClass::Unknown,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    flagged.sort_by(|a, b| a.record.key().cmp(&b.record.key()));
    Ok(flagged)
}
