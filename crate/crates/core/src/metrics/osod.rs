//! Ground-truth-aware open-set metrics: IoU matching of unknown-flagged and
//! ID-kept detections against ground-truth unknowns, P_U, R_U, AP_U, nOSE,
//! mAP and coverage.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::calibration::{FlaggedDetection, Verdict};
use crate::error::{Error, Result};
use crate::record_io::{BBox, CategoryTable, DetectionRecord, GroundTruthObject};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    if !a.is_valid() || !b.is_valid() {
        return Err(Error::Input(format!(
            "IoU of degenerate box {:?} / {:?}",
            a.to_array(),
            b.to_array()
        )));
    }
    Ok(iou_unchecked(a, b))
}

fn iou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = w * h;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeTag {
    /// Flagged unknown and matched to a ground-truth unknown.
    TpU,
    /// Flagged unknown without a match.
    FpU,
    /// Kept as ID while covering a ground-truth unknown.
    FnM,
    /// Kept as ID, covering no ground-truth unknown.
    IdOther,
}

impl OutcomeTag {
    pub fn as_str(self) -> &'static str {
        match self {
            OutcomeTag::TpU => "tp_u",
            OutcomeTag::FpU => "fp_u",
            OutcomeTag::FnM => "fn_m",
            OutcomeTag::IdOther => "id_other",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionOutcome {
    pub image_id: String,
    pub det_index: u32,
    pub outcome: OutcomeTag,
    /// Index into the canonically sorted ground-truth unknowns.
    pub matched_gt: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchOutcome {
    pub tp_u: usize,
    pub fp_u: usize,
    pub fn_d: usize,
    pub fn_m: usize,
    pub gt_unknowns: usize,
    /// Sorted by `(image_id, det_index)`.
    pub per_detection: Vec<DetectionOutcome>,
    /// Hit/miss of each flagged detection in ranking order.
    pub ranked_hits: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OsodResult {
    pub precision_u: f64,
    pub recall_u: f64,
    pub ap_u: f64,
    pub nose: Option<f64>,
    pub aose: usize,
    pub iou_threshold: f64,
}

/// Ground-truth unknowns in canonical `(image_id, bbox, category)` order.
pub fn canonical_unknowns(gt: &[GroundTruthObject]) -> Vec<&GroundTruthObject> {
    let mut unknowns: Vec<&GroundTruthObject> = gt.iter().filter(|g| g.is_unknown).collect();
    unknowns.sort_by(|a, b| {
        a.image_id
            .cmp(&b.image_id)
            .then(a.bbox.total_cmp(&b.bbox))
            .then(a.category_id.cmp(&b.category_id))
    });
    unknowns
}

struct GtIndex<'a> {
    boxes: Vec<&'a BBox>,
    by_image: HashMap<&'a str, Vec<usize>>,
    matched: Vec<bool>,
}

impl<'a> GtIndex<'a> {
    fn new<I: IntoIterator<Item = (&'a str, &'a BBox)>>(items: I) -> Self {
        let mut boxes = Vec::new();
        let mut by_image: HashMap<&str, Vec<usize>> = HashMap::new();
        for (i, (image, b)) in items.into_iter().enumerate() {
            boxes.push(b);
            by_image.entry(image).or_default().push(i);
        }
        let matched = vec![false; boxes.len()];
        Self {
            boxes,
            by_image,
            matched,
        }
    }

    /// Highest-IoU unmatched box of the image at or above the threshold;
    /// ties go to the lower index.
    fn claim(&mut self, image_id: &str, bbox: &BBox, threshold: f64) -> Option<usize> {
        let candidates = self.by_image.get(image_id)?;
        let mut best: Option<(usize, f64)> = None;
        for &g in candidates {
            if self.matched[g] {
                continue;
            }
            let v = iou_unchecked(bbox, self.boxes[g]);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        let (g, v) = best?;
        if v >= threshold {
            self.matched[g] = true;
            Some(g)
        } else {
            None
        }
    }
}

fn check_threshold(iou_threshold: f64) -> Result<()> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::Parameter(format!(
            "IoU threshold {iou_threshold} outside (0, 1]"
        )));
    }
    Ok(())
}

/// Indices of flagged detections in descending ranking order, ties by
/// `(image_id, det_index)`.
fn ranked_order(flagged: &[FlaggedDetection<'_>], ranks: &[f64]) -> Result<Vec<usize>> {
    if ranks.len() != flagged.len() {
        return Err(Error::Input(format!(
            "{} ranking values for {} detections",
            ranks.len(),
            flagged.len()
        )));
    }
    let mut order: Vec<usize> = (0..flagged.len())
        .filter(|&i| flagged[i].verdict == Verdict::OodFlag)
        .collect();
    if order.iter().any(|&i| ranks[i].is_nan()) {
        return Err(Error::Input("NaN ranking value".into()));
    }
    order.sort_by(|&a, &b| {
        ranks[b]
            .total_cmp(&ranks[a])
            .then(flagged[a].record.key().cmp(&flagged[b].record.key()))
    });
    Ok(order)
}

/// Three-stage outcome classification. `ranks[i]` is the unknown-class
/// confidence of `flagged[i]` (only read for flagged-unknown detections).
pub fn match_unknowns(
    flagged: &[FlaggedDetection<'_>],
    gt: &[GroundTruthObject],
    iou_threshold: f64,
    ranks: &[f64],
) -> Result<MatchOutcome> {
    check_threshold(iou_threshold)?;
    let unknowns = canonical_unknowns(gt);
    let mut index = GtIndex::new(unknowns.iter().map(|g| (g.image_id.as_str(), &g.bbox)));
    let mut per_detection = Vec::with_capacity(flagged.len());
    let mut ranked_hits = Vec::new();

    for i in ranked_order(flagged, ranks)? {
        let r = flagged[i].record;
        let m = index.claim(&r.image_id, &r.bbox, iou_threshold);
        ranked_hits.push(m.is_some());
        per_detection.push(DetectionOutcome {
            image_id: r.image_id.clone(),
            det_index: r.det_index,
            outcome: if m.is_some() { OutcomeTag::TpU } else { OutcomeTag::FpU },
            matched_gt: m,
        });
    }

    let mut kept: Vec<&FlaggedDetection<'_>> = flagged
        .iter()
        .filter(|f| f.verdict == Verdict::IdKeep)
        .collect();
    kept.sort_by(|a, b| {
        b.record
            .confidence
            .total_cmp(&a.record.confidence)
            .then(a.record.key().cmp(&b.record.key()))
    });
    for f in kept {
        let r = f.record;
        let m = index.claim(&r.image_id, &r.bbox, iou_threshold);
        per_detection.push(DetectionOutcome {
            image_id: r.image_id.clone(),
            det_index: r.det_index,
            outcome: if m.is_some() { OutcomeTag::FnM } else { OutcomeTag::IdOther },
            matched_gt: m,
        });
    }

    per_detection.sort_by(|a, b| {
        a.image_id
            .cmp(&b.image_id)
            .then(a.det_index.cmp(&b.det_index))
    });
    let count = |tag| per_detection.iter().filter(|d| d.outcome == tag).count();
    let tp_u = count(OutcomeTag::TpU);
    let fn_m = count(OutcomeTag::FnM);
    let fn_d = index.matched.iter().filter(|m| !**m).count();
    let outcome = MatchOutcome {
        tp_u,
        fp_u: count(OutcomeTag::FpU),
        fn_d,
        fn_m,
        gt_unknowns: unknowns.len(),
        per_detection,
        ranked_hits,
    };
    if outcome.tp_u + outcome.fn_d + outcome.fn_m != outcome.gt_unknowns {
        return Err(Error::Numerical(
            "matching lost track of a ground-truth unknown".into(),
        ));
    }
    Ok(outcome)
}

/// `(P_U, R_U)` with `0` for empty denominators.
pub fn precision_recall_unknown(outcome: &MatchOutcome) -> (f64, f64) {
    let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    (
        ratio(outcome.tp_u, outcome.tp_u + outcome.fp_u),
        ratio(outcome.tp_u, outcome.tp_u + outcome.fn_d + outcome.fn_m),
    )
}

/// Fraction of ground-truth unknowns kept as an ID class; absent without
/// any ground-truth unknown.
pub fn nose(outcome: &MatchOutcome) -> Option<f64> {
    let total = outcome.tp_u + outcome.fn_d + outcome.fn_m;
    (total > 0).then(|| outcome.fn_m as f64 / total as f64)
}

/// All-point interpolated AP of a ranked hit/miss sequence.
pub fn average_precision(ranked_hits: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(ranked_hits.len() + 2);
    let mut precision = Vec::with_capacity(ranked_hits.len() + 2);
    recall.push(0.0);
    precision.push(0.0);
    let (mut tp, mut fp) = (0usize, 0usize);
    for &hit in ranked_hits {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    recall.push(1.0);
    precision.push(0.0);
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    for i in 1..recall.len() {
        if recall[i] != recall[i - 1] {
            ap += (recall[i] - recall[i - 1]) * precision[i];
        }
    }
    ap
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApUnknown {
    pub ap: f64,
    /// No ground-truth unknown exists; `ap` is 0 by definition.
    pub no_ground_truth: bool,
}

/// AP of the unknown class from the Stage-1 greedy sweep.
pub fn ap_unknown(
    flagged: &[FlaggedDetection<'_>],
    ranks: &[f64],
    gt: &[GroundTruthObject],
    iou_threshold: f64,
) -> Result<ApUnknown> {
    check_threshold(iou_threshold)?;
    let unknowns = canonical_unknowns(gt);
    let mut index = GtIndex::new(unknowns.iter().map(|g| (g.image_id.as_str(), &g.bbox)));
    let hits: Vec<bool> = ranked_order(flagged, ranks)?
        .into_iter()
        .map(|i| {
            let r = flagged[i].record;
            index.claim(&r.image_id, &r.bbox, iou_threshold).is_some()
        })
        .collect();
    Ok(ApUnknown {
        ap: average_precision(&hits, unknowns.len()),
        no_ground_truth: unknowns.is_empty(),
    })
}

pub fn osod_result(outcome: &MatchOutcome, iou_threshold: f64) -> OsodResult {
    let (precision_u, recall_u) = precision_recall_unknown(outcome);
    OsodResult {
        precision_u,
        recall_u,
        ap_u: average_precision(&outcome.ranked_hits, outcome.gt_unknowns),
        nose: nose(outcome),
        aose: outcome.fn_m,
        iou_threshold,
    }
}

/// Mean over ID classes with ground truth of the per-class all-point AP,
/// detections ranked by confidence.
pub fn map_at_iou(
    detections: &[DetectionRecord],
    gt: &[GroundTruthObject],
    categories: &CategoryTable,
    iou_threshold: f64,
) -> Result<f64> {
    let per_class = per_class_ap(detections, gt, categories, iou_threshold)?;
    Ok(per_class.values().sum::<f64>() / per_class.len() as f64)
}

/// AP per ID category id with at least one ground-truth object.
pub fn per_class_ap(
    detections: &[DetectionRecord],
    gt: &[GroundTruthObject],
    categories: &CategoryTable,
    iou_threshold: f64,
) -> Result<BTreeMap<i64, f64>> {
    check_threshold(iou_threshold)?;
    let mut gt_by_class: BTreeMap<i64, Vec<&GroundTruthObject>> = BTreeMap::new();
    for g in gt {
        if categories.id_classes().contains(&g.category_id) {
            gt_by_class.entry(g.category_id).or_default().push(g);
        }
    }
    if gt_by_class.is_empty() {
        return Err(Error::Input("no ID class has ground truth".into()));
    }
    let mut out = BTreeMap::new();
    for (&category, objects) in &mut gt_by_class {
        objects.sort_by(|a, b| a.image_id.cmp(&b.image_id).then(a.bbox.total_cmp(&b.bbox)));
        let mut index = GtIndex::new(objects.iter().map(|g| (g.image_id.as_str(), &g.bbox)));
        let mut dets: Vec<&DetectionRecord> = detections
            .iter()
            .filter(|d| categories.class_category(d.pred_class) == Some(category))
            .collect();
        dets.sort_by(|a, b| {
            b.confidence
                .total_cmp(&a.confidence)
                .then(a.key().cmp(&b.key()))
        });
        let hits: Vec<bool> = dets
            .iter()
            .map(|d| index.claim(&d.image_id, &d.bbox, iou_threshold).is_some())
            .collect();
        out.insert(category, average_precision(&hits, objects.len()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageStats {
    pub fraction_no_detections: f64,
    pub images: usize,
    pub images_without_detections: usize,
    /// Detection count per manifest image.
    pub per_image: BTreeMap<String, usize>,
    /// Detections on images missing from the manifest (ignored).
    pub unlisted_detections: usize,
}

/// Fraction of the image universe with no retained detection.
pub fn coverage_stats(detections: &[DetectionRecord], images: &[String]) -> Result<CoverageStats> {
    if images.is_empty() {
        return Err(Error::Input(
            "coverage needs the image manifest; none given or it is empty".into(),
        ));
    }
    let mut per_image: BTreeMap<String, usize> = images.iter().map(|i| (i.clone(), 0)).collect();
    let mut unlisted = 0;
    for d in detections {
        match per_image.get_mut(&d.image_id) {
            Some(c) => *c += 1,
            None => unlisted += 1,
        }
    }
    let empty = per_image.values().filter(|&&c| c == 0).count();
    Ok(CoverageStats {
        fraction_no_detections: empty as f64 / per_image.len() as f64,
        images: per_image.len(),
        images_without_detections: empty,
        per_image,
        unlisted_detections: unlisted,
    })
}
