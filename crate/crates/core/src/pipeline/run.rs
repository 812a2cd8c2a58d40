//! Fit, score, calibrate and evaluate every (method, split) row.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::Read;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::config::{PipelineConfig, UnknownRanking};
use super::report::{
    emit_tables, AbortedRow, EvalReport, ReportMetadata, ReportRow, TableFormat,
    REPORT_FORMAT_VERSION,
};
use crate::calibration::{apply_omega, calibrate_tau, ThresholdReport, Verdict};
use crate::error::{Error, Result};
use crate::metrics::ood::binary_metrics;
use crate::metrics::osod::{coverage_stats, match_unknowns, osod_result};
use crate::record_io::{
    load_categories, load_detections, load_feature_maps, load_ground_truth, load_head,
    load_image_list, save_outcomes, CategoryTable, DetectionRecord, GroundTruthObject,
    HeadWeights, OutcomeLine,
};
use crate::scoring::latent::{resolve_pooled, PooledSet, SAMPLING_RATIO};
use crate::scoring::mixed::OffsetSign;
use crate::scoring::{fit_scorer, score_records, FittedScorer, MethodId, ScoringInputs, ScoringParams};

/// Hex SHA-256 of a file's contents.
pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

struct LoadedSplit {
    records: Vec<DetectionRecord>,
    ground_truth: Vec<GroundTruthObject>,
    images: Option<Vec<String>>,
    pooled: Option<std::result::Result<PooledSet, String>>,
}

struct Shared<'a> {
    cfg: &'a PipelineConfig,
    params: ScoringParams,
    categories: CategoryTable,
    head: Option<HeadWeights>,
    train: std::result::Result<Vec<DetectionRecord>, String>,
    id_records: Vec<DetectionRecord>,
    train_pooled: Option<std::result::Result<PooledSet, String>>,
    id_pooled: Option<std::result::Result<PooledSet, String>>,
    splits: Vec<(String, std::result::Result<LoadedSplit, String>)>,
}

/// A finished run: the report plus per-row outcome dumps.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub report: EvalReport,
    /// `(method, split)` → outcome lines.
    pub outcomes: Vec<((MethodId, String), Vec<OutcomeLine>)>,
}

fn require(cfg: &PipelineConfig, p: &str, what: &str) -> Result<PathBuf> {
    cfg.path(p)
        .ok_or_else(|| Error::Config(format!("{what} is not configured")))
}

fn pooled_for(
    records: &[DetectionRecord],
    maps: Option<PathBuf>,
    layer: &str,
    resolution: usize,
) -> std::result::Result<PooledSet, String> {
    let layer = (!layer.is_empty()).then_some(layer);
    let stream = match maps {
        Some(p) => Some(load_feature_maps(&p).map_err(|e| e.to_string())?),
        None => None,
    };
    resolve_pooled(records, stream, layer, resolution).map_err(|e| e.to_string())
}

fn load_split(
    cfg: &PipelineConfig,
    split: &super::config::SplitSection,
    categories: &CategoryTable,
    needs_latent: bool,
    resolution: usize,
) -> Result<LoadedSplit> {
    let records = load_detections(&require(cfg, &split.records, "split records")?, categories)?;
    let ground_truth = load_ground_truth(&require(cfg, &split.ground_truth, "split ground truth")?, categories)?;
    let images = match cfg.path(&split.images) {
        Some(p) => Some(load_image_list(&p)?),
        None => None,
    };
    let pooled = needs_latent.then(|| {
        pooled_for(
            &records,
            cfg.path(&split.feature_maps),
            &cfg.resolved.inputs.latent_layer,
            resolution,
        )
    });
    Ok(LoadedSplit {
        records,
        ground_truth,
        images,
        pooled,
    })
}

fn design_notes(cfg: &PipelineConfig) -> Vec<String> {
    let r = &cfg.resolved;
    let mut notes = vec![
        "scores are oriented as ID-ness: larger means more in-distribution; score >= tau keeps a detection as ID".to_string(),
        "AUROC by midrank Mann-Whitney statistic with half credit for ties; ID is the positive class".to_string(),
        "covariance uses 1/N normalisation; training objects are labelled by predicted class".to_string(),
        "matching is greedy with highest-IoU choice, ties to the lower canonical ground-truth index".to_string(),
        "FN^M counts only detections kept as ID".to_string(),
        "P_U is 0 when nothing is flagged unknown; AP_U uses all-point interpolation".to_string(),
    ];
    let methods = &r.run.methods;
    if methods.contains(&MethodId::Ash) {
        notes.push("ASH: pruning threshold is the global training percentile; s1 and s2 are per-sample sums".into());
    }
    if methods.iter().any(|m| matches!(m, MethodId::Dice | MethodId::DiceReact)) {
        notes.push("DICE: top-k per output unit with k = floor(keep_fraction * d), at least 1; ties to the lower column".into());
    }
    if methods.contains(&MethodId::Vim) {
        let sign = match r.scoring.vim_offset_sign {
            OffsetSign::Add => "z + o",
            OffsetSign::Subtract => "z - o",
        };
        notes.push(format!("ViM: features centred as {sign} with o = -pinv(W) b"));
    }
    if methods.contains(&MethodId::Lard) {
        notes.push(format!(
            "LaRD: aligned RoIAlign, {SAMPLING_RATIO}x{SAMPLING_RATIO} samples per bin, R = {}; raw feature maps take precedence over exporter-pooled vectors",
            r.scoring.roi_resolution
        ));
    }
    notes.push(match r.run.ap_u_ranking {
        UnknownRanking::OodMargin => "AP_U ranks flagged detections by tau - idness".into(),
        UnknownRanking::Confidence => "AP_U ranks flagged detections by detector confidence".into(),
    });
    notes
}

fn hash_inputs(cfg: &PipelineConfig) -> Result<BTreeMap<String, String>> {
    let i = &cfg.resolved.inputs;
    let mut paths: Vec<&str> = vec![
        &i.categories,
        &i.train_records,
        &i.id_records,
        &i.head,
        &i.train_feature_maps,
        &i.id_feature_maps,
    ];
    for s in &cfg.resolved.splits {
        paths.extend([
            s.records.as_str(),
            s.ground_truth.as_str(),
            s.images.as_str(),
            s.feature_maps.as_str(),
        ]);
    }
    let mut out = BTreeMap::new();
    for p in paths.into_iter().filter(|p| !p.is_empty()) {
        if let Some(full) = cfg.path(p) {
            if full.exists() {
                out.insert(p.to_string(), sha256_file(&full)?);
            }
        }
    }
    Ok(out)
}

type RowResult = std::result::Result<(ReportRow, Vec<OutcomeLine>, Vec<String>), AbortedRow>;

struct MethodResult {
    threshold: Option<ThresholdReport>,
    rows: Vec<RowResult>,
    warnings: Vec<String>,
}

fn pooled_or(
    p: &Option<std::result::Result<PooledSet, String>>,
) -> std::result::Result<Option<&PooledSet>, String> {
    match p {
        Some(Ok(p)) => Ok(Some(p)),
        Some(Err(e)) => Err(e.clone()),
        None => Ok(None),
    }
}

fn run_method(shared: &Shared<'_>, method: MethodId) -> MethodResult {
    let abort_all = |cause: String| MethodResult {
        threshold: None,
        rows: shared
            .splits
            .iter()
            .map(|(name, _)| {
                Err(AbortedRow {
                    method,
                    ood_split: name.clone(),
                    cause: cause.clone(),
                })
            })
            .collect(),
        warnings: Vec::new(),
    };
    let mut warnings = Vec::new();

    let inputs_with = |pooled| ScoringInputs {
        head: shared.head.as_ref(),
        pooled,
    };

    let scorer = if method.needs_fit() {
        let train = match &shared.train {
            Ok(t) => t,
            Err(e) => return abort_all(format!("training records: {e}")),
        };
        let pooled = if method.needs_latent() {
            match pooled_or(&shared.train_pooled) {
                Ok(p) => p,
                Err(e) => return abort_all(format!("training latents: {e}")),
            }
        } else {
            None
        };
        fit_scorer(method, &shared.params, train, shared.categories.num_classes(), inputs_with(pooled))
    } else {
        fit_scorer(method, &shared.params, &[], shared.categories.num_classes(), inputs_with(None))
    };
    let scorer: FittedScorer = match scorer {
        Ok(s) => s,
        Err(e) => return abort_all(format!("fit: {e}")),
    };

    let id_pooled = if method.needs_latent() {
        match pooled_or(&shared.id_pooled) {
            Ok(p) => p,
            Err(e) => return abort_all(format!("ID latents: {e}")),
        }
    } else {
        None
    };
    let id_scores = match score_records(&scorer, &shared.id_records, inputs_with(id_pooled)) {
        Ok(s) => s,
        Err(e) => return abort_all(format!("scoring ID records: {e}")),
    };
    let id_values: Vec<f64> = id_scores.iter().map(|s| s.value).collect();
    let tpr_target = shared.cfg.resolved.run.tpr_target;
    let threshold = match shared.cfg.resolved.run.fixed_tau {
        Some(tau) => ThresholdReport {
            tau: Some(tau),
            tpr_target: Some(tpr_target),
            achieved_tpr: (!id_values.is_empty()).then(|| {
                id_values.iter().filter(|&&v| v >= tau).count() as f64 / id_values.len() as f64
            }),
            ..Default::default()
        },
        None => match calibrate_tau(&id_values, tpr_target) {
            Ok(c) => (c, tpr_target).into(),
            Err(e) => return abort_all(format!("tau calibration: {e}")),
        },
    };
    let tau = threshold.tau.expect("tau set");
    let id_degenerate = id_scores.iter().filter(|s| s.degenerate).count();
    if id_degenerate > 0 {
        warnings.push(format!("{method}: {id_degenerate} ID detections scored through a degenerate fallback"));
    }

    let rows = shared
        .splits
        .iter()
        .map(|(name, split)| {
            let split = split.as_ref().map_err(|e| AbortedRow {
                method,
                ood_split: name.clone(),
                cause: e.clone(),
            })?;
            run_row(shared, &scorer, method, name, split, &id_values, tau).map_err(|cause| AbortedRow {
                method,
                ood_split: name.clone(),
                cause,
            })
        })
        .collect();
    MethodResult {
        threshold: Some(threshold),
        rows,
        warnings,
    }
}

fn run_row(
    shared: &Shared<'_>,
    scorer: &FittedScorer,
    method: MethodId,
    split_name: &str,
    split: &LoadedSplit,
    id_values: &[f64],
    tau: f64,
) -> std::result::Result<(ReportRow, Vec<OutcomeLine>, Vec<String>), String> {
    let run = &shared.cfg.resolved.run;
    let mut warnings = Vec::new();
    let pooled = match &split.pooled {
        Some(Ok(p)) if method.needs_latent() => Some(p),
        Some(Err(e)) if method.needs_latent() => return Err(format!("latents: {e}")),
        _ => None,
    };
    if let Some(p) = pooled {
        warnings.extend(p.warnings.iter().map(|w| format!("{split_name}: {w}")));
    }
    let inputs = ScoringInputs {
        head: shared.head.as_ref(),
        pooled,
    };
    let scores = score_records(scorer, &split.records, inputs).map_err(|e| format!("scoring: {e}"))?;
    let ood_values: Vec<f64> = scores.iter().map(|s| s.value).collect();
    let binary = binary_metrics(id_values, &ood_values, run.tpr_target).map_err(|e| format!("AUROC/FPR: {e}"))?;

    // Restrict detections and ground truth to the split's image universe.
    let (records, gt): (Vec<DetectionRecord>, Vec<GroundTruthObject>) = match &split.images {
        Some(images) => {
            let universe: BTreeSet<&str> = images.iter().map(String::as_str).collect();
            let recs: Vec<_> = split
                .records
                .iter()
                .filter(|r| universe.contains(r.image_id.as_str()))
                .cloned()
                .collect();
            let gt: Vec<_> = split
                .ground_truth
                .iter()
                .filter(|g| universe.contains(g.image_id.as_str()))
                .cloned()
                .collect();
            let dropped = (split.records.len() - recs.len(), split.ground_truth.len() - gt.len());
            if dropped != (0, 0) {
                warnings.push(format!(
                    "{split_name}: {} detections and {} ground-truth objects lie outside the image list and were ignored",
                    dropped.0, dropped.1
                ));
            }
            (recs, gt)
        }
        None => (split.records.clone(), split.ground_truth.clone()),
    };
    let flagged = apply_omega(&records, &scores, tau).map_err(|e| e.to_string())?;
    let ranks: Vec<f64> = flagged
        .iter()
        .map(|f| match run.ap_u_ranking {
            UnknownRanking::OodMargin => tau - f.idness,
            UnknownRanking::Confidence => f.record.confidence,
        })
        .collect();
    let outcome = match_unknowns(&flagged, &gt, run.iou_threshold, &ranks).map_err(|e| format!("matching: {e}"))?;
    let osod = osod_result(&outcome, run.iou_threshold);
    let coverage = match &split.images {
        Some(images) => Some(
            coverage_stats(&records, images)
                .map_err(|e| format!("coverage: {e}"))?
                .fraction_no_detections,
        ),
        None => {
            warnings.push(format!("{split_name}: no image list; coverage not computed"));
            None
        }
    };

    let idness: BTreeMap<(&str, u32), (f64, Verdict)> = flagged
        .iter()
        .map(|f| ((f.record.image_id.as_str(), f.record.det_index), (f.idness, f.verdict)))
        .collect();
    let lines = outcome
        .per_detection
        .iter()
        .map(|d| {
            let (v, verdict) = idness[&(d.image_id.as_str(), d.det_index)];
            OutcomeLine {
                image_id: d.image_id.clone(),
                det_index: d.det_index,
                verdict: match verdict {
                    Verdict::IdKeep => "id_keep".into(),
                    Verdict::OodFlag => "ood_flag".into(),
                },
                outcome: d.outcome.as_str().into(),
                matched_gt: d.matched_gt,
                idness: v,
            }
        })
        .collect();

    let row = ReportRow {
        method,
        architecture: run.architecture.clone(),
        id_dataset: run.id_dataset.clone(),
        ood_split: split_name.to_string(),
        auroc: binary.auroc,
        fpr95: binary.fpr_at_tpr,
        nose: osod.nose,
        ap_u: osod.ap_u,
        p_u: osod.precision_u,
        r_u: osod.recall_u,
        coverage,
        tau,
        n_id: binary.n_id,
        n_ood: binary.n_ood,
        tp_u: outcome.tp_u,
        fp_u: outcome.fp_u,
        fn_d: outcome.fn_d,
        fn_m: outcome.fn_m,
        gt_unknowns: outcome.gt_unknowns,
        degenerate_scores: scores.iter().filter(|s| s.degenerate).count(),
    };
    Ok((row, lines, warnings))
}

/// Runs every configured (method, split) row. Failures inside a row abort
/// that row only; missing shared inputs (categories, ID records) fail the run.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutput> {
    let resolved = &cfg.resolved;
    let params = cfg.scoring_params()?;
    let metadata = |thresholds, warnings| -> Result<ReportMetadata> {
        Ok(ReportMetadata {
            format_version: REPORT_FORMAT_VERSION,
            engine_version: env!("CARGO_PKG_VERSION").to_string(),
            config: resolved.clone(),
            input_hashes: hash_inputs(cfg)?,
            thresholds,
            design_notes: design_notes(cfg),
            warnings,
        })
    };
    if resolved.run.methods.is_empty() {
        return Ok(PipelineOutput {
            report: EvalReport {
                rows: Vec::new(),
                aborted: Vec::new(),
                metadata: metadata(BTreeMap::new(), Vec::new())?,
            },
            outcomes: Vec::new(),
        });
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.execution.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;

    pool.install(|| {
        let categories = load_categories(&require(cfg, &resolved.inputs.categories, "inputs.categories")?)?;
        let head = match cfg.path(&resolved.inputs.head) {
            Some(p) => Some(load_head(&p)?),
            None => None,
        };
        if let Some(h) = &head {
            if h.num_classes() != categories.num_classes() {
                return Err(Error::Input(format!(
                    "head has {} classes, category table has {}",
                    h.num_classes(),
                    categories.num_classes()
                )));
            }
        }
        let id_records = load_detections(&require(cfg, &resolved.inputs.id_records, "inputs.id_records")?, &categories)?;
        let needs_train = resolved.run.methods.iter().any(|m| m.needs_fit());
        let train = if needs_train {
            require(cfg, &resolved.inputs.train_records, "inputs.train_records")
                .and_then(|p| load_detections(&p, &categories))
                .map_err(|e| e.to_string())
        } else {
            Ok(Vec::new())
        };
        let needs_latent = resolved.run.methods.iter().any(|m| m.needs_latent());
        let layer = &resolved.inputs.latent_layer;
        let train_pooled = match (&train, needs_latent) {
            (Ok(t), true) => Some(pooled_for(t, cfg.path(&resolved.inputs.train_feature_maps), layer, params.roi_resolution)),
            _ => None,
        };
        let id_pooled = needs_latent.then(|| {
            pooled_for(&id_records, cfg.path(&resolved.inputs.id_feature_maps), layer, params.roi_resolution)
        });
        let splits = resolved
            .splits
            .iter()
            .map(|s| {
                (
                    s.name.clone(),
                    load_split(cfg, s, &categories, needs_latent, params.roi_resolution).map_err(|e| e.to_string()),
                )
            })
            .collect();

        let mut warnings = Vec::new();
        for (what, p) in [("train", &train_pooled), ("ID", &id_pooled)] {
            if let Some(Ok(p)) = p {
                warnings.extend(p.warnings.iter().map(|w| format!("{what}: {w}")));
                if !p.outside.is_empty() {
                    warnings.push(format!("{what}: {} boxes fell entirely outside their feature map", p.outside.len()));
                }
            }
        }

        let shared = Shared {
            cfg,
            params: params.clone(),
            categories,
            head,
            train,
            id_records,
            train_pooled,
            id_pooled,
            splits,
        };
        let results: Vec<MethodResult> = resolved
            .run
            .methods
            .par_iter()
            .map(|&m| run_method(&shared, m))
            .collect();

        let mut rows = Vec::new();
        let mut aborted = Vec::new();
        let mut outcomes = Vec::new();
        let mut thresholds = BTreeMap::new();
        for (method, result) in resolved.run.methods.iter().zip(results) {
            if let Some(t) = result.threshold {
                thresholds.insert(method.to_string(), t);
            }
            warnings.extend(result.warnings);
            for row in result.rows {
                match row {
                    Ok((row, lines, w)) => {
                        warnings.extend(w.into_iter().map(|w| format!("{method}: {w}")));
                        outcomes.push(((row.method, row.ood_split.clone()), lines));
                        rows.push(row);
                    }
                    Err(a) => {
                        log::warn!("row {}/{} aborted: {}", a.method, a.ood_split, a.cause);
                        aborted.push(a);
                    }
                }
            }
        }
        Ok(PipelineOutput {
            report: EvalReport {
                rows,
                aborted,
                metadata: metadata(thresholds, warnings)?,
            },
            outcomes,
        })
    })
}

/// Writes `report.json`, `report.csv`, `report.md` and, when requested,
/// `outcomes/<method>__<split>.tsv` into `dir`.
pub fn write_outputs(output: &PipelineOutput, dir: &Path, emit_outcomes: bool) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, text: String| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("report.json", output.report.to_json()?)?;
    write("report.csv", emit_tables(&output.report, TableFormat::Csv))?;
    write("report.md", emit_tables(&output.report, TableFormat::Markdown))?;
    if emit_outcomes {
        let odir = dir.join("outcomes");
        fs::create_dir_all(&odir).map_err(|e| Error::io(&odir, e))?;
        for ((method, split), lines) in &output.outcomes {
            save_outcomes(&odir.join(format!("{method}__{split}.tsv")), lines)?;
        }
    }
    Ok(())
}
