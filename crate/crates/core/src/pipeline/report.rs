//! Evaluation report, table emission and metric correlations.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::ResolvedConfig;
use crate::calibration::ThresholdReport;
use crate::error::{Error, Result};
use crate::numeric::pairwise_mean;
use crate::scoring::MethodId;

pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: MethodId,
    pub architecture: String,
    pub id_dataset: String,
    pub ood_split: String,
    pub auroc: f64,
    pub fpr95: f64,
    pub nose: Option<f64>,
    pub ap_u: f64,
    pub p_u: f64,
    pub r_u: f64,
    /// Fraction of split images without any detection.
    pub coverage: Option<f64>,
    pub tau: f64,
    pub n_id: usize,
    pub n_ood: usize,
    pub tp_u: usize,
    pub fp_u: usize,
    pub fn_d: usize,
    pub fn_m: usize,
    pub gt_unknowns: usize,
    pub degenerate_scores: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbortedRow {
    pub method: MethodId,
    pub ood_split: String,
    pub cause: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub format_version: u32,
    pub engine_version: String,
    pub config: ResolvedConfig,
    /// SHA-256 of every input file, keyed by its configured path.
    pub input_hashes: BTreeMap<String, String>,
    pub thresholds: BTreeMap<String, ThresholdReport>,
    pub design_notes: Vec<String>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub aborted: Vec<AbortedRow>,
    pub metadata: ReportMetadata,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Input(format!("cannot serialise report: {e}")))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Schema(format!("report: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Markdown,
}

impl std::str::FromStr for TableFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(TableFormat::Csv),
            "markdown" | "md" => Ok(TableFormat::Markdown),
            other => Err(Error::Parameter(format!("unknown table format {other:?}"))),
        }
    }
}

const TABLE_HEADER: [&str; 11] = [
    "method",
    "architecture",
    "id_dataset",
    "ood_split",
    "AUROC",
    "FPR95",
    "nOSE",
    "AP_U",
    "P_U",
    "R_U",
    "no_pred_%",
];

fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

fn fixed(v: f64) -> String {
    format!("{v:.4}")
}

fn table_cells(r: &ReportRow) -> [String; 11] {
    [
        r.method.to_string(),
        r.architecture.clone(),
        r.id_dataset.clone(),
        r.ood_split.clone(),
        pct(r.auroc),
        pct(r.fpr95),
        r.nose.map_or_else(|| "-".into(), fixed),
        fixed(r.ap_u),
        fixed(r.p_u),
        fixed(r.r_u),
        r.coverage.map_or_else(|| "-".into(), pct),
    ]
}

/// Rows ordered by (method, split); AUROC, FPR95 and coverage as
/// percentages with one decimal, other metrics with four.
pub fn emit_tables(report: &EvalReport, format: TableFormat) -> String {
    let mut rows: Vec<&ReportRow> = report.rows.iter().collect();
    rows.sort_by(|a, b| a.method.cmp(&b.method).then(a.ood_split.cmp(&b.ood_split)));
    let mut out = String::new();
    match format {
        TableFormat::Csv => {
            out.push_str(&TABLE_HEADER.join(","));
            out.push('\n');
            for r in rows {
                let cells = table_cells(r).map(|c| {
                    if c.contains([',', '"', '\n']) {
                        format!("\"{}\"", c.replace('"', "\"\""))
                    } else {
                        c
                    }
                });
                out.push_str(&cells.join(","));
                out.push('\n');
            }
        }
        TableFormat::Markdown => {
            let _ = writeln!(out, "| {} |", TABLE_HEADER.join(" | "));
            let _ = writeln!(out, "|{}", "---|".repeat(TABLE_HEADER.len()));
            for r in rows {
                let cells = table_cells(r).map(|c| c.replace('|', "\\|"));
                let _ = writeln!(out, "| {} |", cells.join(" | "));
            }
        }
    }
    out
}

pub const CORRELATION_COLUMNS: [&str; 6] = ["AUROC", "FPR95", "nOSE", "AP_U", "P_U", "R_U"];

/// Pearson correlations between metric columns; `None` where a column has
/// zero variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub columns: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
    pub rows_used: usize,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let mx = pairwise_mean(x);
    let my = pairwise_mean(y);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn correlate_columns(columns: &[Vec<f64>]) -> Vec<Vec<Option<f64>>> {
    columns
        .iter()
        .map(|a| columns.iter().map(|b| pearson(a, b)).collect())
        .collect()
}

/// Correlations over all rows with a defined nOSE.
pub fn metric_correlations(report: &EvalReport) -> Result<CorrelationMatrix> {
    let complete: Vec<&ReportRow> = report.rows.iter().filter(|r| r.nose.is_some()).collect();
    if complete.len() < 3 {
        return Err(Error::Input(format!(
            "correlations need at least 3 complete rows, found {}",
            complete.len()
        )));
    }
    let columns: Vec<Vec<f64>> = vec![
        complete.iter().map(|r| r.auroc).collect(),
        complete.iter().map(|r| r.fpr95).collect(),
        complete.iter().map(|r| r.nose.unwrap_or_default()).collect(),
        complete.iter().map(|r| r.ap_u).collect(),
        complete.iter().map(|r| r.p_u).collect(),
        complete.iter().map(|r| r.r_u).collect(),
    ];
    Ok(CorrelationMatrix {
        columns: CORRELATION_COLUMNS.iter().map(|s| s.to_string()).collect(),
        values: correlate_columns(&columns),
        rows_used: complete.len(),
    })
}

impl CorrelationMatrix {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric");
        for c in &self.columns {
            let _ = write!(out, ",{c}");
        }
        out.push('\n');
        for (name, row) in self.columns.iter().zip(&self.values) {
            out.push_str(name);
            for v in row {
                match v {
                    Some(v) => {
                        let _ = write!(out, ",{v:.4}");
                    }
                    None => out.push_str(",-"),
                }
            }
            out.push('\n');
        }
        out
    }
}
