//! Run configuration: a TOML file layered over the committed template, then
//! `section.key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::scoring::feature::RegEpsilon;
use crate::scoring::mixed::{OffsetSign, VimOptions};
use crate::scoring::{MethodId, ScoringParams};

pub const TEMPLATE: &str = include_str!("../../config/template.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnknownRanking {
    OodMargin,
    Confidence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub architecture: String,
    pub id_dataset: String,
    pub methods: Vec<MethodId>,
    pub tpr_target: f64,
    pub iou_threshold: f64,
    pub ap_u_ranking: UnknownRanking,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_tau: Option<f64>,
}

/// Settings that change how a run executes but never what it computes;
/// kept out of the report so outputs match across machines and pools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecutionSection {
    pub workers: usize,
    pub output_dir: String,
    pub emit_outcomes: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputsSection {
    pub categories: String,
    pub train_records: String,
    pub id_records: String,
    pub head: String,
    pub train_feature_maps: String,
    pub id_feature_maps: String,
    pub latent_layer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoringSection {
    pub temperature: f64,
    pub gen_lambda: f64,
    pub knn_k: usize,
    pub reg_epsilon_mode: String,
    pub reg_epsilon: f64,
    pub vim_principal_dim: usize,
    pub vim_offset_sign: OffsetSign,
    pub vim_max_alpha_samples: usize,
    pub ash_percentile: f64,
    pub react_percentile: f64,
    pub dice_keep_fraction: f64,
    pub roi_resolution: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub name: String,
    pub records: String,
    pub ground_truth: String,
    #[serde(default)]
    pub images: String,
    #[serde(default)]
    pub feature_maps: String,
}

/// The computation-defining part of a configuration, as embedded in reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedConfig {
    pub run: RunSection,
    pub inputs: InputsSection,
    pub scoring: ScoringSection,
    #[serde(default)]
    pub splits: Vec<SplitSection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub resolved: ResolvedConfig,
    pub execution: ExecutionSection,
    /// Directory relative paths resolve against.
    pub base_dir: PathBuf,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FileLayout {
    run: RunSection,
    execution: ExecutionSection,
    inputs: InputsSection,
    scoring: ScoringSection,
    #[serde(default)]
    splits: Vec<SplitSection>,
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_override(spec: &str) -> Result<(Vec<String>, Value)> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let keys: Vec<String> = path.trim().split('.').map(str::to_owned).collect();
    if keys.iter().any(String::is_empty) {
        return Err(Error::Config(format!("override {spec:?} has an empty key")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_owned()));
    Ok((keys, value))
}

fn apply_override(table: &mut Table, keys: &[String], value: Value) -> Result<()> {
    let (last, parents) = keys.split_last().expect("non-empty key path");
    let mut cur = table;
    for k in parents {
        cur = match cur
            .entry(k.clone())
            .or_insert_with(|| Value::Table(Table::new()))
        {
            Value::Table(t) => t,
            _ => return Err(Error::Config(format!("override path {} crosses a value", keys.join(".")))),
        };
    }
    cur.insert(last.clone(), value);
    Ok(())
}

impl PipelineConfig {
    /// Template, then `user` (TOML text), then overrides.
    pub fn from_layers(user: Option<&str>, overrides: &[String], base_dir: &Path) -> Result<Self> {
        let mut table: Table = TEMPLATE
            .parse()
            .map_err(|e| Error::Config(format!("template: {e}")))?;
        if let Some(text) = user {
            let user: Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
            merge(&mut table, user);
        }
        for spec in overrides {
            let (keys, value) = parse_override(spec)?;
            apply_override(&mut table, &keys, value)?;
        }
        let layout: FileLayout = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let cfg = Self {
            resolved: ResolvedConfig {
                run: layout.run,
                inputs: layout.inputs,
                scoring: layout.scoring,
                splits: layout.splits,
            },
            execution: layout.execution,
            base_dir: base_dir.to_path_buf(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
                Self::from_layers(Some(&text), overrides, &base)
            }
            None => Self::from_layers(None, overrides, Path::new(".")),
        }
    }

    /// Rebuilds a configuration from the block a report embeds.
    pub fn from_resolved(resolved: ResolvedConfig, execution: ExecutionSection, base_dir: &Path) -> Result<Self> {
        let cfg = Self {
            resolved,
            execution,
            base_dir: base_dir.to_path_buf(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let r = &self.resolved;
        if !(r.run.tpr_target > 0.0 && r.run.tpr_target < 1.0) {
            return Err(Error::Config(format!("run.tpr_target {} outside (0, 1)", r.run.tpr_target)));
        }
        if !(r.run.iou_threshold > 0.0 && r.run.iou_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "run.iou_threshold {} outside (0, 1]",
                r.run.iou_threshold
            )));
        }
        if self.execution.workers == 0 {
            return Err(Error::Config("execution.workers must be at least 1".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for m in &r.run.methods {
            if !seen.insert(m) {
                return Err(Error::Config(format!("method {m} listed twice")));
            }
        }
        let mut names = std::collections::HashSet::new();
        for s in &r.splits {
            if !names.insert(&s.name) {
                return Err(Error::Config(format!("split {:?} listed twice", s.name)));
            }
        }
        self.scoring_params()?;
        Ok(())
    }

    /// Resolves a configured path; `None` for an empty one.
    pub fn path(&self, p: &str) -> Option<PathBuf> {
        (!p.is_empty()).then(|| self.base_dir.join(p))
    }

    pub fn scoring_params(&self) -> Result<ScoringParams> {
        let s = &self.resolved.scoring;
        let reg = match s.reg_epsilon_mode.as_str() {
            "trace_relative" => RegEpsilon::TraceRelative(s.reg_epsilon),
            "absolute" => RegEpsilon::Absolute(s.reg_epsilon),
            other => {
                return Err(Error::Config(format!(
                    "scoring.reg_epsilon_mode {other:?} is not trace_relative or absolute"
                )))
            }
        };
        if s.reg_epsilon.is_nan() || s.reg_epsilon < 0.0 {
            return Err(Error::Config("scoring.reg_epsilon must be non-negative".into()));
        }
        Ok(ScoringParams {
            temperature: s.temperature,
            gen_lambda: s.gen_lambda,
            knn_k: s.knn_k,
            reg,
            vim: VimOptions {
                principal_dim: (s.vim_principal_dim > 0).then_some(s.vim_principal_dim),
                offset_sign: s.vim_offset_sign,
                seed: self.resolved.run.seed,
                max_alpha_samples: s.vim_max_alpha_samples,
                allow_empty_residual: false,
            },
            ash_percentile: s.ash_percentile,
            react_percentile: s.react_percentile,
            dice_keep_fraction: s.dice_keep_fraction,
            roi_resolution: s.roi_resolution,
        })
    }
}
