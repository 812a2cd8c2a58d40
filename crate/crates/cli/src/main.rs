use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use oodeval::calibration::{calibrate_t_star, calibrate_tau, ThresholdReport, DEFAULT_TPR_TARGET};
use oodeval::metrics::osod::DEFAULT_IOU_THRESHOLD;
use oodeval::pipeline::{
    emit_tables, metric_correlations, run_pipeline, write_outputs, EvalReport, PipelineConfig,
    TableFormat,
};
use oodeval::record_io::{
    load_categories, load_category_ids, load_detections, load_embeddings, load_feature_maps,
    load_ground_truth, load_head, load_image_list, load_manifest, load_scores, save_manifest,
    save_scores, CategoryTable, DetectionRecord, ScoreLine,
};
use oodeval::scoring::latent::{resolve_pooled, PooledSet};
use oodeval::scoring::{fit_scorer, score_records, FittedScorer, MethodId, ScoringInputs};
use oodeval::stratify::{build_manifest, cosine_similarity_stats, filter_overlap, Pairing, SplitMode};

#[derive(Parser)]
#[command(name = "oodeval", version, about = "Post-hoc OOD scoring and open-set evaluation for object detectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (TOML), layered over the built-in template.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `section.key=value` override, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self, extra: Vec<String>) -> Result<PipelineConfig> {
        let mut overrides = self.overrides.clone();
        overrides.extend(extra);
        Ok(PipelineConfig::load(self.config.as_deref(), &overrides)?)
    }
}

#[derive(Args)]
struct LatentArgs {
    /// Raw feature maps for LaRD.
    #[arg(long)]
    feature_maps: Option<PathBuf>,
    /// Feature-map layer to pool from.
    #[arg(long)]
    layer: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Markdown,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    NearFar,
    AllFarther,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a scorer on ID training detections and save its state.
    Fit {
        #[arg(long)]
        method: MethodId,
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        categories: PathBuf,
        #[arg(long)]
        head: Option<PathBuf>,
        #[command(flatten)]
        latent: LatentArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score detections with a fitted state.
    Score {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        categories: PathBuf,
        #[arg(long)]
        head: Option<PathBuf>,
        #[command(flatten)]
        latent: LatentArgs,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Choose tau from ID scores at a target TPR.
    CalibrateTau {
        /// Score file of ID detections.
        #[arg(long)]
        records: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TPR_TARGET)]
        tpr_target: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Choose the detector confidence threshold maximising ID mAP.
    CalibrateTstar {
        /// ID detections exported at confidence threshold 0.
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        categories: PathBuf,
        #[arg(long, default_value_t = DEFAULT_IOU_THRESHOLD)]
        iou: f64,
        /// Candidate thresholds; defaults to 0.00, 0.05, ..., 0.95.
        #[arg(long, value_delimiter = ',')]
        grid: Vec<f64>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full pipeline described by a config and write the report.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        method: Vec<MethodId>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        tpr_target: Option<f64>,
        #[arg(long)]
        iou: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build a split manifest: overlap removal, near/far assignment, overrides.
    Stratify {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        categories: PathBuf,
        /// Image ids of the source dataset.
        #[arg(long)]
        images: PathBuf,
        /// Category ids overlapping the ID dataset.
        #[arg(long)]
        overlap: PathBuf,
        /// Category ids semantically near the ID dataset.
        #[arg(long)]
        near: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "near-far")]
        mode: ModeArg,
        /// Manual per-image assignments applied last.
        #[arg(long)]
        overrides: Option<PathBuf>,
        /// ID image embeddings; with --ood-embeddings, also writes similarity stats.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        ood_embeddings: Option<PathBuf>,
        /// Sample this many random pairs instead of nearest-ID pairing.
        #[arg(long)]
        pairs: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// List images carrying an overlap-category annotation.
    FilterOverlap {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        categories: PathBuf,
        #[arg(long)]
        overlap: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a report as a CSV or Markdown table.
    Report {
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value = "markdown")]
        format: FormatArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pearson correlations between report metric columns.
    Correlate {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn json<T: serde::Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match workers {
        Some(0) => bail!("--workers must be at least 1"),
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build()?.install(f),
        None => f(),
    }
}

fn load_pooled(
    method: MethodId,
    records: &[DetectionRecord],
    latent: &LatentArgs,
    resolution: usize,
) -> Result<Option<PooledSet>> {
    if !method.needs_latent() {
        return Ok(None);
    }
    let maps = latent.feature_maps.as_deref().map(load_feature_maps).transpose()?;
    let set = resolve_pooled(records, maps, latent.layer.as_deref(), resolution)?;
    for w in &set.warnings {
        log::warn!("{w}");
    }
    Ok(Some(set))
}

fn id_set(path: &Path) -> Result<BTreeSet<i64>> {
    Ok(load_category_ids(path)?.into_iter().collect())
}

fn load_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(EvalReport::from_json(&text)?)
}

fn records_with(path: &Path, categories: &CategoryTable) -> Result<Vec<DetectionRecord>> {
    Ok(load_detections(path, categories)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit {
            method,
            records,
            categories,
            head,
            latent,
            seed,
            config,
            out,
        } => {
            let cfg = config.load(seed.map(|s| format!("run.seed={s}")).into_iter().collect())?;
            let params = cfg.scoring_params()?;
            let categories = load_categories(&categories)?;
            let train = records_with(&records, &categories)?;
            let head = head.as_deref().map(load_head).transpose()?;
            let pooled = load_pooled(method, &train, &latent, params.roi_resolution)?;
            let inputs = ScoringInputs {
                head: head.as_ref(),
                pooled: pooled.as_ref(),
            };
            let scorer = fit_scorer(method, &params, &train, categories.num_classes(), inputs)?;
            scorer.save(&out)?;
        }
        Command::Score {
            state,
            records,
            categories,
            head,
            latent,
            workers,
            out,
        } => {
            let scorer = FittedScorer::load(&state)?;
            let categories = load_categories(&categories)?;
            let records = records_with(&records, &categories)?;
            let head = head.as_deref().map(load_head).transpose()?;
            let resolution = match &scorer {
                FittedScorer::Lard { resolution, .. } => *resolution,
                _ => 0,
            };
            let pooled = load_pooled(scorer.method(), &records, &latent, resolution)?;
            let inputs = ScoringInputs {
                head: head.as_ref(),
                pooled: pooled.as_ref(),
            };
            let scores = with_workers(workers, || Ok(score_records(&scorer, &records, inputs)?))?;
            let degenerate = scores.iter().filter(|s| s.degenerate).count();
            if degenerate > 0 {
                log::warn!("{degenerate} detections scored through a degenerate fallback");
            }
            let lines: Vec<ScoreLine> = scores
                .into_iter()
                .map(|s| ScoreLine {
                    image_id: s.image_id,
                    det_index: s.det_index,
                    method: s.method.to_string(),
                    value: s.value,
                })
                .collect();
            save_scores(&out, &lines)?;
        }
        Command::CalibrateTau {
            records,
            tpr_target,
            out,
        } => {
            let scores: Vec<f64> = load_scores(&records)?.into_iter().map(|s| s.value).collect();
            let report: ThresholdReport = (calibrate_tau(&scores, tpr_target)?, tpr_target).into();
            emit(out.as_deref(), &json(&report)?)?;
        }
        Command::CalibrateTstar {
            records,
            gt,
            categories,
            iou,
            grid,
            workers,
            out,
        } => {
            let categories = load_categories(&categories)?;
            let dets = records_with(&records, &categories)?;
            let gt = load_ground_truth(&gt, &categories)?;
            let grid = if grid.is_empty() {
                (0..20).map(|i| i as f64 * 0.05).collect()
            } else {
                grid
            };
            let report = with_workers(workers, || Ok(calibrate_t_star(&dets, &gt, &categories, &grid, iou)?))?;
            emit(out.as_deref(), &json(&report)?)?;
        }
        Command::Eval {
            config,
            method,
            tau,
            tpr_target,
            iou,
            seed,
            workers,
            out,
        } => {
            let mut extra = Vec::new();
            if !method.is_empty() {
                let list: Vec<String> = method.iter().map(|m| format!("\"{m}\"")).collect();
                extra.push(format!("run.methods=[{}]", list.join(",")));
            }
            if let Some(t) = tau {
                extra.push(format!("run.fixed_tau={t:?}"));
            }
            if let Some(t) = tpr_target {
                extra.push(format!("run.tpr_target={t:?}"));
            }
            if let Some(t) = iou {
                extra.push(format!("run.iou_threshold={t:?}"));
            }
            if let Some(s) = seed {
                extra.push(format!("run.seed={s}"));
            }
            if let Some(w) = workers {
                extra.push(format!("execution.workers={w}"));
            }
            let cfg = config.load(extra)?;
            let output = run_pipeline(&cfg)?;
            for a in &output.report.aborted {
                log::warn!("aborted {}/{}: {}", a.method, a.ood_split, a.cause);
            }
            let dir = match out {
                Some(d) => d,
                None => cfg.path(&cfg.execution.output_dir).unwrap_or_else(|| PathBuf::from(".")),
            };
            write_outputs(&output, &dir, cfg.execution.emit_outcomes)?;
            print!("{}", emit_tables(&output.report, TableFormat::Markdown));
        }
        Command::Stratify {
            gt,
            categories,
            images,
            overlap,
            near,
            mode,
            overrides,
            embeddings,
            ood_embeddings,
            pairs,
            seed,
            out,
        } => {
            let categories = load_categories(&categories)?;
            let gt = load_ground_truth(&gt, &categories)?;
            let images = load_image_list(&images)?;
            let overlap = id_set(&overlap)?;
            let near = near.as_deref().map(id_set).transpose()?.unwrap_or_default();
            let overrides = overrides.as_deref().map(load_manifest).transpose()?;
            let mode = match mode {
                ModeArg::NearFar => SplitMode::NearFar,
                ModeArg::AllFarther => SplitMode::AllFarther,
            };
            let manifest = build_manifest(&gt, &images, &overlap, &near, &categories, mode, overrides.as_ref())?;
            save_manifest(&out, &manifest)?;
            match (embeddings, ood_embeddings) {
                (Some(id), Some(ood)) => {
                    let pairing = match pairs {
                        Some(pairs) => Pairing::Sampled { seed, pairs },
                        None => Pairing::NearestId,
                    };
                    let label = format!("{}-{}", id.display(), ood.display());
                    let stats = cosine_similarity_stats(&label, &load_embeddings(&id)?, &load_embeddings(&ood)?, pairing)?;
                    let mut path = out.clone().into_os_string();
                    path.push(".similarity.json");
                    emit(Some(Path::new(&path)), &json(&stats)?)?;
                }
                (None, None) => {}
                _ => bail!("--embeddings and --ood-embeddings go together"),
            }
        }
        Command::FilterOverlap {
            gt,
            categories,
            overlap,
            out,
        } => {
            let categories = load_categories(&categories)?;
            let gt = load_ground_truth(&gt, &categories)?;
            let mut manifest = filter_overlap(&gt, &id_set(&overlap)?, &categories)?;
            manifest.canonicalize();
            save_manifest(&out, &manifest)?;
        }
        Command::Report { report, format, out } => {
            let format = match format {
                FormatArg::Csv => TableFormat::Csv,
                FormatArg::Markdown => TableFormat::Markdown,
            };
            emit(out.as_deref(), &emit_tables(&load_report(&report)?, format))?;
        }
        Command::Correlate { report, out } => {
            let matrix = metric_correlations(&load_report(&report)?)?;
            emit(out.as_deref(), &matrix.to_csv())?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
