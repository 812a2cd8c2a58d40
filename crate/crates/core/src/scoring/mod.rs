//! The twelve post-hoc scoring methods behind one fit/score interface.
//! Every score is oriented as ID-ness: larger means more in-distribution.

pub mod feature;
pub mod latent;
pub mod mixed;
pub mod output;

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record_io::container::{read_tagged, write_tagged, FieldValue, TaggedRecord};
use crate::record_io::{DetectionRecord, HeadWeights};
use feature::{
    ddu_score, fit_gaussian_bank, fit_knn_bank, knn_score, mahalanobis_score, GaussianBankState,
    KnnBankState, RegEpsilon,
};
use latent::{fit_lard, lard_score, PooledLatent, PooledSet};
use mixed::{
    clipped_energy_score, fit_activation_state, fit_vim, vim_score, ActivationClipState,
    ClipMethod, VimOptions, VimState,
};
use output::{energy_score, gen_from_logits, msp_score};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodId {
    Msp,
    Energy,
    Gen,
    Knn,
    Mahalanobis,
    Ddu,
    Vim,
    Ash,
    Dice,
    React,
    DiceReact,
    Lard,
}

impl MethodId {
    pub const ALL: [MethodId; 12] = [
        MethodId::Msp,
        MethodId::Energy,
        MethodId::Gen,
        MethodId::Knn,
        MethodId::Mahalanobis,
        MethodId::Ddu,
        MethodId::Vim,
        MethodId::Ash,
        MethodId::Dice,
        MethodId::React,
        MethodId::DiceReact,
        MethodId::Lard,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodId::Msp => "msp",
            MethodId::Energy => "energy",
            MethodId::Gen => "gen",
            MethodId::Knn => "knn",
            MethodId::Mahalanobis => "mahalanobis",
            MethodId::Ddu => "ddu",
            MethodId::Vim => "vim",
            MethodId::Ash => "ash",
            MethodId::Dice => "dice",
            MethodId::React => "react",
            MethodId::DiceReact => "dice_react",
            MethodId::Lard => "lard",
        }
    }

    /// Requires training detections.
    pub fn needs_fit(self) -> bool {
        !matches!(self, MethodId::Msp | MethodId::Energy | MethodId::Gen)
    }

    pub fn needs_features(self) -> bool {
        matches!(
            self,
            MethodId::Knn
                | MethodId::Mahalanobis
                | MethodId::Ddu
                | MethodId::Vim
                | MethodId::Ash
                | MethodId::Dice
                | MethodId::React
                | MethodId::DiceReact
        )
    }

    pub fn needs_head(self) -> bool {
        matches!(
            self,
            MethodId::Vim | MethodId::Ash | MethodId::Dice | MethodId::React | MethodId::DiceReact
        )
    }

    pub fn needs_latent(self) -> bool {
        self == MethodId::Lard
    }

    fn clip_method(self) -> Option<ClipMethod> {
        match self {
            MethodId::Ash => Some(ClipMethod::Ash),
            MethodId::Dice => Some(ClipMethod::Dice),
            MethodId::React => Some(ClipMethod::React),
            MethodId::DiceReact => Some(ClipMethod::DiceReact),
            _ => None,
        }
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodId::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown scoring method {s:?}")))
    }
}

/// One scored detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdnessScore {
    pub value: f64,
    pub method: MethodId,
    pub image_id: String,
    pub det_index: u32,
    /// Set when the score fell back to a defined value for degenerate input
    /// (an all-pruned ASH sample, a box outside the feature map).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate: bool,
}

/// Hyperparameters for every method; unused fields are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoringParams {
    pub temperature: f64,
    pub gen_lambda: f64,
    pub knn_k: usize,
    pub reg: RegEpsilon,
    pub vim: VimOptions,
    pub ash_percentile: f64,
    pub react_percentile: f64,
    pub dice_keep_fraction: f64,
    pub roi_resolution: usize,
}

impl Default for ScoringParams {
    fn default() -> Self {
        Self {
            temperature: output::DEFAULT_TEMPERATURE,
            gen_lambda: output::DEFAULT_GEN_LAMBDA,
            knn_k: feature::DEFAULT_KNN_K,
            reg: RegEpsilon::default(),
            vim: VimOptions::default(),
            ash_percentile: mixed::DEFAULT_ASH_PERCENTILE,
            react_percentile: mixed::DEFAULT_REACT_PERCENTILE,
            dice_keep_fraction: mixed::DEFAULT_DICE_KEEP_FRACTION,
            roi_resolution: latent::DEFAULT_ROI_RESOLUTION,
        }
    }
}

/// Everything a method may read when fitting or scoring.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScoringInputs<'a> {
    pub head: Option<&'a HeadWeights>,
    pub pooled: Option<&'a PooledSet>,
}

impl<'a> ScoringInputs<'a> {
    fn head(&self, method: MethodId) -> Result<&'a HeadWeights> {
        self.head
            .ok_or_else(|| Error::Input(format!("{method} needs the head weights")))
    }

    fn pooled<'r>(&self, record: &'r DetectionRecord) -> Result<&'r [f64]>
    where
        'a: 'r,
    {
        self.pooled
            .and_then(|p| p.get(&record.image_id, record.det_index))
            .or(record.latent_pooled.as_deref())
            .ok_or_else(|| Error::Input(format!("{}: no pooled latent vector", record.key())))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FittedScorer {
    Msp,
    Energy { temperature: f64 },
    Gen { lambda: f64 },
    Knn(KnnBankState),
    Mahalanobis(GaussianBankState),
    Ddu(GaussianBankState),
    Vim(VimState),
    Clip(ActivationClipState),
    Lard { state: GaussianBankState, resolution: usize },
}

pub const STATE_VERSION: u32 = 1;

pub fn fit_scorer(
    method: MethodId,
    params: &ScoringParams,
    train: &[DetectionRecord],
    num_classes: usize,
    inputs: ScoringInputs<'_>,
) -> Result<FittedScorer> {
    Ok(match method {
        MethodId::Msp => FittedScorer::Msp,
        MethodId::Energy => {
            if params.temperature.is_nan() || params.temperature <= 0.0 {
                return Err(Error::Parameter("temperature must be positive".into()));
            }
            FittedScorer::Energy {
                temperature: params.temperature,
            }
        }
        MethodId::Gen => FittedScorer::Gen {
            lambda: params.gen_lambda,
        },
        MethodId::Knn => FittedScorer::Knn(fit_knn_bank(train, params.knn_k)?),
        MethodId::Mahalanobis => {
            FittedScorer::Mahalanobis(fit_gaussian_bank(train, num_classes, params.reg)?)
        }
        MethodId::Ddu => FittedScorer::Ddu(fit_gaussian_bank(train, num_classes, params.reg)?),
        MethodId::Vim => FittedScorer::Vim(fit_vim(train, inputs.head(method)?, &params.vim)?),
        MethodId::Ash | MethodId::Dice | MethodId::React | MethodId::DiceReact => {
            let clip = method.clip_method().expect("activation method");
            let pct = match clip {
                ClipMethod::Ash => params.ash_percentile,
                ClipMethod::React | ClipMethod::DiceReact | ClipMethod::Dice => {
                    params.react_percentile
                }
            };
            FittedScorer::Clip(fit_activation_state(
                train,
                inputs.head(method)?,
                clip,
                pct,
                params.dice_keep_fraction,
            )?)
        }
        MethodId::Lard => {
            let pooled = train
                .iter()
                .map(|r| {
                    Ok((
                        PooledLatent {
                            image_id: r.image_id.clone(),
                            det_index: r.det_index,
                            vector: inputs.pooled(r)?.to_vec(),
                        },
                        r.pred_class,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            FittedScorer::Lard {
                state: fit_lard(&pooled, num_classes, params.reg)?,
                resolution: params.roi_resolution,
            }
        }
    })
}

impl FittedScorer {
    pub fn method(&self) -> MethodId {
        match self {
            FittedScorer::Msp => MethodId::Msp,
            FittedScorer::Energy { .. } => MethodId::Energy,
            FittedScorer::Gen { .. } => MethodId::Gen,
            FittedScorer::Knn(_) => MethodId::Knn,
            FittedScorer::Mahalanobis(_) => MethodId::Mahalanobis,
            FittedScorer::Ddu(_) => MethodId::Ddu,
            FittedScorer::Vim(_) => MethodId::Vim,
            FittedScorer::Clip(s) => match s.method {
                ClipMethod::Ash => MethodId::Ash,
                ClipMethod::Dice => MethodId::Dice,
                ClipMethod::React => MethodId::React,
                ClipMethod::DiceReact => MethodId::DiceReact,
            },
            FittedScorer::Lard { .. } => MethodId::Lard,
        }
    }

    /// Scores one detection; the flag marks a degenerate fallback.
    pub fn score_one(&self, record: &DetectionRecord, inputs: ScoringInputs<'_>) -> Result<(f64, bool)> {
        let plain = |v: Result<f64>| v.map(|v| (v, false));
        let value = match self {
            FittedScorer::Msp => plain(msp_score(&record.logits)),
            FittedScorer::Energy { temperature } => plain(energy_score(&record.logits, *temperature)),
            FittedScorer::Gen { lambda } => plain(gen_from_logits(&record.logits, *lambda)),
            FittedScorer::Knn(s) => plain(knn_score(s, record.require_features()?)),
            FittedScorer::Mahalanobis(s) => plain(mahalanobis_score(s, record.require_features()?)),
            FittedScorer::Ddu(s) => plain(ddu_score(s, record.require_features()?)),
            FittedScorer::Vim(s) => plain(vim_score(s, record.require_features()?, &record.logits)),
            FittedScorer::Clip(s) => {
                let head = inputs.head(self.method())?;
                clipped_energy_score(s, head, record.require_features()?)
                    .map(|c| (c.value, c.degenerate))
            }
            FittedScorer::Lard { state, .. } => {
                let outside = inputs.pooled.is_some_and(|p| {
                    p.outside
                        .iter()
                        .any(|(i, d)| *i == record.image_id && *d == record.det_index)
                });
                lard_score(state, inputs.pooled(record)?).map(|v| (v, outside))
            }
        }
        .map_err(|e| match e {
            Error::Input(m) => Error::Input(format!("{}: {m}", record.key())),
            other => other,
        })?;
        if !value.0.is_finite() {
            return Err(Error::Numerical(format!(
                "{}: {} score is not finite",
                record.key(),
                self.method()
            )));
        }
        Ok(value)
    }

    pub fn to_record(&self) -> TaggedRecord {
        let tag = self.method().as_str();
        match self {
            FittedScorer::Msp => TaggedRecord::new(tag, STATE_VERSION),
            FittedScorer::Energy { temperature } => {
                let mut r = TaggedRecord::new(tag, STATE_VERSION);
                r.set("temperature", FieldValue::F64(*temperature));
                r
            }
            FittedScorer::Gen { lambda } => {
                let mut r = TaggedRecord::new(tag, STATE_VERSION);
                r.set("lambda", FieldValue::F64(*lambda));
                r
            }
            FittedScorer::Knn(s) => s.to_record(),
            FittedScorer::Mahalanobis(s) | FittedScorer::Ddu(s) => s.to_record(tag),
            FittedScorer::Vim(s) => s.to_record(),
            FittedScorer::Clip(s) => s.to_record(),
            FittedScorer::Lard { state, resolution } => {
                let mut r = state.to_record(tag);
                r.set("roi_resolution", FieldValue::U64(*resolution as u64));
                r
            }
        }
    }

    pub fn from_record(rec: &TaggedRecord) -> Result<Self> {
        if rec.version != STATE_VERSION {
            return Err(Error::Schema(format!(
                "state {:?} has version {}, expected {STATE_VERSION}",
                rec.tag, rec.version
            )));
        }
        let method: MethodId = rec
            .tag
            .parse()
            .map_err(|_| Error::Schema(format!("unknown state tag {:?}", rec.tag)))?;
        Ok(match method {
            MethodId::Msp => FittedScorer::Msp,
            MethodId::Energy => FittedScorer::Energy {
                temperature: rec.f64("temperature")?,
            },
            MethodId::Gen => FittedScorer::Gen {
                lambda: rec.f64("lambda")?,
            },
            MethodId::Knn => FittedScorer::Knn(KnnBankState::from_record(rec)?),
            MethodId::Mahalanobis => FittedScorer::Mahalanobis(GaussianBankState::from_record(rec)?),
            MethodId::Ddu => FittedScorer::Ddu(GaussianBankState::from_record(rec)?),
            MethodId::Vim => FittedScorer::Vim(VimState::from_record(rec)?),
            MethodId::Ash | MethodId::Dice | MethodId::React | MethodId::DiceReact => {
                FittedScorer::Clip(ActivationClipState::from_record(rec)?)
            }
            MethodId::Lard => FittedScorer::Lard {
                state: GaussianBankState::from_record(rec)?,
                resolution: rec.u64("roi_resolution")? as usize,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = write_tagged(BufWriter::new(file), &self.to_record())?;
        std::io::Write::flush(&mut w).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let rec = read_tagged(BufReader::new(file), &path.display().to_string())?;
        Self::from_record(&rec)
    }
}

/// Scores every record in parallel; output is sorted by
/// `(image_id, det_index)` regardless of input order or thread count.
pub fn score_records(
    scorer: &FittedScorer,
    records: &[DetectionRecord],
    inputs: ScoringInputs<'_>,
) -> Result<Vec<IdnessScore>> {
    let method = scorer.method();
    let mut scores = records
        .par_iter()
        .map(|r| {
            scorer.score_one(r, inputs).map(|(value, degenerate)| IdnessScore {
                value,
                method,
                image_id: r.image_id.clone(),
                det_index: r.det_index,
                degenerate,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    scores.sort_by(|a, b| {
        a.image_id
            .cmp(&b.image_id)
            .then(a.det_index.cmp(&b.det_index))
    });
    Ok(scores)
}
