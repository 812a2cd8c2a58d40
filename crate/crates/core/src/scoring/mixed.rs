//! Scores that combine penultimate features with the final linear head: ViM,
//! ASH, DICE, ReAct and DICE+ReAct.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::feature::{canonical_sort, pairwise_gram, LabeledSample};
use super::output::energy_score;
use crate::error::{Error, Result};
use crate::numeric::{all_finite, logsumexp, pairwise_sum, pairwise_sum_by, percentile};
use crate::record_io::container::{FieldValue, TaggedRecord};
use crate::record_io::{DetectionRecord, HeadWeights};

pub const VIM_MAX_ALPHA_SAMPLES: usize = 10_000;
pub const DEFAULT_ASH_PERCENTILE: f64 = 90.0;
pub const DEFAULT_REACT_PERCENTILE: f64 = 90.0;
pub const DEFAULT_DICE_KEEP_FRACTION: f64 = 0.3;

/// Whether the ViM offset `o = -(Wᵀ)⁺ b` is added to or subtracted from the
/// features before projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetSign {
    #[default]
    Add,
    Subtract,
}

impl OffsetSign {
    fn as_str(self) -> &'static str {
        match self {
            OffsetSign::Add => "add",
            OffsetSign::Subtract => "subtract",
        }
    }

    fn factor(self) -> f64 {
        match self {
            OffsetSign::Add => 1.0,
            OffsetSign::Subtract => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VimOptions {
    /// Principal subspace dimension; `None` picks 1000 for `d > 1000`, else
    /// 512, clamped to `d - 1`.
    pub principal_dim: Option<usize>,
    pub offset_sign: OffsetSign,
    pub seed: u64,
    pub max_alpha_samples: usize,
    /// Accept `principal_dim == d` (empty residual). Only meant for checking
    /// the reduction to the plain energy score.
    pub allow_empty_residual: bool,
}

impl Default for VimOptions {
    fn default() -> Self {
        Self {
            principal_dim: None,
            offset_sign: OffsetSign::Add,
            seed: 0,
            max_alpha_samples: VIM_MAX_ALPHA_SAMPLES,
            allow_empty_residual: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VimState {
    pub offset: Vec<f64>,
    /// `d × (d - D)`, orthonormal columns spanning the residual subspace.
    pub residual_basis: DMatrix<f64>,
    pub alpha: f64,
    pub principal_dim: usize,
    pub offset_sign: OffsetSign,
}

fn feature_samples(train: &[DetectionRecord]) -> Result<Vec<LabeledSample<'_>>> {
    let mut samples = train
        .iter()
        .map(|r| {
            Ok(LabeledSample {
                image_id: &r.image_id,
                det_index: r.det_index,
                class: r.pred_class,
                vector: r.require_features()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    canonical_sort(&mut samples);
    Ok(samples)
}

/// Moore-Penrose pseudo-inverse via SVD with NumPy's default cutoff
/// (`1e-15 · σ_max`).
fn pseudo_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let svd = m.clone().svd(true, true);
    let sigma_max = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let cutoff = 1e-15 * sigma_max;
    svd.pseudo_inverse(cutoff)
        .map_err(|e| Error::Numerical(format!("pseudo-inverse failed: {e}")))
}

pub fn default_principal_dim(dim: usize) -> usize {
    let d = if dim > 1000 { 1000 } else { 512 };
    d.min(dim.saturating_sub(1))
}

fn vim_offset(head: &HeadWeights) -> Result<Vec<f64>> {
    // (Wᵀ)⁺ with the head stored as |C| × d is pinv of the stored matrix.
    let pinv = pseudo_inverse(&head.weights)?;
    let o = -(pinv * &head.bias);
    Ok(o.iter().copied().collect())
}

pub fn fit_vim(train: &[DetectionRecord], head: &HeadWeights, opts: &VimOptions) -> Result<VimState> {
    let samples = feature_samples(train)?;
    fit_vim_vectors(&samples.iter().map(|s| s.vector).collect::<Vec<_>>(), head, opts)
}

/// Fits ViM on vectors already in canonical order.
pub fn fit_vim_vectors(vectors: &[&[f64]], head: &HeadWeights, opts: &VimOptions) -> Result<VimState> {
    let dim = head.dim();
    if dim < 2 {
        return Err(Error::Parameter(format!("ViM needs d >= 2, got {dim}")));
    }
    if vectors.is_empty() {
        return Err(Error::Fit("no training objects".into()));
    }
    for v in vectors {
        head.check_dim(v)?;
        if !all_finite(v) {
            return Err(Error::Fit("non-finite training features".into()));
        }
    }
    let principal_dim = match opts.principal_dim {
        None => default_principal_dim(dim),
        Some(0) => return Err(Error::Parameter("ViM principal dimension must be positive".into())),
        Some(d) if d > dim || (d == dim && !opts.allow_empty_residual) => {
            return Err(Error::Parameter(format!(
                "ViM principal dimension {d} must be below the feature dimension {dim}"
            )))
        }
        Some(d) => d,
    };

    let offset = vim_offset(head)?;
    let sign = opts.offset_sign.factor();
    let centered: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| v.iter().zip(&offset).map(|(z, o)| z + sign * o).collect())
        .collect();
    let rows: Vec<&[f64]> = centered.iter().map(Vec::as_slice).collect();
    let gram = pairwise_gram(&rows, dim);

    let eigen = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eigen.eigenvalues[b].total_cmp(&eigen.eigenvalues[a]));
    let residual_cols: Vec<_> = order[principal_dim..]
        .iter()
        .map(|&i| eigen.eigenvectors.column(i).into_owned())
        .collect();
    let residual_basis = if residual_cols.is_empty() {
        DMatrix::zeros(dim, 0)
    } else {
        DMatrix::from_columns(&residual_cols)
    };

    let n = vectors.len();
    let k = n.min(opts.max_alpha_samples.max(1));
    let mut picks: Vec<usize> = if k == n {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rand::seq::index::sample(&mut rng, n, k).into_vec()
    };
    picks.sort_unstable();

    let max_logits: Vec<f64> = picks
        .iter()
        .map(|&i| {
            head.logits(vectors[i])
                .into_iter()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let residual_norms: Vec<f64> = picks
        .iter()
        .map(|&i| residual_norm(&residual_basis, &centered[i]))
        .collect();
    let numerator = pairwise_sum(&max_logits);
    let denominator = pairwise_sum(&residual_norms);
    let alpha = if denominator == 0.0 {
        log::warn!("ViM residual norms are all zero; using alpha = 1");
        1.0
    } else {
        numerator / denominator
    };
    if !alpha.is_finite() {
        return Err(Error::Numerical(format!("ViM alpha is not finite ({alpha})")));
    }
    if alpha < 0.0 {
        log::warn!("ViM alpha {alpha} is negative: the sampled max-logits sum below zero");
    }
    Ok(VimState {
        offset,
        residual_basis,
        alpha,
        principal_dim,
        offset_sign: opts.offset_sign,
    })
}

/// `‖Rᵀ x‖`, equal to `‖R Rᵀ x‖` for orthonormal `R`.
fn residual_norm(basis: &DMatrix<f64>, x: &[f64]) -> f64 {
    (0..basis.ncols())
        .map(|c| {
            let col = basis.column(c);
            let proj = col.iter().zip(x).fold(0.0, |acc, (r, v)| acc + r * v);
            proj * proj
        })
        .fold(0.0, |acc, v| acc + v)
        .sqrt()
}

impl VimState {
    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    pub fn to_record(&self) -> TaggedRecord {
        let mut rec = TaggedRecord::new("vim", 1);
        let basis: Vec<f64> = (0..self.residual_basis.nrows())
            .flat_map(|i| self.residual_basis.row(i).iter().copied().collect::<Vec<_>>())
            .collect();
        rec.set("offset", FieldValue::Reals(self.offset.clone()))
            .set("residual_cols", FieldValue::U64(self.residual_basis.ncols() as u64))
            .set("residual_basis", FieldValue::Reals(basis))
            .set("alpha", FieldValue::F64(self.alpha))
            .set("principal_dim", FieldValue::U64(self.principal_dim as u64))
            .set("offset_sign", FieldValue::Text(self.offset_sign.as_str().into()));
        rec
    }

    pub fn from_record(rec: &TaggedRecord) -> Result<Self> {
        let offset = rec.reals("offset")?.to_vec();
        let cols = rec.u64("residual_cols")? as usize;
        let basis = rec.reals("residual_basis")?;
        if basis.len() != offset.len() * cols {
            return Err(Error::Schema("vim residual basis has inconsistent size".into()));
        }
        let offset_sign = match rec.text("offset_sign")? {
            "add" => OffsetSign::Add,
            "subtract" => OffsetSign::Subtract,
            other => return Err(Error::Schema(format!("unknown vim offset sign {other:?}"))),
        };
        Ok(Self {
            residual_basis: DMatrix::from_row_slice(offset.len(), cols, basis),
            offset,
            alpha: rec.f64("alpha")?,
            principal_dim: rec.u64("principal_dim")? as usize,
            offset_sign,
        })
    }
}

/// `logsumexp(c) - α ‖R Rᵀ (z ± o)‖`, the negated ViM score.
pub fn vim_score(state: &VimState, z: &[f64], logits: &[f64]) -> Result<f64> {
    if z.len() != state.dim() {
        return Err(Error::Input(format!(
            "feature length {} does not match fitted dimension {}",
            z.len(),
            state.dim()
        )));
    }
    let sign = state.offset_sign.factor();
    let x: Vec<f64> = z.iter().zip(&state.offset).map(|(v, o)| v + sign * o).collect();
    let virtual_logit = state.alpha * residual_norm(&state.residual_basis, &x);
    Ok(energy_score(logits, 1.0)? - virtual_logit)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMethod {
    Ash,
    React,
    Dice,
    DiceReact,
}

impl ClipMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            ClipMethod::Ash => "ash",
            ClipMethod::React => "react",
            ClipMethod::Dice => "dice",
            ClipMethod::DiceReact => "dice_react",
        }
    }

    pub fn uses_dice(self) -> bool {
        matches!(self, ClipMethod::Dice | ClipMethod::DiceReact)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationClipState {
    pub method: ClipMethod,
    /// Percentile of all training feature entries pooled together.
    pub global_threshold: f64,
    pub percentile: f64,
    /// Present iff the method involves DICE.
    pub sparsified_weights: Option<DMatrix<f64>>,
    pub keep_fraction: f64,
}

/// Result of a clipped-energy score; `degenerate` marks an ASH sample whose
/// entries were all pruned.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipScore {
    pub value: f64,
    pub degenerate: bool,
}

pub fn fit_activation_state(
    train: &[DetectionRecord],
    head: &HeadWeights,
    method: ClipMethod,
    percentile_value: f64,
    keep_fraction: f64,
) -> Result<ActivationClipState> {
    let samples = feature_samples(train)?;
    let vectors: Vec<&[f64]> = samples.iter().map(|s| s.vector).collect();
    fit_activation_vectors(&vectors, head, method, percentile_value, keep_fraction)
}

pub fn fit_activation_vectors(
    vectors: &[&[f64]],
    head: &HeadWeights,
    method: ClipMethod,
    percentile_value: f64,
    keep_fraction: f64,
) -> Result<ActivationClipState> {
    if vectors.is_empty() {
        return Err(Error::Fit("no training objects".into()));
    }
    if !(0.0..=100.0).contains(&percentile_value) {
        return Err(Error::Parameter(format!(
            "percentile {percentile_value} outside [0, 100]"
        )));
    }
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Parameter(format!(
            "keep_fraction {keep_fraction} outside (0, 1]"
        )));
    }
    for v in vectors {
        head.check_dim(v)?;
        if !all_finite(v) {
            return Err(Error::Fit("non-finite training features".into()));
        }
    }
    let pooled: Vec<f64> = vectors.iter().flat_map(|v| v.iter().copied()).collect();
    let global_threshold = percentile(&pooled, percentile_value)?;
    let sparsified_weights = method
        .uses_dice()
        .then(|| dice_sparsify(vectors, head, keep_fraction));
    Ok(ActivationClipState {
        method,
        global_threshold,
        percentile: percentile_value,
        sparsified_weights,
        keep_fraction,
    })
}

/// Number of weights kept per output unit: `⌊keep_fraction · d⌋`, at least 1.
pub fn dice_keep_count(keep_fraction: f64, dim: usize) -> usize {
    ((keep_fraction * dim as f64).floor() as usize).clamp(1, dim)
}

/// Keeps, per row of `W`, the entries with the largest mean contribution
/// `E[w_c ⊙ z]`; ties go to the lower column index.
fn dice_sparsify(vectors: &[&[f64]], head: &HeadWeights, keep_fraction: f64) -> DMatrix<f64> {
    let dim = head.dim();
    let n = vectors.len() as f64;
    let keep = dice_keep_count(keep_fraction, dim);
    let mut sparse = DMatrix::zeros(head.num_classes(), dim);
    for c in 0..head.num_classes() {
        let contrib: Vec<f64> = (0..dim)
            .map(|j| {
                let w = head.weights[(c, j)];
                pairwise_sum_by(vectors.len(), &|i| w * vectors[i][j]) / n
            })
            .collect();
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| contrib[b].total_cmp(&contrib[a]).then(a.cmp(&b)));
        for &j in &order[..keep] {
            sparse[(c, j)] = head.weights[(c, j)];
        }
    }
    sparse
}

impl ActivationClipState {
    pub fn to_record(&self) -> TaggedRecord {
        let mut rec = TaggedRecord::new(self.method.as_str(), 1);
        rec.set("global_threshold", FieldValue::F64(self.global_threshold))
            .set("percentile", FieldValue::F64(self.percentile))
            .set("keep_fraction", FieldValue::F64(self.keep_fraction))
            .set("pruning_sums", FieldValue::Text("per_sample".into()));
        if let Some(w) = &self.sparsified_weights {
            let flat: Vec<f64> = (0..w.nrows())
                .flat_map(|i| w.row(i).iter().copied().collect::<Vec<_>>())
                .collect();
            rec.set("sparse_rows", FieldValue::U64(w.nrows() as u64))
                .set("sparse_cols", FieldValue::U64(w.ncols() as u64))
                .set("sparsified_weights", FieldValue::Reals(flat));
        }
        rec
    }

    pub fn from_record(rec: &TaggedRecord) -> Result<Self> {
        let method = match rec.tag.as_str() {
            "ash" => ClipMethod::Ash,
            "react" => ClipMethod::React,
            "dice" => ClipMethod::Dice,
            "dice_react" => ClipMethod::DiceReact,
            other => return Err(Error::Schema(format!("not an activation state: {other:?}"))),
        };
        let sparsified_weights = if rec.has("sparsified_weights") {
            let rows = rec.u64("sparse_rows")? as usize;
            let cols = rec.u64("sparse_cols")? as usize;
            let flat = rec.reals("sparsified_weights")?;
            if flat.len() != rows * cols {
                return Err(Error::Schema("sparsified head has inconsistent size".into()));
            }
            Some(DMatrix::from_row_slice(rows, cols, flat))
        } else {
            None
        };
        if sparsified_weights.is_some() != method.uses_dice() {
            return Err(Error::Schema(format!(
                "{} state must {}carry a sparsified head",
                method.as_str(),
                if method.uses_dice() { "" } else { "not " }
            )));
        }
        Ok(Self {
            method,
            global_threshold: rec.f64("global_threshold")?,
            percentile: rec.f64("percentile")?,
            sparsified_weights,
            keep_fraction: rec.f64("keep_fraction")?,
        })
    }
}

fn sparse_head(state: &ActivationClipState, head: &HeadWeights) -> Result<HeadWeights> {
    let w = state
        .sparsified_weights
        .clone()
        .ok_or_else(|| Error::Input("DICE state without a sparsified head".into()))?;
    HeadWeights::new(w, head.bias.clone())
}

/// Energy ID-ness after activation clipping, pruning or weight sparsification.
pub fn clipped_energy_score(
    state: &ActivationClipState,
    head: &HeadWeights,
    z: &[f64],
) -> Result<ClipScore> {
    head.check_dim(z)?;
    let t = state.global_threshold;
    let plain = |logits: Vec<f64>| -> Result<ClipScore> {
        Ok(ClipScore {
            value: energy_score(&logits, 1.0)?,
            degenerate: false,
        })
    };
    match state.method {
        ClipMethod::React => {
            let clipped: Vec<f64> = z.iter().map(|&v| v.min(t)).collect();
            plain(head.logits(&clipped))
        }
        ClipMethod::Dice => plain(sparse_head(state, head)?.logits(z)),
        ClipMethod::DiceReact => {
            let clipped: Vec<f64> = z.iter().map(|&v| v.min(t)).collect();
            plain(sparse_head(state, head)?.logits(&clipped))
        }
        ClipMethod::Ash => {
            let s1 = z.iter().fold(0.0, |acc, &v| acc + v);
            let pruned: Vec<f64> = z.iter().map(|&v| if v < t { 0.0 } else { v }).collect();
            let s2 = pruned.iter().fold(0.0, |acc, &v| acc + v);
            if s2 == 0.0 {
                return Ok(ClipScore {
                    value: logsumexp(head.bias.as_slice()),
                    degenerate: true,
                });
            }
            let scale = (s1 / s2).exp();
            let shaped: Vec<f64> = pruned
                .iter()
                .map(|&v| if v != 0.0 { v * scale } else { 0.0 })
                .collect();
            plain(head.logits(&shaped))
        }
    }
}

/// Plain energy ID-ness of the unmodified head output; the reference the
/// clipping methods reduce to.
pub fn head_energy(head: &HeadWeights, z: &[f64]) -> Result<f64> {
    head.check_dim(z)?;
    energy_score(&head.logits(z), 1.0)
}

/// Dense helper used by tests and the pipeline to build heads.
pub fn head_from_rows(rows: &[Vec<f64>], bias: &[f64]) -> Result<HeadWeights> {
    let classes = rows.len();
    let dim = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    if flat.len() != classes * dim {
        return Err(Error::Input("ragged head rows".into()));
    }
    HeadWeights::new(
        DMatrix::from_row_slice(classes, dim, &flat),
        DVector::from_column_slice(bias),
    )
}
