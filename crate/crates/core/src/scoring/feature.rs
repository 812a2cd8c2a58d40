//! Feature-space scores fitted on ID training detections: Mahalanobis, DDU
//! (class-conditional Gaussians with a shared covariance) and kNN.

use nalgebra::{Cholesky, DMatrix};

use crate::error::{Error, Result};
use crate::numeric::{all_finite, l2_norm, logsumexp, pairwise_sum_by, PAIRWISE_BLOCK};
use crate::record_io::container::{FieldValue, TaggedRecord};
use crate::record_io::DetectionRecord;

pub const DEFAULT_KNN_K: usize = 10;
pub const DEFAULT_REG_RELATIVE: f64 = 1e-6;

/// How the ridge added to the pooled covariance is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RegEpsilon {
    Absolute(f64),
    /// `factor · trace(Σ̂) / d`.
    TraceRelative(f64),
}

impl Default for RegEpsilon {
    fn default() -> Self {
        RegEpsilon::TraceRelative(DEFAULT_REG_RELATIVE)
    }
}

/// One training vector with its fitting label and ordering key.
#[derive(Debug, Clone, Copy)]
pub struct LabeledSample<'a> {
    pub image_id: &'a str,
    pub det_index: u32,
    pub class: usize,
    pub vector: &'a [f64],
}

/// Class means, shared covariance factor and class priors.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBankState {
    /// `|C| × d`; rows of classes without training objects are zero.
    pub class_means: DMatrix<f64>,
    pub class_counts: Vec<usize>,
    /// Lower-triangular Cholesky factor of `Σ̂ + ε I`.
    pub shared_cov_factor: DMatrix<f64>,
    pub class_priors: Vec<f64>,
    pub reg_epsilon: f64,
}

/// Fits on detections with features, labelling each by its predicted class.
pub fn fit_gaussian_bank(
    train: &[DetectionRecord],
    num_classes: usize,
    reg: RegEpsilon,
) -> Result<GaussianBankState> {
    let samples = train
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
    fit_gaussian_bank_samples(samples, num_classes, reg)
}

/// Transposed Gram matrix `XᵀX` summed pairwise over row blocks.
pub(crate) fn pairwise_gram(rows: &[&[f64]], dim: usize) -> DMatrix<f64> {
    if rows.len() <= PAIRWISE_BLOCK {
        let x = DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j]);
        return x.tr_mul(&x);
    }
    let mid = rows.len() / 2;
    pairwise_gram(&rows[..mid], dim) + pairwise_gram(&rows[mid..], dim)
}

/// Canonical order for training samples, making fits independent of the
/// order records arrive in.
pub(crate) fn canonical_sort(samples: &mut [LabeledSample<'_>]) {
    samples.sort_by(|a, b| {
        a.image_id
            .cmp(b.image_id)
            .then(a.det_index.cmp(&b.det_index))
    });
}

pub fn fit_gaussian_bank_samples(
    mut samples: Vec<LabeledSample<'_>>,
    num_classes: usize,
    reg: RegEpsilon,
) -> Result<GaussianBankState> {
    if samples.is_empty() {
        return Err(Error::Fit("no training objects".into()));
    }
    let dim = samples[0].vector.len();
    if dim == 0 {
        return Err(Error::Fit("zero-dimensional training vectors".into()));
    }
    for s in &samples {
        if s.vector.len() != dim {
            return Err(Error::Fit(format!(
                "training vector {}#{} has length {}, expected {dim}",
                s.image_id,
                s.det_index,
                s.vector.len()
            )));
        }
        if s.class >= num_classes {
            return Err(Error::Fit(format!(
                "training vector {}#{} has class {} outside {num_classes} classes",
                s.image_id, s.det_index, s.class
            )));
        }
        if !all_finite(s.vector) {
            return Err(Error::Fit(format!(
                "training vector {}#{} is not finite",
                s.image_id, s.det_index
            )));
        }
    }
    canonical_sort(&mut samples);

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, s) in samples.iter().enumerate() {
        members[s.class].push(i);
    }
    let mut class_means = DMatrix::zeros(num_classes, dim);
    for (c, idx) in members.iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        for j in 0..dim {
            let sum = pairwise_sum_by(idx.len(), &|i| samples[idx[i]].vector[j]);
            class_means[(c, j)] = sum / idx.len() as f64;
        }
    }

    let centered: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| {
            s.vector
                .iter()
                .enumerate()
                .map(|(j, v)| v - class_means[(s.class, j)])
                .collect()
        })
        .collect();
    let rows: Vec<&[f64]> = centered.iter().map(Vec::as_slice).collect();
    let n = samples.len() as f64;
    let cov = pairwise_gram(&rows, dim) / n;

    let reg_epsilon = match reg {
        RegEpsilon::Absolute(e) => e,
        RegEpsilon::TraceRelative(f) => f * cov.trace() / dim as f64,
    };
    if !(reg_epsilon >= 0.0 && reg_epsilon.is_finite()) {
        return Err(Error::Parameter(format!(
            "regularization must be finite and non-negative, got {reg_epsilon}"
        )));
    }
    let shared_cov_factor = cholesky_factor(&cov, reg_epsilon)?;

    let class_counts: Vec<usize> = members.iter().map(Vec::len).collect();
    let class_priors = class_counts.iter().map(|&k| k as f64 / n).collect();
    Ok(GaussianBankState {
        class_means,
        class_counts,
        shared_cov_factor,
        class_priors,
        reg_epsilon,
    })
}

fn cholesky_factor(cov: &DMatrix<f64>, reg_epsilon: f64) -> Result<DMatrix<f64>> {
    let dim = cov.nrows();
    let regularized = cov + DMatrix::identity(dim, dim) * reg_epsilon;
    let failure = || {
        Error::Numerical(format!(
            "covariance is not positive definite with regularization {reg_epsilon:e}; use a larger reg_epsilon"
        ))
    };
    let factor = Cholesky::new(regularized).ok_or_else(failure)?.l();
    if (0..dim).any(|i| !(factor[(i, i)] > 0.0 && factor[(i, i)].is_finite())) {
        return Err(failure());
    }
    Ok(factor)
}

impl GaussianBankState {
    pub fn dim(&self) -> usize {
        self.class_means.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.class_means.nrows()
    }

    fn check_dim(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim() {
            return Err(Error::Input(format!(
                "vector length {} does not match fitted dimension {}",
                z.len(),
                self.dim()
            )));
        }
        if !all_finite(z) {
            return Err(Error::Input("non-finite vector".into()));
        }
        Ok(())
    }

    /// Squared Mahalanobis distance to the mean of class `c`, via forward
    /// substitution against the stored factor.
    fn squared_distance(&self, z: &[f64], c: usize) -> f64 {
        let dim = self.dim();
        let l = &self.shared_cov_factor;
        let mut y = vec![0.0; dim];
        for i in 0..dim {
            let mut acc = z[i] - self.class_means[(c, i)];
            for k in 0..i {
                acc -= l[(i, k)] * y[k];
            }
            y[i] = acc / l[(i, i)];
        }
        y.iter().fold(0.0, |acc, v| acc + v * v)
    }

    fn fitted_classes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_classes()).filter(|&c| self.class_counts[c] > 0)
    }

    /// `ln det(Σ̂ + ε I)`.
    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.dim())
            .map(|i| self.shared_cov_factor[(i, i)].ln())
            .sum::<f64>()
    }

    pub fn to_record(&self, tag: &str) -> TaggedRecord {
        let mut rec = TaggedRecord::new(tag, 1);
        let means: Vec<f64> = (0..self.num_classes())
            .flat_map(|c| self.class_means.row(c).iter().copied().collect::<Vec<_>>())
            .collect();
        let factor: Vec<f64> = (0..self.dim())
            .flat_map(|i| self.shared_cov_factor.row(i).iter().copied().collect::<Vec<_>>())
            .collect();
        rec.set("num_classes", FieldValue::U64(self.num_classes() as u64))
            .set("dim", FieldValue::U64(self.dim() as u64))
            .set("class_means", FieldValue::Reals(means))
            .set(
                "class_counts",
                FieldValue::Reals(self.class_counts.iter().map(|&c| c as f64).collect()),
            )
            .set("cov_factor", FieldValue::Reals(factor))
            .set("class_priors", FieldValue::Reals(self.class_priors.clone()))
            .set("reg_epsilon", FieldValue::F64(self.reg_epsilon));
        rec
    }

    pub fn from_record(rec: &TaggedRecord) -> Result<Self> {
        let classes = rec.u64("num_classes")? as usize;
        let dim = rec.u64("dim")? as usize;
        let means = rec.reals("class_means")?;
        let factor = rec.reals("cov_factor")?;
        let counts = rec.reals("class_counts")?;
        let priors = rec.reals("class_priors")?;
        if means.len() != classes * dim
            || factor.len() != dim * dim
            || counts.len() != classes
            || priors.len() != classes
        {
            return Err(Error::Schema("gaussian state arrays have inconsistent sizes".into()));
        }
        Ok(Self {
            class_means: DMatrix::from_row_slice(classes, dim, means),
            class_counts: counts.iter().map(|&c| c as usize).collect(),
            shared_cov_factor: DMatrix::from_row_slice(dim, dim, factor),
            class_priors: priors.to_vec(),
            reg_epsilon: rec.f64("reg_epsilon")?,
        })
    }
}

/// `max_c -(z - μ_c)ᵀ Σ̂⁻¹ (z - μ_c)` over classes seen in training.
pub fn mahalanobis_score(state: &GaussianBankState, z: &[f64]) -> Result<f64> {
    state.check_dim(z)?;
    state
        .fitted_classes()
        .map(|c| -state.squared_distance(z, c))
        .fold(None, |best: Option<f64>, v| Some(best.map_or(v, |b| b.max(v))))
        .ok_or_else(|| Error::Input("gaussian bank has no fitted class".into()))
}

/// Log density of the class-prior-weighted Gaussian mixture.
pub fn ddu_score(state: &GaussianBankState, z: &[f64]) -> Result<f64> {
    state.check_dim(z)?;
    let norm = -0.5 * (state.dim() as f64 * (2.0 * std::f64::consts::PI).ln() + state.log_det());
    let terms: Vec<f64> = state
        .fitted_classes()
        .filter(|&c| state.class_priors[c] > 0.0)
        .map(|c| state.class_priors[c].ln() + norm - 0.5 * state.squared_distance(z, c))
        .collect();
    if terms.is_empty() {
        return Err(Error::Input("gaussian bank has no class with positive prior".into()));
    }
    Ok(logsumexp(&terms))
}

/// Unit-normalised training features and the neighbour rank `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnBankState {
    /// `N × d`, row-major, rows of unit L2 norm.
    pub normalized_train: Vec<f64>,
    pub dim: usize,
    pub k: usize,
}

pub fn fit_knn_bank(train: &[DetectionRecord], k: usize) -> Result<KnnBankState> {
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
    fit_knn_vectors(samples.iter().map(|s| s.vector), k)
}

pub fn fit_knn_vectors<'a, I>(vectors: I, k: usize) -> Result<KnnBankState>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    if k == 0 {
        return Err(Error::Parameter("kNN k must be positive".into()));
    }
    let mut normalized_train = Vec::new();
    let mut dim = None;
    let mut count = 0usize;
    for v in vectors {
        match dim {
            None => dim = Some(v.len()),
            Some(d) if d != v.len() => {
                return Err(Error::Fit(format!(
                    "training vector length {} differs from {d}",
                    v.len()
                )))
            }
            _ => {}
        }
        let norm = l2_norm(v);
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::Validation(format!(
                "training vector {count} has zero or non-finite norm"
            )));
        }
        normalized_train.extend(v.iter().map(|x| x / norm));
        count += 1;
    }
    if k > count {
        return Err(Error::Parameter(format!(
            "kNN k = {k} exceeds the {count} training objects"
        )));
    }
    Ok(KnnBankState {
        normalized_train,
        dim: dim.unwrap_or(0),
        k,
    })
}

impl KnnBankState {
    pub fn len(&self) -> usize {
        self.normalized_train.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.normalized_train[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_record(&self) -> TaggedRecord {
        let mut rec = TaggedRecord::new("knn", 1);
        rec.set("dim", FieldValue::U64(self.dim as u64))
            .set("k", FieldValue::U64(self.k as u64))
            .set("normalized_train", FieldValue::Reals(self.normalized_train.clone()));
        rec
    }

    pub fn from_record(rec: &TaggedRecord) -> Result<Self> {
        let dim = rec.u64("dim")? as usize;
        let data = rec.reals("normalized_train")?;
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::Schema("knn state has inconsistent sizes".into()));
        }
        Ok(Self {
            normalized_train: data.to_vec(),
            dim,
            k: rec.u64("k")? as usize,
        })
    }
}

/// Negated distance from the normalised query to its k-th nearest stored row.
pub fn knn_score(state: &KnnBankState, z: &[f64]) -> Result<f64> {
    if z.len() != state.dim {
        return Err(Error::Input(format!(
            "query length {} does not match fitted dimension {}",
            z.len(),
            state.dim
        )));
    }
    let norm = l2_norm(z);
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::Input("kNN query has zero or non-finite norm".into()));
    }
    let query: Vec<f64> = z.iter().map(|x| x / norm).collect();
    let mut dists: Vec<f64> = (0..state.len())
        .map(|i| {
            state
                .row(i)
                .iter()
                .zip(&query)
                .fold(0.0, |acc, (a, b)| acc + (a - b) * (a - b))
                .sqrt()
        })
        .collect();
    let k = state.k;
    if k == 0 || k > dists.len() {
        return Err(Error::Parameter(format!(
            "kNN k = {k} invalid for {} stored rows",
            dists.len()
        )));
    }
    let (_, kth, _) = dists.select_nth_unstable_by(k - 1, f64::total_cmp);
    Ok(-*kth)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample<'a>(id: &'a str, idx: u32, class: usize, v: &'a [f64]) -> LabeledSample<'a> {
        LabeledSample {
            image_id: id,
            det_index: idx,
            class,
            vector: v,
        }
    }

    #[test]
    fn one_dimensional_population_covariance() {
        let a = [0.0];
        let b = [2.0];
        let s = fit_gaussian_bank_samples(
            vec![sample("a", 0, 0, &a), sample("a", 1, 0, &b)],
            1,
            RegEpsilon::Absolute(0.0),
        )
        .unwrap();
        assert_eq!(s.class_means[(0, 0)], 1.0);
        assert_eq!(s.shared_cov_factor[(0, 0)], 1.0);
    }

    #[test]
    fn identical_points_give_sqrt_epsilon_factor() {
        let v = [1.0, -2.0, 3.0];
        let samples = (0..4).map(|i| sample("x", i, 0, &v)).collect();
        let s = fit_gaussian_bank_samples(samples, 1, RegEpsilon::Absolute(1e-4)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1e-2 } else { 0.0 };
                assert!((s.shared_cov_factor[(i, j)] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_covariance_without_ridge_is_numerical_error() {
        let v = [1.0, 1.0];
        let samples = (0..3).map(|i| sample("x", i, 0, &v)).collect();
        let err = fit_gaussian_bank_samples(samples, 1, RegEpsilon::default()).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)), "{err:?}");
    }

    #[test]
    fn balanced_priors() {
        let p = [[0.0, 1.0], [1.0, 0.0], [2.0, 1.0], [0.5, 3.0]];
        let samples = p
            .iter()
            .enumerate()
            .map(|(i, v)| sample("img", i as u32, i % 2, v))
            .collect();
        let s = fit_gaussian_bank_samples(samples, 2, RegEpsilon::default()).unwrap();
        assert_eq!(s.class_priors, vec![0.5, 0.5]);
    }

    #[test]
    fn empty_training_set_is_fit_error() {
        assert!(matches!(
            fit_gaussian_bank_samples(vec![], 2, RegEpsilon::default()),
            Err(Error::Fit(_))
        ));
    }

    fn identity_state(means: &[&[f64]]) -> GaussianBankState {
        let dim = means[0].len();
        let classes = means.len();
        GaussianBankState {
            class_means: DMatrix::from_fn(classes, dim, |c, j| means[c][j]),
            class_counts: vec![1; classes],
            shared_cov_factor: DMatrix::identity(dim, dim),
            class_priors: vec![1.0 / classes as f64; classes],
            reg_epsilon: 0.0,
        }
    }

    #[test]
    fn mahalanobis_examples() {
        let s = identity_state(&[&[0.0, 0.0], &[3.0, 1.0]]);
        assert_eq!(mahalanobis_score(&s, &[3.0, 1.0]).unwrap(), 0.0);
        let s = identity_state(&[&[0.0, 0.0]]);
        assert_eq!(mahalanobis_score(&s, &[1.0, 0.0]).unwrap(), -1.0);
        assert!(matches!(mahalanobis_score(&s, &[1.0]), Err(Error::Input(_))));
    }

    #[test]
    fn ddu_standard_normal_mode() {
        let s = identity_state(&[&[0.0]]);
        let v = ddu_score(&s, &[0.0]).unwrap();
        assert!((v + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
        assert!((v + 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn ddu_symmetric_midpoint() {
        let s = identity_state(&[&[-2.0], &[2.0]]);
        let v = ddu_score(&s, &[0.0]).unwrap();
        let component = -0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * 4.0;
        assert!((v - component).abs() < 1e-12);
    }

    #[test]
    fn knn_normalizes_rows() {
        let a = [3.0, 4.0];
        let b = [0.0, 1.0];
        let s = fit_knn_vectors([&a[..], &b[..]], 1).unwrap();
        assert_eq!(s.row(0), &[0.6, 0.8]);
        assert_eq!(s.row(1), &[0.0, 1.0]);
    }

    #[test]
    fn knn_parameter_errors() {
        let a = [1.0, 0.0];
        assert!(matches!(fit_knn_vectors([&a[..]], 0), Err(Error::Parameter(_))));
        assert!(matches!(fit_knn_vectors([&a[..]], 2), Err(Error::Parameter(_))));
        let z = [0.0, 0.0];
        assert!(matches!(fit_knn_vectors([&z[..]], 1), Err(Error::Validation(_))));
    }

    #[test]
    fn knn_duplicates_count() {
        let a = [1.0, 0.0];
        let s = fit_knn_vectors([&a[..], &a[..], &a[..]], 3).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(knn_score(&s, &[2.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn knn_identity_and_scale() {
        let a = [0.3, -1.2, 2.0];
        let b = [1.0, 1.0, 0.0];
        let s = fit_knn_vectors([&a[..], &b[..]], 1).unwrap();
        assert_eq!(knn_score(&s, &a).unwrap(), 0.0);
        let scaled: Vec<f64> = a.iter().map(|v| v * 4.0).collect();
        assert!(knn_score(&s, &scaled).unwrap().abs() < 1e-15);
        assert!(matches!(knn_score(&s, &[0.0; 3]), Err(Error::Input(_))));
    }

    #[test]
    fn states_round_trip_through_records() {
        let s = identity_state(&[&[0.5, 1.0], &[2.0, -1.0]]);
        assert_eq!(GaussianBankState::from_record(&s.to_record("mahalanobis")).unwrap(), s);
        let a = [1.0, 2.0];
        let k = fit_knn_vectors([&a[..]], 1).unwrap();
        assert_eq!(KnnBankState::from_record(&k.to_record()).unwrap(), k);
    }
}
