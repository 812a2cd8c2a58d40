//! Benchmark curation: semantic-overlap removal, near/far assignment,
//! manual overrides and embedding cosine-similarity statistics.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::pairwise_mean;
use crate::record_io::{
    Assignment, CategoryTable, EmbeddingRecord, GroundTruthObject, ManifestEntry, SplitManifest,
};

pub const HISTOGRAM_BINS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Pairing {
    /// Each OOD embedding against its most similar ID embedding.
    NearestId,
    /// `pairs` uniformly drawn (ID, OOD) pairs.
    Sampled { seed: u64, pairs: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityStats {
    pub pair_label: String,
    pub pairing: Pairing,
    pub similarities: Vec<f64>,
    pub mean: f64,
    /// Counts over 50 equal bins spanning `[-1, 1]`.
    pub histogram: Vec<u64>,
}

fn unit_rows(records: &[EmbeddingRecord], dim: usize, what: &str) -> Result<Vec<Vec<f64>>> {
    records
        .iter()
        .map(|r| {
            if r.embedding.len() != dim {
                return Err(Error::Input(format!(
                    "{what} embedding {} has dimension {}, expected {dim}",
                    r.image_id,
                    r.embedding.len()
                )));
            }
            let norm = r.embedding.iter().fold(0.0, |a, v| a + v * v).sqrt();
            if !(norm > 0.0 && norm.is_finite()) {
                return Err(Error::Input(format!(
                    "{what} embedding {} has zero or non-finite norm",
                    r.image_id
                )));
            }
            Ok(r.embedding.iter().map(|v| v / norm).collect())
        })
        .collect()
}

fn cosine(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).fold(0.0, |a, (x, y)| a + x * y).clamp(-1.0, 1.0)
}

pub fn histogram(values: &[f64]) -> Vec<u64> {
    let mut bins = vec![0u64; HISTOGRAM_BINS];
    for &s in values {
        let pos = ((s.clamp(-1.0, 1.0) + 1.0) / 2.0 * HISTOGRAM_BINS as f64).floor() as usize;
        bins[pos.min(HISTOGRAM_BINS - 1)] += 1;
    }
    bins
}

pub fn cosine_similarity_stats(
    pair_label: &str,
    id_embeddings: &[EmbeddingRecord],
    ood_embeddings: &[EmbeddingRecord],
    pairing: Pairing,
) -> Result<SimilarityStats> {
    let Some(first) = id_embeddings.first() else {
        return Err(Error::Input("no ID embeddings".into()));
    };
    if ood_embeddings.is_empty() {
        return Err(Error::Input("no OOD embeddings".into()));
    }
    let dim = first.embedding.len();
    let id = unit_rows(id_embeddings, dim, "ID")?;
    let ood = unit_rows(ood_embeddings, dim, "OOD")?;
    let similarities: Vec<f64> = match pairing {
        Pairing::NearestId => ood
            .par_iter()
            .map(|u| id.iter().map(|v| cosine(u, v)).fold(f64::NEG_INFINITY, f64::max))
            .collect(),
        Pairing::Sampled { seed, pairs } => {
            if pairs == 0 {
                return Err(Error::Parameter("sampled pairing needs at least one pair".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..pairs)
                .map(|_| {
                    let i = rng.random_range(0..id.len());
                    let j = rng.random_range(0..ood.len());
                    cosine(&id[i], &ood[j])
                })
                .collect()
        }
    };
    Ok(SimilarityStats {
        pair_label: pair_label.to_string(),
        pairing,
        mean: pairwise_mean(&similarities),
        histogram: histogram(&similarities),
        similarities,
    })
}

fn resolve(ids: &BTreeSet<i64>, categories: &CategoryTable, what: &str) -> Result<()> {
    match ids.iter().find(|c| !categories.contains(**c)) {
        Some(c) => Err(Error::Config(format!("{what} category {c} is not in the category table"))),
        None => Ok(()),
    }
}

/// Categories present per image, over the given image universe plus every
/// image that carries annotations.
fn categories_by_image<'a>(
    gt: &'a [GroundTruthObject],
    images: &'a [String],
) -> BTreeMap<&'a str, BTreeSet<i64>> {
    let mut out: BTreeMap<&str, BTreeSet<i64>> =
        images.iter().map(|i| (i.as_str(), BTreeSet::new())).collect();
    for g in gt {
        out.entry(g.image_id.as_str()).or_default().insert(g.category_id);
    }
    out
}

/// Images containing any overlap-category annotation, marked removed with
/// the offending categories as evidence.
pub fn filter_overlap(
    gt: &[GroundTruthObject],
    overlap: &BTreeSet<i64>,
    categories: &CategoryTable,
) -> Result<SplitManifest> {
    resolve(overlap, categories, "overlap")?;
    let entries = categories_by_image(gt, &[])
        .into_iter()
        .filter_map(|(image, cats)| {
            let evidence: Vec<i64> = cats.intersection(overlap).copied().collect();
            (!evidence.is_empty()).then(|| ManifestEntry {
                image_id: image.to_string(),
                assignment: Assignment::Removed,
                evidence,
            })
        })
        .collect();
    Ok(SplitManifest { entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    #[default]
    NearFar,
    /// Every surviving image goes to the farther split.
    AllFarther,
}

/// Near iff the image has a near-category annotation, far otherwise.
/// `gt` and `images` must already exclude removed images.
pub fn assign_split(
    gt: &[GroundTruthObject],
    images: &[String],
    near: &BTreeSet<i64>,
    categories: &CategoryTable,
    mode: SplitMode,
) -> Result<SplitManifest> {
    resolve(near, categories, "near")?;
    let entries = categories_by_image(gt, images)
        .into_iter()
        .map(|(image, cats)| {
            let evidence: Vec<i64> = cats.intersection(near).copied().collect();
            let assignment = match mode {
                SplitMode::AllFarther => Assignment::Farther,
                SplitMode::NearFar if evidence.is_empty() => Assignment::Far,
                SplitMode::NearFar => Assignment::Near,
            };
            ManifestEntry {
                image_id: image.to_string(),
                assignment,
                evidence: if mode == SplitMode::NearFar { evidence } else { Vec::new() },
            }
        })
        .collect();
    Ok(SplitManifest { entries })
}

/// Full automatic pipeline followed by manual overrides, sorted by image id.
pub fn build_manifest(
    gt: &[GroundTruthObject],
    images: &[String],
    overlap: &BTreeSet<i64>,
    near: &BTreeSet<i64>,
    categories: &CategoryTable,
    mode: SplitMode,
    overrides: Option<&SplitManifest>,
) -> Result<SplitManifest> {
    let removed = filter_overlap(gt, overlap, categories)?;
    let gone: BTreeSet<&str> = removed.entries.iter().map(|e| e.image_id.as_str()).collect();
    let kept_gt: Vec<GroundTruthObject> = gt
        .iter()
        .filter(|g| !gone.contains(g.image_id.as_str()))
        .cloned()
        .collect();
    let kept_images: Vec<String> = images
        .iter()
        .filter(|i| !gone.contains(i.as_str()))
        .cloned()
        .collect();
    let assigned = assign_split(&kept_gt, &kept_images, near, categories, mode)?;
    let mut by_image: BTreeMap<String, ManifestEntry> = removed
        .entries
        .into_iter()
        .chain(assigned.entries)
        .map(|e| (e.image_id.clone(), e))
        .collect();
    if let Some(ov) = overrides {
        for e in &ov.entries {
            by_image.insert(e.image_id.clone(), e.clone());
        }
    }
    let mut manifest = SplitManifest {
        entries: by_image.into_values().collect(),
    };
    manifest.validate()?;
    manifest.canonicalize();
    Ok(manifest)
}
