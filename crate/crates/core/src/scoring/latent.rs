//! LaRD: per-object latent crops via RoIAlign, channel-mean pooling and a
//! shared-covariance Gaussian bank over the pooled vectors.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;

use super::feature::{fit_gaussian_bank_samples, mahalanobis_score, GaussianBankState, LabeledSample, RegEpsilon};
use crate::error::{Error, Result};
use crate::numeric::{all_finite, shifted_mean};
use crate::record_io::{BBox, DetectionRecord, FeatureMapRecord};

pub const DEFAULT_ROI_RESOLUTION: usize = 9;
/// Sub-samples per bin along each axis.
pub const SAMPLING_RATIO: usize = 2;
/// Largest tolerated gap between exporter-pooled and engine-pooled vectors.
pub const PROVENANCE_TOLERANCE: f64 = 1e-4;

/// `(channels, R, R)` crop, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiCrop {
    pub channels: usize,
    pub resolution: usize,
    pub data: Vec<f64>,
    /// Every sample point fell outside the map; `data` is all zero.
    pub outside: bool,
}

impl RoiCrop {
    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.resolution * self.resolution;
        &self.data[c * plane..(c + 1) * plane]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledLatent {
    pub image_id: String,
    pub det_index: u32,
    pub vector: Vec<f64>,
}

fn bilinear(plane: &[f64], height: usize, width: usize, y: f64, x: f64) -> Option<f64> {
    let (h, w) = (height as f64, width as f64);
    if y < -1.0 || y > h || x < -1.0 || x > w {
        return None;
    }
    let y = y.max(0.0);
    let x = x.max(0.0);
    let (y_low, y_high, ly) = {
        let low = y.floor() as usize;
        if low >= height - 1 {
            (height - 1, height - 1, 0.0)
        } else {
            (low, low + 1, y - low as f64)
        }
    };
    let (x_low, x_high, lx) = {
        let low = x.floor() as usize;
        if low >= width - 1 {
            (width - 1, width - 1, 0.0)
        } else {
            (low, low + 1, x - low as f64)
        }
    };
    let at = |r: usize, c: usize| plane[r * width + c];
    let lerp = |a: f64, b: f64, t: f64| if t == 0.0 { a } else { a + t * (b - a) };
    let top = lerp(at(y_low, x_low), at(y_low, x_high), lx);
    let bottom = lerp(at(y_high, x_low), at(y_high, x_high), lx);
    Some(lerp(top, bottom, ly))
}

/// Aligned RoIAlign: the box is scaled into feature coordinates and shifted
/// by half a cell so sample coordinates address cell centres. Each of the
/// `R × R` bins averages a 2×2 grid of bilinear samples; samples beyond one
/// cell outside the map contribute zero.
pub fn roi_align(map: &FeatureMapRecord, bbox: &BBox, resolution: usize) -> Result<RoiCrop> {
    if resolution == 0 {
        return Err(Error::Parameter("RoIAlign resolution must be positive".into()));
    }
    if !bbox.is_valid() {
        return Err(Error::Input(format!("degenerate box {:?}", bbox.to_array())));
    }
    map.validate()?;
    let (channels, height, width) = map.shape;
    let s = map.spatial_scale;
    let x0 = bbox.x_min * s - 0.5;
    let y0 = bbox.y_min * s - 0.5;
    let bin_w = (bbox.x_max * s - 0.5 - x0) / resolution as f64;
    let bin_h = (bbox.y_max * s - 0.5 - y0) / resolution as f64;
    let step = 1.0 / SAMPLING_RATIO as f64;

    let mut data = Vec::with_capacity(channels * resolution * resolution);
    let mut any_inside = false;
    for c in 0..channels {
        let plane = map.channel(c);
        for py in 0..resolution {
            for px in 0..resolution {
                let mut s = [[0.0; SAMPLING_RATIO]; SAMPLING_RATIO];
                for (iy, row) in s.iter_mut().enumerate() {
                    let y = y0 + py as f64 * bin_h + (iy as f64 + 0.5) * step * bin_h;
                    for (ix, cell) in row.iter_mut().enumerate() {
                        let x = x0 + px as f64 * bin_w + (ix as f64 + 0.5) * step * bin_w;
                        if let Some(v) = bilinear(plane, height, width, y, x) {
                            *cell = v;
                            any_inside = true;
                        }
                    }
                }
                data.push(((s[0][0] + s[0][1]) * 0.5 + (s[1][0] + s[1][1]) * 0.5) * 0.5);
            }
        }
    }
    Ok(RoiCrop {
        channels,
        resolution,
        data,
        outside: !any_inside,
    })
}

/// Channel means of a crop.
pub fn pool_channels(crop: &RoiCrop) -> Result<Vec<f64>> {
    if !all_finite(&crop.data) {
        return Err(Error::Input("non-finite crop values".into()));
    }
    Ok((0..crop.channels).map(|c| shifted_mean(crop.channel(c))).collect())
}

pub fn fit_lard(
    train: &[(PooledLatent, usize)],
    num_classes: usize,
    reg: RegEpsilon,
) -> Result<GaussianBankState> {
    let samples = train
        .iter()
        .map(|(p, class)| LabeledSample {
            image_id: &p.image_id,
            det_index: p.det_index,
            class: *class,
            vector: &p.vector,
        })
        .collect();
    fit_gaussian_bank_samples(samples, num_classes, reg)
}

pub fn lard_score(state: &GaussianBankState, pooled: &[f64]) -> Result<f64> {
    mahalanobis_score(state, pooled)
}

/// Pooled latent vectors for a detection set, plus provenance notes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PooledSet {
    pub vectors: BTreeMap<(String, u32), Vec<f64>>,
    pub warnings: Vec<String>,
    /// Detections whose box fell entirely outside the feature map.
    pub outside: Vec<(String, u32)>,
}

impl PooledSet {
    pub fn get(&self, image_id: &str, det_index: u32) -> Option<&[f64]> {
        self.vectors
            .get(&(image_id.to_string(), det_index))
            .map(Vec::as_slice)
    }
}

/// Resolves one pooled vector per detection. Raw maps take precedence over
/// exporter-pooled vectors; a disagreement above [`PROVENANCE_TOLERANCE`]
/// is reported as a warning. With several layers per image, `layer` selects
/// one; otherwise the first map seen for an image is used.
pub fn resolve_pooled<I>(
    records: &[DetectionRecord],
    maps: Option<I>,
    layer: Option<&str>,
    resolution: usize,
) -> Result<PooledSet>
where
    I: Iterator<Item = Result<FeatureMapRecord>>,
{
    let mut by_image: HashMap<&str, Vec<&DetectionRecord>> = HashMap::new();
    for r in records {
        by_image.entry(r.image_id.as_str()).or_default().push(r);
    }
    let mut set = PooledSet::default();
    if let Some(maps) = maps {
        for map in maps {
            let map = map?;
            if layer.is_some_and(|l| l != map.layer_name) {
                continue;
            }
            let Some(dets) = by_image.remove(map.image_id.as_str()) else {
                continue;
            };
            let crops = dets
                .par_iter()
                .map(|d| roi_align(&map, &d.bbox, resolution).map(|c| (*d, c)))
                .collect::<Result<Vec<_>>>()?;
            for (d, crop) in crops {
                let key = (d.image_id.clone(), d.det_index);
                if crop.outside {
                    set.outside.push(key.clone());
                }
                let v = pool_channels(&crop)?;
                if let Some(given) = &d.latent_pooled {
                    let gap = if given.len() != v.len() {
                        f64::INFINITY
                    } else {
                        given
                            .iter()
                            .zip(&v)
                            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
                    };
                    if gap > PROVENANCE_TOLERANCE {
                        set.warnings.push(format!(
                            "{}: exporter-pooled latent differs from feature-map pooling by {gap:e}",
                            d.key()
                        ));
                    }
                }
                set.vectors.insert(key, v);
            }
        }
    }
    for r in records {
        let key = (r.image_id.clone(), r.det_index);
        if set.vectors.contains_key(&key) {
            continue;
        }
        match &r.latent_pooled {
            Some(v) => {
                set.vectors.insert(key, v.clone());
            }
            None => {
                return Err(Error::Input(format!(
                    "{}: no feature map and no pooled latent vector",
                    r.key()
                )))
            }
        }
    }
    Ok(set)
}
