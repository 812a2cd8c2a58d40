use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in absolute pixels, corner form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub const fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.x_max > self.x_min
            && self.y_max > self.y_min
            && [self.x_min, self.y_min, self.x_max, self.y_max]
                .iter()
                .all(|v| v.is_finite())
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn from_slice(v: &[f64]) -> Option<Self> {
        match *v {
            [a, b, c, d] => Some(Self::new(a, b, c, d)),
            _ => None,
        }
    }

    /// Lexicographic total order over the four coordinates.
    pub fn total_cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.to_array()
            .iter()
            .zip(other.to_array().iter())
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    }
}

/// One detected object after NMS and the detector's confidence threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    pub det_index: u32,
    pub bbox: BBox,
    pub pred_class: usize,
    pub confidence: f64,
    pub logits: Vec<f64>,
    pub features: Option<Vec<f64>>,
    pub latent_pooled: Option<Vec<f64>>,
}

impl DetectionRecord {
    pub fn key(&self) -> DetKey<'_> {
        DetKey {
            image_id: &self.image_id,
            det_index: self.det_index,
        }
    }

    pub fn require_features(&self) -> Result<&[f64]> {
        self.features.as_deref().ok_or_else(|| {
            Error::Input(format!(
                "detection {}#{} has no feature vector",
                self.image_id, self.det_index
            ))
        })
    }
}

/// Ordering key shared by every per-detection output: `(image_id, det_index)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DetKey<'a> {
    pub image_id: &'a str,
    pub det_index: u32,
}

impl fmt::Display for DetKey<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.image_id, self.det_index)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    pub image_id: String,
    pub bbox: BBox,
    pub category_id: i64,
    pub is_unknown: bool,
    pub dataset_origin: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CategoryRole {
    Id,
    OodNear,
    OodFar,
    Overlap,
}

impl CategoryRole {
    pub fn as_str(self) -> &'static str {
        match self {
            CategoryRole::Id => "id",
            CategoryRole::OodNear => "ood_near",
            CategoryRole::OodFar => "ood_far",
            CategoryRole::Overlap => "overlap",
        }
    }
}

impl FromStr for CategoryRole {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "id" => Ok(CategoryRole::Id),
            "ood_near" => Ok(CategoryRole::OodNear),
            "ood_far" => Ok(CategoryRole::OodFar),
            "overlap" => Ok(CategoryRole::Overlap),
            other => Err(format!("unknown category role {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryEntry {
    pub category_id: i64,
    pub name: String,
    pub role: CategoryRole,
}

/// All categories known to a run. The `id` entries, in file order, are the
/// detector's classes in logit order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CategoryTable {
    entries: Vec<CategoryEntry>,
    by_id: HashMap<i64, usize>,
    id_classes: Vec<i64>,
}

impl CategoryTable {
    pub fn new(entries: Vec<CategoryEntry>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if by_id.insert(e.category_id, i).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate category_id {} in category table",
                    e.category_id
                )));
            }
        }
        let id_classes = entries
            .iter()
            .filter(|e| e.role == CategoryRole::Id)
            .map(|e| e.category_id)
            .collect();
        Ok(Self {
            entries,
            by_id,
            id_classes,
        })
    }

    pub fn entries(&self) -> &[CategoryEntry] {
        &self.entries
    }

    /// Number of detector classes, `|C|`.
    pub fn num_classes(&self) -> usize {
        self.id_classes.len()
    }

    pub fn contains(&self, category_id: i64) -> bool {
        self.by_id.contains_key(&category_id)
    }

    pub fn get(&self, category_id: i64) -> Option<&CategoryEntry> {
        self.by_id.get(&category_id).map(|&i| &self.entries[i])
    }

    /// Category id of the logit at `class_index`.
    pub fn class_category(&self, class_index: usize) -> Option<i64> {
        self.id_classes.get(class_index).copied()
    }

    pub fn id_classes(&self) -> &[i64] {
        &self.id_classes
    }
}

/// Final linear layer of the detector's classification head. `weights` is
/// `|C| × d`, one row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl HeadWeights {
    pub fn new(weights: DMatrix<f64>, bias: DVector<f64>) -> Result<Self> {
        if weights.nrows() != bias.len() {
            return Err(Error::Schema(format!(
                "head has {} weight rows but bias length {}",
                weights.nrows(),
                bias.len()
            )));
        }
        Ok(Self { weights, bias })
    }

    pub fn num_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    /// `W z + b`, each row accumulated left to right.
    pub fn logits(&self, z: &[f64]) -> Vec<f64> {
        (0..self.num_classes())
            .map(|c| {
                let row = self.weights.row(c);
                let dot = row.iter().zip(z).fold(0.0, |acc, (w, x)| acc + w * x);
                dot + self.bias[c]
            })
            .collect()
    }

    pub fn check_dim(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim() {
            return Err(Error::Input(format!(
                "feature length {} does not match head dimension {}",
                z.len(),
                self.dim()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMapRecord {
    pub image_id: String,
    pub layer_name: String,
    /// `(channels, height, width)`.
    pub shape: (usize, usize, usize),
    /// Row-major `channels × height × width`.
    pub data: Vec<f64>,
    pub spatial_scale: f64,
}

impl FeatureMapRecord {
    pub fn channels(&self) -> usize {
        self.shape.0
    }

    pub fn height(&self) -> usize {
        self.shape.1
    }

    pub fn width(&self) -> usize {
        self.shape.2
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.shape.1 * self.shape.2;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Validation(format!(
                "feature map {} has a zero dimension in shape {:?}",
                self.image_id, self.shape
            )));
        }
        if self.data.len() != c * h * w {
            return Err(Error::Truncated(format!(
                "feature map {}: shape {:?} needs {} values, found {}",
                self.image_id,
                self.shape,
                c * h * w,
                self.data.len()
            )));
        }
        if !(self.spatial_scale.is_finite() && self.spatial_scale > 0.0) {
            return Err(Error::Validation(format!(
                "feature map {}: spatial_scale {} must be finite and positive",
                self.image_id, self.spatial_scale
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub image_id: String,
    pub embedding: Vec<f64>,
    pub split_tag: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assignment {
    Near,
    Far,
    Farther,
    Removed,
}

impl Assignment {
    pub fn as_str(self) -> &'static str {
        match self {
            Assignment::Near => "near",
            Assignment::Far => "far",
            Assignment::Farther => "farther",
            Assignment::Removed => "removed",
        }
    }
}

impl FromStr for Assignment {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "near" => Ok(Assignment::Near),
            "far" => Ok(Assignment::Far),
            "farther" => Ok(Assignment::Farther),
            "removed" => Ok(Assignment::Removed),
            other => Err(format!("unknown split assignment {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub assignment: Assignment,
    pub evidence: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitManifest {
    pub entries: Vec<ManifestEntry>,
}

impl SplitManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.image_id.as_str()) {
                return Err(Error::Validation(format!(
                    "image {} appears twice in manifest",
                    e.image_id
                )));
            }
            if e.assignment == Assignment::Removed && e.evidence.is_empty() {
                return Err(Error::Validation(format!(
                    "removed image {} carries no evidence",
                    e.image_id
                )));
            }
        }
        Ok(())
    }

    /// Sorts entries by image id, the canonical emission order.
    pub fn canonicalize(&mut self) {
        self.entries.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    }

    pub fn count(&self, assignment: Assignment) -> usize {
        self.entries
            .iter()
            .filter(|e| e.assignment == assignment)
            .count()
    }
}

/// Groups records by image id, keeping first-appearance order of images and
/// file order within each image.
pub fn group_by_image<T, F>(items: Vec<T>, image_of: F) -> Vec<T>
where
    F: Fn(&T) -> &str,
{
    let mut order: Vec<String> = Vec::new();
    let mut buckets: HashMap<String, Vec<T>> = HashMap::new();
    for item in items {
        let id = image_of(&item).to_owned();
        match buckets.get_mut(&id) {
            Some(bucket) => bucket.push(item),
            None => {
                order.push(id.clone());
                buckets.insert(id, vec![item]);
            }
        }
    }
    order
        .into_iter()
        .flat_map(|id| buckets.remove(&id).unwrap_or_default())
        .collect()
}
