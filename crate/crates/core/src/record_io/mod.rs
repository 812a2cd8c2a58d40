//! On-disk artifacts: detections, ground truth, categories, manifests, score
//! files (line-delimited text) and head weights, feature maps, fitted states
//! (`FMYC` binary container).
//!
//! Exporters must emit post-NMS detections already filtered at the detector
//! threshold `t*`, except for `t*` calibration runs which export at threshold 0.

pub mod container;
pub mod text;
pub mod types;

pub use container::{
    load_feature_maps, load_head, read_head, save_feature_maps, save_head, write_head,
    FeatureMapStream, FeatureMapWriter,
};
pub use text::{
    load_categories, load_category_ids, load_detections, load_embeddings, load_ground_truth,
    load_image_list, load_manifest, load_pooled, load_scores, parse_outcomes, save_categories,
    save_category_ids, save_detections, save_embeddings, save_ground_truth, save_image_list,
    save_manifest, save_outcomes, save_pooled, save_scores, OutcomeLine, PooledLine, ScoreLine,
    TextSchema,
};
pub use types::{
    Assignment, BBox, CategoryEntry, CategoryRole, CategoryTable, DetKey, DetectionRecord,
    EmbeddingRecord, FeatureMapRecord, GroundTruthObject, HeadWeights, ManifestEntry,
    SplitManifest,
};
