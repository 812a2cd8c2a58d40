//! Writes the small end-to-end fixture used by the acceptance suite.
//!
//! ```text
//! cargo run -p oodeval --example make_golden_fixture -- crates/core/tests/fixtures/golden
//! ```
//!
//! Then run the pipeline on `config.toml` and save `report.json` as
//! `golden_report.json`.

use std::path::PathBuf;

use oodeval::record_io::{
    save_categories, save_detections, save_ground_truth, save_image_list, BBox, CategoryEntry,
    CategoryRole, CategoryTable, DetectionRecord, GroundTruthObject,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIM: usize = 4;
const CLASSES: usize = 3;

fn detection(rng: &mut ChaCha8Rng, image: &str, idx: u32, class: usize, shift: f64, bbox: BBox) -> DetectionRecord {
    let features: Vec<f64> = (0..DIM)
        .map(|j| if j == class { 3.0 } else { 0.0 } + shift + rng.random_range(-1.0..1.0))
        .collect();
    let logits: Vec<f64> = (0..CLASSES)
        .map(|c| features[c] * (1.0 - shift / 2.0) + rng.random_range(-0.5..0.5))
        .collect();
    let top = (0..CLASSES).max_by(|&a, &b| logits[a].total_cmp(&logits[b])).unwrap();
    let confidence = 1.0 / logits.iter().map(|c| (c - logits[top]).exp()).sum::<f64>();
    DetectionRecord {
        image_id: image.to_string(),
        det_index: idx,
        bbox,
        pred_class: top,
        confidence,
        logits,
        features: Some(features),
        latent_pooled: None,
    }
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let (x, y) = (rng.random_range(0.0..300.0), rng.random_range(0.0..300.0));
    BBox::new(x, y, x + rng.random_range(20.0..80.0), y + rng.random_range(20.0..80.0))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = PathBuf::from(std::env::args().nth(1).ok_or("usage: make_golden_fixture <dir>")?);
    std::fs::create_dir_all(&dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(20);

    let mut entries: Vec<CategoryEntry> = ["person", "car", "dog"]
        .iter()
        .enumerate()
        .map(|(i, name)| CategoryEntry {
            category_id: i as i64 + 1,
            name: name.to_string(),
            role: CategoryRole::Id,
        })
        .collect();
    entries.push(CategoryEntry {
        category_id: 50,
        name: "giraffe".into(),
        role: CategoryRole::OodFar,
    });
    entries.push(CategoryEntry {
        category_id: 51,
        name: "kite".into(),
        role: CategoryRole::OodFar,
    });
    let categories = CategoryTable::new(entries)?;
    save_categories(&dir.join("categories.tsv"), &categories)?;

    let train: Vec<DetectionRecord> = (0..60)
        .map(|i| {
            let b = random_box(&mut rng);
            detection(&mut rng, &format!("train{i:03}"), 0, i % CLASSES, 0.0, b)
        })
        .collect();
    save_detections(&dir.join("train.det"), &train)?;

    let mut id = Vec::new();
    for i in 0..20 {
        for k in 0..rng.random_range(1..=3) {
            let b = random_box(&mut rng);
            let class = rng.random_range(0..CLASSES);
            id.push(detection(&mut rng, &format!("id{i:03}"), k, class, 0.0, b));
        }
    }
    save_detections(&dir.join("id.det"), &id)?;

    let mut ood = Vec::new();
    let mut truth = Vec::new();
    let mut images = Vec::new();
    for i in 0..20 {
        let image = format!("ood{i:03}");
        let mut next = 0;
        for _ in 0..rng.random_range(1..=3) {
            let b = random_box(&mut rng);
            let unknown = rng.random_bool(0.7);
            truth.push(GroundTruthObject {
                image_id: image.clone(),
                bbox: b,
                category_id: if unknown { 50 + rng.random_range(0..2) } else { rng.random_range(1..=3) },
                is_unknown: unknown,
                dataset_origin: "synthetic".into(),
            });
            if rng.random_bool(0.8) {
                let j = |rng: &mut ChaCha8Rng| rng.random_range(-3.0..3.0);
                let db = BBox::new(b.x_min + j(&mut rng), b.y_min + j(&mut rng), b.x_max + j(&mut rng), b.y_max + j(&mut rng));
                let shift = if unknown { rng.random_range(0.5..2.0) } else { 0.0 };
                let class = rng.random_range(0..CLASSES);
                ood.push(detection(&mut rng, &image, next, class, shift, db));
                next += 1;
            }
        }
        if rng.random_bool(0.3) {
            let b = random_box(&mut rng);
            ood.push(detection(&mut rng, &image, next, 0, 0.5, b));
        }
        images.push(image);
    }
    save_detections(&dir.join("ood.det"), &ood)?;
    save_ground_truth(&dir.join("ood.gt"), &truth)?;
    save_image_list(&dir.join("ood.images"), &images)?;

    std::fs::write(
        dir.join("config.toml"),
        r#"[run]
architecture = "synthetic"
id_dataset = "synthetic"
methods = ["msp", "mahalanobis"]
seed = 7

[execution]
output_dir = "out"

[inputs]
categories = "categories.tsv"
train_records = "train.det"
id_records = "id.det"

[[splits]]
name = "far"
records = "ood.det"
ground_truth = "ood.gt"
images = "ood.images"
"#,
    )?;
    Ok(())
}
