use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::DMatrix;
use oodeval::calibration::{apply_omega, calibrate_tau, EffectiveClass, Verdict};
use oodeval::metrics::ood::{auroc, fpr_at_tpr};
use oodeval::metrics::osod::{average_precision, match_unknowns, nose, OutcomeTag};
use oodeval::pipeline::{run_pipeline, PipelineConfig};
use oodeval::record_io::text::{parse_detections, write_detections, write_manifest};
use oodeval::record_io::{
    BBox, CategoryEntry, CategoryRole, CategoryTable, DetectionRecord, EmbeddingRecord, FeatureMapRecord,
    GroundTruthObject,
};
use oodeval::scoring::feature::{
    ddu_score, fit_gaussian_bank, fit_knn_vectors, knn_score, mahalanobis_score, RegEpsilon,
};
use oodeval::scoring::latent::roi_align;
use oodeval::scoring::mixed::{
    clipped_energy_score, fit_activation_vectors, fit_vim_vectors, head_energy, head_from_rows, ClipMethod,
    VimOptions,
};
use oodeval::scoring::{IdnessScore, MethodId};
use oodeval::stratify::{assign_split, cosine_similarity_stats, filter_overlap, Pairing, SplitMode};
use proptest::prelude::*;

fn table(classes: usize) -> CategoryTable {
    let mut entries: Vec<CategoryEntry> = (0..classes)
        .map(|i| CategoryEntry {
            category_id: i as i64 + 1,
            name: format!("c{i}"),
            role: CategoryRole::Id,
        })
        .collect();
    for (id, role) in [(40, CategoryRole::Overlap), (50, CategoryRole::OodNear), (60, CategoryRole::OodFar)] {
        entries.push(CategoryEntry {
            category_id: id,
            name: format!("c{id}"),
            role,
        });
    }
    CategoryTable::new(entries).unwrap()
}

fn record(image: &str, det_index: u32, logits: Vec<f64>, features: Option<Vec<f64>>, bbox: BBox) -> DetectionRecord {
    let top = (0..logits.len()).fold(0, |b, i| if logits[i] > logits[b] { i } else { b });
    let confidence = 1.0 / logits.iter().map(|c| (c - logits[top]).exp()).sum::<f64>();
    DetectionRecord {
        image_id: image.into(),
        det_index,
        bbox,
        pred_class: top,
        confidence,
        logits,
        features,
        latent_pooled: None,
    }
}

fn unit_box() -> BBox {
    BBox::new(0.0, 0.0, 1.0, 1.0)
}

fn matrix(d: usize, rows: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), rows)
}

fn train_set(rows: &[Vec<f64>], classes: usize) -> Vec<DetectionRecord> {
    rows.iter()
        .enumerate()
        .map(|(i, z)| {
            let mut logits = vec![0.0; classes];
            logits[i % classes] = 1.0;
            record(&format!("t{i:03}"), 0, logits, Some(z.clone()), unit_box())
        })
        .collect()
}

// record-io

proptest! {
    #[test]
    fn detections_round_trip_bytes(
        groups in prop::collection::vec((0usize..4, 1usize..4), 1..6),
        seed in prop::collection::vec(-50.0f64..50.0, 64),
    ) {
        let cats = table(3);
        let mut records = Vec::new();
        let mut k = 0;
        for (g, (img, n)) in groups.iter().enumerate() {
            for i in 0..*n {
                let base = k;
                let v = |j: usize| seed[(base + j) % seed.len()];
                k += 3;
                let x = v(0).abs();
                records.push(record(
                    &format!("img{img}_{g}"),
                    i as u32,
                    vec![v(1), v(2), v(0)],
                    (i % 2 == 0).then(|| vec![v(2), v(1)]),
                    BBox::new(x, x, x + 1.5, x + 2.5),
                ));
            }
        }
        let mut first = Vec::new();
        write_detections(&mut first, &records).unwrap();
        let loaded = parse_detections(first.as_slice(), "mem", &cats).unwrap();
        prop_assert_eq!(&loaded, &records);
        let mut second = Vec::new();
        write_detections(&mut second, &loaded).unwrap();
        prop_assert_eq!(first, second);
    }

    #[test]
    fn loading_groups_by_first_appearance(order in prop::collection::vec(0usize..4, 1..12)) {
        let cats = table(2);
        let records: Vec<DetectionRecord> = order
            .iter()
            .enumerate()
            .map(|(i, img)| record(&format!("i{img}"), i as u32, vec![0.0, 1.0], None, unit_box()))
            .collect();
        let mut buf = Vec::new();
        write_detections(&mut buf, &records).unwrap();
        let loaded = parse_detections(buf.as_slice(), "mem", &cats).unwrap();
        let mut seen: Vec<&str> = Vec::new();
        for r in &records {
            if !seen.contains(&r.image_id.as_str()) {
                seen.push(&r.image_id);
            }
        }
        let expected: Vec<&DetectionRecord> = seen
            .iter()
            .flat_map(|img| records.iter().filter(move |r| r.image_id == *img))
            .collect();
        prop_assert_eq!(loaded.iter().collect::<Vec<_>>(), expected);
    }

    #[test]
    fn malformed_lines_always_error(junk in "[a-z0-9,\t.-]{0,40}") {
        let cats = table(2);
        let text = format!("#schema:detections:1\nimg\t0\t0,0,1,1\t1\t0.7310585786300049\t0,1\t-\t-\n{junk}\n");
        match parse_detections(text.as_bytes(), "mem", &cats) {
            Ok(records) => prop_assert_eq!(records.len(), 2),
            Err(e) => prop_assert!(e.to_string().contains("line 3"), "{}", e),
        }
    }
}

// Feature-space scorers

proptest! {
    #[test]
    fn knn_scale_invariant_and_monotone_in_k(
        train in matrix(4, 12),
        z in prop::collection::vec(0.1f64..3.0, 4),
        scale in 0.01f64..100.0,
    ) {
        let rows: Vec<&[f64]> = train.iter().map(Vec::as_slice).collect();
        let mut last = f64::INFINITY;
        for k in 1..=rows.len() {
            let state = fit_knn_vectors(rows.iter().copied(), k).unwrap();
            let s = knn_score(&state, &z).unwrap();
            let scaled: Vec<f64> = z.iter().map(|v| v * scale).collect();
            prop_assert!((knn_score(&state, &scaled).unwrap() - s).abs() <= 1e-12);
            prop_assert!(s <= last);
            last = s;
        }
    }

    #[test]
    fn gaussian_fit_is_order_invariant(train in matrix(3, 20), perm_seed in any::<u64>()) {
        let records = train_set(&train, 3);
        let mut shuffled = records.clone();
        let n = shuffled.len();
        let mut s = perm_seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        let a = fit_gaussian_bank(&records, 3, RegEpsilon::TraceRelative(1e-6)).unwrap();
        let b = fit_gaussian_bank(&shuffled, 3, RegEpsilon::TraceRelative(1e-6)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn single_class_ddu_is_shifted_mahalanobis(train in matrix(3, 10), z in prop::collection::vec(-3.0f64..3.0, 3)) {
        let records = train_set(&train, 1);
        let state = fit_gaussian_bank(&records, 1, RegEpsilon::TraceRelative(1e-6)).unwrap();
        let m = mahalanobis_score(&state, &z).unwrap();
        let d = ddu_score(&state, &z).unwrap();
        let constant = -0.5 * (3.0 * (2.0 * std::f64::consts::PI).ln() + state.log_det());
        prop_assert!((d - (constant + 0.5 * m)).abs() <= 1e-9 * d.abs().max(1.0));
    }
}

// Mixed scorers

proptest! {
    #[test]
    fn vim_residual_projector(train in matrix(6, 30), w in matrix(6, 3), bias in prop::collection::vec(-1.0f64..1.0, 3), dim in 1usize..6) {
        let head = head_from_rows(&w, &bias).unwrap();
        let rows: Vec<&[f64]> = train.iter().map(Vec::as_slice).collect();
        let opts = VimOptions { principal_dim: Some(dim), ..VimOptions::default() };
        let state = fit_vim_vectors(&rows, &head, &opts).unwrap();
        let r = &state.residual_basis;
        let p = r * r.transpose();
        prop_assert!((&p * &p - &p).abs().max() <= 1e-8);
        // Principal eigenvectors of the centred Gram matrix span the orthogonal complement.
        let offset = &state.offset;
        let x = DMatrix::from_fn(rows.len(), 6, |i, j| rows[i][j] + offset[j]);
        let eig = (x.transpose() * &x).symmetric_eigen();
        let mut order: Vec<usize> = (0..6).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        for &k in &order[..dim] {
            let q = eig.eigenvectors.column(k);
            prop_assert!((&p * q).norm() <= 1e-8);
        }
        prop_assert!(state.alpha.is_finite());
    }

    #[test]
    fn vim_alpha_reproducible_across_threads(train in matrix(5, 40), w in matrix(5, 3), seed in any::<u64>()) {
        let head = head_from_rows(&w, &[0.1, -0.2, 0.3]).unwrap();
        let rows: Vec<&[f64]> = train.iter().map(Vec::as_slice).collect();
        let opts = VimOptions { principal_dim: Some(2), seed, max_alpha_samples: 17, ..VimOptions::default() };
        let a = fit_vim_vectors(&rows, &head, &opts).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| fit_vim_vectors(&rows, &head, &opts).unwrap());
        prop_assert_eq!(a.alpha.to_bits(), b.alpha.to_bits());
    }

    #[test]
    fn react_increases_toward_energy(
        train in prop::collection::vec(prop::collection::vec(0.0f64..3.0, 4), 20),
        w in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 4), 3),
        z in prop::collection::vec(0.0f64..4.0, 4),
    ) {
        let head = head_from_rows(&w, &[0.0, 0.5, -0.5]).unwrap();
        let rows: Vec<&[f64]> = train.iter().map(Vec::as_slice).collect();
        let full = head_energy(&head, &z).unwrap();
        let mut last = f64::NEG_INFINITY;
        for pct in [10.0, 30.0, 50.0, 70.0, 90.0, 100.0] {
            let state = fit_activation_vectors(&rows, &head, ClipMethod::React, pct, 1.0).unwrap();
            let s = clipped_energy_score(&state, &head, &z).unwrap().value;
            prop_assert!(s >= last);
            prop_assert!(s <= full);
            last = s;
        }
    }
}

// RoIAlign

proptest! {
    #[test]
    fn roi_align_commutes_with_channel_permutation(
        data in prop::collection::vec(-1.0f64..1.0, 3 * 6 * 5),
        bx in (0.0f64..8.0, 0.0f64..6.0, 1.0f64..5.0, 1.0f64..5.0),
        r in 1usize..5,
        perm in Just([2usize, 0, 1]),
    ) {
        let map = FeatureMapRecord { image_id: "m".into(), layer_name: "p".into(), shape: (3, 6, 5), data, spatial_scale: 0.5 };
        let mut permuted = map.clone();
        permuted.data = perm.iter().flat_map(|&c| map.channel(c).to_vec()).collect();
        let bbox = BBox::new(bx.0, bx.1, bx.0 + bx.2, bx.1 + bx.3);
        let a = roi_align(&map, &bbox, r).unwrap();
        let b = roi_align(&permuted, &bbox, r).unwrap();
        for (i, &c) in perm.iter().enumerate() {
            prop_assert_eq!(b.channel(i), a.channel(c));
        }
    }
}

// Calibration and binary metrics

proptest! {
    #[test]
    fn tau_monotone_in_target(scores in prop::collection::vec(-5.0f64..5.0, 1..80), t1 in 0.01f64..1.0, t2 in 0.01f64..1.0) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let a = calibrate_tau(&scores, lo).unwrap();
        let b = calibrate_tau(&scores, hi).unwrap();
        prop_assert!(b.tau <= a.tau);
        for c in [a, b] {
            let kept = scores.iter().filter(|&&s| s >= c.tau).count() as f64 / scores.len() as f64;
            prop_assert_eq!(kept, c.achieved_tpr);
        }
        let kept = scores.iter().filter(|&&s| s >= calibrate_tau(&scores, hi).unwrap().tau).count() as f64;
        prop_assert!(kept / scores.len() as f64 >= hi - 1e-12);
    }

    #[test]
    fn omega_extremes(values in prop::collection::vec(-1e6f64..1e6, 0..20)) {
        let records: Vec<DetectionRecord> = (0..values.len())
            .map(|i| record("a", i as u32, vec![0.0, 1.0], None, unit_box()))
            .collect();
        let scores: Vec<IdnessScore> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| IdnessScore { value: v, method: MethodId::Msp, image_id: "a".into(), det_index: i as u32, degenerate: false })
            .collect();
        for f in apply_omega(&records, &scores, f64::NEG_INFINITY).unwrap() {
            prop_assert_eq!(f.verdict, Verdict::IdKeep);
        }
        for f in apply_omega(&records, &scores, f64::INFINITY).unwrap() {
            prop_assert_eq!(f.verdict, Verdict::OodFlag);
            prop_assert_eq!(f.effective_class, EffectiveClass::Unknown);
        }
    }

    #[test]
    fn auroc_antisymmetric(a in prop::collection::vec(0u8..20, 1..60), b in prop::collection::vec(0u8..20, 1..60)) {
        let a: Vec<f64> = a.into_iter().map(f64::from).collect();
        let b: Vec<f64> = b.into_iter().map(f64::from).collect();
        prop_assert_eq!(auroc(&a, &b).unwrap() + auroc(&b, &a).unwrap(), 1.0);
    }

    #[test]
    fn fpr_non_increasing_as_target_drops(id in prop::collection::vec(-3.0f64..3.0, 1..60), ood in prop::collection::vec(-3.0f64..3.0, 1..60)) {
        let mut last = f64::INFINITY;
        for target in [0.99, 0.95, 0.9, 0.8, 0.5, 0.2] {
            let f = fpr_at_tpr(&id, &ood, target).unwrap();
            prop_assert!(f <= last);
            last = f;
        }
    }
}

// Matching

fn iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = w * h;
    inter / (a.area() + b.area() - inter)
}

/// Greedy Stage 1, replayed over explicit candidate lists.
fn replay_stage_one(dets: &[(DetectionRecord, f64)], unknowns: &[GroundTruthObject], tau: f64) -> Vec<Option<usize>> {
    let mut canon: Vec<usize> = (0..unknowns.len()).collect();
    canon.sort_by(|&a, &b| {
        let (x, y) = (&unknowns[a], &unknowns[b]);
        x.image_id.cmp(&y.image_id).then(x.bbox.total_cmp(&y.bbox)).then(x.category_id.cmp(&y.category_id))
    });
    let mut flagged: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].1 < tau).collect();
    flagged.sort_by(|&a, &b| {
        let ra = tau - dets[a].1;
        let rb = tau - dets[b].1;
        rb.total_cmp(&ra).then(dets[a].0.det_index.cmp(&dets[b].0.det_index))
    });
    let mut taken = vec![false; canon.len()];
    let mut result = vec![None; dets.len()];
    for i in flagged {
        let mut best: Option<(usize, f64)> = None;
        for (slot, &g) in canon.iter().enumerate() {
            if taken[slot] || unknowns[g].image_id != dets[i].0.image_id {
                continue;
            }
            let v = iou(&dets[i].0.bbox, &unknowns[g].bbox);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((slot, v));
            }
        }
        if let Some((slot, v)) = best {
            if v >= 0.5 {
                taken[slot] = true;
                result[i] = Some(slot);
            }
        }
    }
    result
}

fn small_box() -> impl Strategy<Value = BBox> {
    (0u8..6, 0u8..6, 2u8..5, 2u8..5).prop_map(|(x, y, w, h)| {
        BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64)
    })
}

proptest! {
    #[test]
    fn stage_one_matches_replay(
        det_boxes in prop::collection::vec((small_box(), 0u8..4), 0..=5),
        gt_boxes in prop::collection::vec(small_box(), 0..=5),
    ) {
        let dets: Vec<(DetectionRecord, f64)> = det_boxes
            .iter()
            .enumerate()
            .map(|(i, (b, s))| (record("s", i as u32, vec![0.0, 1.0], None, *b), *s as f64 / 4.0))
            .collect();
        let unknowns: Vec<GroundTruthObject> = gt_boxes
            .iter()
            .map(|b| GroundTruthObject { image_id: "s".into(), bbox: *b, category_id: 60, is_unknown: true, dataset_origin: "x".into() })
            .collect();
        let records: Vec<DetectionRecord> = dets.iter().map(|d| d.0.clone()).collect();
        let scores: Vec<IdnessScore> = dets
            .iter()
            .map(|(r, v)| IdnessScore { value: *v, method: MethodId::Msp, image_id: r.image_id.clone(), det_index: r.det_index, degenerate: false })
            .collect();
        let flagged = apply_omega(&records, &scores, 0.5).unwrap();
        let ranks: Vec<f64> = flagged.iter().map(|f| 0.5 - f.idness).collect();
        let out = match_unknowns(&flagged, &unknowns, 0.5, &ranks).unwrap();
        let replay = replay_stage_one(&dets, &unknowns, 0.5);
        for d in &out.per_detection {
            let i = d.det_index as usize;
            if matches!(d.outcome, OutcomeTag::TpU | OutcomeTag::FpU) {
                prop_assert_eq!(d.matched_gt, replay[i]);
            }
        }
        let total = out.gt_unknowns;
        if let Some(n) = nose(&out) {
            prop_assert_eq!((n * total as f64).round() as usize, out.fn_m);
            prop_assert!((n * total as f64 - out.fn_m as f64).abs() <= 1e-9);
        }
    }

    #[test]
    fn ap_monotone_under_edits(hits in prop::collection::vec(any::<bool>(), 0..20), extra in 0usize..5) {
        let n_gt = hits.iter().filter(|h| **h).count() + 1 + extra;
        let base = average_precision(&hits, n_gt);
        let mut top = vec![true];
        top.extend(&hits);
        prop_assert!(average_precision(&top, n_gt) >= base);
        let mut bottom = hits.clone();
        bottom.push(false);
        let recall = |h: &[bool]| h.iter().filter(|x| **x).count() as f64 / n_gt as f64;
        prop_assert!(recall(&bottom) <= recall(&hits));
        prop_assert!(average_precision(&bottom, n_gt) <= base);
    }
}

// Stratification

proptest! {
    #[test]
    fn split_partitions_and_filter_is_idempotent(
        annotations in prop::collection::vec((0usize..15, prop::sample::select(vec![40i64, 50, 60, 1])), 0..40),
    ) {
        let cats = table(2);
        let images: Vec<String> = (0..15).map(|i| format!("im{i:02}")).collect();
        let gt: Vec<GroundTruthObject> = annotations
            .iter()
            .map(|(i, c)| GroundTruthObject { image_id: images[*i].clone(), bbox: unit_box(), category_id: *c, is_unknown: *c >= 50, dataset_origin: "x".into() })
            .collect();
        let overlap: BTreeSet<i64> = [40].into();
        let near: BTreeSet<i64> = [50].into();
        let removed = filter_overlap(&gt, &overlap, &cats).unwrap();
        let gone: BTreeSet<&str> = removed.entries.iter().map(|e| e.image_id.as_str()).collect();
        let kept_gt: Vec<GroundTruthObject> = gt.iter().filter(|g| !gone.contains(g.image_id.as_str())).cloned().collect();
        prop_assert!(filter_overlap(&kept_gt, &overlap, &cats).unwrap().entries.is_empty());
        let kept: Vec<String> = images.iter().filter(|i| !gone.contains(i.as_str())).cloned().collect();
        let split = assign_split(&kept_gt, &kept, &near, &cats, SplitMode::NearFar).unwrap();
        let assigned: Vec<&str> = split.entries.iter().map(|e| e.image_id.as_str()).collect();
        prop_assert_eq!(assigned.len(), kept.len());
        prop_assert_eq!(assigned.iter().copied().collect::<BTreeSet<_>>(), kept.iter().map(String::as_str).collect());
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_manifest(&mut a, &split).unwrap();
        write_manifest(&mut b, &assign_split(&kept_gt, &kept, &near, &cats, SplitMode::NearFar).unwrap()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn cosine_stats_ignore_rescaling(
        id in prop::collection::vec(prop::collection::vec(0.1f64..2.0, 3), 1..8),
        ood in prop::collection::vec(prop::collection::vec(0.1f64..2.0, 3), 1..8),
        scales in prop::collection::vec(0.01f64..100.0, 16),
    ) {
        let emb = |v: &[Vec<f64>], scale: Option<&[f64]>, p: &str| -> Vec<EmbeddingRecord> {
            v.iter()
                .enumerate()
                .map(|(i, e)| EmbeddingRecord {
                    image_id: format!("{p}{i}"),
                    embedding: e.iter().map(|x| x * scale.map_or(1.0, |s| s[i])).collect(),
                    split_tag: None,
                })
                .collect()
        };
        let a = cosine_similarity_stats("x", &emb(&id, None, "i"), &emb(&ood, None, "o"), Pairing::NearestId).unwrap();
        let b = cosine_similarity_stats("x", &emb(&id, Some(&scales), "i"), &emb(&ood, Some(&scales[8..]), "o"), Pairing::NearestId).unwrap();
        for (x, y) in a.similarities.iter().zip(&b.similarities) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }
}

// Pipeline

#[test]
fn failing_row_leaves_other_rows_unchanged() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden");
    let config = dir.join("config.toml");
    let run = |methods: &str| {
        let cfg = PipelineConfig::load(Some(&config), &[format!("run.methods={methods}")]).unwrap();
        run_pipeline(&cfg).unwrap().report
    };
    let alone = run(r#"["msp","mahalanobis"]"#);
    // LaRD has no feature maps in this fixture; ViM has no head.
    let mixed = run(r#"["lard","msp","vim","mahalanobis"]"#);
    let methods: Vec<MethodId> = mixed.aborted.iter().map(|a| a.method).collect();
    assert_eq!(methods, [MethodId::Lard, MethodId::Vim]);
    assert_eq!(mixed.rows, alone.rows);
}
