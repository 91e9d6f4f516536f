mod common;

use std::f64::consts::PI;

use moundcount::annotations::{format_labels, parse_labels, BoundingBox, LabelRecord, ScoredBox};
use moundcount::augment::{augment_patch, resize_box, translate_box, AugmentationConfig, Transform, MIN_KEPT_AREA_FRACTION};
use moundcount::metrics::{average_precision, match_detections, relative_precision};
use moundcount::raster::{EdgePolicy, PatchGrid, PatchRef};
use moundcount::validation::fold_indices;
use proptest::prelude::*;

fn policy() -> impl Strategy<Value = EdgePolicy> {
    prop_oneof![Just(EdgePolicy::Pad), Just(EdgePolicy::Partial), Just(EdgePolicy::Drop)]
}

fn bbox(extent: f64) -> impl Strategy<Value = BoundingBox> {
    (0.0..extent, 0.0..extent, 1.0..extent / 3.0, 1.0..extent / 3.0)
        .prop_map(|(cx, cy, w, h)| BoundingBox::new(cx, cy, w, h).unwrap())
}

fn scored(extent: f64) -> impl Strategy<Value = ScoredBox> {
    (bbox(extent), 0.0..1.0f64).prop_map(|(bbox, confidence)| ScoredBox { bbox, confidence })
}

fn patch(w: u32, h: u32) -> PatchRef {
    PatchRef {
        row: 0,
        col: 0,
        index: 0,
        origin_x: 0,
        origin_y: 0,
        w,
        h,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn grid_partitions_image(w in 1u32..90, h in 1u32..90, ps in 1u32..40, policy in policy()) {
        prop_assert_eq!(common::check_partition(w, h, ps, policy), Ok(()));
    }

    #[test]
    fn real_coordinates_round_trip(
        w in 1u32..5000, h in 1u32..5000, ps in 16u32..600,
        fx in 0.0..1.0f64, fy in 0.0..1.0f64,
    ) {
        let grid = PatchGrid::new(w, h, ps, EdgePolicy::Partial).unwrap();
        let (x, y) = (fx * w as f64, fy * h as f64);
        let (p, lx, ly) = grid.locate(x, y).unwrap();
        prop_assert!(lx >= 0.0 && ly >= 0.0 && lx < p.w as f64 && ly < p.h as f64);
        let (bx, by) = p.offset(lx, ly);
        prop_assert!((bx - x).abs() < 1e-9 && (by - y).abs() < 1e-9);
    }

    #[test]
    fn normalized_labels_round_trip(
        pw in 16u32..1000, ph in 16u32..1000,
        raw in prop::collection::vec((0.0..1.0f64, 0.0..1.0f64, 0.001..1.0f64, 0.001..1.0f64, prop::option::of(0.0..1.0f64)), 0..20),
    ) {
        let p = patch(pw, ph);
        let records: Vec<LabelRecord> = raw
            .iter()
            .map(|&(cx, cy, w, h, conf)| LabelRecord {
                class_id: 0,
                bbox: BoundingBox::new(cx * pw as f64, cy * ph as f64, w * pw as f64, h * ph as f64).unwrap(),
                confidence: conf,
            })
            .collect();
        let text = format_labels(&records, &p, true);
        let back = parse_labels(&text, &p, true, "mem").unwrap();
        prop_assert_eq!(back.len(), records.len());
        for (a, b) in records.iter().zip(&back) {
            prop_assert!((a.bbox.cx - b.bbox.cx).abs() <= 1e-9 * pw as f64);
            prop_assert!((a.bbox.cy - b.bbox.cy).abs() <= 1e-9 * ph as f64);
            prop_assert!((a.bbox.w - b.bbox.w).abs() <= 1e-9 * pw as f64);
            prop_assert!((a.bbox.h - b.bbox.h).abs() <= 1e-9 * ph as f64);
            prop_assert_eq!(a.confidence, b.confidence);
        }
    }

    #[test]
    fn pixel_labels_round_trip_exactly(
        raw in prop::collection::vec((0.0..416.0f64, 0.0..416.0f64, 0.5..200.0f64, 0.5..200.0f64), 0..20),
    ) {
        let p = patch(416, 416);
        let records: Vec<LabelRecord> = raw
            .iter()
            .map(|&(cx, cy, w, h)| LabelRecord {
                class_id: 3,
                bbox: BoundingBox::new(cx, cy, w, h).unwrap(),
                confidence: None,
            })
            .collect();
        let back = parse_labels(&format_labels(&records, &p, false), &p, false, "mem").unwrap();
        prop_assert_eq!(back, records);
    }

    #[test]
    fn matching_invariants(
        dets in prop::collection::vec(scored(200.0), 0..25),
        gts in prop::collection::vec(bbox(200.0), 0..25),
        thr in 0.05..1.0f64,
    ) {
        let m = match_detections(&dets, &gts, thr).unwrap();
        prop_assert_eq!(m.tp + m.fn_, gts.len());
        prop_assert_eq!(m.tp + m.fp, dets.len());
        prop_assert_eq!(m.pairs.len(), m.tp);
        let mut seen_d = vec![false; dets.len()];
        let mut seen_g = vec![false; gts.len()];
        for p in &m.pairs {
            prop_assert!(!seen_d[p.detection] && !seen_g[p.ground_truth]);
            seen_d[p.detection] = true;
            seen_g[p.ground_truth] = true;
            prop_assert!(p.iou >= thr);
        }
        let oracle = common::naive_greedy(&dets, &gts, thr);
        for p in &m.pairs {
            prop_assert_eq!(oracle[p.detection], Some(p.ground_truth));
        }
        prop_assert_eq!(oracle.iter().flatten().count(), m.tp);
    }

    #[test]
    fn greedy_is_maximal(
        dets in prop::collection::vec(scored(60.0), 0..5),
        gts in prop::collection::vec(bbox(60.0), 0..4),
    ) {
        let m = match_detections(&dets, &gts, 0.3).unwrap();
        let best = common::max_matching(&dets, &gts, 0.3);
        prop_assert!(m.tp <= best && 2 * m.tp >= best);
    }

    #[test]
    fn ap_matches_oracle_on_random_sets(
        dets in prop::collection::vec(scored(150.0), 0..20),
        gts in prop::collection::vec(bbox(150.0), 1..15),
    ) {
        let ap = average_precision(&dets, &gts, 0.5).unwrap();
        prop_assert!((0.0..=1.0).contains(&ap));
        prop_assert!((ap - common::brute_force_ap(&dets, &gts, 0.5)).abs() < 1e-12);
    }

    #[test]
    fn relative_precision_symmetric(gt in 1u32..100_000, err in 0u32..100_000) {
        let (gt, err) = (gt as f64, err as f64);
        let over = relative_precision(gt + err, gt).unwrap();
        let under = relative_precision(gt - err, gt).unwrap();
        prop_assert_eq!(over, under);
    }

    #[test]
    fn resize_preserves_aspect_and_center(b in bbox(416.0), z in 0.1..5.0f64) {
        let r = resize_box(&b, z).unwrap();
        prop_assert_eq!((r.cx, r.cy), (b.cx, b.cy));
        prop_assert!((r.w / r.h - b.w / b.h).abs() <= 1e-12 * (b.w / b.h));
        prop_assert!((r.w - b.w * z).abs() <= 1e-12 * r.w);
    }

    #[test]
    fn translation_moves_by_l(b in bbox(416.0), l in 0.0..50.0f64, alpha in 0.0..2.0 * PI) {
        let t = translate_box(&b, l, alpha);
        prop_assert!(((t.cx - b.cx).hypot(t.cy - b.cy) - l).abs() < 1e-9);
        prop_assert_eq!((t.w, t.h), (b.w, b.h));
    }

    #[test]
    fn augmented_boxes_stay_in_patch(
        boxes in prop::collection::vec(bbox(416.0), 0..30),
        seed in any::<u64>(),
        index in 0usize..10_000,
    ) {
        let p = PatchRef { index, ..patch(416, 416) };
        let cfg = AugmentationConfig { seed, ..Default::default() };
        let out = augment_patch(&boxes, &cfg, &p).unwrap();
        prop_assert_eq!(&out, &augment_patch(&boxes, &cfg, &p).unwrap());
        for a in &out {
            prop_assert!(a.bbox.x_min() >= 0.0 && a.bbox.y_min() >= 0.0);
            prop_assert!(a.bbox.x_max() <= 416.0 && a.bbox.y_max() <= 416.0);
            prop_assert!(a.bbox.area() >= MIN_KEPT_AREA_FRACTION * a.unclipped.area() - 1e-9);
            match a.transform {
                Transform::Size { z } => prop_assert!((0.8..=1.2).contains(&z)),
                Transform::Translation { l, alpha } => {
                    prop_assert!((1.0..=10.0).contains(&l) && (0.0..=2.0 * PI).contains(&alpha))
                }
            }
        }
    }

    #[test]
    fn folds_partition_items(n in 2usize..60, k in 2usize..60) {
        prop_assume!(k <= n);
        let folds = fold_indices(n, k).unwrap();
        let mut seen = vec![0; n];
        for f in &folds {
            for &i in &f.test {
                seen[i] += 1;
                prop_assert!(!f.train.contains(&i));
            }
            prop_assert_eq!(f.train.len() + f.test.len(), n);
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
    }
}

#[test]
fn identity_transforms() {
    let b = BoundingBox::new(100.0, 80.0, 30.0, 20.0).unwrap();
    assert_eq!(resize_box(&b, 1.0).unwrap(), b);
    assert_eq!(translate_box(&b, 0.0, 1.234), b);
}
