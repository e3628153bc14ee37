use std::collections::BTreeMap;

use proptest::prelude::*;

use polypart_core::analysis::{
    artifact_present, correlation_matrix, presence_analysis, relation_analysis, PresenceRule,
    Relation, RelationConfig,
};
use polypart_core::datamodel::{
    artifacts_per_image, class_weighting, dataset_from_json, dataset_to_json, merge_pseudo_labels,
};
use polypart_core::evaluation::{match_frame, metrics, Metrics};
use polypart_core::geometry::{centroid_inside, iou, union_area, union_area_fraction, BBox, ImageSize};
use polypart_core::loss::{
    assign_anchors, composite_loss, focal_loss, smooth_l1, weighted_class_loss, Assignment,
    FocalParams, LossConfig, TaskWeights, BACKGROUND_IOU, FOREGROUND_IOU,
};
use polypart_core::toy::{generate_scene, SceneKnobs};
use polypart_core::{ArtifactClass, Dataset, Detection, FrameRecord, Label, MatchMode};

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..90.0f64, 0.0..90.0f64, 0.5..40.0f64, 0.5..40.0f64)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
}

fn int_bbox() -> impl Strategy<Value = BBox> {
    (0u32..60, 0u32..60, 1u32..30, 1u32..30).prop_map(|(x, y, w, h)| {
        BBox::new(x as f64, y as f64, (x + w).min(64) as f64, (y + h).min(64) as f64).unwrap()
    })
}

fn detection() -> impl Strategy<Value = Detection> {
    (bbox(), 0.0..=1.0f64).prop_map(|(b, s)| Detection::polyp(b, s).unwrap())
}

fn class() -> impl Strategy<Value = ArtifactClass> {
    prop::sample::select(ArtifactClass::ANALYSIS.to_vec())
}

fn artifact() -> impl Strategy<Value = Detection> {
    (bbox(), 0.0..=1.0f64, class()).prop_map(|(b, s, c)| Detection::artifact(b, s, c).unwrap())
}

fn frame(id: usize) -> impl Strategy<Value = FrameRecord> {
    (
        prop::collection::vec(bbox(), 0..4),
        prop::collection::vec(detection(), 0..5),
        prop::collection::vec(artifact(), 0..6),
    )
        .prop_map(move |(gt, preds, arts)| {
            let mut f = FrameRecord::new(format!("frame-{id}"), ImageSize::new(128, 128).unwrap());
            f.gt_polyps = gt;
            f.pred_polyps = preds;
            f.artifacts = arts;
            f
        })
}

fn dataset(max: usize) -> impl Strategy<Value = Dataset> {
    (1..=max).prop_flat_map(|n| {
        (0..n)
            .map(frame)
            .collect::<Vec<_>>()
            .prop_map(|frames| Dataset::new("prop", frames).unwrap())
    })
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let v = iou(&a, &b);
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn union_is_monotone_and_ignores_duplicates(
        boxes in prop::collection::vec(int_bbox(), 1..8),
        extra in int_bbox(),
    ) {
        let img = ImageSize::new(64, 64).unwrap();
        let base = union_area_fraction(&boxes, img);
        let mut more = boxes.clone();
        more.push(extra);
        prop_assert!(union_area_fraction(&more, img) >= base);
        let mut dup = boxes.clone();
        dup.extend(boxes.iter().copied());
        prop_assert_eq!(union_area_fraction(&dup, img), base);
        prop_assert!((0.0..=1.0).contains(&base));
        let largest = boxes.iter().map(|b| b.area()).fold(0.0, f64::max);
        let total: f64 = boxes.iter().map(|b| b.area()).sum();
        let u = union_area(&boxes);
        prop_assert!(u >= largest && u <= total);
    }

    #[test]
    fn centroid_rule_matches_point_test(a in bbox(), b in bbox()) {
        let (x, y) = a.center();
        prop_assert_eq!(centroid_inside(&a, &b), b.contains_point(x, y));
        prop_assert!(centroid_inside(&a, &a));
    }

    #[test]
    fn strict_matching_accounts_for_everything(
        gt in prop::collection::vec(bbox(), 0..6),
        dets in prop::collection::vec(detection(), 0..7),
        thr in 0.0..=1.0f64,
    ) {
        let o = match_frame(&gt, &dets, thr, MatchMode::Strict);
        let kept = dets.iter().filter(|d| d.score >= thr).count();
        prop_assert_eq!(o.tp() + o.fn_.len(), gt.len());
        prop_assert_eq!(o.tp() + o.fp.len(), kept);
        let mut seen = vec![false; gt.len()];
        for &(_, g) in &o.tp_pairs {
            prop_assert!(!seen[g]);
            seen[g] = true;
        }
        let a = match_frame(&gt, &dets, thr, MatchMode::Analysis);
        prop_assert!(a.tp() >= o.tp());
        prop_assert_eq!(a.tp() + a.fp.len(), kept);
        prop_assert!(a.fn_.len() <= o.fn_.len());
    }

    #[test]
    fn metrics_ignore_frame_order(d in dataset(6), rot in 0usize..6) {
        let outcomes: Vec<_> = d
            .frames()
            .iter()
            .map(|f| match_frame(&f.gt_polyps, &f.pred_polyps, 0.5, MatchMode::Strict))
            .collect();
        let mut rotated = outcomes.clone();
        let k = rot % rotated.len();
        rotated.rotate_left(k);
        prop_assert_eq!(metrics(&outcomes).unwrap(), metrics(&rotated).unwrap());
    }

    #[test]
    fn f1_between_precision_and_recall(tp in 1usize..50, fp in 0usize..50, fn_ in 0usize..50) {
        let m = Metrics::from_counts(tp, fp, fn_);
        let (lo, hi) = (m.precision.min(m.recall), m.precision.max(m.recall));
        prop_assert!(m.f1 >= lo - 1e-12 && m.f1 <= hi + 1e-12);
    }

    #[test]
    fn focal_without_focusing_is_cross_entropy(q in 1e-6..(1.0 - 1e-6f64), y: bool, alpha in 0.01..0.99f64) {
        let (l, _) = focal_loss(q, y, FocalParams::new(0.0, alpha).unwrap()).unwrap();
        let ce = if y { -alpha * q.ln() } else { -(1.0 - alpha) * (1.0 - q).ln() };
        prop_assert!((l - ce).abs() <= 1e-12);
    }

    #[test]
    fn focal_decreases_in_true_class_probability(
        a in 0.01..0.98f64, gap in 0.001..0.01f64, gamma in 0.0..5.0f64, alpha in 0.05..0.95f64,
    ) {
        let p = FocalParams::new(gamma, alpha).unwrap();
        let b = a + gap;
        prop_assert!(focal_loss(a, true, p).unwrap().0 > focal_loss(b, true, p).unwrap().0);
        prop_assert!(focal_loss(1.0 - a, false, p).unwrap().0 > focal_loss(1.0 - b, false, p).unwrap().0);
    }

    #[test]
    fn focal_gradient_matches_differences(
        q in 0.01..0.99f64, y: bool, gamma in 0.0..5.0f64, alpha in 0.05..0.95f64,
    ) {
        let p = FocalParams::new(gamma, alpha).unwrap();
        let h = 1e-6;
        let (_, g) = focal_loss(q, y, p).unwrap();
        let n = (focal_loss(q + h, y, p).unwrap().0 - focal_loss(q - h, y, p).unwrap().0) / (2.0 * h);
        prop_assert!((g - n).abs() / g.abs().max(n.abs()).max(1e-8) < 1e-4, "{} vs {}", g, n);
    }

    #[test]
    fn smooth_l1_gradient_matches_differences(r in -5.0..5.0f64) {
        let h = 1e-6;
        let (_, g) = smooth_l1(r);
        let n = (smooth_l1(r + h).0 - smooth_l1(r - h).0) / (2.0 * h);
        prop_assert!((g - n).abs() / g.abs().max(n.abs()).max(1e-8) < 1e-4);
    }

    #[test]
    fn composite_is_linear(
        p in 0.0..10.0f64, a in 0.0..10.0f64, r in 0.0..10.0f64, reg in 0.0..10.0f64,
        wp in 0.1..20.0f64, wa in 0.0..5.0f64, wr in 0.0..5.0f64, lambda in 0.0..1.0f64,
        c in 0.1..10.0f64,
    ) {
        let cfg = LossConfig {
            task_weights: TaskWeights::new(wr, wa, wp),
            reg_coeff: lambda,
            ..LossConfig::default()
        };
        let base = composite_loss(p, a, r, reg, &cfg).unwrap();
        let sum = composite_loss(p + 1.0, a, r, reg, &cfg).unwrap();
        prop_assert!((sum - base - wp).abs() < 1e-9);
        let mut scaled = cfg.clone();
        scaled.task_weights.pol *= c;
        let s = composite_loss(p, a, r, reg, &scaled).unwrap();
        prop_assert!((s - base - (c - 1.0) * wp * p).abs() < 1e-9);
    }

    #[test]
    fn anchor_bands_partition(
        anchors in prop::collection::vec(bbox(), 1..20),
        gts in prop::collection::vec((bbox(), 0usize..7), 0..4),
    ) {
        let t = assign_anchors(&anchors, &gts);
        prop_assert_eq!(t.assignments.len(), anchors.len());
        for (i, a) in t.assignments.iter().enumerate() {
            let best = gts.iter().map(|(g, _)| iou(&anchors[i], g)).fold(0.0, f64::max);
            match a {
                Assignment::Foreground { gt, class } => {
                    prop_assert!(best >= FOREGROUND_IOU);
                    prop_assert_eq!(*class, gts[*gt].1);
                    prop_assert!(t.offsets[i].is_some());
                }
                Assignment::Background => prop_assert!(best < BACKGROUND_IOU),
                Assignment::Ignored => prop_assert!((BACKGROUND_IOU..FOREGROUND_IOU).contains(&best)),
            }
        }
    }

    #[test]
    fn class_weights_sum_to_one(share in 0.01..0.99f64, classes in prop::collection::vec(class(), 1..6)) {
        let w = class_weighting(Some(share), &classes).unwrap();
        prop_assert!((w.total() - 1.0).abs() < 1e-9);
        let losses: BTreeMap<Label, f64> = w.labels().map(|l| (l, 1.0)).collect();
        prop_assert!((weighted_class_loss(&losses, &w).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn json_round_trip_is_identity(d in dataset(5)) {
        let text = dataset_to_json(&d);
        let back = dataset_from_json(&text).unwrap();
        prop_assert_eq!(&back, &d);
        prop_assert_eq!(dataset_to_json(&back), text);
    }

    #[test]
    fn higher_merge_threshold_keeps_a_subset(d in dataset(5), lo in 0.0..=1.0f64, hi in 0.0..=1.0f64) {
        let (lo, hi) = (lo.min(hi), lo.max(hi));
        let polyps = d.map_frames(|f| FrameRecord { artifacts: Vec::new(), ..f.clone() }).unwrap();
        let a = merge_pseudo_labels(&polyps, &d, lo).unwrap();
        let b = merge_pseudo_labels(&polyps, &d, hi).unwrap();
        for (fa, fb) in a.frames().iter().zip(b.frames()) {
            prop_assert!(fb.artifacts.iter().all(|x| fa.artifacts.contains(x)));
            prop_assert_eq!(&fa.gt_polyps, &fb.gt_polyps);
        }
        prop_assert!(artifacts_per_image(&b) <= artifacts_per_image(&a));
    }

    #[test]
    fn presence_frequency_falls_with_threshold(d in dataset(6), c in class(), t1 in 0.0..=1.0f64, t2 in 0.0..=1.0f64) {
        let (lo, hi) = (t1.min(t2), t1.max(t2));
        let base = PresenceRule::default();
        let r_lo = base.clone().with_threshold(c, lo).unwrap();
        let r_hi = base.with_threshold(c, hi).unwrap();
        let freq = |r: &PresenceRule| {
            presence_analysis(&d, r, 0.5).rows.iter().find(|row| row.class == c).unwrap().frequency
        };
        prop_assert!(freq(&r_hi) <= freq(&r_lo));
        let any = PresenceRule::any_box(0.25);
        for f in d.frames() {
            prop_assert_eq!(artifact_present(f, c, &any), !f.artifact_boxes(c, 0.25).is_empty());
        }
    }

    #[test]
    fn relation_shares_are_bounded(d in dataset(6), contains: bool) {
        let rel = if contains { Relation::Contains } else { Relation::Overlap };
        let report = relation_analysis(&d, &RelationConfig::new(rel));
        for row in &report.rows {
            let any = row.any_share();
            prop_assert!((0.0..=1.0).contains(&any));
            for s in row.shares() {
                prop_assert!((0.0..=1.0).contains(&s) && s <= any);
            }
        }
    }

    #[test]
    fn correlation_is_symmetric_and_order_free(d in dataset(8), rot in 0usize..8) {
        let rule = PresenceRule::any_box(0.25);
        prop_assume!(d.len() >= 2);
        let m = correlation_matrix(&d, &rule).unwrap();
        let mut frames = d.frames().to_vec();
        let k = rot % frames.len();
        frames.rotate_left(k);
        let p = correlation_matrix(&Dataset::new("rot", frames).unwrap(), &rule).unwrap();
        for i in 0..6 {
            prop_assert_eq!(m.values[i][i], 1.0);
            for j in 0..6 {
                let (a, b) = (m.values[i][j], m.values[j][i]);
                prop_assert!((a.is_nan() && b.is_nan()) || (a - b).abs() <= 1e-12);
                prop_assert!(a.is_nan() || (-1.0..=1.0).contains(&a));
                let c = p.values[i][j];
                prop_assert!((a.is_nan() && c.is_nan()) || (a - c).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn scenes_are_deterministic_and_in_bounds(seed: u64, inside in 0.0..=1.0f64) {
        let knobs = SceneKnobs { polyps: (1, 2), inside_polyp_rate: inside, ..SceneKnobs::default() };
        let s = generate_scene(seed, &knobs).unwrap();
        prop_assert_eq!(&s, &generate_scene(seed, &knobs).unwrap());
        let size = s.size as f64;
        let boxes = s.gt_polyps.iter().chain(s.gt_artifacts.iter().map(|(b, _)| b));
        for b in boxes {
            prop_assert!(b.x_min() >= 0.0 && b.y_min() >= 0.0 && b.x_max() <= size && b.y_max() <= size);
        }
        prop_assert!(s.grid.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
