use grapedet::geometry::{ciou, iou, nms, to_norm, to_pixels, BBox};
use proptest::prelude::*;

fn bbox(extent: f64) -> impl Strategy<Value = BBox> {
    (0.0..extent, 0.0..extent, 0.5..extent / 2.0, 0.5..extent / 2.0).prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
}

fn scored(extent: f64) -> impl Strategy<Value = BBox> {
    (bbox(extent), 0.0..1.0f64).prop_map(|(b, c)| b.with_confidence(c))
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(100.0), b in bbox(100.0)) {
        let v = iou(&a, &b);
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ciou_never_exceeds_iou(a in bbox(100.0), b in bbox(100.0)) {
        let c = ciou(&a, &b);
        prop_assert!(c <= iou(&a, &b) + 1e-12);
        prop_assert!(c >= -1.5);
    }

    #[test]
    fn disjoint_boxes_have_zero_iou(a in bbox(50.0), dx in 0.0..10.0f64) {
        let b = BBox::new(a.x2 + dx, a.y1, a.x2 + dx + a.width(), a.y2);
        prop_assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn nms_is_idempotent_and_respects_threshold(boxes in prop::collection::vec(scored(60.0), 0..25), thr in 0.1..0.9f64) {
        let kept = nms(&boxes, thr);
        prop_assert!(kept.len() <= boxes.len());
        prop_assert_eq!(&nms(&kept, thr), &kept);
        for (i, a) in kept.iter().enumerate() {
            prop_assert!(boxes.contains(a));
            for b in &kept[i + 1..] {
                prop_assert!(iou(a, b) <= thr);
            }
        }
    }

    #[test]
    fn nms_keeps_the_top_scoring_box(boxes in prop::collection::vec(scored(60.0), 1..20)) {
        let top = boxes.iter().map(|b| b.confidence.unwrap()).fold(f64::MIN, f64::max);
        prop_assert_eq!(nms(&boxes, 0.5)[0].confidence, Some(top));
    }

    #[test]
    fn normalized_round_trip(b in bbox(100.0)) {
        let b = b.clip(120.0, 80.0);
        prop_assume!(b.is_valid());
        let (n, warn) = to_norm(&b, 120.0, 80.0);
        prop_assert!(warn.is_none());
        let (back, _) = to_pixels(&n, 120.0, 80.0);
        for (x, y) in [(back.x1, b.x1), (back.y1, b.y1), (back.x2, b.x2), (back.y2, b.y2)] {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}

#[test]
fn nms_is_per_class() {
    let a = BBox::new(0.0, 0.0, 10.0, 10.0).with_confidence(0.9);
    let b = a.with_confidence(0.8).with_class(1);
    assert_eq!(nms(&[a, b], 0.5).len(), 2);
    assert_eq!(nms(&[a, a.with_confidence(0.8)], 0.5).len(), 1);
}
