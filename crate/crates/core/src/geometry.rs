//! Box representations, overlap measures and non-maximum suppression.
//!
//! Pixel boxes use continuous coordinates with exclusive area
//! `(x2 - x1) * (y2 - y1)`, so no ±1 pixel conventions leak between formats.

use std::cmp::Ordering;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// Axis-aligned pixel box. `confidence` is absent for ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    #[serde(default)]
    pub class_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2, class_id: 0, confidence: None }
    }

    pub fn with_confidence(mut self, confidence: f64) -> Self {
        self.confidence = Some(confidence);
        self
    }

    pub fn with_class(mut self, class_id: u32) -> Self {
        self.class_id = class_id;
        self
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    /// Area, zero for degenerate or inverted boxes.
    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2
            && self.y1 < self.y2
            && [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && self.confidence.is_none_or(|c| (0.0..=1.0).contains(&c))
    }

    pub fn clip(&self, width: f64, height: f64) -> Self {
        Self {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
            ..*self
        }
    }

    /// True when the box centre lies inside `roi` (boundary inclusive).
    pub fn center_in(&self, roi: &BBox) -> bool {
        let (cx, cy) = self.center();
        cx >= roi.x1 && cx <= roi.x2 && cy >= roi.y1 && cy <= roi.y2
    }

    fn score(&self) -> f64 {
        self.confidence.unwrap_or(0.0)
    }
}

fn intersection(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    w * h
}

/// Intersection over union. Degenerate boxes contribute no overlap.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 || inter <= 0.0 {
        0.0
    } else {
        (inter / union).min(1.0)
    }
}

/// Complete IoU: IoU minus a normalized centre-distance penalty and an
/// aspect-consistency penalty `alpha * v`, with
/// `v = 4/π² (atan(w_a/h_a) − atan(w_b/h_b))²` and `alpha = v / (1 − IoU + v)`.
pub fn ciou(a: &BBox, b: &BBox) -> f64 {
    let iou = iou(a, b);
    let cw = a.x2.max(b.x2) - a.x1.min(b.x1);
    let ch = a.y2.max(b.y2) - a.y1.min(b.y1);
    let diag2 = cw * cw + ch * ch;
    let (acx, acy) = a.center();
    let (bcx, bcy) = b.center();
    let rho2 = (acx - bcx).powi(2) + (acy - bcy).powi(2);
    let dist = if diag2 > 0.0 { rho2 / diag2 } else { 0.0 };
    let v = 4.0 / (PI * PI) * (a.width().max(0.0).atan2(a.height().max(0.0)) - b.width().max(0.0).atan2(b.height().max(0.0))).powi(2);
    let denom = 1.0 - iou + v;
    let alpha = if denom > 0.0 { v / denom } else { 0.0 };
    iou - dist - alpha * v
}

/// Descending confidence, ties broken by ascending `x1` then `y1`.
pub fn confidence_order(a: &BBox, b: &BBox) -> Ordering {
    b.score()
        .total_cmp(&a.score())
        .then(a.x1.total_cmp(&b.x1))
        .then(a.y1.total_cmp(&b.y1))
}

/// Greedy per-class non-maximum suppression.
///
/// A box is suppressed when its IoU with an already kept box of the same
/// class exceeds `iou_threshold`. Output is sorted by [`confidence_order`].
pub fn nms(boxes: &[BBox], iou_threshold: f64) -> Vec<BBox> {
    let mut sorted = boxes.to_vec();
    sorted.sort_by(confidence_order);
    let mut keep: Vec<BBox> = Vec::with_capacity(sorted.len());
    for b in sorted {
        if keep.iter().all(|k| k.class_id != b.class_id || iou(k, &b) <= iou_threshold) {
            keep.push(b);
        }
    }
    keep
}

/// Normalized centre-format box used in label files.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    #[serde(default)]
    pub class_id: u32,
}

impl NormBox {
    pub fn new(class_id: u32, cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h, class_id }
    }

    pub fn in_range(&self) -> bool {
        (0.0..=1.0).contains(&self.cx)
            && (0.0..=1.0).contains(&self.cy)
            && self.w > 0.0
            && self.w <= 1.0
            && self.h > 0.0
            && self.h <= 1.0
            && self.cx - self.w / 2.0 >= -1e-9
            && self.cx + self.w / 2.0 <= 1.0 + 1e-9
            && self.cy - self.h / 2.0 >= -1e-9
            && self.cy + self.h / 2.0 <= 1.0 + 1e-9
    }

    /// Clip the box extent to the unit square. Returns `None` if nothing
    /// with positive area remains.
    pub fn clipped(&self) -> Option<NormBox> {
        let x1 = (self.cx - self.w / 2.0).clamp(0.0, 1.0);
        let x2 = (self.cx + self.w / 2.0).clamp(0.0, 1.0);
        let y1 = (self.cy - self.h / 2.0).clamp(0.0, 1.0);
        let y2 = (self.cy + self.h / 2.0).clamp(0.0, 1.0);
        (x2 > x1 && y2 > y1).then(|| NormBox::new(self.class_id, (x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1))
    }
}

/// A value that needed repair during conversion or ingestion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Warning {
    pub context: String,
    pub message: String,
}

impl Warning {
    pub fn new(context: impl Into<String>, message: impl Into<String>) -> Self {
        let w = Self { context: context.into(), message: message.into() };
        log::warn!("{}: {}", w.context, w.message);
        w
    }
}

/// Pixel box for a normalized box in a `width × height` image.
///
/// Out-of-range input is clipped to the canvas and reported.
pub fn to_pixels(n: &NormBox, width: f64, height: f64) -> (BBox, Option<Warning>) {
    assert!(width > 0.0 && height > 0.0, "image extent must be positive");
    let raw = BBox::new(
        (n.cx - n.w / 2.0) * width,
        (n.cy - n.h / 2.0) * height,
        (n.cx + n.w / 2.0) * width,
        (n.cy + n.h / 2.0) * height,
    )
    .with_class(n.class_id);
    if n.in_range() {
        return (raw, None);
    }
    let clipped = raw.clip(width, height);
    let warn = Warning::new("to_pixels", format!("normalized box {n:?} out of range; clipped to {clipped:?}"));
    (clipped, Some(warn))
}

/// Normalized box for a pixel box; the inverse of [`to_pixels`].
pub fn to_norm(b: &BBox, width: f64, height: f64) -> (NormBox, Option<Warning>) {
    assert!(width > 0.0 && height > 0.0, "image extent must be positive");
    let inside = b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= width && b.y2 <= height;
    let src = if inside { *b } else { b.clip(width, height) };
    let n = NormBox::new(
        b.class_id,
        (src.x1 + src.x2) / 2.0 / width,
        (src.y1 + src.y2) / 2.0 / height,
        (src.x2 - src.x1) / width,
        (src.y2 - src.y1) / height,
    );
    let warn = (!inside).then(|| Warning::new("to_norm", format!("pixel box {b:?} exceeds {width}x{height}; clipped")));
    (n, warn)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&BBox::new(0.0, 0.0, 1.0, 1.0), &BBox::new(5.0, 5.0, 6.0, 6.0)), 0.0);
        let v = iou(&BBox::new(0.0, 0.0, 2.0, 2.0), &BBox::new(1.0, 1.0, 3.0, 3.0));
        assert!(close(v, 1.0 / 7.0, 1e-12));
    }

    #[test]
    fn degenerate_box_has_no_overlap() {
        let line = BBox::new(1.0, 1.0, 1.0, 5.0);
        assert_eq!(iou(&line, &BBox::new(0.0, 0.0, 4.0, 4.0)), 0.0);
        assert_eq!(iou(&line, &line), 0.0);
    }

    #[test]
    fn ciou_examples() {
        let a = BBox::new(2.0, 3.0, 7.0, 9.0);
        assert!(close(ciou(&a, &a), 1.0, 1e-12));
        let inner = BBox::new(1.0, 1.0, 3.0, 3.0);
        let outer = BBox::new(0.0, 0.0, 4.0, 4.0);
        assert!(close(ciou(&inner, &outer), 0.25, 1e-12));
        assert!(ciou(&BBox::new(0.0, 0.0, 1.0, 1.0), &BBox::new(10.0, 10.0, 11.0, 11.0)) < 0.0);
    }

    #[test]
    fn nms_examples() {
        assert!(nms(&[], 0.5).is_empty());
        let one = BBox::new(0.0, 0.0, 2.0, 2.0).with_confidence(0.3);
        assert_eq!(nms(&[one], 0.5), vec![one]);
        let hi = BBox::new(0.0, 0.0, 10.0, 10.0).with_confidence(0.9);
        let lo = BBox::new(0.0, 0.0, 10.0, 10.0).with_confidence(0.8);
        assert_eq!(nms(&[lo, hi], 0.5), vec![hi]);
        // B overlaps A with IoU 0.6 (inter 60 / union 100), C is disjoint.
        let a = BBox::new(0.0, 0.0, 10.0, 8.0).with_confidence(0.9);
        let b = BBox::new(0.0, 2.0, 10.0, 10.0).with_confidence(0.8);
        let c = BBox::new(20.0, 20.0, 30.0, 30.0).with_confidence(0.7);
        assert!(close(iou(&a, &b), 0.6, 1e-12));
        assert_eq!(nms(&[c, b, a], 0.5), vec![a, c]);
    }

    #[test]
    fn nms_keeps_classes_apart() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0).with_confidence(0.9);
        let b = a.with_class(1).with_confidence(0.8);
        assert_eq!(nms(&[a, b], 0.5).len(), 2);
    }

    #[test]
    fn nms_tie_break_is_by_position() {
        let right = BBox::new(50.0, 0.0, 60.0, 10.0).with_confidence(0.5);
        let left = BBox::new(0.0, 0.0, 10.0, 10.0).with_confidence(0.5);
        assert_eq!(nms(&[right, left], 0.5), vec![left, right]);
    }

    #[test]
    fn conversion_examples() {
        let (b, w) = to_pixels(&NormBox::new(0, 0.5, 0.5, 1.0, 1.0), 100.0, 100.0);
        assert!(w.is_none());
        assert_eq!((b.x1, b.y1, b.x2, b.y2), (0.0, 0.0, 100.0, 100.0));
        let (b, _) = to_pixels(&NormBox::new(0, 0.25, 0.25, 0.5, 0.5), 640.0, 480.0);
        assert_eq!((b.x1, b.y1, b.x2, b.y2), (0.0, 0.0, 320.0, 240.0));
        let (b, _) = to_pixels(&NormBox::new(0, 0.5, 0.5, 0.2, 0.1), 5312.0, 2988.0);
        assert!(close(b.x1, 2124.8, 1e-9) && close(b.y1, 1344.6, 1e-9));
        assert!(close(b.x2, 3187.2, 1e-9) && close(b.y2, 1643.4, 1e-9));
    }

    #[test]
    fn out_of_range_normbox_is_clipped_with_warning() {
        let (b, w) = to_pixels(&NormBox::new(0, 0.95, 0.5, 0.2, 0.2), 100.0, 100.0);
        assert!(w.is_some());
        assert_eq!(b.x2, 100.0);
        assert!(b.is_valid());
    }
}
