use serde::{Deserialize, Serialize};

use crate::geometry::{confidence_order, iou, BBox, Warning};

/// Outcome of matching one image's detections against its ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// Detection confidences, descending.
    pub confidences: Vec<f64>,
    /// True-positive flag per detection, aligned with `confidences`.
    pub tp: Vec<bool>,
    /// Ground-truth index claimed by each detection.
    pub matched_gt: Vec<Option<usize>>,
    pub n_gt: usize,
    pub iou_threshold: f64,
}

impl MatchResult {
    pub fn true_positives(&self) -> usize {
        self.tp.iter().filter(|&&t| t).count()
    }

    pub fn false_positives(&self) -> usize {
        self.tp.len() - self.true_positives()
    }

    pub fn false_negatives(&self) -> usize {
        self.n_gt - self.true_positives()
    }
}

/// Greedy matching in descending confidence: each detection claims the
/// unmatched ground truth of the same class with the highest IoU at or above
/// the threshold (lowest index on ties), otherwise it is a false positive.
pub fn match_detections(dets: &[BBox], gts: &[BBox], iou_threshold: f64) -> MatchResult {
    let mut order: Vec<&BBox> = dets.iter().collect();
    order.sort_by(|a, b| confidence_order(a, b));
    let mut claimed = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(dets.len());
    let mut matched_gt = Vec::with_capacity(dets.len());
    for d in &order {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if claimed[j] || g.class_id != d.class_id {
                continue;
            }
            let v = iou(d, g);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            claimed[j] = true;
        }
        tp.push(best.is_some());
        matched_gt.push(best.map(|(j, _)| j));
    }
    MatchResult {
        confidences: order.iter().map(|d| d.confidence.unwrap_or(0.0)).collect(),
        tp,
        matched_gt,
        n_gt: gts.len(),
        iou_threshold,
    }
}

/// Detections of all images ranked by confidence. The sort is stable, so
/// equal confidences keep image order.
fn ranked(results: &[MatchResult]) -> Vec<(f64, bool)> {
    let mut all: Vec<(f64, bool)> =
        results.iter().flat_map(|r| r.confidences.iter().copied().zip(r.tp.iter().copied())).collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    all
}

/// One point of the precision/recall curve, after admitting all detections
/// with confidence ≥ `threshold`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

pub fn pr_curve(results: &[MatchResult]) -> Vec<PrPoint> {
    let n_gt: usize = results.iter().map(|r| r.n_gt).sum();
    let mut tp = 0usize;
    ranked(results)
        .into_iter()
        .enumerate()
        .map(|(i, (c, t))| {
            tp += usize::from(t);
            PrPoint {
                threshold: c,
                precision: tp as f64 / (i + 1) as f64,
                recall: if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 },
            }
        })
        .collect()
}

/// All-point interpolated average precision. Zero ground truth gives 0 and a warning.
pub fn average_precision(results: &[MatchResult]) -> (f64, Option<Warning>) {
    let n_gt: usize = results.iter().map(|r| r.n_gt).sum();
    if n_gt == 0 {
        return (0.0, Some(Warning::new("average_precision", "no ground-truth boxes; AP reported as 0")));
    }
    let curve = pr_curve(results);
    let mut envelope: Vec<f64> = curve.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, env) in curve.iter().zip(&envelope) {
        ap += (p.recall - prev_recall) * env;
        prev_recall = p.recall;
    }
    (ap, None)
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision and recall counting detections with confidence ≥ `threshold`.
pub fn precision_recall_at(results: &[MatchResult], threshold: f64) -> OperatingPoint {
    let (mut tp, mut n, mut n_gt) = (0usize, 0usize, 0usize);
    for r in results {
        n_gt += r.n_gt;
        for (&c, &t) in r.confidences.iter().zip(&r.tp) {
            if c >= threshold {
                n += 1;
                tp += usize::from(t);
            }
        }
    }
    let precision = if n == 0 { 0.0 } else { tp as f64 / n as f64 };
    let recall = if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 };
    OperatingPoint { threshold, precision, recall, f1: f1(precision, recall) }
}

/// The confidence threshold with maximal F1 (the highest such threshold on
/// ties). Without detections the threshold is 1.
pub fn best_f1_threshold(results: &[MatchResult]) -> OperatingPoint {
    let mut best = OperatingPoint { threshold: 1.0, precision: 0.0, recall: 0.0, f1: 0.0 };
    let curve = pr_curve(results);
    for (i, p) in curve.iter().enumerate() {
        // only the last of a run of equal confidences is a reachable cut
        if curve.get(i + 1).is_some_and(|n| n.threshold == p.threshold) {
            continue;
        }
        let f = f1(p.precision, p.recall);
        if f > best.f1 {
            best = OperatingPoint { threshold: p.threshold, precision: p.precision, recall: p.recall, f1: f };
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x: f64, c: f64) -> BBox {
        BBox::new(x, 0.0, x + 10.0, 10.0).with_confidence(c)
    }

    #[test]
    fn identical_boxes_all_match() {
        let gts = vec![BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(20.0, 0.0, 30.0, 10.0)];
        let dets: Vec<_> = gts.iter().map(|g| g.with_confidence(0.9)).collect();
        let m = match_detections(&dets, &gts, 0.5);
        assert_eq!((m.true_positives(), m.false_positives(), m.false_negatives()), (2, 0, 0));
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let gts = vec![BBox::new(0.0, 0.0, 10.0, 10.0)];
        let m = match_detections(&[det(0.0, 0.9), det(1.0, 0.8)], &gts, 0.5);
        assert_eq!(m.tp, [true, false]);
    }

    #[test]
    fn one_detection_over_two_gts_claims_one() {
        let gts = vec![BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(2.0, 0.0, 12.0, 10.0)];
        let m = match_detections(&[det(1.0, 0.9)], &gts, 0.5);
        assert_eq!((m.true_positives(), m.false_negatives()), (1, 1));
    }

    #[test]
    fn hand_enumerated_ap() {
        let r = MatchResult {
            confidences: vec![0.9, 0.8, 0.7],
            tp: vec![true, false, true],
            matched_gt: vec![Some(0), None, Some(1)],
            n_gt: 2,
            iou_threshold: 0.5,
        };
        let (ap, _) = average_precision(&[r]);
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn degenerate_ap_cases() {
        let fp = MatchResult { confidences: vec![0.9], tp: vec![false], matched_gt: vec![None], n_gt: 1, iou_threshold: 0.5 };
        assert_eq!(average_precision(&[fp]).0, 0.0);
        let empty = MatchResult { confidences: vec![], tp: vec![], matched_gt: vec![], n_gt: 0, iou_threshold: 0.5 };
        let (ap, warn) = average_precision(&[empty]);
        assert_eq!(ap, 0.0);
        assert!(warn.is_some());
    }

    #[test]
    fn f1_examples() {
        assert!((f1(0.98, 0.95) - 0.9648).abs() < 1e-4);
        assert_eq!(f1(0.3, 0.3), 0.3);
        assert_eq!(f1(0.0, 0.7), 0.0);
        assert_eq!(f1(0.0, 0.0), 0.0);
    }

    #[test]
    fn operating_point_maximizes_f1() {
        let r = MatchResult {
            confidences: vec![0.9, 0.8, 0.3],
            tp: vec![true, true, false],
            matched_gt: vec![Some(0), Some(1), None],
            n_gt: 2,
            iou_threshold: 0.5,
        };
        let op = best_f1_threshold(&[r.clone()]);
        assert_eq!((op.threshold, op.f1), (0.8, 1.0));
        assert_eq!(precision_recall_at(&[r], 0.8), op);
    }
}
