use grapedet_tensor::Element;

use crate::geometry::BBox;
use crate::model::config::{ModelConfig, NUM_ANCHORS, STRIDES};
use crate::model::yolo::DetectionOutput;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Boxes in input-pixel coordinates for every image of the batch, with
/// confidence `σ(obj)·σ(cls)` of the best class. Only boxes with confidence
/// strictly above `conf_threshold` are kept; boxes are clipped to the canvas
/// and degenerate ones are discarded.
pub fn decode<F: Element>(out: &DetectionOutput<F>, cfg: &ModelConfig, conf_threshold: f64) -> Vec<Vec<BBox>> {
    let batch = out.batch();
    let no = cfg.outputs_per_anchor();
    let mut result = vec![Vec::new(); batch];
    for (si, t) in out.scales.iter().enumerate() {
        let stride = STRIDES[si] as f64;
        let (gh, gw) = (t.dim(2), t.dim(3));
        let (canvas_w, canvas_h) = (gw as f64 * stride, gh as f64 * stride);
        let d = t.data();
        for (b, boxes) in result.iter_mut().enumerate() {
            for a in 0..NUM_ANCHORS {
                let [aw, ah] = cfg.anchors[si][a];
                for gy in 0..gh {
                    for gx in 0..gw {
                        let base = (((b * NUM_ANCHORS + a) * gh + gy) * gw + gx) * no;
                        let v = |k: usize| d[base + k].to_f64().unwrap_or(f64::NAN);
                        let obj = sigmoid(v(4));
                        let (cls, p_cls) = (0..cfg.num_classes)
                            .map(|c| (c, sigmoid(v(5 + c))))
                            .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
                        let conf = obj * p_cls;
                        if !(conf > conf_threshold) {
                            continue;
                        }
                        let cx = (2.0 * sigmoid(v(0)) - 0.5 + gx as f64) * stride;
                        let cy = (2.0 * sigmoid(v(1)) - 0.5 + gy as f64) * stride;
                        let w = (2.0 * sigmoid(v(2))).powi(2) * aw;
                        let h = (2.0 * sigmoid(v(3))).powi(2) * ah;
                        let bx = BBox::from_center(cx, cy, w, h)
                            .clip(canvas_w, canvas_h)
                            .with_class(cls as u32)
                            .with_confidence(conf);
                        if bx.is_valid() {
                            boxes.push(bx);
                        }
                    }
                }
            }
        }
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use grapedet_tensor::Tensor;

    fn zero_output(cfg: &ModelConfig) -> DetectionOutput<f64> {
        let no = cfg.outputs_per_anchor();
        DetectionOutput {
            scales: STRIDES
                .iter()
                .map(|&s| {
                    let g = cfg.input_size / s;
                    Tensor::zeros(&[1, NUM_ANCHORS, g, g, no])
                })
                .collect(),
        }
    }

    #[test]
    fn zero_logits_decode_to_anchor_at_cell_center() {
        let mut cfg = ModelConfig::tiny();
        cfg.anchors[0][0] = [10.0, 13.0];
        let boxes = decode(&zero_output(&cfg), &cfg, 0.0);
        // centre (2·0.5 − 0.5 + 0)·8 = 4, size (10, 13), confidence 0.5·0.5
        let expected = BBox::from_center(4.0, 4.0, 10.0, 13.0);
        assert_eq!(expected, BBox::new(-1.0, -2.5, 9.0, 10.5));
        let hit: Vec<_> = boxes[0].iter().filter(|b| b.x2 == 9.0 && b.y2 == 10.5).collect();
        assert_eq!(hit, [&expected.clip(256.0, 256.0).with_confidence(0.25)]);
    }

    #[test]
    fn threshold_one_is_empty_and_boxes_are_valid() {
        let cfg = ModelConfig::tiny();
        assert!(decode(&zero_output(&cfg), &cfg, 1.0)[0].is_empty());
        let all = decode(&zero_output(&cfg), &cfg, 0.2);
        assert!(all[0].iter().all(|b| b.is_valid() && b.x2 <= 256.0 && b.y2 <= 256.0));
    }
}
