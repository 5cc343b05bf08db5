use image::RgbImage;

use crate::data::loader::{letterbox, push_chw, Letterbox};
use crate::error::{Error, Result};
use crate::evaluate::{best_f1_threshold, match_detections, MatchResult, Metrics};
use crate::geometry::{nms, BBox};
use crate::model::{decode, Detector};
use crate::tensor::Tensor;

/// Detections kept per image after suppression.
pub const MAX_DETECTIONS: usize = 300;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InferenceOptions {
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub batch_size: usize,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self { conf_threshold: 0.001, nms_iou: 0.6, batch_size: 8 }
    }
}

/// Detections for images already letterboxed to the network input size,
/// in canvas pixels.
pub fn detect_canvas(det: &Detector<f32>, images: &[&RgbImage], opts: &InferenceOptions) -> Result<Vec<Vec<BBox>>> {
    let size = det.config().input_size as u32;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(opts.batch_size.max(1)) {
        let mut data = Vec::with_capacity(chunk.len() * 3 * (size * size) as usize);
        for img in chunk {
            if img.dimensions() != (size, size) {
                return Err(Error::Shape(format!("image {:?} is not {size}×{size}", img.dimensions())));
            }
            push_chw(img, &mut data);
        }
        let x = Tensor::new(&[chunk.len(), 3, size as usize, size as usize], data)?;
        let raw = det.predict(&x)?;
        for boxes in decode(&raw, det.config(), opts.conf_threshold) {
            let mut kept = nms(&boxes, opts.nms_iou);
            kept.truncate(MAX_DETECTIONS);
            out.push(kept);
        }
    }
    Ok(out)
}

/// Letterbox, detect, and map detections back to original image pixels.
pub fn detect_images(det: &Detector<f32>, images: &[RgbImage], opts: &InferenceOptions) -> Result<Vec<Vec<BBox>>> {
    let size = det.config().input_size as u32;
    let boxed: Vec<(RgbImage, Letterbox)> = images.iter().map(|i| letterbox(i, size)).collect();
    let refs: Vec<&RgbImage> = boxed.iter().map(|(i, _)| i).collect();
    let canvas = detect_canvas(det, &refs, opts)?;
    Ok(canvas
        .into_iter()
        .zip(images.iter().zip(&boxed))
        .map(|(dets, (img, (_, lb)))| {
            dets.iter()
                .map(|b| lb.inverse(b).clip(img.width() as f64, img.height() as f64))
                .filter(BBox::is_valid)
                .collect()
        })
        .collect())
}

/// Detection metrics on letterboxed samples at the F1-maximizing operating point.
pub fn evaluate_samples(
    det: &Detector<f32>,
    samples: &[crate::data::Sample],
    opts: &InferenceOptions,
    iou_threshold: f64,
) -> Result<Metrics> {
    let images: Vec<&RgbImage> = samples.iter().map(|s| &s.image).collect();
    let dets = detect_canvas(det, &images, opts)?;
    let results: Vec<MatchResult> =
        dets.iter().zip(samples).map(|(d, s)| match_detections(d, &s.boxes, iou_threshold)).collect();
    Ok(Metrics::compute(&results, best_f1_threshold(&results).threshold))
}
