use std::time::Instant;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::data::loader::{letterbox, push_chw};
use crate::error::{Error, Result};
use crate::evaluate::infer::{detect_images, InferenceOptions};
use crate::model::Detector;
use crate::tensor::Tensor;

/// Per-image inference latency, medians over repetitions after one warm-up pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Latency {
    /// Network forward pass only.
    pub forward_ms: f64,
    /// Letterbox, forward, decode, suppression and coordinate mapping.
    pub end_to_end_ms: f64,
    pub repetitions: usize,
    pub batch_size: usize,
    pub n_images: usize,
    pub input_size: usize,
    pub hardware: String,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times inference on `images` one at a time. `hardware` is recorded verbatim.
pub fn benchmark(det: &Detector<f32>, images: &[RgbImage], repetitions: usize, hardware: &str) -> Result<Latency> {
    if images.is_empty() {
        return Err(Error::InvalidParam("benchmark needs at least one image".into()));
    }
    if repetitions < 3 {
        return Err(Error::InvalidParam(format!("benchmark needs at least 3 repetitions, got {repetitions}")));
    }
    let size = det.config().input_size;
    let inputs: Vec<Tensor<f32>> = images
        .iter()
        .map(|img| {
            let (boxed, _) = letterbox(img, size as u32);
            let mut data = Vec::with_capacity(3 * size * size);
            push_chw(&boxed, &mut data);
            Tensor::new(&[1, 3, size, size], data)
        })
        .collect::<std::result::Result<_, _>>()?;
    let opts = InferenceOptions { batch_size: 1, ..InferenceOptions::default() };

    for x in &inputs {
        det.predict(x)?;
    }
    detect_images(det, images, &opts)?;

    let per_image = |t: Instant| t.elapsed().as_secs_f64() * 1e3 / images.len() as f64;
    let mut forward = Vec::with_capacity(repetitions);
    let mut end_to_end = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let t = Instant::now();
        for x in &inputs {
            det.predict(x)?;
        }
        forward.push(per_image(t));
        let t = Instant::now();
        detect_images(det, images, &opts)?;
        end_to_end.push(per_image(t));
    }
    Ok(Latency {
        forward_ms: median(forward),
        end_to_end_ms: median(end_to_end),
        repetitions,
        batch_size: 1,
        n_images: images.len(),
        input_size: size,
        hardware: hardware.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
