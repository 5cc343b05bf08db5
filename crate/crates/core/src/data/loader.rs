use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};

use crate::data::record::{DatasetManifest, ImageRecord};
use crate::error::Result;
use crate::geometry::BBox;

/// Padding value of letterboxed borders.
pub const PAD_VALUE: u8 = 114;

/// Mapping between original image pixels and the square network canvas.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Letterbox {
    pub scale: f64,
    pub pad_x: f64,
    pub pad_y: f64,
    pub size: u32,
}

impl Letterbox {
    pub fn new(width: u32, height: u32, size: u32) -> Self {
        let scale = (size as f64 / width as f64).min(size as f64 / height as f64);
        let (nw, nh) = ((width as f64 * scale).round(), (height as f64 * scale).round());
        Self { scale, pad_x: ((size as f64 - nw) / 2.0).floor(), pad_y: ((size as f64 - nh) / 2.0).floor(), size }
    }

    pub fn forward(&self, b: &BBox) -> BBox {
        BBox {
            x1: b.x1 * self.scale + self.pad_x,
            y1: b.y1 * self.scale + self.pad_y,
            x2: b.x2 * self.scale + self.pad_x,
            y2: b.y2 * self.scale + self.pad_y,
            ..*b
        }
    }

    pub fn inverse(&self, b: &BBox) -> BBox {
        BBox {
            x1: (b.x1 - self.pad_x) / self.scale,
            y1: (b.y1 - self.pad_y) / self.scale,
            x2: (b.x2 - self.pad_x) / self.scale,
            y2: (b.y2 - self.pad_y) / self.scale,
            ..*b
        }
    }
}

/// Resize preserving aspect ratio and pad to a `size × size` canvas.
pub fn letterbox(img: &RgbImage, size: u32) -> (RgbImage, Letterbox) {
    let lb = Letterbox::new(img.width(), img.height(), size);
    if img.width() == size && img.height() == size {
        return (img.clone(), lb);
    }
    let nw = ((img.width() as f64 * lb.scale).round() as u32).clamp(1, size);
    let nh = ((img.height() as f64 * lb.scale).round() as u32).clamp(1, size);
    let resized = imageops::resize(img, nw, nh, FilterType::Triangle);
    let mut canvas = RgbImage::from_pixel(size, size, Rgb([PAD_VALUE; 3]));
    imageops::replace(&mut canvas, &resized, lb.pad_x as i64, lb.pad_y as i64);
    (canvas, lb)
}

/// Planar `[3, H, W]` values in `[0, 1]`, appended to `out`.
pub fn push_chw(img: &RgbImage, out: &mut Vec<f32>) {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let start = out.len();
    out.resize(start + 3 * w * h, 0.0);
    for (i, px) in img.pixels().enumerate() {
        for ch in 0..3 {
            out[start + ch * w * h + i] = px.0[ch] as f32 / 255.0;
        }
    }
}

pub fn load_rgb(path: &std::path::Path) -> Result<RgbImage> {
    Ok(image::open(path)?.to_rgb8())
}

/// A letterboxed image with its ground truth in canvas pixels.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: RgbImage,
    pub boxes: Vec<BBox>,
    pub letterbox: Letterbox,
}

pub fn load_sample(m: &DatasetManifest, rec: &ImageRecord, size: u32) -> Result<Sample> {
    let img = load_rgb(&m.image_path(rec))?;
    let (image, lb) = letterbox(&img, size);
    // labels are normalized to the recorded extent, which may differ from the file
    let sx = img.width() as f64 / rec.width as f64;
    let sy = img.height() as f64 / rec.height as f64;
    let boxes = rec
        .pixel_boxes()
        .iter()
        .map(|b| lb.forward(&BBox { x1: b.x1 * sx, y1: b.y1 * sy, x2: b.x2 * sx, y2: b.y2 * sy, ..*b }))
        .collect();
    Ok(Sample { image, boxes, letterbox: lb })
}

pub fn load_samples(m: &DatasetManifest, size: u32) -> Result<Vec<Sample>> {
    m.records.iter().map(|r| load_sample(m, r, size)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn letterbox_maps_boxes_both_ways() {
        let img = RgbImage::from_pixel(200, 100, Rgb([1, 2, 3]));
        let (canvas, lb) = letterbox(&img, 64);
        assert_eq!(canvas.dimensions(), (64, 64));
        assert_eq!((lb.scale, lb.pad_x, lb.pad_y), (0.32, 0.0, 16.0));
        assert_eq!(canvas.get_pixel(10, 0), &Rgb([PAD_VALUE; 3]));
        let b = BBox::new(10.0, 20.0, 110.0, 70.0);
        let back = lb.inverse(&lb.forward(&b));
        assert!((back.x1 - b.x1).abs() < 1e-9 && (back.y2 - b.y2).abs() < 1e-9);
    }

    #[test]
    fn chw_layout() {
        let img = RgbImage::from_fn(2, 1, |x, _| Rgb([x as u8 * 255, 0, 51]));
        let mut v = Vec::new();
        push_chw(&img, &mut v);
        assert_eq!(v, [0.0, 1.0, 0.0, 0.0, 0.2, 0.2]);
    }
}
