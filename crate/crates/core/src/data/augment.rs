//! Image augmentations with bounding-box propagation.
//!
//! Geometry and pixels are handled separately: [`augment_plan`] decides the
//! transforms and derives the labels without touching pixels, and
//! [`apply_op`] renders a planned variant from the parent image.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::loader::load_rgb;
use crate::data::record::{DatasetManifest, ImageRecord, Provenance};
use crate::error::{Error, Result};
use crate::geometry::{to_norm, BBox, Warning};

/// A rotated box survives if its clipped area is at least this share of the
/// original box area.
pub const VISIBILITY_THRESHOLD: f64 = 0.3;

/// Largest magnitude of a free (non right-angle) rotation, in degrees.
pub const MAX_SMALL_ANGLE: f64 = 15.0;

pub const GAIN_RANGE: (f64, f64) = (0.5, 1.5);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugmentOp {
    /// Clockwise degrees about the image centre; the canvas keeps its size.
    Rotate { angle: f64 },
    ChannelEnhance { gains: [f64; 3] },
    NoiseBlur { sigma_noise: f64, sigma_blur: f64, seed: u64 },
    /// Pixel rectangles of the parent image overwritten with `fill`.
    RectangleDiscard { rects: Vec<BBox>, fill: [u8; 3] },
}

impl AugmentOp {
    pub fn name(&self) -> &'static str {
        match self {
            AugmentOp::Rotate { .. } => "rotate",
            AugmentOp::ChannelEnhance { .. } => "channel_enhance",
            AugmentOp::NoiseBlur { .. } => "gaussian_noise_blur",
            AugmentOp::RectangleDiscard { .. } => "rectangle_discard",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Rotation {
    Identity,
    /// Exact `(cos, sin)` of a right angle.
    Right(f64, f64),
    Small(f64),
}

fn classify(angle: f64) -> Result<Rotation> {
    if !angle.is_finite() {
        return Err(Error::UnsupportedAngle(angle));
    }
    let a = angle.rem_euclid(360.0);
    Ok(match a {
        _ if a == 0.0 => Rotation::Identity,
        _ if a == 90.0 => Rotation::Right(0.0, 1.0),
        _ if a == 180.0 => Rotation::Right(-1.0, 0.0),
        _ if a == 270.0 => Rotation::Right(0.0, -1.0),
        _ if a <= MAX_SMALL_ANGLE || a >= 360.0 - MAX_SMALL_ANGLE => Rotation::Small(angle),
        _ => return Err(Error::UnsupportedAngle(angle)),
    })
}

fn cos_sin(r: Rotation) -> (f64, f64) {
    match r {
        Rotation::Identity => (1.0, 0.0),
        Rotation::Right(c, s) => (c, s),
        Rotation::Small(a) => (a.to_radians().cos(), a.to_radians().sin()),
    }
}

/// Clockwise rotation (y axis pointing down) about `(cx, cy)`.
fn turn(x: f64, y: f64, cx: f64, cy: f64, c: f64, s: f64) -> (f64, f64) {
    let (dx, dy) = (x - cx, y - cy);
    (cx + (c * dx - s * dy), cy + (s * dx + c * dy))
}

fn rotated_hull(b: &BBox, width: f64, height: f64, c: f64, s: f64) -> BBox {
    let (cx, cy) = (width / 2.0, height / 2.0);
    let corners = [(b.x1, b.y1), (b.x2, b.y1), (b.x1, b.y2), (b.x2, b.y2)].map(|(x, y)| turn(x, y, cx, cy, c, s));
    let xs = corners.map(|p| p.0);
    let ys = corners.map(|p| p.1);
    let min = |v: [f64; 4]| v.into_iter().fold(f64::INFINITY, f64::min);
    let max = |v: [f64; 4]| v.into_iter().fold(f64::NEG_INFINITY, f64::max);
    BBox { x1: min(xs), y1: min(ys), x2: max(xs), y2: max(ys), ..*b }
}

/// Boxes after rotating a `width × height` image; boxes that lose too much
/// area to the canvas edge are dropped.
pub fn rotate_boxes(boxes: &[BBox], width: u32, height: u32, angle: f64) -> Result<Vec<BBox>> {
    let r = classify(angle)?;
    if r == Rotation::Identity {
        return Ok(boxes.to_vec());
    }
    let (c, s) = cos_sin(r);
    let (w, h) = (width as f64, height as f64);
    Ok(boxes
        .iter()
        .filter_map(|b| {
            let clipped = rotated_hull(b, w, h, c, s).clip(w, h);
            (clipped.is_valid() && clipped.area() >= VISIBILITY_THRESHOLD * b.area()).then_some(clipped)
        })
        .collect())
}

/// Rotate image and boxes together. Right angles remap pixels exactly;
/// small angles sample bilinearly. Uncovered pixels are black.
pub fn rotate(img: &RgbImage, boxes: &[BBox], angle: f64) -> Result<(RgbImage, Vec<BBox>)> {
    let r = classify(angle)?;
    let out_boxes = rotate_boxes(boxes, img.width(), img.height(), angle)?;
    if r == Rotation::Identity {
        return Ok((img.clone(), out_boxes));
    }
    let (c, s) = cos_sin(r);
    let (w, h) = (img.width(), img.height());
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut out = RgbImage::new(w, h);
    for (ox, oy, px) in out.enumerate_pixels_mut() {
        // inverse map of the output pixel centre
        let (xs, ys) = turn(ox as f64 + 0.5, oy as f64 + 0.5, cx, cy, c, -s);
        *px = match r {
            Rotation::Right(..) => {
                let (sx, sy) = (xs.floor(), ys.floor());
                if sx >= 0.0 && sy >= 0.0 && sx < w as f64 && sy < h as f64 {
                    *img.get_pixel(sx as u32, sy as u32)
                } else {
                    Rgb([0, 0, 0])
                }
            }
            _ => bilinear(img, xs - 0.5, ys - 0.5),
        };
    }
    Ok((out, out_boxes))
}

fn bilinear(img: &RgbImage, u: f64, v: f64) -> Rgb<u8> {
    let (x0, y0) = (u.floor(), v.floor());
    let (fx, fy) = (u - x0, v - y0);
    let fetch = |x: f64, y: f64, ch: usize| -> f64 {
        if x < 0.0 || y < 0.0 || x >= img.width() as f64 || y >= img.height() as f64 {
            0.0
        } else {
            img.get_pixel(x as u32, y as u32).0[ch] as f64
        }
    };
    let mut px = [0u8; 3];
    for (ch, p) in px.iter_mut().enumerate() {
        let v = fetch(x0, y0, ch) * (1.0 - fx) * (1.0 - fy)
            + fetch(x0 + 1.0, y0, ch) * fx * (1.0 - fy)
            + fetch(x0, y0 + 1.0, ch) * (1.0 - fx) * fy
            + fetch(x0 + 1.0, y0 + 1.0, ch) * fx * fy;
        *p = v.round().clamp(0.0, 255.0) as u8;
    }
    Rgb(px)
}

/// Scale each channel by its gain, rounding and clipping to 8 bits.
pub fn channel_enhance(img: &RgbImage, gains: [f64; 3]) -> Result<RgbImage> {
    if gains.iter().any(|g| !(GAIN_RANGE.0..=GAIN_RANGE.1).contains(g)) {
        return Err(Error::InvalidParam(format!(
            "channel gains {gains:?} outside [{}, {}]",
            GAIN_RANGE.0, GAIN_RANGE.1
        )));
    }
    let mut out = img.clone();
    for px in out.pixels_mut() {
        for (v, g) in px.0.iter_mut().zip(gains) {
            *v = (*v as f64 * g).round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}

/// Normalized 1-D Gaussian taps with radius `ceil(3σ)`; `[1]` for σ = 0.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable Gaussian blur of a single `width × height` plane with
/// replicated borders.
pub fn blur_plane(plane: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    if k.len() == 1 {
        return plane.to_vec();
    }
    let r = (k.len() / 2) as isize;
    let at = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            tmp[y * width + x] =
                k.iter().enumerate().map(|(t, kv)| kv * plane[y * width + at(x as isize + t as isize - r, width)]).sum();
        }
    }
    let mut out = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] =
                k.iter().enumerate().map(|(t, kv)| kv * tmp[at(y as isize + t as isize - r, height) * width + x]).sum();
        }
    }
    out
}

/// Additive zero-mean Gaussian noise followed by Gaussian blur.
pub fn gaussian_noise_blur(img: &RgbImage, sigma_noise: f64, sigma_blur: f64, rng: &mut impl Rng) -> Result<RgbImage> {
    if !(sigma_noise >= 0.0) || !(sigma_blur >= 0.0) {
        return Err(Error::InvalidParam(format!("sigmas ({sigma_noise}, {sigma_blur}) must be non-negative")));
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut planes = vec![vec![0.0; w * h]; 3];
    let noise = (sigma_noise > 0.0).then(|| Normal::new(0.0, sigma_noise).expect("finite sigma"));
    for (i, px) in img.pixels().enumerate() {
        for ch in 0..3 {
            let n = noise.as_ref().map_or(0.0, |d| d.sample(rng));
            planes[ch][i] = px.0[ch] as f64 + n;
        }
    }
    let planes: Vec<Vec<f64>> = planes.iter().map(|p| blur_plane(p, w, h, sigma_blur)).collect();
    let mut out = img.clone();
    for (i, px) in out.pixels_mut().enumerate() {
        for ch in 0..3 {
            px.0[ch] = planes[ch][i].round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}

/// Overwrite the pixels of each rectangle (clipped to the canvas) with `fill`.
/// Pixel columns `round(x1)..round(x2)` and rows `round(y1)..round(y2)` are covered.
pub fn rectangle_discard(img: &RgbImage, rects: &[BBox], fill: [u8; 3]) -> RgbImage {
    let mut out = img.clone();
    let (w, h) = (img.width() as f64, img.height() as f64);
    for r in rects {
        let c = r.clip(w, h);
        let (x1, x2) = (c.x1.round() as u32, c.x2.round() as u32);
        let (y1, y2) = (c.y1.round() as u32, c.y2.round() as u32);
        for y in y1..y2 {
            for x in x1..x2 {
                out.put_pixel(x, y, Rgb(fill));
            }
        }
    }
    out
}

/// Render one operation on the parent image; labels change only under rotation.
pub fn apply_op(img: &RgbImage, boxes: &[BBox], op: &AugmentOp) -> Result<(RgbImage, Vec<BBox>)> {
    Ok(match op {
        AugmentOp::Rotate { angle } => rotate(img, boxes, *angle)?,
        AugmentOp::ChannelEnhance { gains } => (channel_enhance(img, *gains)?, boxes.to_vec()),
        AugmentOp::NoiseBlur { sigma_noise, sigma_blur, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            (gaussian_noise_blur(img, *sigma_noise, *sigma_blur, &mut rng)?, boxes.to_vec())
        }
        AugmentOp::RectangleDiscard { rects, fill } => (rectangle_discard(img, rects, *fill), boxes.to_vec()),
    })
}

/// SplitMix64 finalizer; decorrelates seeds derived from a base and an index.
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base.wrapping_add(salt.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_op(rng: &mut ChaCha8Rng, width: u32, height: u32) -> AugmentOp {
    match rng.random_range(0..4) {
        0 => {
            let angle = if rng.random_bool(0.5) {
                [90.0, 180.0, 270.0][rng.random_range(0..3)]
            } else {
                rng.random_range(-MAX_SMALL_ANGLE..=MAX_SMALL_ANGLE)
            };
            AugmentOp::Rotate { angle }
        }
        1 => AugmentOp::ChannelEnhance { gains: [(); 3].map(|_| rng.random_range(GAIN_RANGE.0..=GAIN_RANGE.1)) },
        2 => AugmentOp::NoiseBlur {
            sigma_noise: rng.random_range(0.0..12.0),
            sigma_blur: rng.random_range(0.0..1.5),
            seed: rng.next_u64(),
        },
        _ => {
            let (w, h) = (width as f64, height as f64);
            let rects = (0..rng.random_range(1..=3))
                .map(|_| {
                    let rw = rng.random_range(0.05..0.2) * w;
                    let rh = rng.random_range(0.05..0.2) * h;
                    let x = rng.random_range(0.0..w - rw);
                    let y = rng.random_range(0.0..h - rh);
                    BBox::new(x, y, x + rw, y + rh)
                })
                .collect();
            AugmentOp::RectangleDiscard { rects, fill: [0, 0, 0] }
        }
    }
}

fn variant_path(parent: &str, k: usize) -> String {
    let p = Path::new(parent);
    let stem = p.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    let name = format!("{stem}_aug{k}.png");
    match p.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => dir.join(name).to_string_lossy().replace('\\', "/"),
        None => name,
    }
}

/// Plan up to `n` augmented siblings of a raw record. Variants without any
/// surviving box are discarded as invalid.
pub fn augment_plan(rec: &ImageRecord, n: usize, seed: u64) -> Vec<ImageRecord> {
    let (w, h) = (rec.width as f64, rec.height as f64);
    let boxes = rec.pixel_boxes();
    let mut out = Vec::new();
    for k in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, k as u64));
        let op = sample_op(&mut rng, rec.width, rec.height);
        let (new_boxes, roi) = match &op {
            AugmentOp::Rotate { angle } => {
                let b = rotate_boxes(&boxes, rec.width, rec.height, *angle).expect("sampled angles are supported");
                let roi = rec.canopy_roi.and_then(|r| {
                    let (c, s) = cos_sin(classify(*angle).expect("supported"));
                    let t = rotated_hull(&r, w, h, c, s).clip(w, h);
                    t.is_valid().then_some(t)
                });
                (b, roi)
            }
            _ => (boxes.clone(), rec.canopy_roi),
        };
        if new_boxes.is_empty() {
            continue;
        }
        let mut v = rec.clone();
        v.image_path = variant_path(&rec.image_path, k);
        v.boxes = new_boxes.iter().map(|b| to_norm(b, w, h).0).filter(|b| b.in_range()).collect();
        v.canopy_roi = roi;
        v.provenance = Some(Provenance { parent: rec.image_path.clone(), variant: k, op });
        if !v.boxes.is_empty() {
            out.push(v);
        }
    }
    out
}

/// Bookkeeping of one augmentation run. `planned_images` counts each raw
/// record plus `n` variants; `actual_images` is the size of the result.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentSummary {
    pub raw_images: usize,
    pub planned_images: usize,
    pub actual_images: usize,
    pub skipped: Vec<Warning>,
}

/// Plan and render `n` variants for every raw record, writing images under
/// the manifest root. Raw records whose image cannot be read or whose size
/// disagrees with the record are dropped with a warning, as are their variants.
pub fn augment_dataset(m: &DatasetManifest, n: usize, seed: u64) -> Result<(DatasetManifest, AugmentSummary)> {
    let mut summary = AugmentSummary::default();
    let mut records = Vec::new();
    for (i, rec) in m.raw_records().enumerate() {
        summary.raw_images += 1;
        summary.planned_images += 1 + n;
        let img = match load_rgb(&m.image_path(rec)) {
            Ok(img) if img.dimensions() == (rec.width, rec.height) => img,
            Ok(img) => {
                let msg = format!("image is {:?}, record says {}×{}", img.dimensions(), rec.width, rec.height);
                summary.skipped.push(Warning::new(rec.image_path.clone(), msg));
                continue;
            }
            Err(e) => {
                summary.skipped.push(Warning::new(rec.image_path.clone(), format!("unreadable image: {e}")));
                continue;
            }
        };
        records.push(rec.clone());
        let boxes = rec.pixel_boxes();
        for v in augment_plan(rec, n, derive_seed(seed, i as u64)) {
            let op = &v.provenance.as_ref().expect("planned variants carry provenance").op;
            let (out, _) = apply_op(&img, &boxes, op)?;
            out.save(m.image_path(&v))?;
            records.push(v);
        }
    }
    summary.actual_images = records.len();
    Ok((DatasetManifest { records, ..m.clone() }, summary))
}
