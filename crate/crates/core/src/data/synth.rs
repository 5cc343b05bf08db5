//! Procedural vineyard images with exact bunch annotations.

use std::fs;
use std::path::Path;

use chrono::NaiveDate;
use image::{Rgb, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::augment::derive_seed;
use crate::data::record::{CountRecord, DatasetManifest, ImageRecord, Maturity, Split, Sunlight, Variety, Weather};
use crate::error::{Error, Result};
use crate::geometry::{iou, to_norm, BBox};

/// Appearance and layout parameters of the generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthProfile {
    pub width: u32,
    pub height: u32,
    /// Bunches drawn inside the canopy region, inclusive range.
    pub bunches: (usize, usize),
    /// Chance of one extra bunch in the margin outside the canopy region.
    pub margin_bunch_prob: f64,
    /// Upper bound of bunches counted in the field but not visible.
    pub max_hidden: u32,
    /// Canopy region as fractions of the width.
    pub canopy_x: (f64, f64),
}

impl Default for SynthProfile {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            bunches: (3, 6),
            margin_bunch_prob: 0.3,
            max_hidden: 2,
            canopy_x: (0.12, 0.88),
        }
    }
}

/// Conditions of image `i`, assigned round-robin so that every
/// variety × condition combination appears once `i` reaches 12.
pub fn conditions(i: usize) -> (Variety, Weather, Maturity, Sunlight) {
    (
        Variety::ALL[i % 2],
        Weather::ALL[(i / 2) % 2],
        Maturity::ALL[(i / 4) % 2],
        Sunlight::ALL[i % 3],
    )
}

/// One rendered scene.
pub struct Scene {
    pub image: RgbImage,
    /// Tight pixel boxes of every drawn bunch.
    pub boxes: Vec<BBox>,
    pub canopy_roi: BBox,
    pub label_count: u32,
    pub field_count: u32,
}

struct Berry {
    x: f64,
    y: f64,
    r: f64,
}

fn lighting(weather: Weather, sun: Sunlight, x: f64, width: f64) -> f64 {
    let base = match weather {
        Weather::Sunny => 1.1,
        Weather::Cloudy => 0.8,
    };
    let t = x / width;
    let slope = match sun {
        Sunlight::Morning => 0.25 * (0.5 - t),
        Sunlight::Noon => 0.0,
        Sunlight::Afternoon => 0.25 * (t - 0.5),
    };
    let contrast = if weather == Weather::Sunny { 1.0 } else { 0.4 };
    base + slope * contrast
}

fn berry_color(v: Variety, m: Maturity) -> [f64; 3] {
    match (v, m) {
        (Variety::Chardonnay, Maturity::Immature) => [150.0, 190.0, 70.0],
        (Variety::Chardonnay, Maturity::Mature) => [205.0, 200.0, 110.0],
        (Variety::Merlot, Maturity::Immature) => [140.0, 95.0, 110.0],
        (Variety::Merlot, Maturity::Mature) => [75.0, 35.0, 85.0],
    }
}

fn shade(c: [f64; 3], k: f64) -> Rgb<u8> {
    Rgb(c.map(|v| (v * k).round().clamp(0.0, 255.0) as u8))
}

fn fill_ellipse(img: &mut RgbImage, cx: f64, cy: f64, rx: f64, ry: f64, mut color: impl FnMut(u32, u32, f64) -> Option<Rgb<u8>>) {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let x0 = (cx - rx).floor().max(0.0) as u32;
    let x1 = (cx + rx).ceil().min(w) as u32;
    let y0 = (cy - ry).floor().max(0.0) as u32;
    let y1 = (cy + ry).ceil().min(h) as u32;
    for y in y0..y1 {
        for x in x0..x1 {
            let dx = (x as f64 + 0.5 - cx) / rx;
            let dy = (y as f64 + 0.5 - cy) / ry;
            let d2 = dx * dx + dy * dy;
            if d2 <= 1.0 {
                if let Some(c) = color(x, y, d2) {
                    img.put_pixel(x, y, c);
                }
            }
        }
    }
}

/// Berries of a conical bunch whose tight box is `(x1, y1, x2, y2)`.
fn bunch_berries(b: &BBox, rng: &mut ChaCha8Rng) -> Vec<Berry> {
    let r = rng.random_range(2.8..4.2_f64).min(b.width() / 4.0);
    let rows = ((b.height() - 2.0 * r) / (1.6 * r)).floor().max(1.0) as usize;
    let mut berries = Vec::new();
    let cx = (b.x1 + b.x2) / 2.0;
    for k in 0..=rows {
        let y = b.y1 + r + (b.height() - 2.0 * r) * k as f64 / rows as f64;
        let taper = 1.0 - 0.65 * k as f64 / rows as f64;
        let half = ((b.width() / 2.0 - r) * taper).max(0.0);
        let n = ((2.0 * half) / (1.7 * r)).floor() as usize + 1;
        for j in 0..n {
            let x = if n == 1 { cx } else { cx - half + 2.0 * half * j as f64 / (n - 1) as f64 };
            berries.push(Berry { x, y, r });
        }
    }
    // the outermost berries span the box exactly
    berries.push(Berry { x: b.x1 + r, y: b.y1 + r, r });
    berries.push(Berry { x: b.x2 - r, y: b.y1 + r, r });
    berries.push(Berry { x: cx, y: b.y2 - r, r });
    berries
}

/// Render image `i` of a run seeded with `seed`.
pub fn render_scene(i: usize, seed: u64, profile: &SynthProfile) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
    let (variety, weather, maturity, sun) = conditions(i);
    let (w, h) = (profile.width as f64, profile.height as f64);
    let light = |x: u32| lighting(weather, sun, x as f64, w);

    let mut img = RgbImage::new(profile.width, profile.height);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let n: f64 = rng.random_range(-10.0..10.0);
        let sky = y as f64 / h < 0.12;
        let base = if sky { [150.0, 170.0, 190.0] } else { [55.0 + n, 100.0 + n, 45.0 + n * 0.5] };
        *px = shade(base, light(x));
    }
    let leaves = (w * h / 900.0) as usize;
    for _ in 0..leaves {
        let (cx, cy) = (rng.random_range(0.0..w), rng.random_range(0.1 * h..h));
        let (rx, ry) = (rng.random_range(6.0..16.0), rng.random_range(5.0..12.0));
        let tone = [rng.random_range(35.0..80.0), rng.random_range(85.0..140.0), rng.random_range(25.0..60.0)];
        fill_ellipse(&mut img, cx, cy, rx, ry, |x, _, d2| Some(shade(tone.map(|v| v * (1.1 - 0.3 * d2)), light(x))));
    }
    let cordon_y = 0.3 * h;
    let wood = [105.0, 72.0, 40.0];
    for y in (cordon_y - 2.0) as u32..(cordon_y + 3.0) as u32 {
        for x in 0..profile.width {
            img.put_pixel(x, y, shade(wood, light(x)));
        }
    }
    let roi = BBox::new(profile.canopy_x.0 * w, 0.0, profile.canopy_x.1 * w, h);
    for px in [roi.x1, roi.x2] {
        for y in (0.1 * h) as u32..profile.height {
            for x in (px - 2.0).max(0.0) as u32..(px + 2.0).min(w) as u32 {
                img.put_pixel(x, y, shade([120.0, 110.0, 95.0], light(x)));
            }
        }
    }

    let scale = w.min(h) / 256.0;
    let inside = rng.random_range(profile.bunches.0..=profile.bunches.1);
    let margin = usize::from(rng.random_bool(profile.margin_bunch_prob));
    let mut boxes: Vec<BBox> = Vec::new();
    for k in 0..inside + margin {
        for _attempt in 0..200 {
            let bw = rng.random_range(20.0..34.0) * scale;
            let bh = rng.random_range(28.0..46.0) * scale;
            let cx = if k < inside {
                rng.random_range(roi.x1 + 0.5 * bw..roi.x2 - 0.5 * bw)
            } else if rng.random_bool(0.5) {
                rng.random_range(0.5 * bw..roi.x1 - 1.0)
            } else {
                rng.random_range(roi.x2 + 1.0..w - 0.5 * bw)
            };
            let top = rng.random_range(cordon_y + 4.0..h - bh - 2.0);
            let b = BBox::new(cx - bw / 2.0, top, cx + bw / 2.0, top + bh);
            if boxes.iter().all(|o| iou(o, &b) == 0.0) {
                boxes.push(b);
                break;
            }
        }
    }

    let color = berry_color(variety, maturity);
    for b in &boxes {
        // stalk from the cordon
        let sx = (b.x1 + b.x2) / 2.0;
        for y in cordon_y as u32..b.y1.max(cordon_y) as u32 {
            img.put_pixel(sx as u32, y, shade(wood, 0.8 * light(sx as u32)));
        }
        let berries = bunch_berries(b, &mut rng);
        for berry in berries {
            let jitter: f64 = rng.random_range(0.9..1.1);
            fill_ellipse(&mut img, berry.x, berry.y, berry.r, berry.r, |x, y, d2| {
                let hx = x as f64 + 0.5 - (berry.x - 0.35 * berry.r);
                let hy = y as f64 + 0.5 - (berry.y - 0.35 * berry.r);
                let k = if d2 > 0.7 {
                    0.55
                } else if hx * hx + hy * hy < 0.12 * berry.r * berry.r {
                    1.45
                } else {
                    1.0
                };
                Some(shade(color, k * jitter * light(x)))
            });
        }
    }

    let label_count = boxes.iter().filter(|b| b.center_in(&roi)).count() as u32;
    let field_count = label_count + rng.random_range(0..=profile.max_hidden);
    Scene { image: img, boxes, canopy_roi: roi, label_count, field_count }
}

/// Render `n` images with labels, `manifest.jsonl` and `counts.csv` under `out_dir`.
pub fn synth_vineyard(n: usize, seed: u64, profile: &SynthProfile, out_dir: &Path) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::InvalidParam("synth_vineyard needs at least one image".into()));
    }
    if profile.width < 64 || profile.height < 64 {
        return Err(Error::InvalidParam("synthetic images must be at least 64×64".into()));
    }
    fs::create_dir_all(out_dir.join("images"))?;
    let base_date = NaiveDate::from_ymd_opt(2021, 7, 1).expect("valid date");
    let mut records = Vec::with_capacity(n);
    let mut counts = Vec::with_capacity(n);
    for i in 0..n {
        let scene = render_scene(i, seed, profile);
        let (variety, weather, maturity, sunlight) = conditions(i);
        let image_path = format!("images/synth_{i:05}.png");
        scene.image.save(out_dir.join(&image_path))?;
        let (w, h) = (profile.width as f64, profile.height as f64);
        let vine_id = format!("vine_{i:05}");
        records.push(ImageRecord {
            image_path,
            width: profile.width,
            height: profile.height,
            variety,
            weather,
            maturity: Some(maturity),
            sunlight,
            capture_date: base_date + chrono::Days::new((i % 90) as u64),
            vine_id: vine_id.clone(),
            source_id: format!("synth_{i:05}"),
            split: Split::Unassigned,
            boxes: scene.boxes.iter().map(|b| to_norm(b, w, h).0).collect(),
            canopy_roi: Some(scene.canopy_roi),
            provenance: None,
            eval_only: false,
        });
        counts.push(CountRecord { vine_id, field_count: scene.field_count, label_count: scene.label_count });
    }
    let m = DatasetManifest::new(records, counts, out_dir);
    m.validate()?;
    m.save(out_dir)?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conditions_cover_every_combination_by_twelve() {
        use std::collections::HashSet;
        let c: Vec<_> = (0..12).map(conditions).collect();
        assert_eq!(c.iter().map(|c| (c.0, c.1)).collect::<HashSet<_>>().len(), 4);
        assert_eq!(c.iter().map(|c| (c.0, c.2)).collect::<HashSet<_>>().len(), 4);
        assert_eq!(c.iter().map(|c| (c.0, c.3)).collect::<HashSet<_>>().len(), 6);
    }

    #[test]
    fn scene_boxes_are_tight_and_counted() {
        let p = SynthProfile::default();
        for i in 0..6 {
            let s = render_scene(i, 11, &p);
            assert!(!s.boxes.is_empty());
            let inside = s.boxes.iter().filter(|b| b.center_in(&s.canopy_roi)).count() as u32;
            assert_eq!(s.label_count, inside);
            assert!(s.field_count >= s.label_count && s.field_count <= s.label_count + p.max_hidden);
            for b in &s.boxes {
                assert!(b.is_valid() && b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 256.0 && b.y2 <= 256.0);
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let p = SynthProfile::default();
        assert_eq!(render_scene(3, 5, &p).image, render_scene(3, 5, &p).image);
        assert_ne!(render_scene(3, 5, &p).image, render_scene(3, 6, &p).image);
    }
}
