use std::fmt::Write;

use grapedet::data::Variety;
use grapedet::evaluate::{CountMetrics, MetricReport};
use grapedet::geometry::BBox;
use image::{Rgb, RgbImage};

const BOX_COLOUR: Rgb<u8> = Rgb([255, 32, 32]);

/// Copy of `img` with each box outlined, two pixels wide.
pub fn annotate(img: &RgbImage, boxes: &[BBox]) -> RgbImage {
    let mut out = img.clone();
    let (w, h) = (img.width() as i64, img.height() as i64);
    for b in boxes {
        let (x1, y1) = (b.x1.floor() as i64, b.y1.floor() as i64);
        let (x2, y2) = (b.x2.ceil() as i64 - 1, b.y2.ceil() as i64 - 1);
        for t in 0..2 {
            for x in x1..=x2 {
                for y in [y1 + t, y2 - t] {
                    if (0..w).contains(&x) && (0..h).contains(&y) {
                        out.put_pixel(x as u32, y as u32, BOX_COLOUR);
                    }
                }
            }
            for y in y1..=y2 {
                for x in [x1 + t, x2 - t] {
                    if (0..w).contains(&x) && (0..h).contains(&y) {
                        out.put_pixel(x as u32, y as u32, BOX_COLOUR);
                    }
                }
            }
        }
    }
    out
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{:.2}", 100.0 * x))
}

/// Per-variety stratified tables in Markdown, metrics in percent.
pub fn markdown_table(report: &MetricReport) -> String {
    let mut s = String::new();
    let g = &report.global;
    let _ = writeln!(s, "# Detection report\n");
    let _ = writeln!(
        s,
        "All images ({}): P {:.2} / R {:.2} / mAP@0.5 {:.2} / F1 {:.2} at confidence {:.3} ({}).\n",
        g.n_images,
        100.0 * g.precision,
        100.0 * g.recall,
        100.0 * g.ap50,
        100.0 * g.f1,
        report.operating_point.threshold,
        report.operating_rule
    );
    for &variety in Variety::ALL {
        let _ = writeln!(s, "## {variety}\n");
        let _ = writeln!(s, "| condition | value | images | P | R | mAP@0.5 | F1 |");
        let _ = writeln!(s, "|---|---|---:|---:|---:|---:|---:|");
        for st in report.strata.iter().filter(|st| st.variety == variety) {
            let m = st.metrics.as_ref();
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} | {} |",
                st.dimension.as_str(),
                st.value,
                m.map_or(0, |m| m.n_images),
                cell(m.map(|m| m.precision)),
                cell(m.map(|m| m.recall)),
                cell(m.map(|m| m.ap50)),
                cell(m.map(|m| m.f1)),
            );
        }
        let _ = writeln!(s);
    }
    let _ = writeln!(s, "## Count agreement ({} R²)\n", report.r2_definition);
    let _ = writeln!(s, "| variety | vines | R² field | RMSE field | R² label | RMSE label |");
    let _ = writeln!(s, "|---|---:|---:|---:|---:|---:|");
    for c in &report.count_regression {
        let name = c.variety.map_or_else(|| "all".to_string(), |v| v.to_string());
        let r2 = |m: Option<&CountMetrics>| m.and_then(|m| m.r2).map_or_else(|| "n/a".into(), |v| format!("{v:.3}"));
        let rmse = |m: Option<&CountMetrics>| m.map_or_else(|| "n/a".into(), |m| format!("{:.3}", m.rmse));
        let _ = writeln!(
            s,
            "| {name} | {} | {} | {} | {} | {} |",
            c.n_vines,
            r2(c.vs_field_count.as_ref()),
            rmse(c.vs_field_count.as_ref()),
            r2(c.vs_label_count.as_ref()),
            rmse(c.vs_label_count.as_ref())
        );
    }
    s
}

/// Scatter of `(true, predicted)` counts with the identity line, as SVG.
pub fn scatter_svg(title: &str, x_label: &str, points: &[(f64, f64)], metrics: Option<&CountMetrics>) -> String {
    const SIZE: f64 = 480.0;
    const MARGIN: f64 = 56.0;
    let hi = points.iter().flat_map(|&(x, y)| [x, y]).fold(1.0f64, f64::max).ceil();
    let plot = SIZE - 2.0 * MARGIN;
    let px = |v: f64| MARGIN + v / hi * plot;
    let py = |v: f64| SIZE - MARGIN - v / hi * plot;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{title}</text>"#, SIZE / 2.0);
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{plot}" height="{plot}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#888" stroke-dasharray="4 4"/>"##,
        px(0.0),
        py(0.0),
        px(hi),
        py(hi)
    );
    let ticks = 5;
    for i in 0..=ticks {
        let v = hi * i as f64 / ticks as f64;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="middle">{v:.1}</text>"#,
            px(v),
            SIZE - MARGIN + 16.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="end">{v:.1}</text>"#,
            MARGIN - 6.0,
            py(v) + 4.0
        );
    }
    for &(x, y) in points {
        let _ = writeln!(s, r##"<circle cx="{:.2}" cy="{:.2}" r="4" fill="#7b1f4b" fill-opacity="0.7"/>"##, px(x), py(y));
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="13" text-anchor="middle">{x_label}</text>"#,
        SIZE / 2.0,
        SIZE - 14.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" font-family="sans-serif" font-size="13" text-anchor="middle" transform="rotate(-90 16 {})">predicted count</text>"#,
        SIZE / 2.0,
        SIZE / 2.0
    );
    if let Some(m) = metrics {
        let r2 = m.r2.map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}"));
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12">R² = {r2}, RMSE = {:.3}, n = {}</text>"#,
            MARGIN + 8.0,
            MARGIN + 18.0,
            m.rmse,
            m.n
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn annotate_outlines_only() {
        let img = RgbImage::new(20, 20);
        let out = annotate(&img, &[BBox::new(5.0, 5.0, 15.0, 15.0)]);
        assert_eq!(out.get_pixel(5, 10), &BOX_COLOUR);
        assert_eq!(out.get_pixel(10, 10), &Rgb([0, 0, 0]));
    }

    #[test]
    fn scatter_has_one_circle_per_point() {
        let svg = scatter_svg("t", "x", &[(1.0, 2.0), (3.0, 3.0)], None);
        assert_eq!(svg.matches("<circle").count(), 2);
        assert!(svg.ends_with("</svg>\n"));
    }
}
