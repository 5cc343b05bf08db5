use crate::data::record::ImageRecord;
use crate::geometry::{to_pixels, Warning};

/// Keep only boxes whose centre lies inside the canopy region and mark the
/// record evaluation-only. The image is not modified.
pub fn apply_debar(rec: &ImageRecord) -> (ImageRecord, Option<Warning>) {
    let Some(roi) = rec.canopy_roi else {
        let w = Warning::new(&rec.image_path, "no canopy_roi; debar skipped");
        return (rec.clone(), Some(w));
    };
    let (w, h) = (rec.width as f64, rec.height as f64);
    let mut out = rec.clone();
    out.boxes.retain(|b| to_pixels(b, w, h).0.center_in(&roi));
    out.eval_only = true;
    (out, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::record::sample_record;
    use crate::geometry::{BBox, NormBox};

    #[test]
    fn center_rule() {
        let mut rec = sample_record(0);
        rec.boxes = vec![
            NormBox::new(0, 0.5, 0.5, 0.2, 0.2),
            NormBox::new(0, 0.05, 0.5, 0.06, 0.1),
            // straddles the roi edge at x = 20 with its centre inside
            NormBox::new(0, 0.22, 0.5, 0.1, 0.1),
        ];
        rec.canopy_roi = Some(BBox::new(20.0, 0.0, 80.0, 100.0));
        let (out, warn) = apply_debar(&rec);
        assert!(warn.is_none() && out.eval_only);
        assert_eq!(out.boxes, vec![rec.boxes[0], rec.boxes[2]]);

        rec.canopy_roi = Some(BBox::new(0.0, 0.0, 100.0, 100.0));
        assert_eq!(apply_debar(&rec).0.boxes, rec.boxes);

        rec.canopy_roi = None;
        let (same, warn) = apply_debar(&rec);
        assert_eq!(same, rec);
        assert!(warn.is_some());
    }
}
