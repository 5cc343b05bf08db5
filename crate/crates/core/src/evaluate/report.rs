use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{CountRecord, Dimension, ImageRecord, Variety};
use crate::error::{Error, Result};
use crate::evaluate::counts::{count_metrics, CountMetrics, R2Mode};
use crate::evaluate::matching::{
    average_precision, best_f1_threshold, match_detections, precision_recall_at, MatchResult, OperatingPoint,
};
use crate::evaluate::Latency;
use crate::geometry::BBox;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub iou_threshold: f64,
    /// Fixed operating threshold; `None` picks the F1-maximizing one on the evaluated set.
    pub operating_threshold: Option<f64>,
    pub r2_mode: R2Mode,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { iou_threshold: 0.5, operating_threshold: None, r2_mode: R2Mode::Ols }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub ap50: f64,
    /// Single-class mAP, equal to `ap50`.
    pub map: f64,
    pub f1: f64,
    pub n_images: usize,
    pub n_ground_truth: usize,
    pub n_detections: usize,
}

impl Metrics {
    pub fn compute(results: &[MatchResult], threshold: f64) -> Self {
        let (ap, _) = average_precision(results);
        let op = precision_recall_at(results, threshold);
        Self {
            precision: op.precision,
            recall: op.recall,
            ap50: ap,
            map: ap,
            f1: op.f1,
            n_images: results.len(),
            n_ground_truth: results.iter().map(|r| r.n_gt).sum(),
            n_detections: results.iter().map(|r| r.tp.len()).sum(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratumReport {
    pub variety: Variety,
    pub dimension: Dimension,
    pub value: String,
    /// `None` marks an empty stratum.
    pub metrics: Option<Metrics>,
}

impl StratumReport {
    pub fn key(&self) -> String {
        format!("{}/{}={}", self.variety, self.dimension.as_str(), self.value)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VineCount {
    pub vine_id: String,
    pub variety: Variety,
    pub predicted: f64,
    pub field_count: u32,
    pub label_count: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountRegression {
    /// `None` pools both varieties.
    pub variety: Option<Variety>,
    pub n_vines: usize,
    pub vs_field_count: Option<CountMetrics>,
    pub vs_label_count: Option<CountMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub iou_threshold: f64,
    pub operating_point: OperatingPoint,
    pub operating_rule: String,
    pub ap_interpolation: String,
    pub r2_definition: String,
    pub global: Metrics,
    pub strata: Vec<StratumReport>,
    pub count_regression: Vec<CountRegression>,
    pub vine_counts: Vec<VineCount>,
    #[serde(default)]
    pub latency: Option<Latency>,
    /// Fully resolved configuration that produced the report.
    #[serde(default)]
    pub config: serde_json::Value,
}

/// Number of detections at or above `threshold` whose centre lies in the
/// canopy region (or anywhere, without a region).
pub fn vine_count(dets: &[BBox], roi: Option<&BBox>, threshold: f64) -> usize {
    dets.iter()
        .filter(|d| d.confidence.unwrap_or(0.0) >= threshold && roi.is_none_or(|r| d.center_in(r)))
        .count()
}

/// Global, per-stratum and count-regression metrics. `detections[i]` holds
/// the detections for `records[i]` in that record's pixel coordinates.
pub fn stratified_report(
    records: &[ImageRecord],
    detections: &[Vec<BBox>],
    counts: &[CountRecord],
    opts: &EvalOptions,
) -> Result<MetricReport> {
    if records.len() != detections.len() {
        return Err(Error::InvalidParam(format!(
            "{} records but {} detection lists",
            records.len(),
            detections.len()
        )));
    }
    let results: Vec<MatchResult> = records
        .iter()
        .zip(detections)
        .map(|(r, d)| match_detections(d, &r.pixel_boxes(), opts.iou_threshold))
        .collect();
    let (operating_point, rule) = match opts.operating_threshold {
        Some(t) => (precision_recall_at(&results, t), format!("fixed threshold {t}")),
        None => (best_f1_threshold(&results), "max F1 on the evaluated set".to_string()),
    };
    let threshold = operating_point.threshold;
    let global = Metrics::compute(&results, threshold);

    let mut strata = Vec::new();
    for &variety in Variety::ALL {
        for dim in Dimension::CONDITIONS {
            for value in dim.values() {
                let subset: Vec<MatchResult> = records
                    .iter()
                    .zip(&results)
                    .filter(|(r, _)| r.variety == variety && dim.value(r) == Some(value))
                    .map(|(_, m)| m.clone())
                    .collect();
                strata.push(StratumReport {
                    variety,
                    dimension: dim,
                    value: value.to_string(),
                    metrics: (!subset.is_empty()).then(|| Metrics::compute(&subset, threshold)),
                });
            }
        }
    }

    let vine_counts = per_vine_counts(records, detections, counts, threshold);
    let mut count_regression = Vec::new();
    for variety in [None, Some(Variety::Chardonnay), Some(Variety::Merlot)] {
        let rows: Vec<&VineCount> = vine_counts.iter().filter(|v| variety.is_none_or(|x| v.variety == x)).collect();
        let pred: Vec<f64> = rows.iter().map(|v| v.predicted).collect();
        let field: Vec<f64> = rows.iter().map(|v| v.field_count as f64).collect();
        let label: Vec<f64> = rows.iter().map(|v| v.label_count as f64).collect();
        count_regression.push(CountRegression {
            variety,
            n_vines: rows.len(),
            vs_field_count: count_metrics(&pred, &field, opts.r2_mode).ok(),
            vs_label_count: count_metrics(&pred, &label, opts.r2_mode).ok(),
        });
    }

    Ok(MetricReport {
        iou_threshold: opts.iou_threshold,
        operating_point,
        operating_rule: rule,
        ap_interpolation: "all-point".to_string(),
        r2_definition: opts.r2_mode.as_str().to_string(),
        global,
        strata,
        count_regression,
        vine_counts,
        latency: None,
        config: serde_json::Value::Null,
    })
}

/// Predicted count per vine: the mean over the vine's raw images of
/// [`vine_count`], paired with the recorded counts.
pub fn per_vine_counts(
    records: &[ImageRecord],
    detections: &[Vec<BBox>],
    counts: &[CountRecord],
    threshold: f64,
) -> Vec<VineCount> {
    let mut per_vine: BTreeMap<&str, (Variety, Vec<usize>)> = BTreeMap::new();
    for (r, d) in records.iter().zip(detections) {
        if !r.is_raw() {
            continue;
        }
        let entry = per_vine.entry(r.vine_id.as_str()).or_insert((r.variety, Vec::new()));
        entry.1.push(vine_count(d, r.canopy_roi.as_ref(), threshold));
    }
    counts
        .iter()
        .filter_map(|c| {
            let (variety, n) = per_vine.get(c.vine_id.as_str())?;
            Some(VineCount {
                vine_id: c.vine_id.clone(),
                variety: *variety,
                predicted: n.iter().sum::<usize>() as f64 / n.len() as f64,
                field_count: c.field_count,
                label_count: c.label_count,
            })
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

/// Flat CSV `stratum,precision,recall,ap50,f1,n_images`; empty strata have blank metrics.
pub fn write_strata_csv(report: &MetricReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["stratum", "precision", "recall", "ap50", "f1", "n_images"])?;
    let g = &report.global;
    w.write_record([
        "all".to_string(),
        opt(Some(g.precision)),
        opt(Some(g.recall)),
        opt(Some(g.ap50)),
        opt(Some(g.f1)),
        g.n_images.to_string(),
    ])?;
    for s in &report.strata {
        let m = s.metrics.as_ref();
        w.write_record([
            s.key(),
            opt(m.map(|m| m.precision)),
            opt(m.map(|m| m.recall)),
            opt(m.map(|m| m.ap50)),
            opt(m.map(|m| m.f1)),
            m.map_or(0, |m| m.n_images).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// CSV `vine_id,predicted,field_count,label_count`.
pub fn write_counts_csv(report: &MetricReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["vine_id", "predicted", "field_count", "label_count"])?;
    for v in &report.vine_counts {
        w.write_record([v.vine_id.clone(), format!("{:.6}", v.predicted), v.field_count.to_string(), v.label_count.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Split, Sunlight, Weather};
    use crate::geometry::NormBox;

    fn record(i: usize, variety: Variety, weather: Weather) -> ImageRecord {
        ImageRecord {
            image_path: format!("img{i}.png"),
            width: 100,
            height: 100,
            variety,
            weather,
            maturity: None,
            sunlight: Sunlight::Noon,
            capture_date: chrono::NaiveDate::from_ymd_opt(2021, 8, 1).unwrap(),
            vine_id: format!("v{i}"),
            source_id: format!("s{i}"),
            split: Split::Test,
            boxes: vec![NormBox::new(0, 0.25, 0.25, 0.2, 0.2), NormBox::new(0, 0.75, 0.75, 0.2, 0.2)],
            canopy_roi: None,
            provenance: None,
            eval_only: false,
        }
    }

    #[test]
    fn single_stratum_equals_global() {
        let recs: Vec<_> = (0..3).map(|i| record(i, Variety::Merlot, Weather::Cloudy)).collect();
        let dets: Vec<Vec<BBox>> = recs
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let mut d: Vec<BBox> = r.pixel_boxes().iter().map(|b| b.with_confidence(0.9)).collect();
                if i == 0 {
                    d.truncate(1);
                }
                d
            })
            .collect();
        let rep = stratified_report(&recs, &dets, &[], &EvalOptions::default()).unwrap();
        let s = rep
            .strata
            .iter()
            .find(|s| s.variety == Variety::Merlot && s.dimension == Dimension::Weather && s.value == "cloudy")
            .unwrap();
        assert_eq!(s.metrics.unwrap(), rep.global);
        let sunny = rep.strata.iter().find(|s| s.key() == "merlot/weather=sunny").unwrap();
        assert!(sunny.metrics.is_none());
        // 2 varieties × (2 + 2 + 3) condition values
        assert_eq!(rep.strata.len(), 14);
    }

    #[test]
    fn per_stratum_ap_matches_brute_force() {
        let mut recs = vec![record(0, Variety::Chardonnay, Weather::Sunny), record(1, Variety::Chardonnay, Weather::Cloudy)];
        recs[1].vine_id = "v1".into();
        let gt0 = recs[0].pixel_boxes();
        let gt1 = recs[1].pixel_boxes();
        // sunny: one hit, one miss at lower confidence; cloudy: two hits
        let dets = vec![
            vec![gt0[0].with_confidence(0.9), BBox::new(50.0, 0.0, 60.0, 10.0).with_confidence(0.5)],
            vec![gt1[0].with_confidence(0.8), gt1[1].with_confidence(0.7)],
        ];
        let rep = stratified_report(&recs, &dets, &[], &EvalOptions::default()).unwrap();
        let get = |k: &str| rep.strata.iter().find(|s| s.key() == k).unwrap().metrics.unwrap();
        // [TP, FP] over 2 gts → 0.5; [TP, TP] → 1
        assert!((get("chardonnay/weather=sunny").ap50 - 0.5).abs() < 1e-12);
        assert!((get("chardonnay/weather=cloudy").ap50 - 1.0).abs() < 1e-12);
        // pooled ranking [TP .9, TP .8, TP .7, FP .5] over 4 gts → 0.75
        assert!((rep.global.ap50 - 0.75).abs() < 1e-12);
    }

    #[test]
    fn vine_counts_respect_roi_and_threshold() {
        let roi = BBox::new(0.0, 0.0, 50.0, 100.0);
        let d = [
            BBox::new(10.0, 10.0, 20.0, 20.0).with_confidence(0.9),
            BBox::new(60.0, 10.0, 70.0, 20.0).with_confidence(0.9),
            BBox::new(10.0, 30.0, 20.0, 40.0).with_confidence(0.1),
        ];
        assert_eq!(vine_count(&d, Some(&roi), 0.5), 1);
        assert_eq!(vine_count(&d, None, 0.05), 3);
    }
}
