use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use grapedet::data::loader::load_rgb;
use grapedet::data::{augment_dataset, load_dir, read_labels, split, write_labels, DatasetManifest, ImageRecord, Split};
use grapedet::evaluate::{
    benchmark, detect_images, stratified_report, write_counts_csv, write_strata_csv, EvalOptions, InferenceOptions,
    MetricReport,
};
use grapedet::geometry::{to_norm, to_pixels, BBox};
use grapedet::model::{checkpoint, Detector};
use grapedet::train::fit_manifests;
use serde::Serialize;

use crate::config::RunConfig;
use crate::plot::{annotate, markdown_table, scatter_svg};
use crate::{Cli, Command, UsageError};

const DEFAULT_OUT: &str = "grapedet-out";
const IMAGE_CHUNK: usize = 32;

fn out_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn data_dir(cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    cfg.data.dir.clone().ok_or_else(|| UsageError("data.dir: set --data or data.dir in the config".into()).into())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct RunMeta<'a> {
    command: &'a str,
    version: &'a str,
    args: Vec<String>,
    started_at: String,
    finished_at: String,
    duration_s: f64,
}

pub fn run(cli: &Cli, cfg: &RunConfig) -> anyhow::Result<()> {
    let started = chrono::Utc::now();
    let clock = Instant::now();
    let name = cli.command.name();
    let dir = match &cli.command {
        Command::Synth => {
            let dir = out_dir(cfg);
            cmd_synth(cfg, &dir)?;
            dir
        }
        Command::Augment => {
            let dir = cfg.data.dir.clone().unwrap_or_else(|| out_dir(cfg));
            cmd_augment(cfg, &dir)?;
            dir
        }
        Command::Split => {
            let dir = cfg.data.dir.clone().unwrap_or_else(|| out_dir(cfg));
            cmd_split(cfg, &dir)?;
            dir
        }
        Command::Train { init, .. } => {
            let dir = out_dir(cfg);
            cmd_train(cfg, init.as_deref(), &dir)?;
            dir
        }
        Command::Eval { weights, detections, .. } => {
            let dir = out_dir(cfg);
            cmd_eval(cfg, weights.as_deref(), detections.as_deref(), &dir)?;
            dir
        }
        Command::Predict { weights, input, .. } => {
            let dir = out_dir(cfg);
            cmd_predict(cfg, weights, input, &dir)?;
            dir
        }
        Command::Report { report } => {
            let dir = out_dir(cfg);
            cmd_report(report, &dir)?;
            dir
        }
    };
    write_json(&dir.join(format!("{name}_config.json")), cfg)?;
    let meta = RunMeta {
        command: name,
        version: env!("CARGO_PKG_VERSION"),
        args: std::env::args().collect(),
        started_at: started.to_rfc3339(),
        finished_at: chrono::Utc::now().to_rfc3339(),
        duration_s: clock.elapsed().as_secs_f64(),
    };
    write_json(&dir.join(format!("{name}_meta.json")), &meta)
}

fn cmd_synth(cfg: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let m = grapedet::data::synth_vineyard(cfg.synth.n, cfg.seed, &cfg.synth.profile, dir)?;
    log::info!("wrote {} synthetic images to {}", m.records.len(), dir.display());
    Ok(())
}

fn load_dataset(dir: &Path) -> anyhow::Result<DatasetManifest> {
    if !dir.join("manifest.jsonl").is_file() {
        return Err(UsageError(format!("data.dir: no manifest.jsonl in {}", dir.display())).into());
    }
    Ok(load_dir(dir)?)
}

fn cmd_augment(cfg: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    let m = load_dataset(dir)?;
    let (out, summary) = augment_dataset(&m, cfg.augment.n, cfg.seed)?;
    out.save(dir)?;
    write_json(&dir.join("augment_summary.json"), &summary)?;
    log::info!(
        "{} raw images: {} planned, {} actual, {} raw images skipped",
        summary.raw_images,
        summary.planned_images,
        summary.actual_images,
        summary.skipped.len()
    );
    Ok(())
}

fn cmd_split(cfg: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    let m = load_dataset(dir)?;
    let out = split(&m, cfg.split.ratios, cfg.seed)?;
    out.save(dir)?;
    fs::create_dir_all(dir.join("splits"))?;
    for s in [Split::Train, Split::Val, Split::Test] {
        let text: String = out.records.iter().filter(|r| r.split == s).map(|r| format!("{}\n", r.image_path)).collect();
        fs::write(dir.join("splits").join(format!("{s}.txt")), text)?;
    }
    let count = |s| out.records.iter().filter(|r| r.split == s).count();
    log::info!("split: {} train, {} val, {} test", count(Split::Train), count(Split::Val), count(Split::Test));
    Ok(())
}

fn cmd_train(cfg: &RunConfig, init: Option<&Path>, dir: &Path) -> anyhow::Result<()> {
    let m = load_dataset(&data_dir(cfg)?)?;
    let train = m.with_split(Split::Train);
    let val = m.with_split(Split::Val);
    if train.records.is_empty() {
        return Err(UsageError("data.dir: no records in the train split; run `grapedet split` first".into()).into());
    }
    let det = match init {
        Some(p) => {
            let (det, _) = checkpoint::load::<f32>(p).with_context(|| format!("loading {}", p.display()))?;
            if det.config() != &cfg.model {
                log::warn!("--init weights carry their own model configuration; the configured model is ignored");
            }
            det
        }
        None => Detector::build(&cfg.model, cfg.seed)?,
    };
    log::info!("training {} parameters on {} images ({} val)", det.num_parameters(), train.records.len(), val.records.len());
    fs::create_dir_all(dir)?;
    let result = fit_manifests(det, &train, &val, &cfg.train)?;
    let mut meta = BTreeMap::new();
    meta.insert("train".to_string(), serde_json::to_value(&cfg.train)?);
    meta.insert("best_epoch".to_string(), serde_json::to_value(result.best_epoch)?);
    checkpoint::save(&result.best, &meta, &dir.join("best.ckpt"))?;
    checkpoint::save(&result.last, &meta, &dir.join("last.ckpt"))?;
    result.history.write_csv(&dir.join("history.csv"))?;
    #[derive(Serialize)]
    struct Summary<'a> {
        num_parameters: usize,
        epochs_completed: usize,
        best_epoch: Option<usize>,
        best_val_map50: Option<f64>,
        diverged: &'a Option<grapedet::train::Divergence>,
    }
    write_json(
        &dir.join("train_summary.json"),
        &Summary {
            num_parameters: result.best.num_parameters(),
            epochs_completed: result.history.epochs.len(),
            best_epoch: result.best_epoch,
            best_val_map50: result.best_map50,
            diverged: &result.diverged,
        },
    )?;
    if let Some(d) = result.diverged {
        bail!("training diverged at epoch {} ({} loss); last good weights saved to {}", d.epoch, d.component, dir.display());
    }
    Ok(())
}

/// Detections for `records` in each record's pixel frame.
fn detect_records(det: &Detector<f32>, m: &DatasetManifest, records: &[ImageRecord], opts: &InferenceOptions) -> anyhow::Result<Vec<Vec<BBox>>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(IMAGE_CHUNK) {
        let images = chunk.iter().map(|r| load_rgb(&m.image_path(r))).collect::<grapedet::Result<Vec<_>>>()?;
        let dets = detect_images(det, &images, opts)?;
        for ((r, img), d) in chunk.iter().zip(&images).zip(dets) {
            let sx = r.width as f64 / img.width() as f64;
            let sy = r.height as f64 / img.height() as f64;
            out.push(d.into_iter().map(|b| BBox { x1: b.x1 * sx, y1: b.y1 * sy, x2: b.x2 * sx, y2: b.y2 * sy, ..b }).collect());
        }
    }
    Ok(out)
}

fn write_detections(dir: &Path, name: &str, dets: &[BBox], width: f64, height: f64) -> anyhow::Result<()> {
    let norm: Vec<_> = dets.iter().map(|b| to_norm(b, width, height).0).collect();
    let conf: Vec<f64> = dets.iter().map(|b| b.confidence.unwrap_or(0.0)).collect();
    write_labels(&dir.join(name), &norm, Some(&conf))?;
    Ok(())
}

fn read_detections(dir: &Path, r: &ImageRecord) -> anyhow::Result<Vec<BBox>> {
    let path = dir.join(r.label_file_name());
    if !path.exists() {
        log::warn!("{}: no detection file, treating as empty", path.display());
        return Ok(Vec::new());
    }
    let labels = read_labels(&path)?;
    Ok(labels
        .boxes
        .iter()
        .zip(&labels.confidences)
        .map(|(n, c)| {
            let b = to_pixels(n, r.width as f64, r.height as f64).0;
            b.with_confidence(c.unwrap_or(1.0))
        })
        .collect())
}

fn cmd_eval(cfg: &RunConfig, weights: Option<&Path>, detections: Option<&Path>, dir: &Path) -> anyhow::Result<()> {
    let m = load_dataset(&data_dir(cfg)?)?;
    let records: Vec<ImageRecord> = match cfg.data.eval_split {
        Some(s) => m.records.iter().filter(|r| r.split == s).cloned().collect(),
        None => m.records.clone(),
    };
    if records.is_empty() {
        return Err(UsageError(format!("data.eval_split: no records in split {:?}", cfg.data.eval_split)).into());
    }
    fs::create_dir_all(dir)?;
    let e = &cfg.eval;
    let mut latency = None;
    let dets = match (weights, detections) {
        (Some(w), _) => {
            let (det, _) = checkpoint::load::<f32>(w).with_context(|| format!("loading {}", w.display()))?;
            let opts = InferenceOptions { conf_threshold: e.conf_threshold, nms_iou: e.nms_iou, batch_size: e.batch_size };
            let dets = detect_records(&det, &m, &records, &opts)?;
            let det_dir = dir.join("detections");
            fs::create_dir_all(&det_dir)?;
            for (r, d) in records.iter().zip(&dets) {
                write_detections(&det_dir, &r.label_file_name(), d, r.width as f64, r.height as f64)?;
            }
            if e.benchmark_reps > 0 {
                let images = records.iter().take(16).map(|r| load_rgb(&m.image_path(r))).collect::<grapedet::Result<Vec<_>>>()?;
                latency = Some(benchmark(&det, &images, e.benchmark_reps, &e.hardware)?);
            }
            dets
        }
        (None, Some(d)) => {
            if e.benchmark_reps > 0 {
                return Err(UsageError("eval.benchmark_reps: latency needs --weights".into()).into());
            }
            records.iter().map(|r| read_detections(d, r)).collect::<anyhow::Result<_>>()?
        }
        (None, None) => return Err(UsageError("eval needs --weights or --detections".into()).into()),
    };
    let opts = EvalOptions { iou_threshold: e.iou_threshold, operating_threshold: e.operating_threshold, r2_mode: e.r2_mode };
    let mut report = stratified_report(&records, &dets, &m.counts, &opts)?;
    report.latency = latency;
    report.config = serde_json::to_value(cfg)?;
    write_json(&dir.join("report.json"), &report)?;
    write_strata_csv(&report, &dir.join("strata.csv"))?;
    write_counts_csv(&report, &dir.join("counts.csv"))?;
    log::info!(
        "{} images: mAP@0.5 {:.4}, P {:.4}, R {:.4}, F1 {:.4} at threshold {:.4}",
        report.global.n_images,
        report.global.ap50,
        report.global.precision,
        report.global.recall,
        report.global.f1,
        report.operating_point.threshold
    );
    Ok(())
}

fn collect_images(inputs: &[PathBuf]) -> anyhow::Result<Vec<PathBuf>> {
    let is_image = |p: &Path| {
        p.extension().and_then(|e| e.to_str()).is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
    };
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| is_image(p)).collect();
            found.sort();
            files.extend(found);
        } else if p.is_file() {
            files.push(p.clone());
        } else {
            return Err(UsageError(format!("--input: {} does not exist", p.display())).into());
        }
    }
    Ok(files)
}

fn cmd_predict(cfg: &RunConfig, weights: &Path, inputs: &[PathBuf], dir: &Path) -> anyhow::Result<()> {
    let files = collect_images(inputs)?;
    if files.is_empty() {
        return Err(UsageError("--input: no png or jpeg images found".into()).into());
    }
    let (det, _) = checkpoint::load::<f32>(weights).with_context(|| format!("loading {}", weights.display()))?;
    let p = &cfg.predict;
    let opts = InferenceOptions { conf_threshold: p.conf_threshold, nms_iou: p.nms_iou, batch_size: cfg.eval.batch_size };
    let labels_dir = dir.join("labels");
    fs::create_dir_all(&labels_dir)?;
    if p.annotate {
        fs::create_dir_all(dir.join("annotated"))?;
    }
    let mut total = 0;
    for chunk in files.chunks(IMAGE_CHUNK) {
        let images = chunk.iter().map(|f| load_rgb(f)).collect::<grapedet::Result<Vec<_>>>()?;
        let dets = detect_images(&det, &images, &opts)?;
        for ((file, img), d) in chunk.iter().zip(&images).zip(&dets) {
            let stem = file.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
            write_detections(&labels_dir, &format!("{stem}.txt"), d, img.width() as f64, img.height() as f64)?;
            if p.annotate {
                annotate(img, d).save(dir.join("annotated").join(format!("{stem}.png")))?;
            }
            total += d.len();
        }
    }
    log::info!("{} detections in {} images", total, files.len());
    Ok(())
}

fn cmd_report(path: &Path, dir: &Path) -> anyhow::Result<()> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let report: MetricReport =
        serde_json::from_str(&text).map_err(|e| UsageError(format!("--report: {}: {e}", path.display())))?;
    fs::create_dir_all(dir)?;
    write_json(&dir.join("report.json"), &report)?;
    write_strata_csv(&report, &dir.join("strata.csv"))?;
    write_counts_csv(&report, &dir.join("counts.csv"))?;
    fs::write(dir.join("strata.md"), markdown_table(&report))?;
    let pooled = report.count_regression.iter().find(|c| c.variety.is_none());
    let field: Vec<(f64, f64)> = report.vine_counts.iter().map(|v| (v.field_count as f64, v.predicted)).collect();
    let label: Vec<(f64, f64)> = report.vine_counts.iter().map(|v| (v.label_count as f64, v.predicted)).collect();
    fs::write(
        dir.join("scatter_field_count.svg"),
        scatter_svg("Predicted vs field count", "field count", &field, pooled.and_then(|c| c.vs_field_count.as_ref())),
    )?;
    fs::write(
        dir.join("scatter_label_count.svg"),
        scatter_svg("Predicted vs label count", "label count", &label, pooled.and_then(|c| c.vs_label_count.as_ref())),
    )?;
    log::info!("report rendered to {}", dir.display());
    Ok(())
}
