use std::collections::BTreeSet;
use std::path::Path;

use grapedet_tensor::{accumulate_grads, Adam, Ctx, Element, GroupLr, Optimizer, ParamId, Sgd, StatUpdate, Tensor};
use image::imageops::flip_horizontal;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::loader::push_chw;
use crate::data::{derive_seed, load_sample, load_samples, DatasetManifest, Sample};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate_samples, InferenceOptions, Metrics};
use crate::geometry::BBox;
use crate::model::Detector;
use crate::train::config::{OptimizerKind, TrainConfig};
use crate::train::loss::{total_loss, LossComponents};
use crate::train::targets::assign_targets;

/// One row of the training history.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_box: f64,
    pub loss_obj: f64,
    pub loss_cls: f64,
    pub val_precision: Option<f64>,
    pub val_recall: Option<f64>,
    pub val_map50: Option<f64>,
    pub val_f1: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.epochs.is_empty() {
            w.write_record(["epoch", "loss_box", "loss_obj", "loss_cls", "val_precision", "val_recall", "val_map50", "val_f1"])?;
        }
        for r in &self.epochs {
            w.serialize(r)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let epochs = r.deserialize().collect::<std::result::Result<_, _>>()?;
        Ok(Self { epochs })
    }
}

/// Where a run stopped producing finite values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub epoch: usize,
    pub iteration: usize,
    pub component: String,
}

pub struct FitResult {
    /// Weights with the best validation mAP@0.5 (the last good weights without validation data).
    pub best: Detector<f32>,
    /// Weights after the last completed epoch.
    pub last: Detector<f32>,
    pub history: History,
    pub best_epoch: Option<usize>,
    pub best_map50: Option<f64>,
    pub diverged: Option<Divergence>,
}

/// Stacks images into `[B, 3, H, W]` in `[0, 1]`.
pub fn batch_tensor<F: Element>(images: &[&image::RgbImage]) -> Result<Tensor<F>> {
    let (w, h) = images.first().map_or((0, 0), |i| i.dimensions());
    let mut data = Vec::with_capacity(images.len() * 3 * (w * h) as usize);
    for img in images {
        if img.dimensions() != (w, h) {
            return Err(Error::Shape(format!("batch mixes {:?} and {:?} images", (w, h), img.dimensions())));
        }
        push_chw(img, &mut data);
    }
    Ok(Tensor::new(&[images.len(), 3, h as usize, w as usize], data.into_iter().map(|v| F::lit(v as f64)).collect())?)
}

/// Training-mode loss of one batch. With `grads`, parameter gradients are
/// accumulated into the store (after zeroing) and the normalization
/// statistics of the pass are returned.
pub fn batch_loss<F: Element>(
    det: &mut Detector<F>,
    images: &Tensor<F>,
    gt: &[Vec<BBox>],
    cfg: &TrainConfig,
    grads: bool,
) -> Result<(LossComponents, Vec<StatUpdate<F>>)> {
    let targets = assign_targets(gt, det.config(), cfg.anchor_ratio_threshold);
    let (components, owned, updates) = {
        let mut cx = Ctx::new(&det.params, true, grads);
        let x = cx.tape.constant(images.clone());
        let outs = det.net.forward(&mut cx, x)?;
        let loss = total_loss(&mut cx.tape, &outs, &targets, det.config(), &cfg.loss)?;
        let owned: Vec<(ParamId, Tensor<F>)> = if grads {
            let g = cx.tape.backward(loss.total);
            cx.param_grads(&g).into_iter().map(|(id, t)| (id, t.clone())).collect()
        } else {
            Vec::new()
        };
        (loss.components, owned, cx.take_stat_updates())
    };
    if grads {
        det.params.zero_grad();
        let refs: Vec<(ParamId, &Tensor<F>)> = owned.iter().map(|(id, t)| (*id, t)).collect();
        accumulate_grads(&mut det.params, &refs);
    }
    Ok((components, updates))
}

/// Scales accumulated gradients to a global L2 norm of at most `max_norm`
/// and returns the norm before clipping.
pub fn clip_grad_norm<F: Element>(det: &mut Detector<F>, max_norm: f64) -> f64 {
    let sq: f64 = det
        .params
        .iter()
        .filter(|(_, p)| p.kind.trainable())
        .flat_map(|(_, p)| p.grad.data().iter().map(|g| g.to_f64().unwrap_or(f64::NAN)))
        .map(|g| g * g)
        .sum();
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = F::lit(max_norm / (norm + 1e-6));
        for p in det.params.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = *g * s);
        }
    }
    norm
}

fn flip_sample(s: &Sample) -> (image::RgbImage, Vec<BBox>) {
    let w = s.image.width() as f64;
    let boxes = s.boxes.iter().map(|b| BBox { x1: w - b.x2, x2: w - b.x1, ..*b }).collect();
    (flip_horizontal(&s.image), boxes)
}

/// Per-iteration learning rates and momentum, with linear warm-up from the
/// warm-up bias rate and momentum.
fn schedule(cfg: &TrainConfig, epoch: usize, iteration: usize, warmup_iters: usize) -> (GroupLr, f64) {
    let base = cfg.lr.initial * cfg.lr.factor(epoch, cfg.epochs);
    if iteration < warmup_iters {
        let f = iteration as f64 / warmup_iters as f64;
        let lerp = |a: f64, b: f64| a + (b - a) * f;
        let lr = GroupLr { weight: lerp(0.0, base), bias: lerp(cfg.lr.warmup_bias_lr, base), norm: lerp(0.0, base) };
        (lr, lerp(cfg.lr.warmup_momentum, cfg.momentum))
    } else {
        (GroupLr::uniform(base), cfg.momentum)
    }
}

fn validate(det: &Detector<f32>, val: &[Sample], cfg: &TrainConfig) -> Result<Metrics> {
    let opts = InferenceOptions { conf_threshold: cfg.val_conf_threshold, nms_iou: cfg.val_nms_iou, batch_size: cfg.batch_size };
    evaluate_samples(det, val, &opts, cfg.val_iou_threshold)
}

/// Train on letterboxed samples. Deterministic for a fixed seed: batches
/// are shuffled and flipped from a per-epoch seeded generator and every
/// computation is single-threaded.
pub fn fit(mut det: Detector<f32>, train: &[Sample], val: &[Sample], cfg: &TrainConfig) -> Result<FitResult> {
    cfg.validate()?;
    let mut history = History::default();
    let mut last_good = det.clone();
    let mut best: Option<(Detector<f32>, usize, f64)> = None;
    let mut diverged = None;
    if cfg.epochs == 0 || train.is_empty() {
        return Ok(FitResult { best: det.clone(), last: det, history, best_epoch: None, best_map50: None, diverged });
    }
    let mut opt: Box<dyn Optimizer<f32>> = match cfg.optimizer {
        OptimizerKind::Sgd => Box::new(Sgd::new(cfg.momentum, true, cfg.weight_decay)),
        OptimizerKind::Adam => Box::new(Adam::new(cfg.momentum, 0.999, cfg.weight_decay)),
    };
    let nb = train.len().div_ceil(cfg.batch_size);
    let warmup_iters = (cfg.lr.warmup_epochs * nb as f64).round() as usize;

    'epochs: for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64));
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 3];
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let iteration = epoch * nb + bi;
            let mut owned = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &train[i];
                owned.push(if rng.random::<f64>() < cfg.flip_lr { flip_sample(s) } else { (s.image.clone(), s.boxes.clone()) });
            }
            let images: Vec<&image::RgbImage> = owned.iter().map(|(i, _)| i).collect();
            let gt: Vec<Vec<BBox>> = owned.iter().map(|(_, b)| b.clone()).collect();
            let x = batch_tensor::<f32>(&images)?;
            let (loss, updates) = match batch_loss(&mut det, &x, &gt, cfg, true) {
                Ok(v) => v,
                Err(Error::NonFinite { component }) => {
                    diverged = Some(Divergence { epoch: epoch + 1, iteration, component: component.to_string() });
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            let norm = clip_grad_norm(&mut det, cfg.grad_clip);
            if !norm.is_finite() {
                diverged = Some(Divergence { epoch: epoch + 1, iteration, component: "gradient".to_string() });
                break 'epochs;
            }
            let (lr, momentum) = schedule(cfg, epoch, iteration, warmup_iters);
            opt.set_momentum(momentum);
            opt.step(&mut det.params, lr);
            det.params.apply_batch_stats(&updates, cfg.bn_momentum);
            sums[0] += loss.box_;
            sums[1] += loss.obj;
            sums[2] += loss.cls;
        }
        let mut rec = EpochRecord {
            epoch: epoch + 1,
            loss_box: sums[0] / nb as f64,
            loss_obj: sums[1] / nb as f64,
            loss_cls: sums[2] / nb as f64,
            val_precision: None,
            val_recall: None,
            val_map50: None,
            val_f1: None,
        };
        let due = (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs;
        if !val.is_empty() && due {
            let m = validate(&det, val, cfg)?;
            rec.val_precision = Some(m.precision);
            rec.val_recall = Some(m.recall);
            rec.val_map50 = Some(m.ap50);
            rec.val_f1 = Some(m.f1);
            if best.as_ref().is_none_or(|(_, _, b)| m.ap50 > *b) {
                best = Some((det.clone(), epoch + 1, m.ap50));
            }
        }
        log::info!(
            "epoch {}/{}: box {:.4} obj {:.4} cls {:.4} val mAP50 {}",
            epoch + 1,
            cfg.epochs,
            rec.loss_box,
            rec.loss_obj,
            rec.loss_cls,
            rec.val_map50.map_or("-".to_string(), |v| format!("{v:.4}"))
        );
        history.epochs.push(rec);
        last_good = det.clone();
    }
    if let Some(d) = &diverged {
        log::warn!("training diverged at epoch {} iteration {} ({}); keeping last good weights", d.epoch, d.iteration, d.component);
    }
    let (best, best_epoch, best_map50) = match best {
        Some((d, e, m)) => (d, Some(e), Some(m)),
        None => (last_good.clone(), None, None),
    };
    Ok(FitResult { best, last: last_good, history, best_epoch, best_map50, diverged })
}

/// Load both splits at the model's input size and train. The splits must
/// not share a source image; evaluation-only records are left out of training.
pub fn fit_manifests(det: Detector<f32>, train: &DatasetManifest, val: &DatasetManifest, cfg: &TrainConfig) -> Result<FitResult> {
    let train_sources: BTreeSet<&str> = train.records.iter().map(|r| r.source_id.as_str()).collect();
    if let Some(r) = val.records.iter().find(|r| train_sources.contains(r.source_id.as_str())) {
        return Err(Error::InvalidParam(format!("source {} appears in both training and validation data", r.source_id)));
    }
    let size = det.config().input_size as u32;
    let train_samples = train
        .records
        .iter()
        .filter(|r| !r.eval_only)
        .map(|r| load_sample(train, r, size))
        .collect::<Result<Vec<_>>>()?;
    let val_samples = load_samples(val, size)?;
    fit(det, &train_samples, &val_samples, cfg)
}
