use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub initial: f64,
    /// Final learning rate as a fraction of `initial`.
    pub final_fraction: f64,
    pub warmup_epochs: f64,
    pub warmup_bias_lr: f64,
    pub warmup_momentum: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { initial: 0.1, final_fraction: 0.01, warmup_epochs: 3.0, warmup_bias_lr: 0.1, warmup_momentum: 0.8 }
    }
}

impl LrSchedule {
    /// Cosine factor from 1 at epoch 0 to `final_fraction` at `epochs`.
    pub fn factor(&self, epoch: usize, epochs: usize) -> f64 {
        let t = epoch as f64 / epochs.max(1) as f64;
        ((1.0 - (t * std::f64::consts::PI).cos()) / 2.0) * (self.final_fraction - 1.0) + 1.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    #[serde(rename = "box")]
    pub box_: f64,
    pub obj: f64,
    pub cls: f64,
    /// Objectness weight per output scale, finest first.
    pub obj_balance: [f64; 3],
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { box_: 0.05, obj: 1.0, cls: 0.5, obj_balance: [4.0, 1.0, 0.4] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub weight_decay: f64,
    pub loss: LossWeights,
    pub anchor_ratio_threshold: f64,
    /// Probability of a horizontal flip per training sample.
    pub flip_lr: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub bn_momentum: f64,
    /// Validate every this many epochs (the last epoch always validates).
    pub eval_every: usize,
    pub val_conf_threshold: f64,
    pub val_nms_iou: f64,
    pub val_iou_threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 4,
            lr: LrSchedule::default(),
            optimizer: OptimizerKind::Sgd,
            momentum: 0.937,
            weight_decay: 5e-4,
            loss: LossWeights::default(),
            anchor_ratio_threshold: 4.0,
            flip_lr: 0.5,
            grad_clip: 10.0,
            bn_momentum: 0.03,
            eval_every: 1,
            val_conf_threshold: 0.001,
            val_nms_iou: 0.6,
            val_iou_threshold: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Checks the invariants. `epochs = 0` is accepted and trains nothing.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1".into());
        }
        let w = &self.loss;
        if !(w.box_ > 0.0 && w.obj > 0.0 && w.cls > 0.0) || w.obj_balance.iter().any(|&b| !(b > 0.0)) {
            return bad(format!("loss weights must be > 0, got {w:?}"));
        }
        if !(self.anchor_ratio_threshold > 1.0) {
            return bad(format!("anchor_ratio_threshold must be > 1, got {}", self.anchor_ratio_threshold));
        }
        if !(self.lr.initial > 0.0) || !(0.0..=1.0).contains(&self.lr.final_fraction) || !(self.lr.warmup_epochs >= 0.0) {
            return bad(format!("invalid learning-rate schedule {:?}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.flip_lr) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("flip_lr and bn_momentum must lie in [0, 1]".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be ≥ 1".into());
        }
        Ok(())
    }
}
