use std::path::{Path, PathBuf};

use anyhow::Context;
use grapedet::data::{Split, SynthProfile};
use grapedet::evaluate::R2Mode;
use grapedet::model::ModelConfig;
use grapedet::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::UsageError;

pub const RUN_CONFIG_SCHEMA: &str = "1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Dataset directory holding `manifest.jsonl`.
    pub dir: Option<PathBuf>,
    /// Split evaluated by `eval`; `None` evaluates every record.
    pub eval_split: Option<Split>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { dir: None, eval_split: Some(Split::Test) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub iou_threshold: f64,
    /// Confidence floor for detections entering AP.
    pub conf_threshold: f64,
    pub nms_iou: f64,
    /// Fixed operating threshold; absent means maximum F1 on the evaluated set.
    pub operating_threshold: Option<f64>,
    pub r2_mode: R2Mode,
    pub batch_size: usize,
    /// Latency repetitions after warm-up; 0 skips the benchmark.
    pub benchmark_reps: usize,
    /// Free-form hardware description recorded with latency numbers.
    pub hardware: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            conf_threshold: 0.001,
            nms_iou: 0.6,
            operating_threshold: None,
            r2_mode: R2Mode::Ols,
            batch_size: 8,
            benchmark_reps: 0,
            hardware: String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictSection {
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub annotate: bool,
}

impl Default for PredictSection {
    fn default() -> Self {
        Self { conf_threshold: 0.25, nms_iou: 0.6, annotate: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub n: usize,
    pub profile: SynthProfile,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self { n: 20, profile: SynthProfile::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSection {
    /// Variants planned per raw image.
    pub n: usize,
}

impl Default for AugmentSection {
    fn default() -> Self {
        Self { n: 9 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub ratios: [f64; 3],
}

impl Default for SplitSection {
    fn default() -> Self {
        Self { ratios: [0.8, 0.1, 0.1] }
    }
}

/// Fully resolved configuration of one command invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub device: String,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub predict: PredictSection,
    #[serde(default)]
    pub synth: SynthSection,
    #[serde(default)]
    pub augment: AugmentSection,
    #[serde(default)]
    pub split: SplitSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: RUN_CONFIG_SCHEMA.to_string(),
            seed: 0,
            device: "cpu".to_string(),
            out_dir: None,
            data: DataSection::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            predict: PredictSection::default(),
            synth: SynthSection::default(),
            augment: AugmentSection::default(),
            split: SplitSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| UsageError(format!("config {}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// Propagate the run seed and check every section.
    pub fn resolve(mut self) -> anyhow::Result<Self> {
        if self.schema_version != RUN_CONFIG_SCHEMA {
            return Err(UsageError(format!(
                "schema_version: expected \"{RUN_CONFIG_SCHEMA}\", got \"{}\"",
                self.schema_version
            ))
            .into());
        }
        if self.device.is_empty() {
            self.device = "cpu".to_string();
        }
        if self.device != "cpu" {
            return Err(UsageError(format!("device: only \"cpu\" is supported, got \"{}\"", self.device)).into());
        }
        self.train.seed = self.seed;
        self.model.validate().map_err(|e| UsageError(format!("model: {e}")))?;
        self.train.validate().map_err(|e| UsageError(format!("train: {e}")))?;
        let e = &self.eval;
        for (key, v) in [("eval.iou_threshold", e.iou_threshold), ("eval.nms_iou", e.nms_iou), ("eval.conf_threshold", e.conf_threshold)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(UsageError(format!("{key}: must lie in [0, 1], got {v}")).into());
            }
        }
        if let Some(t) = e.operating_threshold.filter(|t| !(0.0..=1.0).contains(t)) {
            return Err(UsageError(format!("eval.operating_threshold: must lie in [0, 1], got {t}")).into());
        }
        if e.batch_size == 0 {
            return Err(UsageError("eval.batch_size: must be ≥ 1".into()).into());
        }
        if e.benchmark_reps != 0 && e.benchmark_reps < 3 {
            return Err(UsageError(format!("eval.benchmark_reps: must be 0 or ≥ 3, got {}", e.benchmark_reps)).into());
        }
        if !(0.0..=1.0).contains(&self.predict.conf_threshold) {
            return Err(UsageError(format!("predict.conf_threshold: must lie in [0, 1], got {}", self.predict.conf_threshold)).into());
        }
        if self.synth.n == 0 {
            return Err(UsageError("synth.n: must be ≥ 1".into()).into());
        }
        let r = self.split.ratios;
        if r.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(UsageError(format!("split.ratios: must be non-negative and sum to 1, got {r:?}")).into());
        }
        if let Some(dir) = &self.data.dir {
            if !dir.join("manifest.jsonl").is_file() {
                return Err(UsageError(format!("data.dir: no manifest.jsonl in {}", dir.display())).into());
            }
        }
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_named() {
        let err = serde_json::from_str::<RunConfig>(r#"{"schema_version": "1", "trian": {}}"#).unwrap_err();
        assert!(err.to_string().contains("trian"));
        let err = serde_json::from_str::<RunConfig>(r#"{"schema_version": "1", "train": {"epoch": 3}}"#).unwrap_err();
        assert!(err.to_string().contains("epoch"));
    }

    #[test]
    fn schema_version_required() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"seed": 1}"#).is_err());
        let wrong = RunConfig { schema_version: "0".into(), ..RunConfig::default() };
        assert!(wrong.resolve().is_err());
    }

    #[test]
    fn seed_propagates() {
        let cfg = RunConfig { seed: 42, ..RunConfig::default() }.resolve().unwrap();
        assert_eq!(cfg.train.seed, 42);
    }
}
