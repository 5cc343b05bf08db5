use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Output strides of the three detection scales.
pub const STRIDES: [usize; 3] = [8, 16, 32];

/// Anchors per scale.
pub const NUM_ANCHORS: usize = 3;

pub const SPPF_KERNEL: usize = 5;

/// YOLOv5's canonical anchors at 640 px input, `(w, h)` per stride 8/16/32.
pub const CANONICAL_ANCHORS: [[[f64; 2]; 3]; 3] = [
    [[10.0, 13.0], [16.0, 30.0], [33.0, 23.0]],
    [[30.0, 61.0], [62.0, 45.0], [59.0, 119.0]],
    [[116.0, 90.0], [156.0, 198.0], [373.0, 326.0]],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SwinConfig {
    pub window_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    /// Encoder blocks per replaced stage; alternates W-MSA / SW-MSA.
    pub depth: usize,
}

impl Default for SwinConfig {
    fn default() -> Self {
        Self { window_size: 4, embed_dim: 96, num_heads: 3, mlp_ratio: 4.0, depth: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Square network input side in pixels; a multiple of 32.
    pub input_size: usize,
    pub width_multiple: f64,
    pub depth_multiple: f64,
    /// `(w, h)` anchor sizes in input pixels, per stride 8/16/32.
    pub anchors: [[[f64; 2]; 3]; 3],
    pub num_classes: usize,
    pub swin: SwinConfig,
    /// How many trailing backbone C3 stages become Swin stages; 0 is plain YOLOv5.
    pub swin_stages: usize,
    /// Keep the SPPF block after the last backbone stage.
    pub sppf: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl ModelConfig {
    /// Desk-scale configuration: trainable on a laptop CPU in minutes.
    pub fn tiny() -> Self {
        Self {
            input_size: 256,
            width_multiple: 0.25,
            depth_multiple: 0.33,
            anchors: scaled_anchors(256),
            num_classes: 1,
            swin: SwinConfig::default(),
            swin_stages: 1,
            sppf: true,
        }
    }

    /// Smallest configuration used for finite-difference checks.
    pub fn gradcheck() -> Self {
        Self {
            input_size: 64,
            width_multiple: 0.25,
            depth_multiple: 0.33,
            anchors: scaled_anchors(64),
            num_classes: 1,
            swin: SwinConfig { window_size: 2, embed_dim: 16, num_heads: 2, mlp_ratio: 2.0, depth: 2 },
            swin_stages: 1,
            // the 2×2 stride-32 map is smaller than the SPPF pool
            sppf: false,
        }
    }

    /// Change the input size, rescaling anchors proportionally.
    pub fn with_input_size(mut self, size: usize) -> Self {
        let r = size as f64 / self.input_size as f64;
        for scale in &mut self.anchors {
            for a in scale.iter_mut() {
                a[0] *= r;
                a[1] *= r;
            }
        }
        self.input_size = size;
        self
    }

    pub fn baseline(mut self) -> Self {
        self.swin_stages = 0;
        self
    }

    /// Channel width after applying the width multiple (rounded up to 8).
    pub fn channels(&self, base: usize) -> usize {
        let c = (base as f64 * self.width_multiple / 8.0).ceil() as usize * 8;
        c.max(8)
    }

    /// Bottleneck repeats after applying the depth multiple.
    pub fn repeats(&self, base: usize) -> usize {
        ((base as f64 * self.depth_multiple).round() as usize).max(1)
    }

    pub fn outputs_per_anchor(&self) -> usize {
        5 + self.num_classes
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return bad(format!("model.input_size {} is not a positive multiple of 32", self.input_size));
        }
        if !(self.width_multiple > 0.0) || !(self.depth_multiple > 0.0) {
            return bad("model.width_multiple and model.depth_multiple must be positive".into());
        }
        if self.num_classes == 0 {
            return bad("model.num_classes must be at least 1".into());
        }
        if self.anchors.iter().flatten().any(|a| !(a[0] > 0.0 && a[1] > 0.0)) {
            return bad("model.anchors must be positive".into());
        }
        if self.sppf && self.input_size / 32 < SPPF_KERNEL {
            return bad(format!(
                "model.input_size {} leaves a stride-32 map smaller than the SPPF pool {SPPF_KERNEL}; disable model.sppf",
                self.input_size
            ));
        }
        if self.swin_stages > 4 {
            return bad(format!("model.swin_stages {} exceeds the 4 backbone C3 stages", self.swin_stages));
        }
        if self.swin_stages > 0 {
            let s = &self.swin;
            if s.window_size == 0 {
                return bad("model.swin.window_size must be positive".into());
            }
            if s.embed_dim == 0 || s.num_heads == 0 || s.embed_dim % s.num_heads != 0 {
                return bad(format!(
                    "model.swin.embed_dim {} is not divisible by model.swin.num_heads {}",
                    s.embed_dim, s.num_heads
                ));
            }
            if s.depth == 0 || s.depth % 2 != 0 {
                return bad(format!("model.swin.depth {} must be even and non-zero", s.depth));
            }
            if !(s.mlp_ratio > 0.0) {
                return bad("model.swin.mlp_ratio must be positive".into());
            }
            for stride in self.swin_strides() {
                let side = self.input_size / stride;
                if side < s.window_size || side % s.window_size != 0 {
                    return bad(format!(
                        "feature side {side} at stride {stride} is not divisible by model.swin.window_size {}",
                        s.window_size
                    ));
                }
            }
        }
        Ok(())
    }

    /// Strides of the backbone stages replaced by Swin encoder blocks.
    pub fn swin_strides(&self) -> Vec<usize> {
        [4, 8, 16, 32].into_iter().rev().take(self.swin_stages).collect()
    }
}

pub fn scaled_anchors(input_size: usize) -> [[[f64; 2]; 3]; 3] {
    let r = input_size as f64 / 640.0;
    let mut a = CANONICAL_ANCHORS;
    for scale in &mut a {
        for p in scale.iter_mut() {
            p[0] *= r;
            p[1] *= r;
        }
    }
    a
}
