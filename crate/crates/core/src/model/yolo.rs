use std::fmt;

use grapedet_tensor::{Ctx, Element, ParamId, ParamKind, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::blocks::{uniform_init, ConvBlock, Sppf, C3};
use crate::model::config::{ModelConfig, NUM_ANCHORS, SPPF_KERNEL, STRIDES};
use crate::model::swin::SwinStage;

/// A backbone stage after a downsampling conv: CSP bottlenecks or Swin blocks.
#[derive(Clone, Debug)]
pub enum Stage {
    C3(C3),
    Swin(SwinStage),
}

impl Stage {
    fn forward<F: Element>(&self, cx: &mut Ctx<F>, x: Var) -> Result<Var> {
        match self {
            Stage::C3(b) => b.forward(cx, x),
            Stage::Swin(s) => s.forward(cx, x),
        }
    }
}

/// Per-scale 1×1 prediction convolutions.
#[derive(Clone, Debug)]
pub struct Detect {
    weights: Vec<ParamId>,
    biases: Vec<ParamId>,
    pub outputs_per_anchor: usize,
}

impl Detect {
    fn new<F: Element>(
        store: &mut ParamStore<F>,
        path: &str,
        channels: [usize; 3],
        cfg: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let no = cfg.outputs_per_anchor();
        let (mut weights, mut biases) = (Vec::new(), Vec::new());
        for (i, (&c, &s)) in channels.iter().zip(&STRIDES).enumerate() {
            let w = uniform_init(&[NUM_ANCHORS * no, c, 1, 1], c, rng);
            let mut b: Tensor<F> = uniform_init(&[NUM_ANCHORS * no], c, rng);
            // prior of ~8 objects per image and a uniform class prior
            let cells = (cfg.input_size as f64 / s as f64).powi(2);
            let obj = (8.0 / cells).ln();
            let cls = (0.6 / (cfg.num_classes as f64 - 0.99)).ln();
            for a in 0..NUM_ANCHORS {
                let d = b.data_mut();
                d[a * no + 4] += F::lit(obj);
                for k in 5..no {
                    d[a * no + k] += F::lit(cls);
                }
            }
            weights.push(store.add(format!("{path}.m.{i}.weight"), ParamKind::Weight, w)?);
            biases.push(store.add(format!("{path}.m.{i}.bias"), ParamKind::Bias, b)?);
        }
        Ok(Self { weights, biases, outputs_per_anchor: no })
    }

    /// Maps `[B, 3·no, H, W]` to `[B, 3, H, W, no]`.
    fn forward<F: Element>(&self, cx: &mut Ctx<F>, feats: [Var; 3]) -> Vec<Var> {
        let no = self.outputs_per_anchor;
        feats
            .iter()
            .enumerate()
            .map(|(i, &f)| {
                let w = cx.param(self.weights[i]);
                let b = cx.param(self.biases[i]);
                let y = cx.tape.conv2d(f, w, Some(b), 1, 0);
                let s = cx.tape.shape(y).to_vec();
                let y = cx.tape.reshape(y, &[s[0], NUM_ANCHORS, no, s[2], s[3]]);
                cx.tape.permute(y, &[0, 1, 3, 4, 2])
            })
            .collect()
    }
}

/// One entry of the layer table, numbered like the reference YOLOv5 layout.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerInfo {
    pub index: usize,
    pub kind: &'static str,
    pub c_out: usize,
    /// Output stride relative to the input image.
    pub stride: usize,
    /// Bottlenecks in a C3, encoder blocks in a Swin stage, 0 otherwise.
    pub repeats: usize,
    pub params: usize,
}

/// YOLOv5 detector graph with optional Swin stages in the backbone.
#[derive(Clone, Debug)]
pub struct SwinYolo {
    pub cfg: ModelConfig,
    stem: ConvBlock,
    /// `(downsample, stage)` for strides 4, 8, 16, 32.
    backbone: Vec<(ConvBlock, Stage)>,
    sppf: Option<Sppf>,
    lateral5: ConvBlock,
    top_down4: C3,
    lateral4: ConvBlock,
    top_down3: C3,
    down3: ConvBlock,
    bottom_up4: C3,
    down4: ConvBlock,
    bottom_up5: C3,
    pub detect: Detect,
}

impl SwinYolo {
    /// Registers all parameters in `store`; layer names follow `model.<index>.…`.
    pub fn new<F: Element>(cfg: &ModelConfig, store: &mut ParamStore<F>, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let ch = |b| cfg.channels(b);
        let n = |b| cfg.repeats(b);
        let swin_from = 4 - cfg.swin_stages;
        let stem = ConvBlock::new(store, "model.0", 3, ch(64), 6, 2, Some(2), rng)?;
        let widths = [ch(128), ch(256), ch(512), ch(1024)];
        let depths = [n(3), n(6), n(9), n(3)];
        let mut backbone = Vec::new();
        let mut c_prev = ch(64);
        for (i, (&c, &d)) in widths.iter().zip(&depths).enumerate() {
            let idx = 1 + 2 * i;
            let down = ConvBlock::new(store, &format!("model.{idx}"), c_prev, c, 3, 2, None, rng)?;
            let path = format!("model.{}", idx + 1);
            let stage = if i >= swin_from {
                Stage::Swin(SwinStage::new(store, &path, c, c, &cfg.swin, rng)?)
            } else {
                Stage::C3(C3::new(store, &path, c, c, d, true, rng)?)
            };
            backbone.push((down, stage));
            c_prev = c;
        }
        let sppf = if cfg.sppf { Some(Sppf::new(store, "model.9", ch(1024), ch(1024), SPPF_KERNEL, rng)?) } else { None };
        let lateral5 = ConvBlock::new(store, "model.10", ch(1024), ch(512), 1, 1, None, rng)?;
        let top_down4 = C3::new(store, "model.13", 2 * ch(512), ch(512), n(3), false, rng)?;
        let lateral4 = ConvBlock::new(store, "model.14", ch(512), ch(256), 1, 1, None, rng)?;
        let top_down3 = C3::new(store, "model.17", 2 * ch(256), ch(256), n(3), false, rng)?;
        let down3 = ConvBlock::new(store, "model.18", ch(256), ch(256), 3, 2, None, rng)?;
        let bottom_up4 = C3::new(store, "model.20", 2 * ch(256), ch(512), n(3), false, rng)?;
        let down4 = ConvBlock::new(store, "model.21", ch(512), ch(512), 3, 2, None, rng)?;
        let bottom_up5 = C3::new(store, "model.23", 2 * ch(512), ch(1024), n(3), false, rng)?;
        let detect = Detect::new(store, "model.24", [ch(256), ch(512), ch(1024)], cfg, rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            stem,
            backbone,
            sppf,
            lateral5,
            top_down4,
            lateral4,
            top_down3,
            down3,
            bottom_up4,
            down4,
            bottom_up5,
            detect,
        })
    }

    /// Raw head outputs, `[B, 3, H/s, W/s, 5 + classes]` for s = 8, 16, 32.
    pub fn forward<F: Element>(&self, cx: &mut Ctx<F>, images: Var) -> Result<Vec<Var>> {
        let s = cx.tape.shape(images).to_vec();
        let size = self.cfg.input_size;
        if s.len() != 4 || s[1] != 3 || s[2] % 32 != 0 || s[3] % 32 != 0 || s[2] == 0 || s[3] == 0 {
            return Err(Error::Shape(format!("expected [B, 3, H, W] with H, W multiples of 32, got {s:?}")));
        }
        let swin_side = if self.cfg.swin_stages > 0 { self.cfg.swin.window_size } else { 1 };
        for stride in self.cfg.swin_strides() {
            if (s[2] / stride) % swin_side != 0 || (s[3] / stride) % swin_side != 0 {
                return Err(Error::Shape(format!(
                    "input {}×{} gives a stride-{stride} map not divisible by window size {swin_side} (configured for {size})",
                    s[2], s[3]
                )));
            }
        }
        let mut x = self.stem.forward(cx, images)?;
        let mut taps = Vec::with_capacity(4);
        for (down, stage) in &self.backbone {
            x = down.forward(cx, x)?;
            x = stage.forward(cx, x)?;
            taps.push(x);
        }
        let (p3, p4) = (taps[1], taps[2]);
        let mut p5 = taps[3];
        if let Some(sppf) = &self.sppf {
            p5 = sppf.forward(cx, p5)?;
        }
        let l5 = self.lateral5.forward(cx, p5)?;
        let up = cx.tape.upsample2x(l5);
        let cat = cx.tape.concat(&[up, p4], 1);
        let t4 = self.top_down4.forward(cx, cat)?;
        let l4 = self.lateral4.forward(cx, t4)?;
        let up = cx.tape.upsample2x(l4);
        let cat = cx.tape.concat(&[up, p3], 1);
        let out3 = self.top_down3.forward(cx, cat)?;
        let d = self.down3.forward(cx, out3)?;
        let cat = cx.tape.concat(&[d, l4], 1);
        let out4 = self.bottom_up4.forward(cx, cat)?;
        let d = self.down4.forward(cx, out4)?;
        let cat = cx.tape.concat(&[d, l5], 1);
        let out5 = self.bottom_up5.forward(cx, cat)?;
        Ok(self.detect.forward(cx, [out3, out4, out5]))
    }

    /// Layer table in execution order.
    pub fn describe<F: Element>(&self, store: &ParamStore<F>) -> Vec<LayerInfo> {
        let count = |prefix: &str| -> usize {
            let dotted = format!("{prefix}.");
            store
                .iter()
                .filter(|(_, p)| p.kind.trainable() && p.name.starts_with(&dotted))
                .map(|(_, p)| p.value.numel())
                .sum()
        };
        let mut rows = Vec::new();
        let mut push = |index: usize, kind: &'static str, c_out: usize, stride: usize, repeats: usize| {
            rows.push(LayerInfo { index, kind, c_out, stride, repeats, params: count(&format!("model.{index}")) });
        };
        push(0, "Conv", self.stem.c_out, 2, 0);
        for (i, (down, stage)) in self.backbone.iter().enumerate() {
            let stride = 4 << i;
            push(1 + 2 * i, "Conv", down.c_out, stride, 0);
            match stage {
                Stage::C3(c) => push(2 + 2 * i, "C3", c.c_out, stride, c.bottlenecks.len()),
                Stage::Swin(s) => push(2 + 2 * i, "SwinStage", s.project.c_out, stride, s.blocks.len()),
            }
        }
        if let Some(s) = &self.sppf {
            push(9, "SPPF", s.cv2.c_out, 32, 0);
        }
        push(10, "Conv", self.lateral5.c_out, 32, 0);
        push(11, "Upsample", self.lateral5.c_out, 16, 0);
        push(12, "Concat", self.top_down4.c_in, 16, 0);
        push(13, "C3", self.top_down4.c_out, 16, self.top_down4.bottlenecks.len());
        push(14, "Conv", self.lateral4.c_out, 16, 0);
        push(15, "Upsample", self.lateral4.c_out, 8, 0);
        push(16, "Concat", self.top_down3.c_in, 8, 0);
        push(17, "C3", self.top_down3.c_out, 8, self.top_down3.bottlenecks.len());
        push(18, "Conv", self.down3.c_out, 16, 0);
        push(19, "Concat", self.bottom_up4.c_in, 16, 0);
        push(20, "C3", self.bottom_up4.c_out, 16, self.bottom_up4.bottlenecks.len());
        push(21, "Conv", self.down4.c_out, 32, 0);
        push(22, "Concat", self.bottom_up5.c_in, 32, 0);
        push(23, "C3", self.bottom_up5.c_out, 32, self.bottom_up5.bottlenecks.len());
        push(24, "Detect", NUM_ANCHORS * self.detect.outputs_per_anchor, 8, 0);
        rows
    }

    pub fn backbone_stages(&self) -> impl Iterator<Item = &Stage> {
        self.backbone.iter().map(|(_, s)| s)
    }
}

/// Head outputs, one `[B, 3, H/s, W/s, 5 + classes]` tensor per stride.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionOutput<F> {
    pub scales: Vec<Tensor<F>>,
}

impl<F: Element> DetectionOutput<F> {
    pub fn batch(&self) -> usize {
        self.scales.first().map_or(0, |t| t.dim(0))
    }
}

/// A built graph together with its parameters.
#[derive(Clone)]
pub struct Detector<F> {
    pub net: SwinYolo,
    pub params: ParamStore<F>,
}

impl<F: Element> Detector<F> {
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = SwinYolo::new(cfg, &mut params, &mut rng)?;
        Ok(Self { net, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.cfg
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_trainable()
    }

    /// Inference-mode forward pass over `[B, 3, H, W]` images in `[0, 1]`.
    pub fn predict(&self, images: &Tensor<F>) -> Result<DetectionOutput<F>> {
        let mut cx = Ctx::inference(&self.params);
        let x = cx.tape.constant(images.clone());
        let outs = self.net.forward(&mut cx, x)?;
        Ok(DetectionOutput { scales: outs.into_iter().map(|v| cx.tape.value(v).clone()).collect() })
    }

    pub fn describe(&self) -> Vec<LayerInfo> {
        self.net.describe(&self.params)
    }

    pub fn cast<G: Element>(&self) -> Detector<G> {
        Detector { net: self.net.clone(), params: self.params.cast() }
    }
}

impl<F: Element> fmt::Display for Detector<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>3}  {:<10} {:>6} {:>6} {:>4} {:>10}", "idx", "kind", "c_out", "stride", "n", "params")?;
        for r in self.describe() {
            writeln!(f, "{:>3}  {:<10} {:>6} {:>6} {:>4} {:>10}", r.index, r.kind, r.c_out, r.stride, r.repeats, r.params)?;
        }
        write!(f, "total trainable parameters: {}", self.num_parameters())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn swin_replaces_only_the_last_backbone_c3() {
        let cfg = ModelConfig::tiny();
        let swin = Detector::<f32>::build(&cfg, 0).unwrap().describe();
        let base = Detector::<f32>::build(&cfg.clone().baseline(), 0).unwrap().describe();
        let at32 = |rows: &[LayerInfo], kind| rows.iter().filter(|r| r.index == 8 && r.kind == kind).count();
        assert_eq!(at32(&base, "C3"), 1);
        assert_eq!(at32(&swin, "C3"), 0);
        let stage = swin.iter().find(|r| r.kind == "SwinStage").unwrap();
        assert_eq!((stage.index, stage.stride, stage.repeats), (8, 32, cfg.swin.depth));
        assert_eq!(swin.iter().filter(|r| r.kind == "C3").count(), 3 + 4);
    }
}
