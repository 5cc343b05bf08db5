//! Swin Transformer encoder blocks operating on NHWC feature maps.

use std::sync::Arc;

use grapedet_tensor::{Ctx, Element, ParamId, ParamKind, ParamStore, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::blocks::ConvBlock;
use crate::model::config::SwinConfig;

/// Logit offset for token pairs from different regions of a shifted window.
pub const MASK_FILL: f64 = -1e4;

const LN_EPS: f64 = 1e-5;

/// Truncated normal `N(0, std²)` clipped to ±2 std.
fn trunc_normal<F: Element>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<F> {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = dist.sample(rng);
            if v.abs() <= 2.0 * std {
                break F::lit(v);
            }
        })
        .collect();
    Tensor::new(shape, data).expect("init shape")
}

/// Source offsets for `out[b, win, t, c] = x[b, (y + shift) mod H, (x + shift) mod W, c]`
/// where `(y, x)` is token `t` of window `win` in raster order. The output is
/// laid out `[B · nW, M², C]`.
fn partition_index(b: usize, h: usize, w: usize, c: usize, m: usize, shift: usize) -> Vec<usize> {
    let (nh, nw) = (h / m, w / m);
    let mut idx = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        for wy in 0..nh {
            for wx in 0..nw {
                for ty in 0..m {
                    for tx in 0..m {
                        let y = (wy * m + ty + shift) % h;
                        let x = (wx * m + tx + shift) % w;
                        let base = ((bi * h + y) * w + x) * c;
                        idx.extend(base..base + c);
                    }
                }
            }
        }
    }
    idx
}

/// Inverse permutation of [`partition_index`].
fn reverse_index(b: usize, h: usize, w: usize, c: usize, m: usize, shift: usize) -> Vec<usize> {
    let fwd = partition_index(b, h, w, c, m, shift);
    let mut inv = vec![0; fwd.len()];
    for (i, &src) in fwd.iter().enumerate() {
        inv[src] = i;
    }
    inv
}

fn nhwc(t: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *t {
        [b, h, w, c] => Ok((b, h, w, c)),
        _ => Err(Error::Shape(format!("expected NHWC tensor, got {t:?}"))),
    }
}

fn check_window(h: usize, w: usize, m: usize) -> Result<()> {
    if m == 0 || h % m != 0 || w % m != 0 {
        return Err(Error::Shape(format!("feature map {h}×{w} is not divisible by window size {m}")));
    }
    Ok(())
}

/// Split `[B, H, W, C]` into non-overlapping `M × M` windows, `[B · nW, M², C]`.
pub fn window_partition<F: Element>(x: &Tensor<F>, m: usize) -> Result<Tensor<F>> {
    let (b, h, w, c) = nhwc(x.shape())?;
    check_window(h, w, m)?;
    let d = x.data();
    let data = partition_index(b, h, w, c, m, 0).into_iter().map(|i| d[i]).collect();
    Ok(Tensor::new(&[b * (h / m) * (w / m), m * m, c], data)?)
}

/// Inverse of [`window_partition`].
pub fn window_reverse<F: Element>(windows: &Tensor<F>, m: usize, h: usize, w: usize) -> Result<Tensor<F>> {
    check_window(h, w, m)?;
    let s = windows.shape();
    if s.len() != 3 || s[1] != m * m || s[0] % ((h / m) * (w / m)) != 0 {
        return Err(Error::Shape(format!("{s:?} is not a window stack for {h}×{w} / {m}")));
    }
    let (b, c) = (s[0] / ((h / m) * (w / m)), s[2]);
    let d = windows.data();
    let data = reverse_index(b, h, w, c, m, 0).into_iter().map(|i| d[i]).collect();
    Ok(Tensor::new(&[b, h, w, c], data)?)
}

/// Cyclic shift of the spatial axes of `[B, H, W, C]` so that
/// `out[y, x] = x[(y - shift) mod H, (x - shift) mod W]`.
pub fn roll<F: Element>(x: &Tensor<F>, shift: isize) -> Result<Tensor<F>> {
    let (b, h, w, c) = nhwc(x.shape())?;
    let d = x.data();
    let mut out = Vec::with_capacity(d.len());
    for bi in 0..b {
        for y in 0..h {
            let sy = (y as isize - shift).rem_euclid(h as isize) as usize;
            for xx in 0..w {
                let sx = (xx as isize - shift).rem_euclid(w as isize) as usize;
                let base = ((bi * h + sy) * w + sx) * c;
                out.extend_from_slice(&d[base..base + c]);
            }
        }
    }
    Ok(Tensor::new(x.shape(), out)?)
}

/// Additive attention mask `[nW, M², M²]` for shifted windows of an `H × W`
/// map: 0 within a region, [`MASK_FILL`] across regions.
pub fn attention_mask(h: usize, w: usize, m: usize, shift: usize) -> Result<Tensor<f64>> {
    check_window(h, w, m)?;
    let region = |v: usize, size: usize| -> usize {
        if v < size - m {
            0
        } else if v < size - shift {
            1
        } else {
            2
        }
    };
    let mut labels = Tensor::<f64>::zeros(&[1, h, w, 1]);
    for y in 0..h {
        for x in 0..w {
            labels.data_mut()[y * w + x] = (region(y, h) * 3 + region(x, w)) as f64;
        }
    }
    let win = window_partition(&labels, m)?;
    let (nw, n) = (win.dim(0), m * m);
    let mut mask = Tensor::zeros(&[nw, n, n]);
    for k in 0..nw {
        let lab = &win.data()[k * n..(k + 1) * n];
        for i in 0..n {
            for j in 0..n {
                if lab[i] != lab[j] {
                    mask.data_mut()[(k * n + i) * n + j] = MASK_FILL;
                }
            }
        }
    }
    Ok(mask)
}

/// `rel[i, j]` indexes the `(2M − 1)²` bias table for tokens `i`, `j` of a window.
pub fn relative_position_index(m: usize) -> Vec<usize> {
    let n = m * m;
    let span = 2 * m - 1;
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let dy = (i / m) + m - 1 - (j / m);
            let dx = (i % m) + m - 1 - (j % m);
            idx.push(dy * span + dx);
        }
    }
    idx
}

/// Multi-head self-attention inside windows, with a learned relative position bias.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub dim: usize,
    pub num_heads: usize,
    pub window: usize,
    qkv_w: ParamId,
    qkv_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    pub bias_table: ParamId,
}

impl WindowAttention {
    pub fn new<F: Element>(
        store: &mut ParamStore<F>,
        path: &str,
        dim: usize,
        num_heads: usize,
        window: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if num_heads == 0 || dim % num_heads != 0 {
            return Err(Error::Config(format!("{path}: dim {dim} not divisible by {num_heads} heads")));
        }
        let span = 2 * window - 1;
        let bias_table = store.add(
            format!("{path}.relative_position_bias_table"),
            ParamKind::Bias,
            trunc_normal(&[span * span, num_heads], 0.02, rng),
        )?;
        let qkv_w = store.add(format!("{path}.qkv.weight"), ParamKind::Weight, trunc_normal(&[3 * dim, dim], 0.02, rng))?;
        let qkv_b = store.add(format!("{path}.qkv.bias"), ParamKind::Bias, Tensor::zeros(&[3 * dim]))?;
        let proj_w = store.add(format!("{path}.proj.weight"), ParamKind::Weight, trunc_normal(&[dim, dim], 0.02, rng))?;
        let proj_b = store.add(format!("{path}.proj.bias"), ParamKind::Bias, Tensor::zeros(&[dim]))?;
        Ok(Self { dim, num_heads, window, qkv_w, qkv_b, proj_w, proj_b, bias_table })
    }

    /// `windows` is `[nWB, N, C]`; `mask` (if any) is `[nW, N, N]` with `nWB`
    /// a multiple of `nW`. Returns the projected output and the attention
    /// probabilities `[nWB, heads, N, N]`.
    pub fn forward<F: Element>(
        &self,
        cx: &mut Ctx<F>,
        windows: Var,
        mask: Option<&Tensor<f64>>,
    ) -> Result<(Var, Var)> {
        let s = cx.tape.shape(windows).to_vec();
        let (nwb, n, c) = match s[..] {
            [a, b, c] => (a, b, c),
            _ => return Err(Error::Shape(format!("window attention expects [nWB, N, C], got {s:?}"))),
        };
        if c != self.dim || n != self.window * self.window {
            return Err(Error::Shape(format!(
                "window attention built for {} tokens × {} channels, got {s:?}",
                self.window * self.window,
                self.dim
            )));
        }
        let heads = self.num_heads;
        let hd = c / heads;
        let w = cx.param(self.qkv_w);
        let b = cx.param(self.qkv_b);
        let qkv = cx.tape.linear(windows, w, Some(b));
        // split [nWB, N, 3, heads, hd] into three [nWB, heads, N, hd] tensors
        let split = |part: usize| -> Arc<Vec<usize>> {
            let mut idx = Vec::with_capacity(nwb * n * c);
            for wi in 0..nwb {
                for h in 0..heads {
                    for t in 0..n {
                        let base = (wi * n + t) * 3 * c + part * c + h * hd;
                        idx.extend(base..base + hd);
                    }
                }
            }
            Arc::new(idx)
        };
        let q = cx.tape.gather(qkv, split(0), &[nwb, heads, n, hd]);
        let k = cx.tape.gather(qkv, split(1), &[nwb, heads, n, hd]);
        let v = cx.tape.gather(qkv, split(2), &[nwb, heads, n, hd]);
        let q = cx.tape.scale(q, 1.0 / (hd as f64).sqrt());
        let logits = cx.tape.matmul(q, k, true);

        let table = cx.param(self.bias_table);
        let rel = relative_position_index(self.window);
        let mut bias_idx = Vec::with_capacity(heads * n * n);
        for h in 0..heads {
            bias_idx.extend(rel.iter().map(|&r| r * heads + h));
        }
        let bias = cx.tape.gather(table, Arc::new(bias_idx), &[heads, n, n]);
        let mut logits = cx.tape.add(logits, bias);

        if let Some(mask) = mask {
            let nw = mask.dim(0);
            if mask.shape() != [nw, n, n] || nwb % nw != 0 {
                return Err(Error::Shape(format!("mask {:?} does not fit {nwb} windows", mask.shape())));
            }
            let mut m = Vec::with_capacity(nw * heads * n * n);
            for wi in 0..nw {
                let plane = &mask.data()[wi * n * n..(wi + 1) * n * n];
                for _ in 0..heads {
                    m.extend(plane.iter().map(|&v| F::lit(v)));
                }
            }
            let m = cx.tape.constant(Tensor::new(&[nw, heads, n, n], m)?);
            logits = cx.tape.add(logits, m);
        }
        let attn = cx.tape.softmax(logits);
        let out = cx.tape.matmul(attn, v, false);
        let out = cx.tape.permute(out, &[0, 2, 1, 3]);
        let out = cx.tape.reshape(out, &[nwb, n, c]);
        let pw = cx.param(self.proj_w);
        let pb = cx.param(self.proj_b);
        Ok((cx.tape.linear(out, pw, Some(pb)), attn))
    }
}

#[derive(Clone, Debug)]
struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    fn new<F: Element>(store: &mut ParamStore<F>, path: &str, dim: usize) -> Result<Self> {
        let gamma = store.add(format!("{path}.weight"), ParamKind::Norm, Tensor::full(&[dim], F::one()))?;
        let beta = store.add(format!("{path}.bias"), ParamKind::Norm, Tensor::zeros(&[dim]))?;
        Ok(Self { gamma, beta })
    }

    fn forward<F: Element>(&self, cx: &mut Ctx<F>, x: Var) -> Var {
        let g = cx.param(self.gamma);
        let b = cx.param(self.beta);
        cx.tape.layer_norm(x, g, b, LN_EPS)
    }
}

#[derive(Clone, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new<F: Element>(store: &mut ParamStore<F>, path: &str, c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let w = store.add(format!("{path}.weight"), ParamKind::Weight, trunc_normal(&[c_out, c_in], 0.02, rng))?;
        let b = store.add(format!("{path}.bias"), ParamKind::Bias, Tensor::zeros(&[c_out]))?;
        Ok(Self { w, b })
    }

    fn forward<F: Element>(&self, cx: &mut Ctx<F>, x: Var) -> Var {
        let w = cx.param(self.w);
        let b = cx.param(self.b);
        cx.tape.linear(x, w, Some(b))
    }
}

/// One encoder block: (S)W-MSA and an MLP, each behind layer norm with a residual.
#[derive(Clone, Debug)]
pub struct SwinBlock {
    pub window: usize,
    /// Cyclic shift applied before partitioning; 0 for plain W-MSA.
    pub shift: usize,
    norm1: LayerNorm,
    pub attn: WindowAttention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl SwinBlock {
    pub fn new<F: Element>(
        store: &mut ParamStore<F>,
        path: &str,
        dim: usize,
        cfg: &SwinConfig,
        shifted: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let hidden = ((dim as f64) * cfg.mlp_ratio).round().max(1.0) as usize;
        Ok(Self {
            window: cfg.window_size,
            shift: if shifted { cfg.window_size / 2 } else { 0 },
            norm1: LayerNorm::new(store, &format!("{path}.norm1"), dim)?,
            attn: WindowAttention::new(store, &format!("{path}.attn"), dim, cfg.num_heads, cfg.window_size, rng)?,
            norm2: LayerNorm::new(store, &format!("{path}.norm2"), dim)?,
            fc1: Linear::new(store, &format!("{path}.mlp.fc1"), dim, hidden, rng)?,
            fc2: Linear::new(store, &format!("{path}.mlp.fc2"), hidden, dim, rng)?,
        })
    }

    pub fn forward<F: Element>(&self, cx: &mut Ctx<F>, x: Var) -> Result<Var> {
        Ok(self.forward_traced(cx, x)?.0)
    }

    /// Forward pass that also returns the attention probabilities.
    pub fn forward_traced<F: Element>(&self, cx: &mut Ctx<F>, x: Var) -> Result<(Var, Var)> {
        let (b, h, w, c) = nhwc(cx.tape.shape(x))?;
        let m = self.window;
        check_window(h, w, m)?;
        let n = m * m;
        let nwb = b * (h / m) * (w / m);

        let normed = self.norm1.forward(cx, x);
        let fwd = Arc::new(partition_index(b, h, w, c, m, self.shift));
        let windows = cx.tape.gather(normed, fwd, &[nwb, n, c]);
        let mask = if self.shift > 0 { Some(attention_mask(h, w, m, self.shift)?) } else { None };
        let (attended, attn) = self.attn.forward(cx, windows, mask.as_ref())?;
        let inv = Arc::new(reverse_index(b, h, w, c, m, self.shift));
        let merged = cx.tape.gather(attended, inv, &[b, h, w, c]);
        let x = cx.tape.add(x, merged);

        let normed = self.norm2.forward(cx, x);
        let hid = self.fc1.forward(cx, normed);
        let hid = cx.tape.gelu(hid);
        let out = self.fc2.forward(cx, hid);
        Ok((cx.tape.add(x, out), attn))
    }
}

/// Backbone stage built from Swin blocks, framed by 1×1 convolutions that
/// adapt channel widths to and from the embedding dimension.
#[derive(Clone, Debug)]
pub struct SwinStage {
    pub path: String,
    pub embed: ConvBlock,
    pub blocks: Vec<SwinBlock>,
    pub project: ConvBlock,
}

impl SwinStage {
    pub fn new<F: Element>(
        store: &mut ParamStore<F>,
        path: &str,
        c_in: usize,
        c_out: usize,
        cfg: &SwinConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let embed = ConvBlock::new(store, &format!("{path}.embed"), c_in, cfg.embed_dim, 1, 1, None, rng)?;
        let blocks = (0..cfg.depth)
            .map(|i| SwinBlock::new(store, &format!("{path}.blocks.{i}"), cfg.embed_dim, cfg, i % 2 == 1, rng))
            .collect::<Result<Vec<_>>>()?;
        let project = ConvBlock::new(store, &format!("{path}.project"), cfg.embed_dim, c_out, 1, 1, None, rng)?;
        Ok(Self { path: path.to_string(), embed, blocks, project })
    }

    pub fn forward<F: Element>(&self, cx: &mut Ctx<F>, x: Var) -> Result<Var> {
        Ok(self.forward_traced(cx, x)?.0)
    }

    /// Forward pass that also returns each block's attention probabilities.
    pub fn forward_traced<F: Element>(&self, cx: &mut Ctx<F>, x: Var) -> Result<(Var, Vec<Var>)> {
        let h = self.embed.forward(cx, x)?;
        let mut t = cx.tape.permute(h, &[0, 2, 3, 1]);
        let mut attns = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, a) = b.forward_traced(cx, t)?;
            t = y;
            attns.push(a);
        }
        let h = cx.tape.permute(t, &[0, 3, 1, 2]);
        Ok((self.project.forward(cx, h)?, attns))
    }
}

/// Random NHWC test input in `[-1, 1)`.
#[cfg(test)]
pub(crate) fn random_nhwc(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    use rand::Rng;
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn partition_reverse_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random_nhwc(&[2, 8, 4, 3], &mut rng);
        let w = window_partition(&x, 4).unwrap();
        assert_eq!(w.shape(), &[4, 16, 3]);
        assert_eq!(window_reverse(&w, 4, 8, 4).unwrap(), x);
        assert!(window_partition(&x, 3).is_err());
    }

    #[test]
    fn roll_inverts_and_matches_shifted_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_nhwc(&[1, 4, 4, 2], &mut rng);
        let r = roll(&x, -2).unwrap();
        assert_eq!(roll(&r, 2).unwrap(), x);
        // the fused gather index used in the block equals roll then partition
        let fused: Vec<f64> = partition_index(1, 4, 4, 2, 2, 2).into_iter().map(|i| x.data()[i]).collect();
        assert_eq!(fused, window_partition(&r, 2).unwrap().data());
    }

    #[test]
    fn unshifted_mask_regions_collapse_when_side_equals_window() {
        let m = attention_mask(4, 4, 4, 2).unwrap();
        assert_eq!(m.shape(), &[1, 16, 16]);
        // 2×2 regions of 2×2 tokens: each token sees 4 of 16
        for i in 0..16 {
            let open = m.data()[i * 16..(i + 1) * 16].iter().filter(|&&v| v == 0.0).count();
            assert_eq!(open, 4);
        }
    }

    #[test]
    fn relative_index_is_symmetric_about_center() {
        let m = 3;
        let idx = relative_position_index(m);
        let center = (m - 1) * (2 * m - 1) + (m - 1);
        for i in 0..m * m {
            assert_eq!(idx[i * m * m + i], center);
        }
        assert_eq!(*idx.iter().max().unwrap(), (2 * m - 1) * (2 * m - 1) - 1);
    }

    #[test]
    fn attention_rows_sum_to_one_and_mask_blocks_regions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = SwinConfig { window_size: 4, embed_dim: 8, num_heads: 2, mlp_ratio: 2.0, depth: 2 };
        let mut store = ParamStore::<f64>::new();
        let block = SwinBlock::new(&mut store, "b", 8, &cfg, true, &mut rng).unwrap();
        let mut cx = Ctx::inference(&store);
        let x = cx.tape.constant(random_nhwc(&[1, 8, 8, 8], &mut rng));
        let (y, attn) = block.forward_traced(&mut cx, x).unwrap();
        assert_eq!(cx.tape.shape(y), &[1, 8, 8, 8]);
        let a = cx.tape.value(attn);
        assert_eq!(a.shape(), &[4, 2, 16, 16]);
        for row in a.data().chunks(16) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let mask = attention_mask(8, 8, 4, 2).unwrap();
        for w in 0..4 {
            for h in 0..2 {
                for i in 0..16 {
                    for j in 0..16 {
                        if mask.data()[(w * 16 + i) * 16 + j] != 0.0 {
                            assert!(a.at(&[w, h, i, j]) < 1e-6);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn stage_keeps_spatial_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = SwinConfig { window_size: 2, embed_dim: 8, num_heads: 2, mlp_ratio: 2.0, depth: 2 };
        let mut store = ParamStore::<f64>::new();
        let stage = SwinStage::new(&mut store, "s", 16, 24, &cfg, &mut rng).unwrap();
        assert_eq!(stage.blocks.iter().map(|b| b.shift).collect::<Vec<_>>(), [0, 1]);
        let mut cx = Ctx::inference(&store);
        let n = 2 * 16 * 4 * 4;
        let x = cx.tape.constant(Tensor::new(&[2, 16, 4, 4], (0..n).map(|i| (i as f64 * 0.1).cos()).collect()).unwrap());
        let y = stage.forward(&mut cx, x).unwrap();
        assert_eq!(cx.tape.shape(y), &[2, 24, 4, 4]);
    }
}
