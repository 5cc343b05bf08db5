//! Convolutional building blocks of the YOLOv5 graph.

use grapedet_tensor::{Ctx, Element, ParamId, ParamKind, ParamStore, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub(crate) const BN_EPS: f64 = 1e-3;

/// `U(-1/√fan_in, 1/√fan_in)`, the default initialization of torch conv/linear layers.
pub(crate) fn uniform_init<F: Element>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<F> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| F::lit(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("init shape")
}

pub(crate) fn check_channels(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Shape(format!("{what}: input has {got} channels, block expects {want}")));
    }
    Ok(())
}

/// Convolution, batch normalization and SiLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub path: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    weight: ParamId,
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

impl ConvBlock {
    /// `pad = None` selects "same" padding (`kernel / 2`).
    pub fn new<F: Element>(
        store: &mut ParamStore<F>,
        path: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if c_in == 0 || c_out == 0 || kernel == 0 || stride == 0 {
            return Err(Error::Config(format!("{path}: channels, kernel and stride must be positive")));
        }
        let fan_in = c_in * kernel * kernel;
        let weight = store.add(
            format!("{path}.conv.weight"),
            ParamKind::Weight,
            uniform_init(&[c_out, c_in, kernel, kernel], fan_in, rng),
        )?;
        let gamma = store.add(format!("{path}.bn.weight"), ParamKind::Norm, Tensor::full(&[c_out], F::one()))?;
        let beta = store.add(format!("{path}.bn.bias"), ParamKind::Norm, Tensor::zeros(&[c_out]))?;
        let running_mean = store.add(format!("{path}.bn.running_mean"), ParamKind::Buffer, Tensor::zeros(&[c_out]))?;
        let running_var =
            store.add(format!("{path}.bn.running_var"), ParamKind::Buffer, Tensor::full(&[c_out], F::one()))?;
        Ok(Self {
            path: path.to_string(),
            c_in,
            c_out,
            kernel,
            stride,
            pad: pad.unwrap_or(kernel / 2),
            weight,
            gamma,
            beta,
            running_mean,
            running_var,
        })
    }

    pub fn forward<F: Element>(&self, cx: &mut Ctx<F>, x: Var) -> Result<Var> {
        let shape = cx.tape.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::Shape(format!("{}: expected NCHW input, got {shape:?}", self.path)));
        }
        check_channels(&self.path, shape[1], self.c_in)?;
        if shape[2] + 2 * self.pad < self.kernel || shape[3] + 2 * self.pad < self.kernel {
            return Err(Error::Shape(format!("{}: spatial dims {shape:?} smaller than kernel", self.path)));
        }
        let w = cx.param(self.weight);
        let y = cx.tape.conv2d(x, w, None, self.stride, self.pad);
        let gamma = cx.param(self.gamma);
        let beta = cx.param(self.beta);
        let y = if cx.training() {
            let (y, stats) = cx.tape.batch_norm_train(y, gamma, beta, BN_EPS);
            cx.record_stats(self.running_mean, self.running_var, stats);
            y
        } else {
            let mean = cx.buffer(self.running_mean).data().to_vec();
            let var = cx.buffer(self.running_var).data().to_vec();
            cx.tape.batch_norm_eval(y, gamma, beta, &mean, &var, BN_EPS)
        };
        Ok(cx.tape.silu(y))
    }

    /// Parameter ids of the normalization affine, for tests that need to
    /// silence a branch.
    pub fn norm_params(&self) -> (ParamId, ParamId) {
        (self.gamma, self.beta)
    }
}

/// Residual bottleneck: 1×1 then 3×3 conv, with an optional identity skip.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub cv1: ConvBlock,
    pub cv2: ConvBlock,
    pub shortcut: bool,
}

impl Bottleneck {
    pub fn new<F: Element>(
        store: &mut ParamStore<F>,
        path: &str,
        c_in: usize,
        c_out: usize,
        shortcut: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let cv1 = ConvBlock::new(store, &format!("{path}.cv1"), c_in, c_out, 1, 1, None, rng)?;
        let cv2 = ConvBlock::new(store, &format!("{path}.cv2"), c_out, c_out, 3, 1, None, rng)?;
        Ok(Self { cv1, cv2, shortcut: shortcut && c_in == c_out })
    }

    pub fn forward<F: Element>(&self, cx: &mut Ctx<F>, x: Var) -> Result<Var> {
        let h = self.cv1.forward(cx, x)?;
        let h = self.cv2.forward(cx, h)?;
        Ok(if self.shortcut { cx.tape.add(x, h) } else { h })
    }
}

/// Cross-stage-partial block with three convolutions around a stack of
/// bottlenecks.
#[derive(Clone, Debug)]
pub struct C3 {
    pub path: String,
    pub c_in: usize,
    pub c_out: usize,
    pub cv1: ConvBlock,
    pub cv2: ConvBlock,
    pub cv3: ConvBlock,
    pub bottlenecks: Vec<Bottleneck>,
}

impl C3 {
    pub fn new<F: Element>(
        store: &mut ParamStore<F>,
        path: &str,
        c_in: usize,
        c_out: usize,
        n: usize,
        shortcut: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if c_out % 2 != 0 {
            return Err(Error::Config(format!("{path}: C3 needs an even channel count to split, got {c_out}")));
        }
        let hidden = c_out / 2;
        let cv1 = ConvBlock::new(store, &format!("{path}.cv1"), c_in, hidden, 1, 1, None, rng)?;
        let cv2 = ConvBlock::new(store, &format!("{path}.cv2"), c_in, hidden, 1, 1, None, rng)?;
        let cv3 = ConvBlock::new(store, &format!("{path}.cv3"), 2 * hidden, c_out, 1, 1, None, rng)?;
        let bottlenecks = (0..n)
            .map(|i| Bottleneck::new(store, &format!("{path}.m.{i}"), hidden, hidden, shortcut, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { path: path.to_string(), c_in, c_out, cv1, cv2, cv3, bottlenecks })
    }

    pub fn forward<F: Element>(&self, cx: &mut Ctx<F>, x: Var) -> Result<Var> {
        check_channels(&self.path, cx.tape.shape(x)[1], self.c_in)?;
        let mut a = self.cv1.forward(cx, x)?;
        for b in &self.bottlenecks {
            a = b.forward(cx, a)?;
        }
        let skip = self.cv2.forward(cx, x)?;
        let cat = cx.tape.concat(&[a, skip], 1);
        self.cv3.forward(cx, cat)
    }

    /// Conv blocks in the graph: the three around the stack plus two per bottleneck.
    pub fn conv_blocks(&self) -> usize {
        3 + 2 * self.bottlenecks.len()
    }
}

/// Spatial pyramid pooling (fast): serial max-pools concatenated with the
/// input and fused by a 1×1 convolution.
#[derive(Clone, Debug)]
pub struct Sppf {
    pub path: String,
    pub cv1: ConvBlock,
    pub cv2: ConvBlock,
    pub pool_kernel: usize,
}

impl Sppf {
    pub fn new<F: Element>(
        store: &mut ParamStore<F>,
        path: &str,
        c_in: usize,
        c_out: usize,
        pool_kernel: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let hidden = c_in / 2;
        if hidden == 0 {
            return Err(Error::Config(format!("{path}: SPPF needs at least 2 input channels")));
        }
        let cv1 = ConvBlock::new(store, &format!("{path}.cv1"), c_in, hidden, 1, 1, None, rng)?;
        let cv2 = ConvBlock::new(store, &format!("{path}.cv2"), 4 * hidden, c_out, 1, 1, None, rng)?;
        Ok(Self { path: path.to_string(), cv1, cv2, pool_kernel })
    }

    /// Channels entering the fusing convolution.
    pub fn concat_channels(&self) -> usize {
        self.cv2.c_in
    }

    pub fn forward<F: Element>(&self, cx: &mut Ctx<F>, x: Var) -> Result<Var> {
        let s = cx.tape.shape(x).to_vec();
        if s[2] < self.pool_kernel || s[3] < self.pool_kernel {
            return Err(Error::Shape(format!("{}: spatial dims {s:?} too small for pool {}", self.path, self.pool_kernel)));
        }
        let h = self.cv1.forward(cx, x)?;
        let (k, p) = (self.pool_kernel, self.pool_kernel / 2);
        let y1 = cx.tape.max_pool2d(h, k, 1, p);
        let y2 = cx.tape.max_pool2d(y1, k, 1, p);
        let y3 = cx.tape.max_pool2d(y2, k, 1, p);
        let cat = cx.tape.concat(&[h, y1, y2, y3], 1);
        self.cv2.forward(cx, cat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn input(cx: &mut Ctx<f64>, shape: &[usize]) -> Var {
        let n: usize = shape.iter().product();
        let t = Tensor::new(shape, (0..n).map(|i| ((i as f64) * 0.37).sin()).collect()).unwrap();
        cx.tape.constant(t)
    }

    #[test]
    fn conv_block_stride_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let down = ConvBlock::new(&mut store, "d", 3, 8, 3, 2, None, &mut rng).unwrap();
        let same = ConvBlock::new(&mut store, "s", 3, 5, 3, 1, None, &mut rng).unwrap();
        let mut cx = Ctx::inference(&store);
        let x = input(&mut cx, &[1, 3, 64, 64]);
        let y = down.forward(&mut cx, x).unwrap();
        assert_eq!(cx.tape.shape(y), &[1, 8, 32, 32]);
        let y = same.forward(&mut cx, x).unwrap();
        assert_eq!(cx.tape.shape(y), &[1, 5, 64, 64]);
    }

    #[test]
    fn conv_block_rejects_channel_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let b = ConvBlock::new(&mut store, "b", 4, 8, 1, 1, None, &mut rng).unwrap();
        let mut cx = Ctx::inference(&store);
        let x = input(&mut cx, &[1, 3, 8, 8]);
        assert!(matches!(b.forward(&mut cx, x), Err(Error::Shape(_))));
    }

    #[test]
    fn c3_preserves_spatial_shape_and_counts_convs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let c3 = C3::new(&mut store, "c3", 8, 16, 1, true, &mut rng).unwrap();
        assert_eq!(c3.conv_blocks(), 5);
        assert_eq!(c3.conv_blocks() - 2 * c3.bottlenecks.len(), 3);
        let mut cx = Ctx::inference(&store);
        let x = input(&mut cx, &[2, 8, 6, 6]);
        let y = c3.forward(&mut cx, x).unwrap();
        assert_eq!(cx.tape.shape(y), &[2, 16, 6, 6]);
    }

    #[test]
    fn c3_rejects_odd_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        assert!(matches!(C3::new(&mut store, "c3", 8, 15, 1, true, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn zeroed_bottleneck_branch_reduces_to_skip_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let c3 = C3::new(&mut store, "c3", 8, 8, 1, true, &mut rng).unwrap();
        // bn gamma = beta = 0 makes cv2 of the bottleneck emit silu(0) = 0
        let (g, b) = c3.bottlenecks[0].cv2.norm_params();
        store.value_mut(g).data_mut().fill(0.0);
        store.value_mut(b).data_mut().fill(0.0);
        let mut cx = Ctx::inference(&store);
        let x = input(&mut cx, &[1, 8, 5, 5]);
        let full = c3.forward(&mut cx, x).unwrap();
        let a = c3.cv1.forward(&mut cx, x).unwrap();
        let s = c3.cv2.forward(&mut cx, x).unwrap();
        let cat = cx.tape.concat(&[a, s], 1);
        let skip_only = c3.cv3.forward(&mut cx, cat).unwrap();
        let (fv, sv) = (cx.tape.value(full), cx.tape.value(skip_only));
        assert!(fv.all_finite());
        assert_eq!(fv, sv);
    }

    #[test]
    fn sppf_shape_and_constant_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let sppf = Sppf::new(&mut store, "sppf", 8, 8, 5, &mut rng).unwrap();
        assert_eq!(sppf.concat_channels(), 4 * sppf.cv1.c_out);
        let mut cx = Ctx::inference(&store);
        let x = cx.tape.constant(Tensor::full(&[1, 8, 4, 4], 0.7));
        assert!(sppf.forward(&mut cx, x).is_err());
        let x = cx.tape.constant(Tensor::full(&[1, 8, 5, 5], 0.7));
        let y = sppf.forward(&mut cx, x).unwrap();
        assert_eq!(cx.tape.shape(y), &[1, 8, 5, 5]);
        // constant maps stay constant through pooling, hence through the whole block
        let v = cx.tape.value(y);
        for c in 0..8 {
            let plane = &v.data()[c * 25..(c + 1) * 25];
            assert!(plane.iter().all(|&p| (p - plane[0]).abs() < 1e-12));
        }
    }
}
