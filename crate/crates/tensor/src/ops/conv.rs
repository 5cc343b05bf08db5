use crate::element::{gemm, Element};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn direct(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Valid output-column range for kernel offset `kx` (stride 1 only).
    fn valid_ox(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx);
        let hi = (self.w + self.pad).saturating_sub(kx).min(self.wo);
        (lo.min(hi), hi)
    }
}

pub fn conv_out_size(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (size + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

fn im2col<F: Element>(x: &[F], g: &ConvGeom, cols: &mut [F]) {
    let hw_out = g.cols();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let seg = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        seg.fill(F::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = g.valid_ox(kx);
                        seg[..lo].fill(F::zero());
                        seg[hi..].fill(F::zero());
                        if hi > lo {
                            let start = lo + kx - g.pad;
                            seg[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        }
                    } else {
                        for (ox, d) in seg.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            *d = if ix >= 0 && ix < g.w as isize { src[ix as usize] } else { F::zero() };
                        }
                    }
                }
            }
        }
    }
}

fn col2im<F: Element>(cols: &[F], g: &ConvGeom, dx: &mut [F]) {
    let hw_out = g.cols();
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let seg = &src[oy * g.wo..(oy + 1) * g.wo];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = g.valid_ox(kx);
                        if hi > lo {
                            let start = lo + kx - g.pad;
                            for (d, &s) in dst[start..start + (hi - lo)].iter_mut().zip(&seg[lo..hi]) {
                                *d += s;
                            }
                        }
                    } else {
                        for (ox, &s) in seg.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn geometry(x: &[usize], w: &[usize], stride: usize, pad: usize) -> (usize, usize, ConvGeom) {
    assert_eq!(x.len(), 4, "conv2d: input must be NCHW, got {x:?}");
    assert_eq!(w.len(), 4, "conv2d: weight must be OCKK, got {w:?}");
    assert_eq!(x[1], w[1], "conv2d: input has {} channels, weight expects {}", x[1], w[1]);
    assert_eq!(w[2], w[3], "conv2d: only square kernels");
    assert!(stride >= 1);
    let k = w[2];
    let ho = conv_out_size(x[2], k, stride, pad).expect("conv2d: kernel larger than padded input");
    let wo = conv_out_size(x[3], k, stride, pad).expect("conv2d: kernel larger than padded input");
    (x[0], w[0], ConvGeom { c: x[1], h: x[2], w: x[3], k, stride, pad, ho, wo })
}

impl<F: Element> Tape<F> {
    /// 2-D convolution over NCHW input with an `[out, in, k, k]` weight.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, o, g) = geometry(xv.shape(), wv.shape(), stride, pad);
        let in_len = g.c * g.h * g.w;
        let out_len = o * g.cols();
        let mut out = Tensor::zeros(&[n, o, g.ho, g.wo]);
        let mut cols = if g.direct() { Vec::new() } else { vec![F::zero(); g.rows() * g.cols()] };
        {
            let od = out.data_mut();
            for ni in 0..n {
                let xs = &xv.data()[ni * in_len..(ni + 1) * in_len];
                let colref: &[F] = if g.direct() {
                    xs
                } else {
                    im2col(xs, &g, &mut cols);
                    &cols
                };
                let dst = &mut od[ni * out_len..(ni + 1) * out_len];
                gemm(false, false, o, g.cols(), g.rows(), F::one(), wv.data(), colref, F::zero(), dst);
            }
            if let Some(b) = b {
                let bv = self.value(b);
                assert_eq!(bv.numel(), o, "conv2d: bias size");
                for ni in 0..n {
                    for oc in 0..o {
                        let bias = bv.data()[oc];
                        let base = ni * out_len + oc * g.cols();
                        for v in &mut od[base..base + g.cols()] {
                            *v += bias;
                        }
                    }
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        self.push(out, Op::Conv2d { x, w, b, stride, pad }, rg)
    }

    /// Max pooling with `-inf` padding.
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        assert_eq!(s.len(), 4, "max_pool2d: NCHW input");
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let ho = conv_out_size(h, k, stride, pad).expect("max_pool2d: kernel too large");
        let wo = conv_out_size(w, k, stride, pad).expect("max_pool2d: kernel too large");
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let mut argmax = vec![0usize; n * c * ho * wo];
        let xd = xv.data();
        let od = out.data_mut();
        for p in 0..n * c {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = F::neg_infinity();
                    let mut best_i = usize::MAX;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = base + iy as usize * w + ix as usize;
                            if xd[i] > best || best_i == usize::MAX {
                                best = xd[i];
                                best_i = i;
                            }
                        }
                    }
                    let oi = (p * ho + oy) * wo + ox;
                    od[oi] = best;
                    argmax[oi] = best_i;
                }
            }
        }
        let rg = self.requires_grad(x);
        self.push(out, Op::MaxPool { x, argmax }, rg)
    }

    /// Nearest-neighbour 2x upsampling of an NCHW map.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        assert_eq!(s.len(), 4, "upsample2x: NCHW input");
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
        let xd = xv.data();
        let od = out.data_mut();
        for p in 0..n * c {
            for y in 0..2 * h {
                let src = &xd[(p * h + y / 2) * w..(p * h + y / 2 + 1) * w];
                let dst = &mut od[(p * 2 * h + y) * 2 * w..(p * 2 * h + y + 1) * 2 * w];
                for (xo, d) in dst.iter_mut().enumerate() {
                    *d = src[xo / 2];
                }
            }
        }
        let rg = self.requires_grad(x);
        self.push(out, Op::Upsample2x { x }, rg)
    }
}

pub(crate) struct ConvGrads<F> {
    pub dx: Option<Tensor<F>>,
    pub dw: Option<Tensor<F>>,
    pub db: Option<Tensor<F>>,
}

pub(crate) fn conv2d_backward<F: Element>(
    tape: &Tape<F>,
    x: Var,
    w: Var,
    b: Option<Var>,
    stride: usize,
    pad: usize,
    g: &Tensor<F>,
) -> ConvGrads<F> {
    let xv = tape.value(x);
    let wv = tape.value(w);
    let (n, o, geo) = geometry(xv.shape(), wv.shape(), stride, pad);
    let in_len = geo.c * geo.h * geo.w;
    let out_len = o * geo.cols();
    let need_dx = tape.requires_grad(x);
    let need_dw = tape.requires_grad(w);
    let mut dx = need_dx.then(|| Tensor::zeros(xv.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(wv.shape()));
    let mut cols = if geo.direct() { Vec::new() } else { vec![F::zero(); geo.rows() * geo.cols()] };
    let mut dcols = if geo.direct() || !need_dx {
        Vec::new()
    } else {
        vec![F::zero(); geo.rows() * geo.cols()]
    };
    for ni in 0..n {
        let gn = &g.data()[ni * out_len..(ni + 1) * out_len];
        if let Some(dw) = dw.as_mut() {
            let xs = &xv.data()[ni * in_len..(ni + 1) * in_len];
            let colref: &[F] = if geo.direct() {
                xs
            } else {
                im2col(xs, &geo, &mut cols);
                &cols
            };
            gemm(false, true, o, geo.rows(), geo.cols(), F::one(), gn, colref, F::one(), dw.data_mut());
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx.data_mut()[ni * in_len..(ni + 1) * in_len];
            if geo.direct() {
                gemm(true, false, geo.rows(), geo.cols(), o, F::one(), wv.data(), gn, F::zero(), dxn);
            } else {
                gemm(true, false, geo.rows(), geo.cols(), o, F::one(), wv.data(), gn, F::zero(), &mut dcols);
                col2im(&dcols, &geo, dxn);
            }
        }
    }
    let db = b.filter(|&b| tape.requires_grad(b)).map(|_| {
        let mut db = Tensor::zeros(&[o]);
        let dbd = db.data_mut();
        for ni in 0..n {
            for (oc, acc) in dbd.iter_mut().enumerate() {
                let base = ni * out_len + oc * geo.cols();
                *acc += g.data()[base..base + geo.cols()].iter().copied().sum::<F>();
            }
        }
        db
    });
    ConvGrads { dx, dw, db }
}

pub(crate) fn max_pool_backward<F: Element>(x_shape: &[usize], argmax: &[usize], g: &Tensor<F>) -> Tensor<F> {
    let mut dx = Tensor::zeros(x_shape);
    let dxd = dx.data_mut();
    for (&i, &gv) in argmax.iter().zip(g.data()) {
        dxd[i] += gv;
    }
    dx
}

pub(crate) fn upsample_backward<F: Element>(x_shape: &[usize], g: &Tensor<F>) -> Tensor<F> {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let mut dx = Tensor::zeros(x_shape);
    let dxd = dx.data_mut();
    let gd = g.data();
    for p in 0..n * c {
        for y in 0..2 * h {
            let src = &gd[(p * 2 * h + y) * 2 * w..(p * 2 * h + y + 1) * 2 * w];
            let dst = &mut dxd[(p * h + y / 2) * w..(p * h + y / 2 + 1) * w];
            for (xo, &v) in src.iter().enumerate() {
                dst[xo / 2] += v;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (o, k) = (w.dim(0), w.dim(2));
        let ho = conv_out_size(h, k, stride, pad).unwrap();
        let wo = conv_out_size(wd, k, stride, pad).unwrap();
        let mut out = Tensor::zeros(&[n, o, ho, wo]);
        for ni in 0..n {
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = 0.0;
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        s += x.at(&[ni, ci, iy as usize, ix as usize]) * w.at(&[oc, ci, ky, kx]);
                                    }
                                }
                            }
                        }
                        let off = out.offset(&[ni, oc, oy, ox]);
                        out.data_mut()[off] = s;
                    }
                }
            }
        }
        out
    }

    fn pseudo(shape: &[usize], seed: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|i| ((i as f64 + seed) * 0.731).sin()).collect()).unwrap()
    }

    #[test]
    fn conv_matches_naive_across_geometries() {
        for &(k, s, p, h, w) in &[(3, 1, 1, 5, 6), (3, 2, 1, 7, 6), (1, 1, 0, 4, 4), (6, 2, 2, 9, 8), (1, 2, 0, 5, 5)] {
            let x = pseudo(&[2, 3, h, w], 0.3);
            let wt = pseudo(&[4, 3, k, k], 1.7);
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let wv = t.constant(wt.clone());
            let y = t.conv2d(xv, wv, None, s, p);
            let want = naive_conv(&x, &wt, s, p);
            assert_eq!(t.shape(y), want.shape());
            for (a, b) in t.value(y).data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn stride_two_halves_spatial_dims() {
        assert_eq!(conv_out_size(64, 3, 2, 1), Some(32));
        assert_eq!(conv_out_size(64, 3, 1, 1), Some(64));
        assert_eq!(conv_out_size(256, 6, 2, 2), Some(128));
    }

    #[test]
    fn max_pool_of_constant_is_constant() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::full(&[1, 2, 4, 4], 3.5));
        let y = t.max_pool2d(x, 5, 1, 2);
        assert_eq!(t.shape(y), &[1, 2, 4, 4]);
        assert!(t.value(y).data().iter().all(|&v| v == 3.5));
    }
}
