use crate::element::Element;
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    /// Unbiased variance, the quantity folded into running estimates.
    pub var: Vec<F>,
}

fn nchw(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "batch_norm: need at least [N, C]");
    let hw: usize = shape[2..].iter().product();
    (shape[0], shape[1], hw)
}

impl<F: Element> Tape<F> {
    /// Batch normalization using the statistics of the current batch.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, BatchStats<F>) {
        let xv = self.value(x);
        let (n, c, hw) = nchw(xv.shape());
        let m = n * hw;
        let mf = F::from_usize(m).unwrap();
        let xd = xv.data();
        let mut mean = vec![F::zero(); c];
        let mut var = vec![F::zero(); c];
        for ci in 0..c {
            let mut s = F::zero();
            for ni in 0..n {
                let base = (ni * c + ci) * hw;
                s += xd[base..base + hw].iter().copied().sum::<F>();
            }
            let mu = s / mf;
            let mut ss = F::zero();
            for ni in 0..n {
                let base = (ni * c + ci) * hw;
                for &v in &xd[base..base + hw] {
                    ss += (v - mu) * (v - mu);
                }
            }
            mean[ci] = mu;
            var[ci] = ss / mf;
        }
        let eps = F::lit(eps);
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = Tensor::zeros(xv.shape());
        let mut out = Tensor::zeros(xv.shape());
        {
            let xh = xhat.data_mut();
            let od = out.data_mut();
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    for i in base..base + hw {
                        let h = (xd[i] - mean[ci]) * inv_std[ci];
                        xh[i] = h;
                        od[i] = gv[ci] * h + bv[ci];
                    }
                }
            }
        }
        let unbiased = if m > 1 {
            let corr = mf / F::from_usize(m - 1).unwrap();
            var.iter().map(|&v| v * corr).collect()
        } else {
            var.clone()
        };
        let rg = self.any_grad(&[x, gamma, beta]);
        let v = self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats: true }, rg);
        (v, BatchStats { mean, var: unbiased })
    }

    /// Batch normalization with frozen running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[F],
        running_var: &[F],
        eps: f64,
    ) -> Var {
        let xv = self.value(x);
        let (n, c, hw) = nchw(xv.shape());
        assert_eq!(running_mean.len(), c);
        let eps = F::lit(eps);
        let inv_std: Vec<F> = running_var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let xd = xv.data();
        let mut xhat = Tensor::zeros(xv.shape());
        let mut out = Tensor::zeros(xv.shape());
        {
            let xh = xhat.data_mut();
            let od = out.data_mut();
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    for i in base..base + hw {
                        let h = (xd[i] - running_mean[ci]) * inv_std[ci];
                        xh[i] = h;
                        od[i] = gv[ci] * h + bv[ci];
                    }
                }
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats: false }, rg)
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let d = *xv.shape().last().expect("layer_norm: rank >= 1");
        assert_eq!(self.value(gamma).numel(), d, "layer_norm: gamma size");
        let rows = xv.numel() / d;
        let df = F::from_usize(d).unwrap();
        let eps = F::lit(eps);
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = Tensor::zeros(xv.shape());
        let mut out = Tensor::zeros(xv.shape());
        let mut inv_std = vec![F::zero(); rows];
        {
            let xd = xv.data();
            let xh = xhat.data_mut();
            let od = out.data_mut();
            for r in 0..rows {
                let row = &xd[r * d..(r + 1) * d];
                let mu = row.iter().copied().sum::<F>() / df;
                let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / df;
                let is = F::one() / (var + eps).sqrt();
                inv_std[r] = is;
                for j in 0..d {
                    let h = (row[j] - mu) * is;
                    xh[r * d + j] = h;
                    od[r * d + j] = gv[j] * h + bv[j];
                }
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg)
    }
}

pub(crate) struct NormGrads<F> {
    pub dx: Tensor<F>,
    pub dgamma: Tensor<F>,
    pub dbeta: Tensor<F>,
}

pub(crate) fn batch_norm_backward<F: Element>(
    gamma: &Tensor<F>,
    xhat: &Tensor<F>,
    inv_std: &[F],
    batch_stats: bool,
    g: &Tensor<F>,
) -> NormGrads<F> {
    let (n, c, hw) = nchw(xhat.shape());
    let mf = F::from_usize(n * hw).unwrap();
    let gd = g.data();
    let xh = xhat.data();
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for ci in 0..c {
        let (mut sg, mut sgx) = (F::zero(), F::zero());
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for i in base..base + hw {
                sg += gd[i];
                sgx += gd[i] * xh[i];
            }
        }
        dbeta.data_mut()[ci] = sg;
        dgamma.data_mut()[ci] = sgx;
    }
    let mut dx = Tensor::zeros(xhat.shape());
    let dxd = dx.data_mut();
    let gam = gamma.data();
    for ci in 0..c {
        let k = gam[ci] * inv_std[ci];
        let sg = dbeta.data()[ci];
        let sgx = dgamma.data()[ci];
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for i in base..base + hw {
                dxd[i] = if batch_stats { k * (gd[i] - sg / mf - xh[i] * sgx / mf) } else { k * gd[i] };
            }
        }
    }
    NormGrads { dx, dgamma, dbeta }
}

pub(crate) fn layer_norm_backward<F: Element>(
    gamma: &Tensor<F>,
    xhat: &Tensor<F>,
    inv_std: &[F],
    g: &Tensor<F>,
) -> NormGrads<F> {
    let d = gamma.numel();
    let rows = xhat.numel() / d;
    let df = F::from_usize(d).unwrap();
    let gd = g.data();
    let xh = xhat.data();
    let gam = gamma.data();
    let mut dgamma = Tensor::zeros(&[d]);
    let mut dbeta = Tensor::zeros(&[d]);
    let mut dx = Tensor::zeros(xhat.shape());
    let mut gg = vec![F::zero(); d];
    for r in 0..rows {
        let (mut s, mut sx) = (F::zero(), F::zero());
        for j in 0..d {
            let i = r * d + j;
            dgamma.data_mut()[j] += gd[i] * xh[i];
            dbeta.data_mut()[j] += gd[i];
            gg[j] = gd[i] * gam[j];
            s += gg[j];
            sx += gg[j] * xh[i];
        }
        let dxd = dx.data_mut();
        for j in 0..d {
            let i = r * d + j;
            dxd[i] = inv_std[r] * (gg[j] - s / df - xh[i] * sx / df);
        }
    }
    NormGrads { dx, dgamma, dbeta }
}
