use crate::element::{gemm, Element};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

fn batch_dims(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "matmul: rank >= 2 required, got {shape:?}");
    let r = shape.len();
    (shape[..r - 2].iter().product(), shape[r - 2], shape[r - 1])
}

impl<F: Element> Tape<F> {
    /// `x · wᵀ + b` over the last axis; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(wv.rank(), 2, "linear: weight must be [out, in]");
        let (o, i) = (wv.dim(0), wv.dim(1));
        let d = *xv.shape().last().expect("linear: rank >= 1");
        assert_eq!(d, i, "linear: input features {d} != weight in {i}");
        let rows = xv.numel() / i;
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = o;
        let mut out = Tensor::zeros(&shape);
        gemm(false, true, rows, o, i, F::one(), xv.data(), wv.data(), F::zero(), out.data_mut());
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), o, "linear: bias size");
            for row in out.data_mut().chunks_mut(o) {
                for (v, &bb) in row.iter_mut().zip(bv) {
                    *v += bb;
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        self.push(out, Op::Linear { x, w, b }, rg)
    }

    /// Batched matrix product over the last two axes. With `trans_b`, `b`
    /// holds `[.., n, k]` and is used transposed.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (ba, m, k) = batch_dims(av.shape());
        let (bb, r1, r2) = batch_dims(bv.shape());
        assert_eq!(ba, bb, "matmul: batch mismatch {:?} vs {:?}", av.shape(), bv.shape());
        let (kb, n) = if trans_b { (r2, r1) } else { (r1, r2) };
        assert_eq!(k, kb, "matmul: inner dims {:?} vs {:?}", av.shape(), bv.shape());
        let mut shape = av.shape().to_vec();
        let rank = shape.len();
        shape[rank - 1] = n;
        let mut out = Tensor::zeros(&shape);
        {
            let od = out.data_mut();
            for p in 0..ba {
                gemm(
                    false,
                    trans_b,
                    m,
                    n,
                    k,
                    F::one(),
                    &av.data()[p * m * k..(p + 1) * m * k],
                    &bv.data()[p * k * n..(p + 1) * k * n],
                    F::zero(),
                    &mut od[p * m * n..(p + 1) * m * n],
                );
            }
        }
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::MatMul { a, b, trans_b }, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = *xv.shape().last().expect("softmax: rank >= 1");
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(d) {
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut s = F::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let rg = self.requires_grad(x);
        self.push(out, Op::Softmax { x }, rg)
    }
}

pub(crate) fn linear_backward<F: Element>(
    tape: &Tape<F>,
    x: Var,
    w: Var,
    b: Option<Var>,
    g: &Tensor<F>,
) -> (Option<Tensor<F>>, Option<Tensor<F>>, Option<Tensor<F>>) {
    let xv = tape.value(x);
    let wv = tape.value(w);
    let (o, i) = (wv.dim(0), wv.dim(1));
    let rows = xv.numel() / i;
    let dx = tape.requires_grad(x).then(|| {
        let mut dx = Tensor::zeros(xv.shape());
        gemm(false, false, rows, i, o, F::one(), g.data(), wv.data(), F::zero(), dx.data_mut());
        dx
    });
    let dw = tape.requires_grad(w).then(|| {
        let mut dw = Tensor::zeros(wv.shape());
        gemm(true, false, o, i, rows, F::one(), g.data(), xv.data(), F::zero(), dw.data_mut());
        dw
    });
    let db = b.filter(|&b| tape.requires_grad(b)).map(|_| {
        let mut db = Tensor::zeros(&[o]);
        for row in g.data().chunks(o) {
            for (acc, &v) in db.data_mut().iter_mut().zip(row) {
                *acc += v;
            }
        }
        db
    });
    (dx, dw, db)
}

pub(crate) fn matmul_backward<F: Element>(
    tape: &Tape<F>,
    a: Var,
    b: Var,
    trans_b: bool,
    g: &Tensor<F>,
) -> (Option<Tensor<F>>, Option<Tensor<F>>) {
    let av = tape.value(a);
    let bv = tape.value(b);
    let (batch, m, k) = batch_dims(av.shape());
    let n = *g.shape().last().unwrap();
    let da = tape.requires_grad(a).then(|| {
        let mut da = Tensor::zeros(av.shape());
        for p in 0..batch {
            let gp = &g.data()[p * m * n..(p + 1) * m * n];
            let bp = &bv.data()[p * k * n..(p + 1) * k * n];
            let dst = &mut da.data_mut()[p * m * k..(p + 1) * m * k];
            // trans_b: B is [n, k] so dA = G·B; otherwise B is [k, n] and dA = G·Bᵀ.
            gemm(false, !trans_b, m, k, n, F::one(), gp, bp, F::zero(), dst);
        }
        da
    });
    let db = tape.requires_grad(b).then(|| {
        let mut db = Tensor::zeros(bv.shape());
        for p in 0..batch {
            let gp = &g.data()[p * m * n..(p + 1) * m * n];
            let ap = &av.data()[p * m * k..(p + 1) * m * k];
            let dst = &mut db.data_mut()[p * k * n..(p + 1) * k * n];
            if trans_b {
                gemm(true, false, n, k, m, F::one(), gp, ap, F::zero(), dst);
            } else {
                gemm(true, false, k, n, m, F::one(), ap, gp, F::zero(), dst);
            }
        }
        db
    });
    (da, db)
}

pub(crate) fn softmax_backward<F: Element>(y: &Tensor<F>, g: &Tensor<F>) -> Tensor<F> {
    let d = *y.shape().last().unwrap();
    let mut dx = g.clone();
    for (row, yr) in dx.data_mut().chunks_mut(d).zip(y.data().chunks(d)) {
        let dot: F = row.iter().zip(yr).map(|(&gv, &yv)| gv * yv).sum();
        for (v, &yv) in row.iter_mut().zip(yr) {
            *v = yv * (*v - dot);
        }
    }
    dx
}
