use std::sync::Arc;

use crate::element::Element;
use crate::tape::{Op, Tape, Var};
use crate::tensor::{permute_index, Tensor};

impl<F: Element> Tape<F> {
    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Var {
        assert!(!inputs.is_empty(), "concat: no inputs");
        let first = self.shape(inputs[0]).to_vec();
        assert!(axis < first.len(), "concat: axis {axis} out of range");
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            assert_eq!(s.len(), first.len(), "concat: rank mismatch");
            for (i, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(i == axis || a == b, "concat: {s:?} vs {first:?} off axis {axis}");
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.dim(axis) * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(&shape, data).expect("concat shape");
        let rg = self.any_grad(inputs);
        self.push(out, Op::Concat { inputs: inputs.to_vec(), axis }, rg)
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`. Indices may repeat.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Var {
        let xv = self.value(x);
        assert_eq!(shape.iter().product::<usize>(), index.len(), "gather: shape/index mismatch");
        let xd = xv.data();
        let data = index.iter().map(|&i| xd[i]).collect();
        let out = Tensor::new(shape, data).expect("gather shape");
        let rg = self.requires_grad(x);
        self.push(out, Op::Gather { x, index }, rg)
    }

    /// Axis permutation; `perm[i]` is the source axis of output axis `i`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let (shape, index) = permute_index(self.shape(x), perm);
        self.gather(x, Arc::new(index), &shape)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshaped(shape).expect("reshape: element count");
        let rg = self.requires_grad(x);
        self.push(out, Op::Reshape { x }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// Mean of all elements; zero for an empty tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.numel();
        let m = if n == 0 { F::zero() } else { xv.sum() / F::from_usize(n).unwrap() };
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(m), Op::Mean { x }, rg)
    }

    /// Mean binary cross-entropy of logits `x` against fixed targets.
    pub fn bce_with_logits(&mut self, x: Var, target: Vec<F>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.numel(), target.len(), "bce_with_logits: target size");
        let n = target.len();
        let mut s = F::zero();
        for (&z, &t) in xv.data().iter().zip(&target) {
            s += z.max(F::zero()) - z * t + (F::one() + (-z.abs()).exp()).ln();
        }
        let m = if n == 0 { F::zero() } else { s / F::from_usize(n).unwrap() };
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(m), Op::BceWithLogits { x, target }, rg)
    }
}

pub(crate) fn concat_backward<F: Element>(
    tape: &Tape<F>,
    inputs: &[Var],
    axis: usize,
    g: &Tensor<F>,
) -> Vec<Option<Tensor<F>>> {
    let shape = g.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let total = shape[axis];
    let mut offset = 0;
    let mut out = Vec::with_capacity(inputs.len());
    for &v in inputs {
        let s = tape.shape(v).to_vec();
        let d = s[axis];
        if tape.requires_grad(v) {
            let mut data = Vec::with_capacity(outer * d * inner);
            for o in 0..outer {
                let start = (o * total + offset) * inner;
                data.extend_from_slice(&g.data()[start..start + d * inner]);
            }
            out.push(Some(Tensor::new(&s, data).expect("concat grad")));
        } else {
            out.push(None);
        }
        offset += d;
    }
    out
}

pub(crate) fn gather_backward<F: Element>(x_shape: &[usize], index: &[usize], g: &Tensor<F>) -> Tensor<F> {
    let mut dx = Tensor::zeros(x_shape);
    let dxd = dx.data_mut();
    for (&i, &gv) in index.iter().zip(g.data()) {
        dxd[i] += gv;
    }
    dx
}

pub(crate) fn bce_backward<F: Element>(x: &Tensor<F>, target: &[F], g: F) -> Tensor<F> {
    let n = target.len();
    let scale = if n == 0 { F::zero() } else { g / F::from_usize(n).unwrap() };
    let data = x
        .data()
        .iter()
        .zip(target)
        .map(|(&z, &t)| {
            let s = if z >= F::zero() {
                F::one() / (F::one() + (-z).exp())
            } else {
                let e = z.exp();
                e / (F::one() + e)
            };
            (s - t) * scale
        })
        .collect();
    Tensor::new(x.shape(), data).expect("bce grad")
}
