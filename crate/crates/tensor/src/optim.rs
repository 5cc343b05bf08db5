use crate::element::Element;
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

/// Learning rates per parameter group for one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupLr {
    pub weight: f64,
    pub bias: f64,
    pub norm: f64,
}

impl GroupLr {
    pub fn uniform(lr: f64) -> Self {
        Self { weight: lr, bias: lr, norm: lr }
    }

    fn for_kind(&self, kind: ParamKind) -> f64 {
        match kind {
            ParamKind::Weight => self.weight,
            ParamKind::Bias => self.bias,
            ParamKind::Norm | ParamKind::Buffer => self.norm,
        }
    }
}

pub trait Optimizer<F: Element> {
    /// Apply accumulated gradients, then leave them untouched (callers zero them).
    fn step(&mut self, store: &mut ParamStore<F>, lr: GroupLr);

    fn set_momentum(&mut self, _momentum: f64) {}
}

/// SGD with (optionally Nesterov) momentum; weight decay applies to
/// [`ParamKind::Weight`] tensors only.
#[derive(Clone, Debug)]
pub struct Sgd<F> {
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    velocity: Vec<Tensor<F>>,
}

impl<F: Element> Sgd<F> {
    pub fn new(momentum: f64, nesterov: bool, weight_decay: f64) -> Self {
        Self { momentum, nesterov, weight_decay, velocity: Vec::new() }
    }
}

impl<F: Element> Optimizer<F> for Sgd<F> {
    fn step(&mut self, store: &mut ParamStore<F>, lr: GroupLr) {
        if self.velocity.len() != store.len() {
            self.velocity = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        }
        let mu = F::lit(self.momentum);
        for (p, vel) in store.iter_mut().zip(&mut self.velocity) {
            if !p.kind.trainable() {
                continue;
            }
            let step = F::lit(lr.for_kind(p.kind));
            let wd = if p.kind == ParamKind::Weight { F::lit(self.weight_decay) } else { F::zero() };
            let vals = p.value.data_mut();
            let grads = p.grad.data();
            for ((w, &g), v) in vals.iter_mut().zip(grads).zip(vel.data_mut()) {
                let d = g + wd * *w;
                *v = mu * *v + d;
                let upd = if self.nesterov { d + mu * *v } else { *v };
                *w -= step * upd;
            }
        }
    }

    fn set_momentum(&mut self, momentum: f64) {
        self.momentum = momentum;
    }
}

/// Adam with decoupled weight decay on [`ParamKind::Weight`] tensors.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Element> Adam<F> {
    pub fn new(beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self { beta1, beta2, eps: 1e-8, weight_decay, t: 0, m: Vec::new(), v: Vec::new() }
    }
}

impl<F: Element> Optimizer<F> for Adam<F> {
    fn step(&mut self, store: &mut ParamStore<F>, lr: GroupLr) {
        if self.m.len() != store.len() {
            self.m = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let b1 = F::lit(self.beta1);
        let b2 = F::lit(self.beta2);
        let c1 = F::lit(1.0 - self.beta1.powi(self.t as i32));
        let c2 = F::lit(1.0 - self.beta2.powi(self.t as i32));
        let eps = F::lit(self.eps);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.kind.trainable() {
                continue;
            }
            let step = F::lit(lr.for_kind(p.kind));
            let decay = if p.kind == ParamKind::Weight {
                F::one() - step * F::lit(self.weight_decay)
            } else {
                F::one()
            };
            let vals = p.value.data_mut();
            for (((w, &g), mm), vv) in vals.iter_mut().zip(p.grad.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mm = b1 * *mm + (F::one() - b1) * g;
                *vv = b2 * *vv + (F::one() - b2) * g * g;
                let mhat = *mm / c1;
                let vhat = *vv / c2;
                *w = *w * decay - step * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    fn set_momentum(&mut self, momentum: f64) {
        self.beta1 = momentum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_store() -> (ParamStore<f64>, crate::params::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", ParamKind::Bias, Tensor::from_f64(&[2], &[3.0, -2.0]).unwrap()).unwrap();
        (s, id)
    }

    fn run<O: Optimizer<f64>>(mut opt: O, lr: f64, steps: usize) -> f64 {
        let (mut s, id) = quadratic_store();
        for _ in 0..steps {
            s.zero_grad();
            let w = s.value(id).clone();
            s.get_mut(id).grad = w.map(|v| 2.0 * v);
            opt.step(&mut s, GroupLr::uniform(lr));
        }
        s.value(id).data().iter().map(|v| v * v).sum()
    }

    #[test]
    fn sgd_and_adam_minimize_quadratic() {
        assert!(run(Sgd::new(0.9, true, 0.0), 0.05, 200) < 1e-6);
        assert!(run(Adam::new(0.9, 0.999, 0.0), 0.1, 500) < 1e-4);
    }
}
