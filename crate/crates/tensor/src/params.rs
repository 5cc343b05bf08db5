use std::collections::HashMap;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::ops::BatchStats;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Role of a stored tensor; drives weight decay and trainability.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Conv / linear weights (decayed).
    Weight,
    /// Additive biases, including relative position tables.
    Bias,
    /// Normalization scale and shift.
    Norm,
    /// Non-trainable state such as running statistics.
    Buffer,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        self != ParamKind::Buffer
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::Norm => "norm",
            ParamKind::Buffer => "buffer",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "weight" => ParamKind::Weight,
            "bias" => ParamKind::Bias,
            "norm" => ParamKind::Norm,
            "buffer" => ParamKind::Buffer,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Param<F> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
}

/// Named tensors owned by a model, addressed by stable graph paths.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
    by_name: HashMap<String, ParamId>,
}

impl<F: Element> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<F>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::Shape(format!("duplicate parameter path {name}")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param { name: name.clone(), kind, value, grad });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<F> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.kind.trainable()).map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(F::zero());
        }
    }

    /// Same parameters in another precision.
    pub fn cast<G: Element>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Exponential update of running statistics: `r ← (1 − m)·r + m·batch`.
    pub fn apply_batch_stats(&mut self, updates: &[StatUpdate<F>], momentum: f64) {
        let m = F::lit(momentum);
        for u in updates {
            for (id, src) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var)] {
                let dst = self.params[id.0].value.data_mut();
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = (F::one() - m) * *d + m * s;
                }
            }
        }
    }
}

/// Running-statistic update produced by one training-mode batch norm call.
#[derive(Clone, Debug)]
pub struct StatUpdate<F> {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BatchStats<F>,
}

/// A forward pass in progress: the tape plus parameter bindings.
pub struct Ctx<'a, F> {
    pub tape: Tape<F>,
    store: &'a ParamStore<F>,
    bound: Vec<Option<Var>>,
    train: bool,
    grads: bool,
    updates: Vec<StatUpdate<F>>,
}

impl<'a, F: Element> Ctx<'a, F> {
    /// `train` selects batch statistics in normalization layers; `grads`
    /// decides whether parameters are recorded as differentiable leaves.
    pub fn new(store: &'a ParamStore<F>, train: bool, grads: bool) -> Self {
        Self { tape: Tape::new(), store, bound: vec![None; store.len()], train, grads, updates: Vec::new() }
    }

    pub fn inference(store: &'a ParamStore<F>) -> Self {
        Self::new(store, false, false)
    }

    pub fn training(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &ParamStore<F> {
        self.store
    }

    /// Tape handle for a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let value = p.value.clone();
        let v = if self.grads && p.kind.trainable() {
            self.tape.variable(value)
        } else {
            self.tape.constant(value)
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn buffer(&self, id: ParamId) -> &Tensor<F> {
        self.store.value(id)
    }

    pub fn record_stats(&mut self, mean: ParamId, var: ParamId, stats: BatchStats<F>) {
        self.updates.push(StatUpdate { mean, var, stats });
    }

    pub fn stat_updates(&self) -> &[StatUpdate<F>] {
        &self.updates
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate<F>> {
        std::mem::take(&mut self.updates)
    }

    /// Gradients of bound parameters after a backward sweep.
    pub fn param_grads<'g>(&self, grads: &'g Gradients<F>) -> Vec<(ParamId, &'g Tensor<F>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.and_then(|v| grads.get(v)).map(|g| (ParamId(i), g)))
            .collect()
    }
}

/// Add parameter gradients into the store's accumulators.
pub fn accumulate_grads<F: Element>(store: &mut ParamStore<F>, grads: &[(ParamId, &Tensor<F>)]) {
    for (id, g) in grads {
        store.get_mut(*id).grad.add_assign(g);
    }
}
