use std::sync::Arc;

use crate::element::Element;
use crate::ops;
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum UnaryKind {
    Silu,
    Gelu,
    Sigmoid,
    Atan,
    Sqrt,
    Square,
    Exp,
    ClampMin(f64),
}

pub(crate) enum Op<F> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<F>,
        inv_std: Vec<F>,
        batch_stats: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<F>,
        inv_std: Vec<F>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Softmax {
        x: Var,
    },
    Unary {
        x: Var,
        kind: UnaryKind,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Div {
        a: Var,
        b: Var,
    },
    Maximum {
        a: Var,
        b: Var,
    },
    Minimum {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: F,
    },
    Shift {
        x: Var,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample2x {
        x: Var,
    },
    Gather {
        x: Var,
        index: Arc<Vec<usize>>,
    },
    Reshape {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    BceWithLogits {
        x: Var,
        target: Vec<F>,
    },
}

pub(crate) struct Node<F> {
    pub(crate) value: Tensor<F>,
    pub(crate) op: Op<F>,
    pub(crate) requires_grad: bool,
}

/// Records a forward computation so it can be differentiated in reverse.
pub struct Tape<F> {
    pub(crate) nodes: Vec<Node<F>>,
}

impl<F: Element> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Element> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v`'s value as a new constant (stops gradient flow).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Reverse-mode sweep from a scalar `root`.
    ///
    /// Only leaf gradients are kept in the result; interior gradients are
    /// released as soon as they have been propagated.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        assert_eq!(self.value(root).numel(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), F::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            ops::backward(self, Var(i), &g, &mut grads);
        }
        Gradients { grads }
    }

    pub(crate) fn accumulate(&self, grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        debug_assert_eq!(g.numel(), self.nodes[v.0].value.numel(), "gradient size mismatch");
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Element> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
