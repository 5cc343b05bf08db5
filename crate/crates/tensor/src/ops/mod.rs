mod conv;
mod elementwise;
mod linalg;
mod norm;
mod shape;

pub use conv::conv_out_size;
pub use norm::BatchStats;

use crate::element::Element;
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

use elementwise::{backward_add_broadcast, backward_unary, zip3_map, zip_map};

/// Propagate the gradient `g` of node `v` into its inputs.
pub(crate) fn backward<F: Element>(tape: &Tape<F>, v: Var, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
    let node = &tape.nodes[v.0];
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d { x, w, b, stride, pad } => {
            let cg = conv::conv2d_backward(tape, *x, *w, *b, *stride, *pad, g);
            if let Some(dx) = cg.dx {
                tape.accumulate(grads, *x, dx);
            }
            if let Some(dw) = cg.dw {
                tape.accumulate(grads, *w, dw);
            }
            if let (Some(b), Some(db)) = (b, cg.db) {
                tape.accumulate(grads, *b, db);
            }
        }
        Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
            let ng = norm::batch_norm_backward(tape.value(*gamma), xhat, inv_std, *batch_stats, g);
            tape.accumulate(grads, *x, ng.dx);
            tape.accumulate(grads, *gamma, ng.dgamma);
            tape.accumulate(grads, *beta, ng.dbeta);
        }
        Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
            let ng = norm::layer_norm_backward(tape.value(*gamma), xhat, inv_std, g);
            tape.accumulate(grads, *x, ng.dx);
            tape.accumulate(grads, *gamma, ng.dgamma);
            tape.accumulate(grads, *beta, ng.dbeta);
        }
        Op::Linear { x, w, b } => {
            let (dx, dw, db) = linalg::linear_backward(tape, *x, *w, *b, g);
            if let Some(dx) = dx {
                tape.accumulate(grads, *x, dx);
            }
            if let Some(dw) = dw {
                tape.accumulate(grads, *w, dw);
            }
            if let (Some(b), Some(db)) = (b, db) {
                tape.accumulate(grads, *b, db);
            }
        }
        Op::MatMul { a, b, trans_b } => {
            let (da, db) = linalg::matmul_backward(tape, *a, *b, *trans_b, g);
            if let Some(da) = da {
                tape.accumulate(grads, *a, da);
            }
            if let Some(db) = db {
                tape.accumulate(grads, *b, db);
            }
        }
        Op::Softmax { x } => {
            let dx = linalg::softmax_backward(&node.value, g);
            tape.accumulate(grads, *x, dx);
        }
        Op::Unary { x, kind } => {
            let dx = backward_unary(tape, *x, &node.value, *kind, g);
            tape.accumulate(grads, *x, dx);
        }
        Op::Add { a, b } => {
            if tape.requires_grad(*b) {
                let gb = backward_add_broadcast(g, tape.shape(*b));
                tape.accumulate(grads, *b, gb);
            }
            tape.accumulate(grads, *a, g.clone());
        }
        Op::Sub { a, b } => {
            if tape.requires_grad(*b) {
                tape.accumulate(grads, *b, g.map(|v| -v));
            }
            tape.accumulate(grads, *a, g.clone());
        }
        Op::Mul { a, b } => {
            let (av, bv) = (tape.value(*a), tape.value(*b));
            if tape.requires_grad(*a) {
                tape.accumulate(grads, *a, zip_map(g, bv, |gv, y| gv * y));
            }
            if tape.requires_grad(*b) {
                tape.accumulate(grads, *b, zip_map(g, av, |gv, x| gv * x));
            }
        }
        Op::Div { a, b } => {
            let (av, bv) = (tape.value(*a), tape.value(*b));
            if tape.requires_grad(*a) {
                tape.accumulate(grads, *a, zip_map(g, bv, |gv, y| gv / y));
            }
            if tape.requires_grad(*b) {
                tape.accumulate(grads, *b, zip3_map(g, av, bv, |gv, x, y| -gv * x / (y * y)));
            }
        }
        Op::Maximum { a, b } | Op::Minimum { a, b } => {
            let is_max = matches!(node.op, Op::Maximum { .. });
            let (av, bv) = (tape.value(*a), tape.value(*b));
            let pick_a = |x: F, y: F| if is_max { x >= y } else { x <= y };
            if tape.requires_grad(*a) {
                let d = zip3_map(g, av, bv, |gv, x, y| if pick_a(x, y) { gv } else { F::zero() });
                tape.accumulate(grads, *a, d);
            }
            if tape.requires_grad(*b) {
                let d = zip3_map(g, av, bv, |gv, x, y| if pick_a(x, y) { F::zero() } else { gv });
                tape.accumulate(grads, *b, d);
            }
        }
        Op::Scale { x, s } => {
            let s = *s;
            tape.accumulate(grads, *x, g.map(|v| v * s));
        }
        Op::Shift { x } => tape.accumulate(grads, *x, g.clone()),
        Op::Concat { inputs, axis } => {
            let parts = shape::concat_backward(tape, inputs, *axis, g);
            for (&inp, part) in inputs.iter().zip(parts) {
                if let Some(p) = part {
                    tape.accumulate(grads, inp, p);
                }
            }
        }
        Op::MaxPool { x, argmax } => {
            let dx = conv::max_pool_backward(tape.shape(*x), argmax, g);
            tape.accumulate(grads, *x, dx);
        }
        Op::Upsample2x { x } => {
            let dx = conv::upsample_backward(tape.shape(*x), g);
            tape.accumulate(grads, *x, dx);
        }
        Op::Gather { x, index } => {
            let dx = shape::gather_backward(tape.shape(*x), index, g);
            tape.accumulate(grads, *x, dx);
        }
        Op::Reshape { x } => {
            let dx = g.clone().reshaped(tape.shape(*x)).expect("reshape grad");
            tape.accumulate(grads, *x, dx);
        }
        Op::Sum { x } => {
            let gv = g.data()[0];
            tape.accumulate(grads, *x, Tensor::full(tape.shape(*x), gv));
        }
        Op::Mean { x } => {
            let n = tape.value(*x).numel().max(1);
            let gv = g.data()[0] / F::from_usize(n).unwrap();
            tape.accumulate(grads, *x, Tensor::full(tape.shape(*x), gv));
        }
        Op::BceWithLogits { x, target } => {
            let dx = shape::bce_backward(tape.value(*x), target, g.data()[0]);
            tape.accumulate(grads, *x, dx);
        }
    }
}
