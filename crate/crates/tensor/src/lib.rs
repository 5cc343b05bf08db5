//! Dense CPU tensors with tape-based reverse-mode differentiation.
//!
//! The engine is deliberately single-threaded so that a forward/backward
//! pass is bit-reproducible for a fixed input. Every operation is generic
//! over [`Element`], which lets the same graph run in `f32` for training and
//! in `f64` for finite-difference gradient checks.

mod element;
mod error;
mod ops;
mod optim;
mod params;
mod tape;
mod tensor;

pub use element::{gemm, Element};
pub use error::{Result, TensorError};
pub use ops::{conv_out_size, BatchStats};
pub use optim::{Adam, GroupLr, Optimizer, Sgd};
pub use params::{accumulate_grads, Ctx, Param, ParamId, ParamKind, ParamStore, StatUpdate};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{permute_index, strides, Tensor};
