//! Dense `f32` tensors and reverse-mode differentiation.

mod gradcheck;
pub(crate) mod kernels;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheck};
pub use optim::{cosine_lr, sgd_step, ParamKind, Parameter};
pub use tape::{BatchNormMode, BatchStats, Gradients, Tape, Var, LOG_FLOOR};
pub use tensor::Tensor;
