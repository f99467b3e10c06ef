//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! The kernel set is exactly what the fusion model needs: 2-D and batched
//! matrix products, broadcasting bias/row scaling, elementwise maps,
//! row softmax, layer norm, pooling, concat/slice, row normalization and the
//! two fused loss kernels.

mod gemm;
mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport, ParamCheck};
pub use tape::{OpKind, Tape, Var};
pub use tensor::Tensor;
