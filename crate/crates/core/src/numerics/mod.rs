//! Dense `f64` tensors and reverse-mode differentiation.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod params;
mod tensor;

pub use gradcheck::{grad_check, GradCheckEntry, GradCheckReport};
pub use graph::{
    gelu, log_sigmoid, sigmoid, Binary, CustomOp, Graph, Unary, Var, GELU_CUBIC,
    GELU_SQRT_2_OVER_PI,
};
pub use kernels::{log_add, log_sum_exp};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
