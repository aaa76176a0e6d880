//! Tape-based reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Graphs are rebuilt every step. Junctions let a caller intercept the
//! per-head gradients arriving at a shared input before they are summed.

mod kernels;
mod ops;
mod params;
mod tape;
mod tensor;

pub use kernels::log_sum_exp;
pub use params::{ParamGroup, ParamStore, Parameter};
pub use tape::{Gradients, JunctionId, JunctionInfo, JunctionResolver, PassThrough, Tape, Var};
pub use tensor::{Tensor, MAX_RANK};

pub(crate) use kernels::{gemm, gemm_at_b, sigmoid, softplus};

#[cfg(test)]
mod tests;
