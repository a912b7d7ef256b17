//! Dense tensors with reverse-mode differentiation.

pub mod gradcheck;
mod graph;
mod params;
mod real;
mod tensor;

pub use graph::{Graph, Var};
pub use params::{Binding, ParamId, ParamStore};
pub use real::{FloatOps, Real};
pub use tensor::{numel, Tensor};

#[cfg(test)]
mod tests;
