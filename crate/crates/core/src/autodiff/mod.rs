//! Dense tensor arithmetic with reverse-mode automatic differentiation.

mod graph;
pub mod kernels;
pub mod nn;
mod ops;
mod params;

pub use graph::{BackwardCtx, BackwardFn, Gradients, Graph, Var};
pub use nn::{attention_block, attention_block_traced, init_attention_block, AttentionTrace};
pub use ops::Activation;
pub use params::{Bound, ParamSet};
pub(crate) use params::normal;

#[cfg(test)]
mod tests;
