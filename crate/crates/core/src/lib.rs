//! Optical flow refinement with neural ordinary differential equations.
//!
//! The crate is generic over the scalar type ([`Scalar`], implemented for
//! `f32` and `f64`). Concrete aliases for both precisions live at the crate
//! root.

pub mod autodiff;
pub mod check;
pub mod error;
pub mod flownet;
pub mod metrics;
pub mod ode;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod training;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type FlowField32 = flownet::FlowField<f32>;
pub type FlowField64 = flownet::FlowField<f64>;
pub type FlowModel32 = flownet::FlowModel<f32>;
pub type FlowModel64 = flownet::FlowModel<f64>;
