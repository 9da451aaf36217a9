//! The flow network: feature and context encoders, correlation volume and
//! pyramid, global matching, the mixing network, ODE right-hand sides,
//! the latent decoder and the discrete ConvGRU baseline.
//!
//! Latent flows are measured in latent cells; full-resolution flows are
//! their bilinear upsampling multiplied by the downsampling factor `n`.

pub mod checkpoint;
mod config;
mod field;
mod layers;
mod model;
mod rhs;

pub use config::{GradientMode, ModelConfig, Refiner, RhsKind, SolverSpec};
pub use field::{FlowField, ValidMask};
pub use layers::{
    build_correlation, coordinate_grid, correlation_pyramid, decode, encode_features, global_match,
    lookup_pyramid, mixing_forward, upsample_flow,
};
pub use model::{FlowModel, ForwardOptions, ForwardOutput, Prediction};
pub use rhs::{gru_cell, gru_gates, GruOdeRhs, TransformerRhs, COND};
