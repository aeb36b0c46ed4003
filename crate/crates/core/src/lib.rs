//! A desk-scale unified driving world model.
//!
//! The crate builds a full loop on a procedurally generated toy driving
//! world: multi-view observations are lifted into a bird's-eye-view grid,
//! compressed into sequence tokens, processed by a small causal sequence
//! model together with text and world queries, linked forward in time, and
//! rendered back into LiDAR point clouds through a differentiable signed
//! distance field.
//!
//! All numeric code is generic over the scalar type ([`numerics::Scalar`]):
//! f64 instantiations back the test and gradient-oracle paths, f32 backs
//! training. Concrete aliases live at the crate root.

pub mod bevtok;
pub mod config;
pub mod evalsuite;
pub mod nn;
pub mod numerics;
pub mod params;
pub mod pipeline;
pub mod ply;
pub mod render;
pub mod seqmodel;
pub mod toyworld;
pub mod trainer;
pub mod worldlink;

pub use numerics::{Graph, Scalar, Tensor, Var};

/// f32 instantiations back training.
pub type Tensor32 = numerics::Tensor<f32>;
pub type Graph32 = numerics::Graph<f32>;
pub type Pipeline32 = pipeline::Pipeline<f32>;

/// f64 instantiations back tests and gradient oracles.
pub type Tensor64 = numerics::Tensor<f64>;
pub type Graph64 = numerics::Graph<f64>;
pub type Pipeline64 = pipeline::Pipeline<f64>;
