//! Minimal reverse-mode autodiff over f32 matrices.
//!
//! The models here are small and fixed-architecture, so instead of a
//! general framework the crate uses a flat tape ([`graph::Graph`]) whose
//! ops cover exactly what the pipeline needs: GEMM (via
//! `matrixmultiply`), bias/residual adds, ReLU, layer norm, single-head
//! attention, token packing, and a handful of fused loss heads.
//! Scalar reductions accumulate in f64 for stable, order-independent
//! tolerances; storage and GEMM stay in f32, matching the checkpoint
//! format.

pub mod adam;
pub mod graph;
pub mod params;
pub mod tensor;

pub use adam::Adam;
pub use graph::{Graph, NodeId};
pub use params::{ParamId, ParamStore};
pub use tensor::Mat;
