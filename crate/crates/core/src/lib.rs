// Indexed loops are clearer than iterator chains for the dense kernels here.
#![allow(clippy::needless_range_loop)]

//! Training-free lineage fingerprinting for transformer weight bundles.
//!
//! Given two weight bundles, the pipeline recovers the weight manipulations
//! a derived model can hide behind (scaling, hidden-dimension permutation,
//! sign flips, rotary-compatible rotations, pruning) and scores similarity
//! with an unbiased centered-kernel metric over the Q/K projections. A
//! synthetic model forge and an evaluation harness cover the full
//! attack-and-detect loop at desk scale.
//!
//! The math modules ([`matrix`], [`assignment`], [`kernel`]) are generic
//! over the floating scalar; the pipeline runs on the f64 aliases below.

pub mod assignment;
pub mod bundle;
pub mod container;
pub mod eval;
pub mod fingerprint;
pub mod forge;
pub mod kernel;
pub mod matrix;
pub mod scalar;

pub use scalar::Scalar;

/// Dense f64 matrix used by the pipeline.
pub type Mat = matrix::Matrix<f64>;
/// f32 counterpart for callers that trade precision for footprint.
pub type Mat32 = matrix::Matrix<f32>;
/// Block-diagonal rotation over f64.
pub type Rotation = matrix::BlockRotation<f64>;
/// f32 counterpart.
pub type Rotation32 = matrix::BlockRotation<f32>;
