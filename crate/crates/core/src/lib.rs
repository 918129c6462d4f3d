//! Desk-scale pipeline for learning view-to-map alignment in synthetic
//! indoor worlds.
//!
//! The crate is organized as a chain of modules that mirror the data flow:
//!
//! * [`world`] — procedural 2.5-D floor plans on a metric cell grid, with
//!   connectivity/geodesic queries and a binary file format.
//! * [`render`] — egocentric RGBD rendering by column raycasting, plus
//!   collision-checked agent stepping and explorable-distance probing.
//! * [`sampler`] — viewpoint/view-pair/path sampling under spacing and
//!   reachability constraints, including the shortest-path follower.
//! * [`mapper`] — top-down egocentric semantic maps accumulated from
//!   per-pose visibility, with trajectory overlay and ablation masks.
//! * [`dataset`] — sharded binary training records with deterministic
//!   streaming, subsetting, and split manifests.
//! * [`model`] — a from-scratch RGBD + map transformer encoder pair with
//!   hand-written gradients (see [`autodiff`]).
//! * [`objectives`] — symmetric InfoNCE over view/map embeddings plus
//!   angular-offset and explorable-distance regression losses.
//! * [`trainer`] — AdamW-style optimization, augmentation, checkpointing,
//!   and finite-difference gradient checking.
//! * [`eval`] — alignment accuracy, head error metrics, linear probes, and
//!   plot/montage rendering.
//!
//! Numeric model code is generic over the scalar type through [`scalar::Scalar`]
//! (`f32` for training throughput, `f64` for tight gradient checks); the
//! aliases below fix the common concrete choices.

pub mod autodiff;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geom;
pub mod mapper;
pub mod model;
pub mod objectives;
pub mod oracles;
pub mod pipeline;
pub mod render;
pub mod sampler;
pub mod scalar;
pub mod tensor;
pub mod trainer;
pub mod viz;
pub mod world;

pub use error::{Error, Result};

/// Default training scalar: single precision keeps the step loop fast.
pub type Real = f32;

/// Tensor over the default training scalar.
pub type Tensor32 = tensor::Tensor<f32>;
/// Double-precision tensor, used where finite differences need headroom.
pub type Tensor64 = tensor::Tensor<f64>;

// (model aliases appear once the model module lands)
