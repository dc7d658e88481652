//! Desk-scale multi-view TSDF reconstruction.
//!
//! The crate covers the full pipeline: procedural scenes with analytic
//! signed distance fields, ray-cast depth, Curless–Levoy TSDF fusion,
//! depth-guided feature volumes, a small reverse-mode autodiff engine and
//! the trained model built on it, arbitrary-resolution TSDF querying with
//! occupancy filtering, marching-cubes meshing, and 3D/2D reconstruction
//! metrics.
//!
//! All numeric code is generic over the scalar type via [`Scalar`]
//! (`f32` or `f64`); the type aliases at the crate root fix the default
//! `f64` lane used by the CLI and the test suites.

pub mod autodiff;
pub mod backproject;
pub mod eval;
pub mod geometry;
mod mc_tables;
pub mod mesh;
pub mod model;
pub mod reconstruct;
pub mod scalar;
pub mod scene;
pub mod tsdf;

pub use scalar::Scalar;

/// Default-precision (f64) aliases for the core geometric types.
pub type Vec3 = geometry::Vec3<f64>;
pub type Mat3 = geometry::Mat3<f64>;
pub type Intrinsics = geometry::Intrinsics<f64>;
pub type Pose = geometry::Pose<f64>;
pub type GridSpec = geometry::GridSpec<f64>;
