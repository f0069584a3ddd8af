//! Simulation laboratory for planar Riemannian first passage percolation.
//!
//! The crate builds random speed fields by convolving white noise (or a
//! Poisson point cloud) with a compactly supported bump kernel, computes
//! passage times and geodesics on a 16-neighbor grid stencil, realizes
//! column-restricted (conforming) distances over independent per-column
//! environments, drives block-resampling dynamics for chaos and
//! Efron-Stein statistics, and solves the constrained integer-path
//! maximization used for heavy-tailed polymer bounds.

pub mod conforming;
pub mod error;
pub mod estimators;
pub mod field;
pub mod geom;
pub mod polymer;
pub mod resampling;
pub mod rng;
pub mod solver;
pub mod stats;

pub use error::CoreError;
