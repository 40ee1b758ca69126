//! Dense incompressible motion estimation from multi-orientation tagged
//! volumes.
//!
//! The pipeline runs harmonic-phase (HARP) filtering on three tagged
//! volumes, maps each wrapped phase to a (sin, cos) pair, and registers the
//! six-channel fixed and moving images by optimizing a stationary velocity
//! field. The velocity is exponentiated by scaling and squaring; the
//! objective combines multi-channel MSE, a gradient smoothness penalty and a
//! magnitude-weighted log-Jacobian-determinant incompressibility penalty.

pub mod deform;
pub mod error;
pub mod grid;
pub mod harp;
pub mod metrics;
pub mod objective;
pub mod optim;
pub mod phantom;
pub mod vvol;

pub use error::{Error, Result};
pub use grid::{BoundaryPolicy, Geometry, ScalarVolume, VectorField};
