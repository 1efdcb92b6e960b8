//! Few-shot residual calibration of a frozen linear cross-subject mapper.
//!
//! The pipeline is a three-stage cascade: a frozen linear backbone maps
//! source-subject responses into target-subject voxel space, a small
//! trainable adapter adds a nonlinear correction on top of it, and a frozen
//! decoder projects calibrated responses into a unit-norm semantic embedding
//! space. Training uses a dual-stream objective (paired voxel anchors plus
//! unpaired semantic consistency) with hand-written gradients for the
//! adapter parameters only.
//!
//! Everything runs on a synthetic multi-subject world with known ground
//! truth ([`synth`]), so calibration quality can be measured against the
//! generative model itself ([`eval`]).

pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod synth;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
