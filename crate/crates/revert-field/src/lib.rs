//! Euclidean distance fields from noisy point clouds.
//!
//! The core idea: model a latent occupancy field with GP regression over
//! surface points (every observation has value 1), then map the inferred
//! latent value back to a distance through the kernel's inverse — the
//! *reverting function*. Close to the surface this is far more accurate
//! than classic smooth-minimum or log-transformed heat fields, and it
//! comes with an uncertainty proxy built from the latent gradient.
//!
//! On top of the field sit two ultrasonic-guided-wave applications:
//! particle-filter echolocation inside a metal plate and two-stage
//! least-squares mapping of the plate boundary from echo envelopes.
//!
//! Everything is driven from the `revert-field` CLI; see the crate README.
//!
//! Units are meters, seconds and Hz throughout.

pub mod baselines;
pub mod calibrate;
pub mod cli;
pub mod distance;
pub mod echoloc;
pub mod error;
pub mod gp_field;
pub mod interp;
pub mod kernels;
pub mod mapping;
pub mod seed;
pub mod simbench;
pub mod ugw_signal;

pub use error::{Error, Result};
pub use gp_field::{LatentFieldModel, LatentQuery, PointCloud};
pub use kernels::{KernelKind, KernelModel};
