//! Non-stationary Gaussian-process regression with latent-field Gibbs kernels.

pub mod bench;
pub mod cluster;
pub mod data;
pub mod error;
pub mod exact;
pub mod fit;
pub mod kernels;
pub mod latent;
pub mod linalg;
pub mod metrics;
pub mod optim;
pub mod par;
pub mod points;
pub mod rng;
pub mod sparse;
mod serde_matrix;

pub use error::{Error, Result};
pub use points::Points;
