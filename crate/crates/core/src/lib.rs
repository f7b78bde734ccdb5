//! Latent warped mean-curve models for exponential-family observations.

pub mod basis;
pub mod bessel;
pub mod dispersion;
pub mod error;
pub mod estimation;
pub mod inference;
pub mod kernels;
pub mod model;
pub mod response;
pub mod synth;
pub mod rng;
pub mod warp;

pub use error::{Error, Result};
pub use kernels::{covariance_matrix, matern, warp_prior, CovarianceMatrix, MaternKernel};
pub use response::ResponseFamily;
