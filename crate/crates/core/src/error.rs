//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by model construction, fitting and inference.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent input data.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An observation outside the sample space of the response family.
    #[error("invalid observation for {family} family: {detail}")]
    InvalidObservation { family: String, detail: String },

    /// Warp anchor values that do not define a monotone time transformation.
    #[error("invalid warp: {0}")]
    InvalidWarp(String),

    /// A covariance matrix that could not be made positive definite within
    /// the allowed jitter budget.
    #[error("ill-conditioned covariance: {0}")]
    IllConditioned(String),

    /// An iterative solver exhausted its budget.
    #[error("failed to converge: {0}")]
    NonConvergence(String),

    /// Rank-deficient fixed-effect design for a treatment group.
    #[error("rank-deficient design for group '{0}'")]
    RankDeficient(String),

    /// Replicate data from which no dispersion can be estimated.
    #[error("dispersion not identifiable: {0}")]
    RateNotIdentifiable(String),

    /// A profiled information matrix with significantly negative curvature.
    #[error("indefinite information matrix: {0}")]
    IndefiniteInformation(String),
}

pub type Result<T> = std::result::Result<T, Error>;
