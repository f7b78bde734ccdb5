//! Matérn covariance function and covariance-matrix construction.
//!
//! The kernel is parametrized as
//!
//! `f(d) = sigma^2 * 2^(1-alpha) / Gamma(alpha) * (alpha d / kappa)^alpha * K_alpha(alpha d / kappa)`
//!
//! with scale `sigma`, smoothness `alpha` and range `kappa`. Note the scaled
//! argument is `alpha d / kappa`, not the more common `sqrt(2 alpha) d / rho`;
//! the two forms coincide after `rho = kappa sqrt(2 / alpha)`, so positive
//! definiteness carries over unchanged.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::bessel::bessel_k;
use crate::error::{Error, Result};

/// Hard cap on the smoothness parameter used during estimation.
pub const MAX_SMOOTHNESS: f64 = 10.0;

/// A stationary Matérn kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaternKernel {
    scale: f64,
    smoothness: f64,
    range: f64,
}

impl MaternKernel {
    pub fn new(scale: f64, smoothness: f64, range: f64) -> Result<Self> {
        let check = |name: &str, v: f64| {
            if !(v.is_finite() && v > 0.0) {
                Err(Error::InvalidInput(format!(
                    "Matérn {name} must be positive and finite, got {v}"
                )))
            } else {
                Ok(())
            }
        };
        check("scale", scale)?;
        check("smoothness", smoothness)?;
        check("range", range)?;
        if smoothness > MAX_SMOOTHNESS {
            return Err(Error::InvalidInput(format!(
                "Matérn smoothness is capped at {MAX_SMOOTHNESS}, got {smoothness}"
            )));
        }
        Ok(Self { scale, smoothness, range })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn smoothness(&self) -> f64 {
        self.smoothness
    }

    pub fn range(&self) -> f64 {
        self.range
    }

    /// Kernel variance, the value at lag zero.
    pub fn variance(&self) -> f64 {
        self.scale * self.scale
    }
}

/// Evaluate the kernel at a nonnegative lag.
pub fn matern(d: f64, kernel: &MaternKernel) -> Result<f64> {
    if !d.is_finite() || d < 0.0 {
        return Err(Error::InvalidInput(format!(
            "Matérn lag must be finite and nonnegative, got {d}"
        )));
    }
    let s2 = kernel.variance();
    if d == 0.0 {
        return Ok(s2);
    }
    let alpha = kernel.smoothness;
    let x = alpha * d / kernel.range;
    if x < 1e-10 {
        // Two-term small-argument expansion of the normalized kernel,
        // 1 - Gamma(1-a)/Gamma(1+a) * (x/2)^(2a), valid for non-integer a;
        // for integer a the correction is O(x^2 log x) and below resolution.
        if (alpha - alpha.round()).abs() < 1e-9 {
            return Ok(s2);
        }
        let corr = (ln_gamma(1.0 - alpha) - ln_gamma(1.0 + alpha)
            + 2.0 * alpha * (x / 2.0).ln())
        .exp();
        return Ok(s2 * (1.0 - corr));
    }
    // log-space prefactor keeps large smoothness values from overflowing
    let log_pref = (1.0 - alpha) * std::f64::consts::LN_2 - ln_gamma(alpha) + alpha * x.ln();
    let value = s2 * (log_pref.exp() * bessel_k(alpha, x));
    Ok(value)
}

/// A symmetric positive-definite covariance matrix together with its
/// Cholesky factorization and any diagonal jitter that was required.
#[derive(Debug, Clone)]
pub struct CovarianceMatrix {
    matrix: DMatrix<f64>,
    jitter: f64,
    chol: Cholesky<f64, Dyn>,
}

impl CovarianceMatrix {
    /// Factorize a symmetric matrix, adding diagonal jitter if plain
    /// Cholesky fails. Jitter starts at `1e-10 * scale` and doubles up to
    /// `1e-6 * scale`; beyond that the matrix is reported ill-conditioned.
    pub fn from_matrix(matrix: DMatrix<f64>, scale: f64) -> Result<Self> {
        debug_assert_eq!(matrix.nrows(), matrix.ncols());
        if let Some(chol) = Cholesky::new(matrix.clone()) {
            return Ok(Self { matrix, jitter: 0.0, chol });
        }
        let mut jitter = 1e-10 * scale;
        while jitter <= 1e-6 * scale {
            let mut m = matrix.clone();
            for i in 0..m.nrows() {
                m[(i, i)] += jitter;
            }
            if let Some(chol) = Cholesky::new(m.clone()) {
                return Ok(Self { matrix: m, jitter, chol });
            }
            jitter *= 2.0;
        }
        Err(Error::IllConditioned(format!(
            "covariance not positive definite within jitter budget {:.3e}",
            1e-6 * scale
        )))
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Diagonal inflation that was actually applied.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Solve `M x = b`, with one step of iterative refinement so the forward
    /// error stays near machine precision even for ill-conditioned kernels.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = self.chol.solve(b);
        let r = b - &self.matrix * &x;
        x += self.chol.solve(&r);
        x
    }

    /// Solve `M X = B` for a matrix right-hand side.
    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    /// Quadratic form `x' M^-1 x`.
    pub fn inv_quad(&self, x: &DVector<f64>) -> f64 {
        x.dot(&self.chol.solve(x))
    }

    /// `log |M|`.
    pub fn log_det(&self) -> f64 {
        self.chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0
    }

    /// Dense inverse.
    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// Lower Cholesky factor (of the jittered matrix).
    pub fn chol_l(&self) -> DMatrix<f64> {
        self.chol.l()
    }
}

/// Build the covariance matrix of a kernel over a set of time points.
pub fn covariance_matrix(times: &[f64], kernel: &MaternKernel) -> Result<CovarianceMatrix> {
    if times.is_empty() {
        return Err(Error::InvalidInput("covariance over empty time grid".into()));
    }
    if times.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidInput("non-finite time point".into()));
    }
    let n = times.len();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = matern((times[i] - times[j]).abs(), kernel)?;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    CovarianceMatrix::from_matrix(m, kernel.variance())
}

/// Prior covariance of the warp coefficients: a Matérn kernel over the
/// anchor grid with smoothness fixed at 3/2, the discrete covariance of an
/// integrated Ornstein-Uhlenbeck process.
pub fn warp_prior(anchors: &[f64], range: f64, scale: f64) -> Result<CovarianceMatrix> {
    if anchors.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput("warp anchors must be strictly increasing".into()));
    }
    let kernel = MaternKernel::new(scale, 1.5, range)?;
    covariance_matrix(anchors, &kernel)
}
