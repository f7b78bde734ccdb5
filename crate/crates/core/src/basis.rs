//! Natural cubic spline basis for the group-level fixed effects.
//!
//! The basis has `n_basis` free functions over `n_basis` equidistant knots in
//! `[0, 1]`: the constant, the identity, and `n_basis - 2` truncated-cubic
//! combinations with the two natural constraints absorbed, so every basis
//! function has zero second derivative at and beyond the boundary knots and
//! continues linearly outside `[0, 1]`. Warped times slightly past 1 stay
//! well-defined through that linear tail. Natural splines do not form a
//! partition of unity, but they reproduce constants and linear functions
//! exactly.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Natural cubic spline basis on equidistant knots in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis {
    knots: Vec<f64>,
}

impl SplineBasis {
    /// Equidistant knots; `n_basis >= 4`.
    pub fn new(n_basis: usize) -> Result<Self> {
        if n_basis < 4 {
            return Err(Error::InvalidInput(format!(
                "natural spline basis needs at least 4 functions, got {n_basis}"
            )));
        }
        let knots = (0..n_basis)
            .map(|i| i as f64 / (n_basis - 1) as f64)
            .collect();
        Ok(Self { knots })
    }

    /// Number of basis functions.
    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    fn truncated(t: f64, knot: f64) -> f64 {
        let d = t - knot;
        if d > 0.0 {
            d * d * d
        } else {
            0.0
        }
    }

    fn truncated_deriv(t: f64, knot: f64) -> f64 {
        let d = t - knot;
        if d > 0.0 {
            3.0 * d * d
        } else {
            0.0
        }
    }

    /// Basis evaluations at `t`; outside `[0, 1]` each function continues
    /// linearly by construction.
    pub fn design_row(&self, t: f64) -> DVector<f64> {
        let k = self.knots.len();
        let last = self.knots[k - 1];
        let mut row = DVector::zeros(k);
        row[0] = 1.0;
        row[1] = t;
        let d_last = (Self::truncated(t, self.knots[k - 2]) - Self::truncated(t, last))
            / (last - self.knots[k - 2]);
        for j in 0..k - 2 {
            let d_j = (Self::truncated(t, self.knots[j]) - Self::truncated(t, last))
                / (last - self.knots[j]);
            row[j + 2] = d_j - d_last;
        }
        row
    }

    /// Derivatives of the basis functions at `t`.
    pub fn design_row_deriv(&self, t: f64) -> DVector<f64> {
        let k = self.knots.len();
        let last = self.knots[k - 1];
        let mut row = DVector::zeros(k);
        row[1] = 1.0;
        let d_last = (Self::truncated_deriv(t, self.knots[k - 2]) - Self::truncated_deriv(t, last))
            / (last - self.knots[k - 2]);
        for j in 0..k - 2 {
            let d_j = (Self::truncated_deriv(t, self.knots[j]) - Self::truncated_deriv(t, last))
                / (last - self.knots[j]);
            row[j + 2] = d_j - d_last;
        }
        row
    }

    /// Stacked design rows for a batch of times.
    pub fn design_matrix(&self, times: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(times.len(), self.len());
        for (i, &t) in times.iter().enumerate() {
            m.row_mut(i).copy_from(&self.design_row(t).transpose());
        }
        m
    }

    /// Evaluate the spline with the given coefficients.
    pub fn eval(&self, coeffs: &DVector<f64>, t: f64) -> Result<f64> {
        if coeffs.len() != self.len() {
            return Err(Error::InvalidInput(format!(
                "coefficient length {} does not match basis size {}",
                coeffs.len(),
                self.len()
            )));
        }
        Ok(self.design_row(t).dot(coeffs))
    }

    /// Evaluate the spline derivative with the given coefficients.
    pub fn eval_deriv(&self, coeffs: &DVector<f64>, t: f64) -> Result<f64> {
        if coeffs.len() != self.len() {
            return Err(Error::InvalidInput(format!(
                "coefficient length {} does not match basis size {}",
                coeffs.len(),
                self.len()
            )));
        }
        Ok(self.design_row_deriv(t).dot(coeffs))
    }
}
