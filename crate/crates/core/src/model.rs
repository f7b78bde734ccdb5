//! The latent-variable model: group mean curves warped in time, perturbed in
//! amplitude, observed through an exponential family.
//!
//! A curve's latent values are `u(t) = theta_g(v(t, w)) + x(t)` with `w` the
//! warp coefficients, `x` a zero-mean Gaussian process, and observations
//! `y_k ~ p(. | u(t_k))`. The joint posterior negative log-likelihood of one
//! curve is
//!
//! `sum_k [A(u_k, y_k) - u_k y~_k] + 1/2 (gamma_w - u)' S^-1 (gamma_w - u) + 1/2 w' C^-1 w`
//!
//! where `gamma_w` is the fixed effect evaluated at warped observation times,
//! `S` the amplitude covariance at the *observed* times (amplitude noise is
//! added after warping the fixed effect, and observation times are fixed by
//! design), and `C` the warp prior. Log-determinant terms are deliberately
//! absent here; they enter the marginal likelihood only.
//!
//! The amplitude process lives on the link (log) scale, so `exp(u)` is the
//! intensity of a count model.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::SplineBasis;
use crate::error::{Error, Result};
use crate::kernels::{covariance_matrix, warp_prior, CovarianceMatrix, MaternKernel};
use crate::response::ResponseFamily;
use crate::warp::{build_warp, warp_jacobian, WarpSpec};

/// One replicated observation series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    id: String,
    group: String,
    times: Vec<f64>,
    y: Vec<f64>,
    /// Number of raw replicates summed into each count; scales the negative
    /// binomial rate of this curve.
    replicate_count: u32,
}

impl Curve {
    pub fn new(
        id: impl Into<String>,
        group: impl Into<String>,
        times: Vec<f64>,
        y: Vec<f64>,
        replicate_count: u32,
    ) -> Result<Self> {
        let id = id.into();
        let group = group.into();
        if times.len() != y.len() {
            return Err(Error::InvalidInput(format!(
                "curve '{id}': {} times but {} observations",
                times.len(),
                y.len()
            )));
        }
        if times.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "curve '{id}': needs at least 2 observations, got {}",
                times.len()
            )));
        }
        if times.iter().any(|t| !t.is_finite() || *t < 0.0 || *t > 1.0) {
            return Err(Error::InvalidInput(format!(
                "curve '{id}': times must lie in [0, 1]"
            )));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput(format!(
                "curve '{id}': times must be strictly increasing"
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "curve '{id}': non-finite observation"
            )));
        }
        if replicate_count == 0 {
            return Err(Error::InvalidInput(format!(
                "curve '{id}': replicate count must be positive"
            )));
        }
        Ok(Self { id, group, times, y, replicate_count })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn group(&self) -> &str {
        &self.group
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn observations(&self) -> &[f64] {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn replicate_count(&self) -> u32 {
        self.replicate_count
    }
}

/// A set of curves grouped by treatment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    curves: Vec<Curve>,
    groups: Vec<String>,
}

impl Dataset {
    pub fn new(curves: Vec<Curve>) -> Result<Self> {
        if curves.is_empty() {
            return Err(Error::InvalidInput("dataset has no curves".into()));
        }
        let mut ids = std::collections::HashSet::new();
        for c in &curves {
            if !ids.insert(c.id().to_string()) {
                return Err(Error::InvalidInput(format!("duplicate curve id '{}'", c.id())));
            }
        }
        let mut groups: Vec<String> = curves.iter().map(|c| c.group.clone()).collect();
        groups.sort();
        groups.dedup();
        Ok(Self { curves, groups })
    }

    pub fn curves(&self) -> &[Curve] {
        &self.curves
    }

    pub fn n_curves(&self) -> usize {
        self.curves.len()
    }

    pub fn groups(&self) -> &[String] {
        &self.groups
    }

    pub fn group_index(&self, label: &str) -> Option<usize> {
        self.groups.iter().position(|g| g == label)
    }

    /// Indices of the curves in group `j`.
    pub fn curves_in_group(&self, j: usize) -> Vec<usize> {
        let label = &self.groups[j];
        (0..self.curves.len())
            .filter(|&i| self.curves[i].group() == label)
            .collect()
    }

    /// Check all observations against a response family's sample space.
    pub fn check_family(&self, family: &ResponseFamily) -> Result<()> {
        for c in &self.curves {
            for &y in c.observations() {
                family.check_observation(y)?;
            }
        }
        Ok(())
    }

    /// A dataset with one curve removed, for leave-one-out refits.
    pub fn without_curve(&self, index: usize) -> Result<Self> {
        let mut curves = self.curves.clone();
        if index >= curves.len() {
            return Err(Error::InvalidInput(format!("no curve at index {index}")));
        }
        curves.remove(index);
        Self::new(curves)
    }
}

/// The effective family of one curve: negative binomial rates scale with the
/// number of aggregated replicates (the sum of k iid NB(r) counts is NB(kr)).
pub fn effective_family(base: &ResponseFamily, curve: &Curve) -> ResponseFamily {
    match base {
        ResponseFamily::NegBinomial { r } => ResponseFamily::NegBinomial {
            r: r * f64::from(curve.replicate_count()),
        },
        other => *other,
    }
}

/// Variance parameters of the latent layers. The warp kernel smoothness is
/// pinned at 3/2; the amplitude kernel carries free scale, smoothness, range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceParams {
    pub amplitude: MaternKernel,
    pub warp_scale: f64,
    pub warp_range: f64,
}

impl VarianceParams {
    pub fn new(amplitude: MaternKernel, warp_scale: f64, warp_range: f64) -> Result<Self> {
        for (name, v) in [("warp scale", warp_scale), ("warp range", warp_range)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(Self { amplitude, warp_scale, warp_range })
    }

    /// Warp prior covariance over the anchor grid.
    pub fn warp_prior(&self, spec: &WarpSpec) -> Result<CovarianceMatrix> {
        warp_prior(spec.anchors(), self.warp_range, self.warp_scale)
    }

    /// Amplitude covariance at a curve's observation times.
    pub fn amplitude_cov(&self, times: &[f64]) -> Result<CovarianceMatrix> {
        covariance_matrix(times, &self.amplitude)
    }
}

/// Predicted latent states, one entry per curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub u: Vec<DVector<f64>>,
    pub w: Vec<DVector<f64>>,
}

impl LatentState {
    pub fn validate(&self, dataset: &Dataset, spec: &WarpSpec) -> Result<()> {
        if self.u.len() != dataset.n_curves() || self.w.len() != dataset.n_curves() {
            return Err(Error::InvalidInput("latent state size mismatch".into()));
        }
        for (i, c) in dataset.curves().iter().enumerate() {
            if self.u[i].len() != c.len() || self.w[i].len() != spec.len() {
                return Err(Error::InvalidInput(format!(
                    "latent dimensions for curve '{}' do not match",
                    c.id()
                )));
            }
            build_warp(spec, self.w[i].as_slice())?;
        }
        Ok(())
    }
}

/// Everything fixed about one curve during latent optimization: family,
/// covariance factorizations, observation data.
pub struct CurveContext<'a> {
    pub curve: &'a Curve,
    pub family: ResponseFamily,
    pub basis: &'a SplineBasis,
    pub warp_spec: &'a WarpSpec,
    /// Amplitude covariance at the curve's observed times.
    pub s: &'a CovarianceMatrix,
    /// Warp prior over the anchors (shared across curves).
    pub c: &'a CovarianceMatrix,
}

impl<'a> CurveContext<'a> {
    pub fn new(
        curve: &'a Curve,
        base_family: &ResponseFamily,
        basis: &'a SplineBasis,
        warp_spec: &'a WarpSpec,
        s: &'a CovarianceMatrix,
        c: &'a CovarianceMatrix,
    ) -> Self {
        Self {
            curve,
            family: effective_family(base_family, curve),
            basis,
            warp_spec,
            s,
            c,
        }
    }

    /// Fixed effect at warped observation times.
    pub fn gamma(&self, coeffs: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
        let warp = build_warp(self.warp_spec, w.as_slice())?;
        let mut out = DVector::zeros(self.curve.len());
        for (k, &t) in self.curve.times().iter().enumerate() {
            out[k] = self.basis.eval(coeffs, warp.eval(t))?;
        }
        Ok(out)
    }

    /// Jacobian of `gamma` in `w`: `d theta(v(t_i, w)) / d w_k`.
    pub fn gamma_jacobian(&self, coeffs: &DVector<f64>, w: &DVector<f64>) -> Result<DMatrix<f64>> {
        let warp = build_warp(self.warp_spec, w.as_slice())?;
        let jv = warp_jacobian(self.warp_spec, w.as_slice(), self.curve.times())?;
        let mut jac = jv;
        for (i, &t) in self.curve.times().iter().enumerate() {
            let slope = self.basis.eval_deriv(coeffs, warp.eval(t))?;
            for k in 0..self.warp_spec.len() {
                jac[(i, k)] *= slope;
            }
        }
        Ok(jac)
    }

    /// Design matrix of the basis at warped observation times.
    pub fn warped_design(&self, w: &DVector<f64>) -> Result<DMatrix<f64>> {
        let warp = build_warp(self.warp_spec, w.as_slice())?;
        let warped: Vec<f64> = self.curve.times().iter().map(|&t| warp.eval(t)).collect();
        Ok(self.basis.design_matrix(&warped))
    }

    /// Data term of the posterior: `sum_k A(u_k, y_k) - u_k y~_k`.
    pub fn data_nll(&self, u: &DVector<f64>) -> f64 {
        self.curve
            .observations()
            .iter()
            .zip(u.iter())
            .map(|(&y, &uk)| self.family.a_value(uk, y) - uk * self.family.canonical_stat(y))
            .sum()
    }

    /// Joint posterior negative log-likelihood of this curve.
    pub fn posterior_nll(
        &self,
        coeffs: &DVector<f64>,
        u: &DVector<f64>,
        w: &DVector<f64>,
    ) -> Result<f64> {
        let gamma = self.gamma(coeffs, w)?;
        let resid = &gamma - u;
        let value = self.data_nll(u) + 0.5 * self.s.inv_quad(&resid) + 0.5 * self.c.inv_quad(w);
        Ok(value)
    }

    /// Gradient and Hessian of the posterior in `u` for fixed `w`:
    /// `grad = A'(u) - y~ + S^-1 (u - gamma)`, `H = diag(A''(u)) + S^-1`.
    pub fn posterior_grad_hess_u(
        &self,
        coeffs: &DVector<f64>,
        u: &DVector<f64>,
        w: &DVector<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let gamma = self.gamma(coeffs, w)?;
        let m = self.curve.len();
        let diff = u - &gamma;
        let s_term = self.s.solve(&diff);
        let mut grad = DVector::zeros(m);
        let mut hess = self.s.inverse();
        for k in 0..m {
            let y = self.curve.observations()[k];
            grad[k] = self.family.a_prime(u[k], y) - self.family.canonical_stat(y) + s_term[k];
            hess[(k, k)] += self.family.a_double_prime(u[k], y);
        }
        Ok((grad, hess))
    }
}

/// Standalone evaluation of the fixed effect at warped times (thin wrapper
/// used by tests and the CLI; fitting code uses [`CurveContext`]).
pub fn gamma_vector(
    basis: &SplineBasis,
    coeffs: &DVector<f64>,
    spec: &WarpSpec,
    w: &DVector<f64>,
    times: &[f64],
) -> Result<DVector<f64>> {
    let warp = build_warp(spec, w.as_slice())?;
    let mut out = DVector::zeros(times.len());
    for (k, &t) in times.iter().enumerate() {
        out[k] = basis.eval(coeffs, warp.eval(t))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn toy_curve() -> Curve {
        Curve::new("c1", "cold", vec![0.2, 0.5, 0.8], vec![0.3, -0.1, 0.4], 1).unwrap()
    }

    fn toy_context<'a>(
        curve: &'a Curve,
        family: &ResponseFamily,
        basis: &'a SplineBasis,
        spec: &'a WarpSpec,
        s: &'a CovarianceMatrix,
        c: &'a CovarianceMatrix,
    ) -> CurveContext<'a> {
        CurveContext::new(curve, family, basis, spec, s, c)
    }

    #[test]
    fn curve_validation_rejects_malformed_input() {
        assert!(Curve::new("a", "g", vec![0.1, 0.1], vec![1.0, 2.0], 1).is_err());
        assert!(Curve::new("a", "g", vec![0.1], vec![1.0], 1).is_err());
        assert!(Curve::new("a", "g", vec![0.1, 0.4], vec![1.0], 1).is_err());
        assert!(Curve::new("a", "g", vec![0.1, 1.4], vec![1.0, 2.0], 1).is_err());
        assert!(Curve::new("a", "g", vec![0.1, 0.4], vec![1.0, f64::NAN], 1).is_err());
        assert!(Curve::new("a", "g", vec![0.1, 0.4], vec![1.0, 2.0], 0).is_err());
        assert!(Curve::new("a", "g", vec![0.1, 0.4], vec![1.0, 2.0], 4).is_ok());
    }

    #[test]
    fn dataset_groups_are_sorted_and_deduplicated() {
        let c1 = Curve::new("a", "warm", vec![0.1, 0.2], vec![1.0, 2.0], 1).unwrap();
        let c2 = Curve::new("b", "cold", vec![0.1, 0.2], vec![1.0, 2.0], 1).unwrap();
        let c3 = Curve::new("c", "warm", vec![0.1, 0.2], vec![0.0, 1.0], 1).unwrap();
        let d = Dataset::new(vec![c1, c2, c3]).unwrap();
        assert_eq!(d.groups(), &["cold".to_string(), "warm".to_string()]);
        assert_eq!(d.curves_in_group(1), vec![0, 2]);
        let dup = Curve::new("a", "x", vec![0.1, 0.2], vec![1.0, 2.0], 1).unwrap();
        assert!(Dataset::new(vec![dup.clone(), dup]).is_err());
    }

    #[test]
    fn effective_family_scales_negbin_rate_only() {
        let c = Curve::new("a", "g", vec![0.1, 0.2], vec![1.0, 2.0], 4).unwrap();
        let nb = ResponseFamily::neg_binomial(4.658).unwrap();
        match effective_family(&nb, &c) {
            ResponseFamily::NegBinomial { r } => assert_relative_eq!(r, 18.632, epsilon = 1e-12),
            _ => panic!("family changed kind"),
        }
        assert_eq!(effective_family(&ResponseFamily::Poisson, &c), ResponseFamily::Poisson);
    }

    #[test]
    fn gamma_at_identity_warp_equals_theta_at_raw_times() {
        let basis = SplineBasis::new(11).unwrap();
        let spec = WarpSpec::equidistant(7).unwrap();
        let coeffs = DVector::from_fn(11, |i, _| (i as f64 * 0.3).sin() * 0.5);
        let times = [0.1, 0.33, 0.72, 0.95];
        let w = DVector::zeros(7);
        let g = gamma_vector(&basis, &coeffs, &spec, &w, &times).unwrap();
        for (k, &t) in times.iter().enumerate() {
            assert_relative_eq!(g[k], basis.eval(&coeffs, t).unwrap(), epsilon = 1e-12);
        }
    }

    #[test]
    fn gamma_of_constant_curve_is_warp_invariant() {
        let basis = SplineBasis::new(11).unwrap();
        let spec = WarpSpec::equidistant(7).unwrap();
        let mut coeffs = DVector::zeros(11);
        coeffs[0] = 2.5;
        let times = [0.1, 0.4, 0.9];
        let w = DVector::from_vec(vec![0.02, -0.01, 0.0, 0.01, 0.02, -0.02, 0.0]);
        let g = gamma_vector(&basis, &coeffs, &spec, &w, &times).unwrap();
        for k in 0..3 {
            assert_relative_eq!(g[k], 2.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn gamma_is_linear_in_coefficients() {
        let basis = SplineBasis::new(11).unwrap();
        let spec = WarpSpec::equidistant(7).unwrap();
        let c1 = DVector::from_fn(11, |i, _| 0.1 * i as f64);
        let c2 = DVector::from_fn(11, |i, _| (i as f64).cos());
        let times = [0.15, 0.6, 0.88];
        let w = DVector::from_vec(vec![0.01, 0.0, -0.01, 0.0, 0.01, 0.0, 0.0]);
        let ga = gamma_vector(&basis, &(&c1 * 2.0 + &c2 * -0.5), &spec, &w, &times).unwrap();
        let g1 = gamma_vector(&basis, &c1, &spec, &w, &times).unwrap();
        let g2 = gamma_vector(&basis, &c2, &spec, &w, &times).unwrap();
        for k in 0..3 {
            assert_relative_eq!(ga[k], 2.0 * g1[k] - 0.5 * g2[k], epsilon = 1e-12);
        }
    }

    #[test]
    fn posterior_matches_frozen_gaussian_oracle() {
        // identity warp, theta(t) = 0.1 + 0.5 t (exactly in the basis span),
        // amplitude kernel with smoothness 1/2 so S has a closed form; the
        // expected value was computed independently with numpy.
        let curve = toy_curve();
        let family = ResponseFamily::gaussian(0.25).unwrap();
        let basis = SplineBasis::new(11).unwrap();
        let spec = WarpSpec::equidistant(7).unwrap();
        let amp = MaternKernel::new(0.3, 0.5, 0.2).unwrap();
        let vp = VarianceParams::new(amp, 0.02, 0.1).unwrap();
        let c = vp.warp_prior(&spec).unwrap();
        let s = vp.amplitude_cov(curve.times()).unwrap();
        let ctx = toy_context(&curve, &family, &basis, &spec, &s, &c);

        let mut coeffs = DVector::zeros(11);
        coeffs[0] = 0.1;
        coeffs[1] = 0.5;
        let u = DVector::from_vec(vec![0.05, 0.42, 0.37]);
        let w = DVector::zeros(7);
        let value = ctx.posterior_nll(&coeffs, &u, &w).unwrap();
        assert_relative_eq!(value, 0.6046342802025586, epsilon = 1e-10);
    }

    #[test]
    fn zero_residual_posterior_reduces_to_data_term() {
        let curve = Curve::new("c", "g", vec![0.1, 0.5, 0.9], vec![1.0, 4.0, 2.0], 1).unwrap();
        let family = ResponseFamily::Poisson;
        let basis = SplineBasis::new(11).unwrap();
        let spec = WarpSpec::equidistant(7).unwrap();
        let amp = MaternKernel::new(0.2, 1.5, 0.3).unwrap();
        let vp = VarianceParams::new(amp, 0.02, 0.1).unwrap();
        let c = vp.warp_prior(&spec).unwrap();
        let s = vp.amplitude_cov(curve.times()).unwrap();
        let ctx = toy_context(&curve, &family, &basis, &spec, &s, &c);

        let coeffs = DVector::from_fn(11, |i, _| 0.2 + 0.05 * i as f64);
        let w = DVector::zeros(7);
        let gamma = ctx.gamma(&coeffs, &w).unwrap();
        let value = ctx.posterior_nll(&coeffs, &gamma, &w).unwrap();
        let data: f64 = curve
            .observations()
            .iter()
            .zip(gamma.iter())
            .map(|(&y, &g)| family.a_value(g, y) - g * y)
            .sum();
        assert_relative_eq!(value, data, epsilon = 1e-12);
    }

    #[test]
    fn shifting_u_changes_data_term_by_the_algebraic_identity() {
        let curve = Curve::new("c", "g", vec![0.1, 0.5, 0.9], vec![3.0, 0.0, 5.0], 1).unwrap();
        let family = ResponseFamily::neg_binomial(18.632).unwrap();
        let basis = SplineBasis::new(11).unwrap();
        let spec = WarpSpec::equidistant(7).unwrap();
        let amp = MaternKernel::new(0.2, 1.5, 0.3).unwrap();
        let vp = VarianceParams::new(amp, 0.02, 0.1).unwrap();
        let c = vp.warp_prior(&spec).unwrap();
        let s = vp.amplitude_cov(curve.times()).unwrap();
        let ctx = toy_context(&curve, &family, &basis, &spec, &s, &c);

        let u = DVector::from_vec(vec![1.0, 0.2, 1.5]);
        let delta = 0.37;
        let shifted = u.add_scalar(delta);
        let lhs = ctx.data_nll(&shifted) - ctx.data_nll(&u);
        let rhs: f64 = curve
            .observations()
            .iter()
            .zip(u.iter())
            .map(|(&y, &uk)| {
                family.a_value(uk + delta, y) - family.a_value(uk, y) - delta * y
            })
            .sum();
        assert_relative_eq!(lhs, rhs, epsilon = 1e-12);
    }

    #[test]
    fn posterior_gradient_matches_finite_differences() {
        use rand::Rng;
        let mut rng = crate::rng::stream(29, "test/posterior-fd");
        let basis = SplineBasis::new(11).unwrap();
        let spec = WarpSpec::equidistant(7).unwrap();
        let amp = MaternKernel::new(0.3, 2.0, 0.25).unwrap();
        let vp = VarianceParams::new(amp, 0.02, 0.1).unwrap();
        let c = vp.warp_prior(&spec).unwrap();
        let family = ResponseFamily::neg_binomial(18.632).unwrap();

        for _ in 0..20 {
            let times: Vec<f64> = {
                let mut t: Vec<f64> = (0..6).map(|_| rng.random_range(0.01..0.99)).collect();
                t.sort_by(f64::total_cmp);
                t.dedup_by(|a, b| (*a - *b).abs() < 1e-3);
                t
            };
            if times.len() < 2 {
                continue;
            }
            let y: Vec<f64> = times.iter().map(|_| f64::from(rng.random_range(0u32..80))).collect();
            let curve = Curve::new("c", "g", times.clone(), y, 1).unwrap();
            let s = vp.amplitude_cov(curve.times()).unwrap();
        let ctx = toy_context(&curve, &family, &basis, &spec, &s, &c);
            let coeffs = DVector::from_fn(11, |i, _| rng.random_range(-0.5..0.5) + 0.02 * i as f64);
            let w = DVector::from_fn(7, |_, _| rng.random_range(-0.01..0.01));
            let u = DVector::from_fn(curve.len(), |_, _| rng.random_range(-1.0..3.0));

            let (grad, hess) = ctx.posterior_grad_hess_u(&coeffs, &u, &w).unwrap();
            let h = 1e-5;
            for k in 0..curve.len() {
                let mut up = u.clone();
                let mut um = u.clone();
                up[k] += h;
                um[k] -= h;
                let fd = (ctx.posterior_nll(&coeffs, &up, &w).unwrap()
                    - ctx.posterior_nll(&coeffs, &um, &w).unwrap())
                    / (2.0 * h);
                assert_relative_eq!(grad[k], fd, max_relative = 1e-5, epsilon = 1e-7);
            }
            // curvature must be positive definite
            assert!(nalgebra::Cholesky::new(hess).is_some());
        }
    }

    #[test]
    fn posterior_is_convex_along_random_segments() {
        use rand::Rng;
        let mut rng = crate::rng::stream(37, "test/posterior-convex");
        let basis = SplineBasis::new(11).unwrap();
        let spec = WarpSpec::equidistant(7).unwrap();
        let amp = MaternKernel::new(0.3, 1.5, 0.25).unwrap();
        let vp = VarianceParams::new(amp, 0.02, 0.1).unwrap();
        let c = vp.warp_prior(&spec).unwrap();
        let family = ResponseFamily::neg_binomial(4.658).unwrap();
        let curve = Curve::new(
            "c",
            "g",
            vec![0.1, 0.3, 0.5, 0.7, 0.9],
            vec![2.0, 10.0, 25.0, 12.0, 1.0],
            1,
        )
        .unwrap();
        let s = vp.amplitude_cov(curve.times()).unwrap();
        let ctx = toy_context(&curve, &family, &basis, &spec, &s, &c);
        let coeffs = DVector::from_fn(11, |i, _| 0.1 * i as f64);
        let w = DVector::zeros(7);
        for _ in 0..500 {
            let u1 = DVector::from_fn(5, |_, _| rng.random_range(-2.0..4.0));
            let u2 = DVector::from_fn(5, |_, _| rng.random_range(-2.0..4.0));
            let mid = (&u1 + &u2) * 0.5;
            let f1 = ctx.posterior_nll(&coeffs, &u1, &w).unwrap();
            let f2 = ctx.posterior_nll(&coeffs, &u2, &w).unwrap();
            let fm = ctx.posterior_nll(&coeffs, &mid, &w).unwrap();
            assert!(
                fm <= 0.5 * (f1 + f2) + 1e-9,
                "midpoint convexity violated: {fm} > {}",
                0.5 * (f1 + f2)
            );
        }
    }

    #[test]
    fn warp_prior_term_is_even_in_w() {
        let basis = SplineBasis::new(11).unwrap();
        let spec = WarpSpec::equidistant(7).unwrap();
        let amp = MaternKernel::new(0.3, 1.5, 0.25).unwrap();
        let vp = VarianceParams::new(amp, 0.03, 0.1).unwrap();
        let c = vp.warp_prior(&spec).unwrap();
        let family = ResponseFamily::Poisson;
        let curve = Curve::new("c", "g", vec![0.2, 0.6], vec![1.0, 2.0], 1).unwrap();
        let s = vp.amplitude_cov(curve.times()).unwrap();
        let ctx = toy_context(&curve, &family, &basis, &spec, &s, &c);
        // constant theta removes gamma's dependence on w; the remaining
        // w-dependence is the prior quadratic, which must be even
        let mut coeffs = DVector::zeros(11);
        coeffs[0] = 1.0;
        let u = DVector::from_vec(vec![0.5, 0.5]);
        let w = DVector::from_vec(vec![0.01, -0.02, 0.015, 0.0, 0.005, -0.01, 0.02]);
        let neg = -&w;
        let a = ctx.posterior_nll(&coeffs, &u, &w).unwrap();
        let b = ctx.posterior_nll(&coeffs, &u, &neg).unwrap();
        assert_relative_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn per_curve_contributions_are_exchangeable() {
        let basis = SplineBasis::new(11).unwrap();
        let spec = WarpSpec::equidistant(7).unwrap();
        let amp = MaternKernel::new(0.3, 1.5, 0.25).unwrap();
        let vp = VarianceParams::new(amp, 0.03, 0.1).unwrap();
        let c = vp.warp_prior(&spec).unwrap();
        let family = ResponseFamily::Poisson;
        let curves = vec![
            Curve::new("a", "g", vec![0.2, 0.6], vec![1.0, 2.0], 1).unwrap(),
            Curve::new("b", "g", vec![0.1, 0.5, 0.9], vec![4.0, 0.0, 7.0], 1).unwrap(),
        ];
        let coeffs = DVector::from_fn(11, |i, _| 0.05 * i as f64);
        let total: f64 = curves
            .iter()
            .map(|curve| {
                let s = vp.amplitude_cov(curve.times()).unwrap();
                let ctx = toy_context(curve, &family, &basis, &spec, &s, &c);
                let u = DVector::zeros(curve.len());
                ctx.posterior_nll(&coeffs, &u, &DVector::zeros(7)).unwrap()
            })
            .sum();
        let reversed: f64 = curves
            .iter()
            .rev()
            .map(|curve| {
                let s = vp.amplitude_cov(curve.times()).unwrap();
                let ctx = toy_context(curve, &family, &basis, &spec, &s, &c);
                let u = DVector::zeros(curve.len());
                ctx.posterior_nll(&coeffs, &u, &DVector::zeros(7)).unwrap()
            })
            .sum();
        assert_relative_eq!(total, reversed, epsilon = 1e-12);
    }
}
