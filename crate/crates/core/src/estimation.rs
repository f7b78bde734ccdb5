//! Twofold Laplace estimation: convex inner solves for the mean-curve
//! latents, joint max-posterior prediction of `(u, w)`, linearization in the
//! warp coefficients, the Laplace-approximated marginal likelihood, and the
//! alternating outer loop over fixed effects and variance parameters.
//!
//! The marginal criterion for one curve is
//!
//! `log|St_n| + log|V_n| + (u0 - r_n)' V_n^-1 (u0 - r_n) + 2 sum_k (A(u0_k) - y_k u0_k)`
//!
//! with `V_n = J C J' + S_n` and `r_n = gamma_{w0} - J w0` from the
//! linearization around the predicted warp, and
//! `St_n = V_n^-1 + 2 diag(A''(u0))` under the default convention
//! ([`LaplaceConvention::Paper`]). [`LaplaceConvention::Standard`] drops the
//! factor 2 from the curvature term, which is the choice under which the
//! approximation is exact for Gaussian responses. Because `A'' > 0`,
//! `|St_n| > |V_n|^-1` always; this is asserted on every evaluation.
//!
//! At the joint posterior mode the latent `u0` is also the mode of the
//! linearized model: the stationarity condition in `w` makes
//! `V^-1 (u0 - r) = S^-1 (u0 - gamma)` exactly, so evaluating the marginal at
//! the joint mode is evaluating the linearized integral at its true mode.

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::SplineBasis;
use crate::error::{Error, Result};
use crate::kernels::{CovarianceMatrix, MaternKernel, MAX_SMOOTHNESS};
use crate::model::{CurveContext, Dataset, LatentState, VarianceParams};
use crate::response::ResponseFamily;
use crate::warp::WarpSpec;

/// Structural configuration: fixed-effect basis and warp anchor grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub basis: SplineBasis,
    pub warp: WarpSpec,
}

impl ModelSpec {
    /// Defaults: 11 natural spline basis functions, 7 equidistant anchors.
    pub fn defaults() -> Self {
        Self {
            basis: SplineBasis::new(11).expect("valid default basis"),
            warp: WarpSpec::equidistant(7).expect("valid default anchors"),
        }
    }

    pub fn new(n_basis: usize, m_w: usize) -> Result<Self> {
        Ok(Self {
            basis: SplineBasis::new(n_basis)?,
            warp: WarpSpec::equidistant(m_w)?,
        })
    }
}

/// Which curvature convention the marginal likelihood uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LaplaceConvention {
    /// `St = V^-1 + 2 diag(A'')` (default).
    #[default]
    Paper,
    /// `St = V^-1 + diag(A'')`; exact for Gaussian responses.
    Standard,
}

impl LaplaceConvention {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Self::Paper),
            "standard" => Ok(Self::Standard),
            other => Err(Error::InvalidInput(format!(
                "unknown laplace convention '{other}' (expected 'paper' or 'standard')"
            ))),
        }
    }

    fn curvature_factor(self) -> f64 {
        match self {
            Self::Paper => 2.0,
            Self::Standard => 1.0,
        }
    }
}

/// Optimizer budgets and tolerances.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    /// Outer alternation cap.
    pub max_outer: usize,
    /// Gradient tolerance of the inner Newton solve.
    pub inner_tol: f64,
    /// Inner Newton iteration cap.
    pub inner_max_iter: usize,
    /// Gradient tolerance of the warp prediction.
    pub warp_tol: f64,
    /// Relative improvement of the marginal criterion that counts as
    /// converged.
    pub outer_rel_tol: f64,
    /// Criterion evaluations granted to the variance search per outer step.
    pub vp_budget: usize,
    /// Coefficient/latent alternation sweeps per outer step.
    pub coord_sweeps: usize,
    pub laplace: LaplaceConvention,
    /// Starting variance parameters; a generic mid-range default when absent.
    pub init_variance: Option<VarianceParams>,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_outer: 20,
            inner_tol: 1e-9,
            inner_max_iter: 100,
            warp_tol: 1e-6,
            outer_rel_tol: 1e-6,
            vp_budget: 200,
            coord_sweeps: 2,
            laplace: LaplaceConvention::Paper,
            init_variance: None,
            seed: 0,
        }
    }
}

/// Spline coefficients per treatment group, aligned with `Dataset::groups`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCoefficients {
    pub groups: Vec<String>,
    pub coeffs: Vec<DVector<f64>>,
}

impl GroupCoefficients {
    pub fn get(&self, group: &str) -> Option<&DVector<f64>> {
        self.groups.iter().position(|g| g == group).map(|i| &self.coeffs[i])
    }
}

/// Convergence record of a fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub converged: bool,
    pub outer_iterations: usize,
    pub final_marginal_nll: f64,
    /// Marginal criterion after every accepted outer iteration;
    /// non-increasing by construction.
    pub marginal_trace: Vec<f64>,
    /// Largest inner-gradient infinity norm over curves at the solution.
    pub max_kkt_residual: f64,
}

/// A fitted model: coefficients, variance parameters, predicted latents.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedModel {
    pub model: ModelSpec,
    pub family: ResponseFamily,
    pub coefficients: GroupCoefficients,
    pub variance: VarianceParams,
    pub latents: LatentState,
    pub convention: LaplaceConvention,
    pub diagnostics: FitDiagnostics,
}

impl FittedModel {
    pub fn coeffs_for_group(&self, group: &str) -> Result<&DVector<f64>> {
        self.coefficients
            .get(group)
            .ok_or_else(|| Error::InvalidInput(format!("no fitted group '{group}'")))
    }
}

/// Per-curve working state the engine threads through the pipeline.
pub(crate) struct Engine<'a> {
    pub dataset: &'a Dataset,
    pub family: ResponseFamily,
    pub model: &'a ModelSpec,
    pub vp: VarianceParams,
    pub c: CovarianceMatrix,
    pub s: Vec<CovarianceMatrix>,
    pub convention: LaplaceConvention,
}

impl<'a> Engine<'a> {
    pub fn new(
        dataset: &'a Dataset,
        family: &ResponseFamily,
        model: &'a ModelSpec,
        vp: &VarianceParams,
        convention: LaplaceConvention,
    ) -> Result<Self> {
        let c = vp.warp_prior(&model.warp)?;
        let s = dataset
            .curves()
            .iter()
            .map(|curve| vp.amplitude_cov(curve.times()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dataset,
            family: *family,
            model,
            vp: *vp,
            c,
            s,
            convention,
        })
    }

    pub fn ctx(&self, i: usize) -> CurveContext<'_> {
        CurveContext::new(
            &self.dataset.curves()[i],
            &self.family,
            &self.model.basis,
            &self.model.warp,
            &self.s[i],
            &self.c,
        )
    }

    fn initial_latents(&self) -> LatentState {
        let m_w = self.model.warp.len();
        let u = self
            .dataset
            .curves()
            .iter()
            .map(|curve| {
                let fam = crate::model::effective_family(&self.family, curve);
                let smoothed = smooth_observations(curve.observations());
                DVector::from_iterator(
                    curve.len(),
                    smoothed.iter().map(|&y| link_init(&fam, y)),
                )
            })
            .collect();
        let w = self
            .dataset
            .curves()
            .iter()
            .map(|_| DVector::zeros(m_w))
            .collect();
        LatentState { u, w }
    }
}

/// 1-2-1 moving average; keeps the link of the starting values from chasing
/// single-observation noise.
fn smooth_observations(y: &[f64]) -> Vec<f64> {
    let n = y.len();
    (0..n)
        .map(|k| {
            let mut num = 2.0 * y[k];
            let mut den = 2.0;
            if k > 0 {
                num += y[k - 1];
                den += 1.0;
            }
            if k + 1 < n {
                num += y[k + 1];
                den += 1.0;
            }
            num / den
        })
        .collect()
}

/// Starting value for the latent curve at one observation.
fn link_init(family: &ResponseFamily, y: f64) -> f64 {
    match family {
        ResponseFamily::Gaussian { .. } => y,
        ResponseFamily::Poisson | ResponseFamily::NegBinomial { .. } => (y + 0.5).ln(),
        ResponseFamily::Binary => ((y + 0.5) / (1.5 - y)).ln(),
    }
}

/// Newton's method with backtracking on the posterior over `u` for fixed
/// `w`. The problem is strictly convex, so the optimum is unique.
pub fn inner_max_u(
    ctx: &CurveContext<'_>,
    coeffs: &DVector<f64>,
    w: &DVector<f64>,
    init: &DVector<f64>,
    cfg: &FitConfig,
) -> Result<DVector<f64>> {
    let gamma = ctx.gamma(coeffs, w)?;
    inner_max_u_linearized(ctx, &gamma, ctx.s, init, cfg)
}

/// The same convex solve against an arbitrary Gaussian layer `(mean, cov)`;
/// `inner_max_u` passes `(gamma_w, S)`.
fn inner_max_u_linearized(
    ctx: &CurveContext<'_>,
    mean: &DVector<f64>,
    cov: &CovarianceMatrix,
    init: &DVector<f64>,
    cfg: &FitConfig,
) -> Result<DVector<f64>> {
    let m = ctx.curve.len();
    let ys = ctx.curve.observations();
    let objective = |u: &DVector<f64>| -> f64 {
        let resid = mean - u;
        ctx.data_nll(u) + 0.5 * cov.inv_quad(&resid)
    };
    let gradient = |u: &DVector<f64>| -> DVector<f64> {
        let diff = u - mean;
        let s_term = cov.solve(&diff);
        DVector::from_fn(m, |k, _| {
            ctx.family.a_prime(u[k], ys[k]) - ctx.family.canonical_stat(ys[k]) + s_term[k]
        })
    };

    let cov_inverse = cov.inverse();
    let mut u = init.clone();
    if u.iter().any(|v| !v.is_finite()) || !objective(&u).is_finite() {
        u = mean.clone();
    }
    let mut f = objective(&u);
    let mut best_u = u.clone();
    let mut best_g = f64::INFINITY;
    let mut since_improvement = 0usize;
    for _ in 0..cfg.inner_max_iter {
        let grad = gradient(&u);
        let gmax = grad.amax();
        if gmax < best_g {
            if gmax < 0.98 * best_g {
                since_improvement = 0;
            }
            best_g = gmax;
            best_u.copy_from(&u);
        } else {
            since_improvement += 1;
        }
        if gmax < cfg.inner_tol {
            return Ok(u);
        }
        // conditioning of S can put the computable gradient floor above the
        // tolerance; stop once neither the gradient nor the objective moves
        if since_improvement >= 3 {
            break;
        }
        let mut hess = cov_inverse.clone();
        for k in 0..m {
            hess[(k, k)] += ctx.family.a_double_prime(u[k], ys[k]);
        }
        let chol = Cholesky::new(hess).ok_or_else(|| {
            Error::NonConvergence("inner Newton curvature lost positive definiteness".into())
        })?;
        let delta = -chol.solve(&grad);
        let slope = grad.dot(&delta);
        // once the Newton decrement drops below the objective's rounding
        // noise the sufficient-decrease test is vacuous; take the full step
        if -slope <= 1e-9 * (1.0 + f.abs()) {
            let cand = &u + &delta;
            let fc = objective(&cand);
            if fc.is_finite() {
                u = cand;
                f = fc;
                continue;
            }
            break;
        }
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &u + &delta * step;
            let fc = objective(&cand);
            if fc.is_finite() && fc <= f + 1e-4 * step * slope {
                if f - fc > 1e-10 * (1.0 + f.abs()) {
                    since_improvement = 0;
                }
                u = cand;
                f = fc;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let final_g = gradient(&best_u);
    if final_g.amax() < cfg.inner_tol {
        return Ok(best_u);
    }
    // the gradient's computable floor scales with the conditioning of S;
    // judge the stalled iterate by its Newton decrement, which is affine
    // invariant, against the objective's rounding noise
    let mut hess = cov_inverse;
    for k in 0..m {
        hess[(k, k)] += ctx.family.a_double_prime(best_u[k], ys[k]);
    }
    if let Some(chol) = Cholesky::new(hess) {
        let decrement = 0.5 * final_g.dot(&chol.solve(&final_g));
        if decrement <= 1e-9 * (1.0 + objective(&best_u).abs()) {
            return Ok(best_u);
        }
    }
    Err(Error::NonConvergence(format!(
        "inner Newton stalled for curve '{}' (grad {:.3e})",
        ctx.curve.id(),
        final_g.amax(),
    )))
}

/// Profile objective over `w`: the posterior with `u` maximized out.
fn profiled_objective(
    ctx: &CurveContext<'_>,
    coeffs: &DVector<f64>,
    w: &DVector<f64>,
    u_warm: &DVector<f64>,
    cfg: &FitConfig,
) -> Result<(f64, DVector<f64>)> {
    let u = inner_max_u(ctx, coeffs, w, u_warm, cfg)?;
    let f = ctx.posterior_nll(coeffs, &u, w)?;
    Ok((f, u))
}

/// Envelope gradient of the profile objective:
/// `J' S^-1 (gamma_w - u*) + C^-1 w`.
fn profiled_gradient(
    ctx: &CurveContext<'_>,
    coeffs: &DVector<f64>,
    w: &DVector<f64>,
    u_star: &DVector<f64>,
) -> Result<DVector<f64>> {
    let gamma = ctx.gamma(coeffs, w)?;
    let jac = ctx.gamma_jacobian(coeffs, w)?;
    let resid = &gamma - u_star;
    Ok(jac.transpose() * ctx.s.solve(&resid) + ctx.c.solve(w))
}

/// Joint maximum-posterior prediction of `(u, w)` for one curve:
/// quasi-Newton over `w` with the convex inner problem profiled out, and a
/// coordinate golden-section fallback when a quasi-Newton step stalls.
pub fn predict_latents(
    ctx: &CurveContext<'_>,
    coeffs: &DVector<f64>,
    warm: Option<(&DVector<f64>, &DVector<f64>)>,
    cfg: &FitConfig,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let m_w = ctx.warp_spec.len();
    let (mut w, u_warm) = match warm {
        Some((u0, w0)) if crate::warp::build_warp(ctx.warp_spec, w0.as_slice()).is_ok() => {
            (w0.clone(), u0.clone())
        }
        _ => (DVector::zeros(m_w), DVector::zeros(ctx.curve.len())),
    };
    let (mut f, mut u) = profiled_objective(ctx, coeffs, &w, &u_warm, cfg)?;
    let mut grad = profiled_gradient(ctx, coeffs, &w, &u)?;
    // prior covariance as the initial metric
    let metric0 = ctx.c.matrix().clone();
    let mut metric = metric0.clone();
    let mut stalls = 0usize;
    for _ in 0..50 {
        if grad.amax() < cfg.warp_tol {
            break;
        }
        let mut dir = -(&metric * &grad);
        if dir.dot(&grad) >= -1e-16 {
            metric = metric0.clone();
            dir = -(&metric * &grad);
        }
        let slope = grad.dot(&dir);
        let mut step = 1.0;
        let mut moved = false;
        for _ in 0..40 {
            let cand = &w + &dir * step;
            match profiled_objective(ctx, coeffs, &cand, &u, cfg) {
                Ok((fc, uc)) if fc.is_finite() && fc <= f + 1e-4 * step * slope => {
                    let gc = profiled_gradient(ctx, coeffs, &cand, &uc)?;
                    let s_vec = &cand - &w;
                    let y_vec = &gc - &grad;
                    let sy = s_vec.dot(&y_vec);
                    if sy > 1e-14 * s_vec.norm() * y_vec.norm() {
                        // BFGS update of the inverse-Hessian metric
                        let rho = 1.0 / sy;
                        let my = &metric * &y_vec;
                        let yty = y_vec.dot(&my);
                        metric = &metric
                            - (&my * s_vec.transpose() + &s_vec * my.transpose()) * rho
                            + &s_vec * s_vec.transpose() * (rho * rho * yty + rho);
                    }
                    w = cand;
                    f = fc;
                    u = uc;
                    grad = gc;
                    moved = true;
                    break;
                }
                _ => step *= 0.5,
            }
        }
        if !moved {
            stalls += 1;
            if stalls > 1 {
                break;
            }
            // golden-section sweep along each coordinate as a fallback
            let phi = 0.5 * (3.0 - 5.0_f64.sqrt());
            for k in 0..m_w {
                let sigma = ctx.c.matrix()[(k, k)].sqrt();
                let mut lo = w[k] - 3.0 * sigma;
                let mut hi = w[k] + 3.0 * sigma;
                let eval = |wk: f64, u_warm: &DVector<f64>| -> f64 {
                    let mut cand = w.clone();
                    cand[k] = wk;
                    match profiled_objective(ctx, coeffs, &cand, u_warm, cfg) {
                        Ok((fc, _)) => fc,
                        Err(_) => f64::INFINITY,
                    }
                };
                for _ in 0..16 {
                    let a = lo + phi * (hi - lo);
                    let b = hi - phi * (hi - lo);
                    if eval(a, &u) < eval(b, &u) {
                        hi = b;
                    } else {
                        lo = a;
                    }
                }
                let wk = 0.5 * (lo + hi);
                let mut cand = w.clone();
                cand[k] = wk;
                if let Ok((fc, uc)) = profiled_objective(ctx, coeffs, &cand, &u, cfg) {
                    if fc < f {
                        w = cand;
                        f = fc;
                        u = uc;
                    }
                }
            }
            grad = profiled_gradient(ctx, coeffs, &w, &u)?;
            metric = metric0.clone();
        }
    }
    Ok((u, w))
}

/// Generalized least-squares update of the group spline coefficients at
/// fixed latents: per group, solve
/// `sum_n B_n' S_n^-1 B_n c = sum_n B_n' S_n^-1 u_n` over the group's curves.
pub(crate) fn update_coeffs_engine(
    engine: &Engine<'_>,
    latents: &LatentState,
) -> Result<GroupCoefficients> {
    let p = engine.model.basis.len();
    let mut coeffs = Vec::with_capacity(engine.dataset.groups().len());
    for (j, label) in engine.dataset.groups().iter().enumerate() {
        let mut normal = DMatrix::<f64>::zeros(p, p);
        let mut rhs = DVector::<f64>::zeros(p);
        for i in engine.dataset.curves_in_group(j) {
            let ctx = engine.ctx(i);
            let design = ctx.warped_design(&latents.w[i])?;
            let sinv_b = engine.s[i].solve_mat(&design);
            normal += design.transpose() * &sinv_b;
            rhs += sinv_b.transpose() * &latents.u[i];
        }
        let max_diag = (0..p).map(|k| normal[(k, k)]).fold(0.0_f64, f64::max);
        if !(max_diag.is_finite() && max_diag > 0.0) {
            return Err(Error::RankDeficient(label.clone()));
        }
        let ridge = 1e-8 * max_diag;
        for k in 0..p {
            normal[(k, k)] += ridge;
        }
        let chol =
            Cholesky::new(normal).ok_or_else(|| Error::RankDeficient(label.clone()))?;
        coeffs.push(chol.solve(&rhs));
    }
    Ok(GroupCoefficients {
        groups: engine.dataset.groups().to_vec(),
        coeffs,
    })
}

/// Public wrapper over [`update_coeffs_engine`].
pub fn update_coeffs(
    dataset: &Dataset,
    family: &ResponseFamily,
    model: &ModelSpec,
    latents: &LatentState,
    vp: &VarianceParams,
) -> Result<GroupCoefficients> {
    let engine = Engine::new(dataset, family, model, vp, LaplaceConvention::default())?;
    update_coeffs_engine(&engine, latents)
}

/// First-order model of the warped fixed effect around `w0`:
/// `r = gamma_{w0} - J w0` and `V = J C J' + S`, with `J` the Jacobian of
/// `gamma` in `w`.
pub fn linearize(
    ctx: &CurveContext<'_>,
    coeffs: &DVector<f64>,
    w0: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let gamma = ctx.gamma(coeffs, w0)?;
    let jac = ctx.gamma_jacobian(coeffs, w0)?;
    let r = &gamma - &jac * w0;
    let v = &jac * ctx.c.matrix() * jac.transpose() + ctx.s.matrix();
    Ok((r, v, jac))
}

/// Marginal criterion contribution of one curve at its predicted latents.
fn laplace_curve_nll(
    ctx: &CurveContext<'_>,
    coeffs: &DVector<f64>,
    u0: &DVector<f64>,
    w0: &DVector<f64>,
    convention: LaplaceConvention,
) -> Result<f64> {
    let (r, v, _) = linearize(ctx, coeffs, w0)?;
    let m = ctx.curve.len();
    let scale = (0..m).map(|k| v[(k, k)]).sum::<f64>() / m as f64;
    let v = CovarianceMatrix::from_matrix(v, scale)?;
    let mut sigma_tilde = v.inverse();
    let factor = convention.curvature_factor();
    for k in 0..m {
        sigma_tilde[(k, k)] +=
            factor * ctx.family.a_double_prime(u0[k], ctx.curve.observations()[k]);
    }
    let st_chol = Cholesky::new(sigma_tilde).ok_or_else(|| {
        Error::IllConditioned("Laplace curvature not positive definite".into())
    })?;
    let log_det_st: f64 = st_chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
    let log_det_v = v.log_det();
    // |St| > |V|^-1 whenever A'' > 0
    assert!(
        log_det_st + log_det_v > -1e-8,
        "Laplace determinant bound violated: {log_det_st} + {log_det_v}"
    );
    let diff = u0 - &r;
    let quad = diff.dot(&v.solve(&diff));
    Ok(log_det_st + log_det_v + quad + 2.0 * ctx.data_nll(u0))
}

pub(crate) fn marginal_nll_engine(
    engine: &Engine<'_>,
    coeffs: &GroupCoefficients,
    warm: &LatentState,
    cfg: &FitConfig,
) -> Result<(f64, LatentState)> {
    let n = engine.dataset.n_curves();
    let per_curve: Vec<Result<(f64, DVector<f64>, DVector<f64>)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let ctx = engine.ctx(i);
            let group = engine.dataset.curves()[i].group();
            let c_j = coeffs
                .get(group)
                .ok_or_else(|| Error::InvalidInput(format!("no coefficients for group '{group}'")))?;
            let (u0, w0) =
                predict_latents(&ctx, c_j, Some((&warm.u[i], &warm.w[i])), cfg)?;
            let value = laplace_curve_nll(&ctx, c_j, &u0, &w0, engine.convention)?;
            Ok((value, u0, w0))
        })
        .collect();
    let mut total = 0.0;
    let mut latents = LatentState { u: Vec::with_capacity(n), w: Vec::with_capacity(n) };
    for item in per_curve {
        let (value, u0, w0) = item?;
        total += value;
        latents.u.push(u0);
        latents.w.push(w0);
    }
    Ok((total, latents))
}

/// Laplace-approximated marginal negative log-likelihood of the dataset at
/// the given coefficients and variance parameters. Latents are predicted
/// from scratch; fitting code threads warm states instead.
pub fn laplace_marginal_nll(
    dataset: &Dataset,
    family: &ResponseFamily,
    model: &ModelSpec,
    coeffs: &GroupCoefficients,
    vp: &VarianceParams,
    cfg: &FitConfig,
) -> Result<f64> {
    let engine = Engine::new(dataset, family, model, vp, cfg.laplace)?;
    let warm = engine.initial_latents();
    marginal_nll_engine(&engine, coeffs, &warm, cfg).map(|(v, _)| v)
}

fn predict_all(
    engine: &Engine<'_>,
    coeffs: &GroupCoefficients,
    warm: &LatentState,
    cfg: &FitConfig,
) -> Result<LatentState> {
    let n = engine.dataset.n_curves();
    let per_curve: Vec<Result<(DVector<f64>, DVector<f64>)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let ctx = engine.ctx(i);
            let group = engine.dataset.curves()[i].group();
            let c_j = coeffs
                .get(group)
                .ok_or_else(|| Error::InvalidInput(format!("no coefficients for group '{group}'")))?;
            predict_latents(&ctx, c_j, Some((&warm.u[i], &warm.w[i])), cfg)
        })
        .collect();
    let mut latents = LatentState { u: Vec::with_capacity(n), w: Vec::with_capacity(n) };
    for item in per_curve {
        let (u0, w0) = item?;
        latents.u.push(u0);
        latents.w.push(w0);
    }
    Ok(latents)
}

/// Variance-parameter box in log space:
/// (amp scale, amp smoothness, amp range, warp scale, warp range).
const VP_LO: [f64; 5] = [1e-4, 0.05, 1e-3, 1e-5, 1e-3];
const VP_HI: [f64; 5] = [10.0, MAX_SMOOTHNESS, 10.0, 1.0, 10.0];

fn vp_to_log(vp: &VarianceParams) -> [f64; 5] {
    [
        vp.amplitude.scale().ln(),
        vp.amplitude.smoothness().ln(),
        vp.amplitude.range().ln(),
        vp.warp_scale.ln(),
        vp.warp_range.ln(),
    ]
}

fn vp_from_log(x: &[f64; 5]) -> Result<VarianceParams> {
    let mut clamped = *x;
    for (i, c) in clamped.iter_mut().enumerate() {
        *c = c.clamp(VP_LO[i].ln(), VP_HI[i].ln());
    }
    let amp = MaternKernel::new(clamped[0].exp(), clamped[1].exp(), clamped[2].exp())?;
    VarianceParams::new(amp, clamped[3].exp(), clamped[4].exp())
}

/// Config for criterion evaluations inside the variance search: the
/// criterion value is quadratic in the residual warp gradient, so the search
/// can run latent predictions at a relaxed tolerance.
fn search_config(cfg: &FitConfig) -> FitConfig {
    FitConfig {
        warp_tol: cfg.warp_tol.max(1e-4),
        ..cfg.clone()
    }
}

/// Nelder-Mead over the log variance parameters. Derivative-free because the
/// criterion reaches the parameters through re-optimized latents, which makes
/// finite-difference gradients unreliable.
fn optimize_variance(
    dataset: &Dataset,
    family: &ResponseFamily,
    model: &ModelSpec,
    coeffs: &GroupCoefficients,
    start: &VarianceParams,
    warm: &LatentState,
    cfg: &FitConfig,
) -> Result<(VarianceParams, f64, LatentState)> {
    let evals = std::cell::Cell::new(0usize);
    let mut best: Option<(f64, VarianceParams, LatentState)> = None;
    let evaluate = |x: &[f64; 5],
                    best: &mut Option<(f64, VarianceParams, LatentState)>|
     -> f64 {
        evals.set(evals.get() + 1);
        let vp = match vp_from_log(x) {
            Ok(vp) => vp,
            Err(_) => return f64::INFINITY,
        };
        let engine = match Engine::new(dataset, family, model, &vp, cfg.laplace) {
            Ok(e) => e,
            Err(_) => return f64::INFINITY,
        };
        let trace = std::env::var_os("WARPFIT_TRACE").is_some();
        let t0 = std::time::Instant::now();
        match marginal_nll_engine(&engine, coeffs, warm, &search_config(cfg)) {
            Ok((value, latents)) => {
                if trace {
                    eprintln!(
                        "eval {:.3}s vp=({:.4},{:.2},{:.3};{:.5},{:.3}) -> {value:.2}",
                        t0.elapsed().as_secs_f64(),
                        vp.amplitude.scale(),
                        vp.amplitude.smoothness(),
                        vp.amplitude.range(),
                        vp.warp_scale,
                        vp.warp_range,
                    );
                }
                if best.as_ref().is_none_or(|(b, _, _)| value < *b) {
                    *best = Some((value, vp, latents));
                }
                value
            }
            Err(e) => {
                if trace {
                    eprintln!("eval {:.3}s FAILED: {e}", t0.elapsed().as_secs_f64());
                }
                f64::INFINITY
            }
        }
    };

    let x0 = vp_to_log(start);
    let dim = 5;
    let mut simplex: Vec<[f64; 5]> = vec![x0];
    for i in 0..dim {
        let mut v = x0;
        v[i] += 0.35;
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|x| evaluate(x, &mut best)).collect();

    while evals.get() < cfg.vp_budget {
        // order ascending
        let mut idx: Vec<usize> = (0..=dim).collect();
        idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        let ordered: Vec<[f64; 5]> = idx.iter().map(|&i| simplex[i]).collect();
        let ordered_vals: Vec<f64> = idx.iter().map(|&i| values[i]).collect();
        simplex = ordered;
        values = ordered_vals;

        let f_best = values[0];
        let f_worst = values[dim];
        if f_best.is_finite()
            && f_worst.is_finite()
            && (f_worst - f_best).abs() <= 1e-9 * (1.0 + f_best.abs())
        {
            break;
        }

        let mut centroid = [0.0; 5];
        for x in simplex.iter().take(dim) {
            for k in 0..dim {
                centroid[k] += x[k] / dim as f64;
            }
        }
        let sub = |a: &[f64; 5], b: &[f64; 5], t: f64| -> [f64; 5] {
            let mut out = [0.0; 5];
            for k in 0..dim {
                out[k] = a[k] + t * (a[k] - b[k]);
            }
            out
        };

        let reflected = sub(&centroid, &simplex[dim], 1.0);
        let f_r = evaluate(&reflected, &mut best);
        if f_r < values[0] {
            let expanded = sub(&centroid, &simplex[dim], 2.0);
            let f_e = evaluate(&expanded, &mut best);
            if f_e < f_r {
                simplex[dim] = expanded;
                values[dim] = f_e;
            } else {
                simplex[dim] = reflected;
                values[dim] = f_r;
            }
        } else if f_r < values[dim - 1] {
            simplex[dim] = reflected;
            values[dim] = f_r;
        } else {
            let contracted = sub(&centroid, &simplex[dim], -0.5);
            let f_c = evaluate(&contracted, &mut best);
            if f_c < values[dim] {
                simplex[dim] = contracted;
                values[dim] = f_c;
            } else {
                // shrink toward the best vertex
                let best_v = simplex[0];
                for i in 1..=dim {
                    for k in 0..dim {
                        simplex[i][k] = best_v[k] + 0.5 * (simplex[i][k] - best_v[k]);
                    }
                    values[i] = evaluate(&simplex[i], &mut best);
                    if evals.get() >= cfg.vp_budget {
                        break;
                    }
                }
            }
        }
    }

    best.map(|(value, vp, latents)| (vp, value, latents))
        .ok_or_else(|| Error::NonConvergence("variance search produced no finite value".into()))
}

fn default_init_variance() -> VarianceParams {
    VarianceParams::new(
        MaternKernel::new(0.1, 2.0, 0.3).expect("valid default kernel"),
        0.03,
        0.1,
    )
    .expect("valid default variance")
}

/// Fit the full model by alternating (a) coefficient updates and latent
/// prediction under the joint posterior with (b) variance-parameter search
/// on the marginal criterion. The marginal trace over accepted iterations is
/// non-increasing; an iteration that fails to improve reverts to the best
/// state and stops.
pub fn fit(
    dataset: &Dataset,
    family: &ResponseFamily,
    model: &ModelSpec,
    cfg: &FitConfig,
) -> Result<FittedModel> {
    dataset.check_family(family)?;
    let vp0 = cfg.init_variance.unwrap_or_else(default_init_variance);
    let mut engine = Engine::new(dataset, family, model, &vp0, cfg.laplace)?;

    let loose = search_config(cfg);
    let mut latents = engine.initial_latents();
    let mut coeffs = update_coeffs_engine(&engine, &latents)?;
    let (mut best_marginal, mut best_latents) =
        marginal_nll_engine(&engine, &coeffs, &latents, &loose)?;
    let mut best_coeffs = coeffs.clone();
    let mut best_vp = vp0;
    latents = best_latents.clone();

    let mut trace = vec![best_marginal];
    let mut converged = false;
    let mut outer_done = 0;

    for _outer in 0..cfg.max_outer {
        outer_done += 1;
        // (a) alternate latent prediction and coefficient updates
        for _ in 0..cfg.coord_sweeps {
            latents = predict_all(&engine, &coeffs, &latents, &loose)?;
            coeffs = update_coeffs_engine(&engine, &latents)?;
        }
        // (b) variance search on the marginal criterion
        let (vp_new, marginal_new, latents_new) = optimize_variance(
            dataset,
            family,
            model,
            &coeffs,
            &engine.vp,
            &latents,
            cfg,
        )?;

        if marginal_new > best_marginal - 1e-12 * best_marginal.abs() {
            // no improvement: keep the best state and stop
            converged = (best_marginal - marginal_new).abs()
                <= cfg.outer_rel_tol * (1.0 + best_marginal.abs());
            break;
        }
        let improvement = best_marginal - marginal_new;
        best_marginal = marginal_new;
        best_coeffs = coeffs.clone();
        best_vp = vp_new;
        best_latents = latents_new.clone();
        trace.push(best_marginal);

        engine = Engine::new(dataset, family, model, &vp_new, cfg.laplace)?;
        latents = latents_new;

        if improvement <= cfg.outer_rel_tol * (1.0 + best_marginal.abs()) {
            converged = true;
            break;
        }
    }

    // final latents at the best parameters, plus the KKT residuals there
    let engine = Engine::new(dataset, family, model, &best_vp, cfg.laplace)?;
    let final_latents = predict_all(&engine, &best_coeffs, &best_latents, cfg)?;
    let mut max_kkt: f64 = 0.0;
    for i in 0..dataset.n_curves() {
        let ctx = engine.ctx(i);
        let c_j = best_coeffs
            .get(dataset.curves()[i].group())
            .expect("group coefficients exist");
        let (grad, _) = ctx.posterior_grad_hess_u(c_j, &final_latents.u[i], &final_latents.w[i])?;
        max_kkt = max_kkt.max(grad.amax());
    }
    if !converged {
        log::warn!(
            "fit stopped after {outer_done} outer iterations without meeting the tolerance"
        );
    }

    Ok(FittedModel {
        model: model.clone(),
        family: *family,
        coefficients: best_coeffs,
        variance: best_vp,
        latents: final_latents,
        convention: cfg.laplace,
        diagnostics: FitDiagnostics {
            converged,
            outer_iterations: outer_done,
            final_marginal_nll: best_marginal,
            marginal_trace: trace,
            max_kkt_residual: max_kkt,
        },
    })
}
