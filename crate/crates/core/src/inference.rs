//! Post-fit inference: profiled information matrices, pointwise confidence
//! bands, estimator simulation, peak statistics, credibility comparisons and
//! threshold-crossing summaries.
//!
//! The information matrix for a group's spline coefficients is the second
//! derivative of the *profiled* posterior `f(c) = L(c, u(c), w(c))`, where
//! every evaluation re-optimizes the latents at the perturbed coefficients.
//! Differentiating `L` at fixed latents instead would overstate the
//! information, because the latent predictions move with `c`.

use nalgebra::{Cholesky, DMatrix, DVector};

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::ContinuousCDF;

use crate::basis::SplineBasis;
use crate::error::{Error, Result};
use crate::estimation::{predict_latents, Engine, FitConfig, FittedModel};
use crate::model::Dataset;
use crate::rng::substream;
use crate::warp::build_warp;

/// Profiled observed information for one group's coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InformationMatrix {
    pub group: String,
    pub matrix: DMatrix<f64>,
}

/// Location of a curve's maximum and its average decline to the horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakStats {
    /// Hours after the start of the experiment.
    pub location_hours: f64,
    /// Average log-scale decline from the peak to the horizon, as percent
    /// per hour; zero (flagged) when the peak sits at the horizon.
    pub decrease_pct_per_hour: f64,
    /// Curve value at the peak.
    pub peak_value: f64,
    /// The peak sits at the horizon, so no decline is defined.
    pub at_horizon: bool,
}

/// One pointwise confidence interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandPoint {
    pub time_hours: f64,
    pub estimate: f64,
    pub std_error: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Simulated latent trajectories of one group on a dense grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectories {
    pub group: String,
    pub times_hours: Vec<f64>,
    /// Link-scale trajectories, one vector per draw.
    pub link: Vec<DVector<f64>>,
}

/// First-crossing time and time spent above one threshold for one trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCrossing {
    pub trajectory: usize,
    pub threshold: f64,
    /// Hours at which the trajectory first reaches the threshold, if ever.
    pub first_crossing_hours: Option<f64>,
    /// Total hours spent at or above the threshold, truncated at the horizon.
    pub duration_hours: f64,
}

/// How [`credibility_q`] pairs the two sample sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PairingMode {
    /// Sample i of X against sample i of Y (requires equal lengths).
    #[default]
    Paired,
    /// Every sample of X against every sample of Y.
    CrossProduct,
}

/// Finite-difference step per coefficient for the profiled Hessian.
const INFORMATION_STEP: f64 = 1e-3;

/// Profiled posterior of one group as a function of its coefficients: the
/// summed posterior over the group's curves with latents re-optimized.
fn profiled_group_nll(
    engine: &Engine<'_>,
    group_curves: &[usize],
    coeffs: &DVector<f64>,
    warm: &[(DVector<f64>, DVector<f64>)],
    cfg: &FitConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for (slot, &i) in group_curves.iter().enumerate() {
        let ctx = engine.ctx(i);
        let (u0, w0) =
            predict_latents(&ctx, coeffs, Some((&warm[slot].0, &warm[slot].1)), cfg)?;
        total += ctx.posterior_nll(coeffs, &u0, &w0)?;
    }
    Ok(total)
}

/// Central finite-difference Hessian of the profiled posterior, symmetrized
/// and eigenvalue-floored. Evaluations re-optimize latents warm-started from
/// the fitted state.
pub fn information_matrix(
    fit: &FittedModel,
    dataset: &Dataset,
    group: &str,
    cfg: &FitConfig,
) -> Result<InformationMatrix> {
    let j = dataset
        .group_index(group)
        .ok_or_else(|| Error::InvalidInput(format!("unknown group '{group}'")))?;
    let engine = Engine::new(dataset, &fit.family, &fit.model, &fit.variance, fit.convention)?;
    let group_curves = dataset.curves_in_group(j);
    let c_hat = fit.coeffs_for_group(group)?.clone();
    let warm: Vec<(DVector<f64>, DVector<f64>)> = group_curves
        .iter()
        .map(|&i| (fit.latents.u[i].clone(), fit.latents.w[i].clone()))
        .collect();
    let p = c_hat.len();
    let h = INFORMATION_STEP;

    // all stencil points, in a deterministic order
    let mut points: Vec<DVector<f64>> = Vec::new();
    let mut index = std::collections::HashMap::new();
    let push = |points: &mut Vec<DVector<f64>>,
                    index: &mut std::collections::HashMap<(isize, isize, usize, usize), usize>,
                    key: (isize, isize, usize, usize),
                    c: DVector<f64>| {
        let next = points.len();
        index.entry(key).or_insert_with(|| {
            points.push(c);
            next
        });
    };
    for a in 0..p {
        for (sa, sign) in [(1isize, 1.0), (-1isize, -1.0)] {
            let mut c = c_hat.clone();
            c[a] += sign * h;
            push(&mut points, &mut index, (sa, 0, a, a), c);
        }
    }
    for a in 0..p {
        for b in (a + 1)..p {
            for (sa, sb) in [(1isize, 1isize), (1, -1), (-1, 1), (-1, -1)] {
                let mut c = c_hat.clone();
                c[a] += sa as f64 * h;
                c[b] += sb as f64 * h;
                push(&mut points, &mut index, (sa, sb, a, b), c);
            }
        }
    }

    let values: Vec<Result<f64>> = points
        .par_iter()
        .map(|c| profiled_group_nll(&engine, &group_curves, c, &warm, cfg))
        .collect();
    let values: Vec<f64> = values.into_iter().collect::<Result<Vec<_>>>()?;
    let f0 = profiled_group_nll(&engine, &group_curves, &c_hat, &warm, cfg)?;
    let v = |key: (isize, isize, usize, usize)| values[index[&key]];

    let mut hess = DMatrix::zeros(p, p);
    for a in 0..p {
        hess[(a, a)] = (v((1, 0, a, a)) - 2.0 * f0 + v((-1, 0, a, a))) / (h * h);
    }
    for a in 0..p {
        for b in (a + 1)..p {
            let mixed = (v((1, 1, a, b)) - v((1, -1, a, b)) - v((-1, 1, a, b))
                + v((-1, -1, a, b)))
                / (4.0 * h * h);
            hess[(a, b)] = mixed;
            hess[(b, a)] = mixed;
        }
    }

    // symmetrize (exact already) and floor the spectrum
    let sym = (&hess + hess.transpose()) * 0.5;
    let eigen = nalgebra::SymmetricEigen::new(sym);
    let max_eig = eigen.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
    let min_eig = eigen.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
    if !(max_eig.is_finite() && min_eig.is_finite()) || min_eig < -1e-6 * max_eig.abs() {
        return Err(Error::IndefiniteInformation(format!(
            "group '{group}': eigenvalues in [{min_eig:.4e}, {max_eig:.4e}]"
        )));
    }
    let floored = DVector::from_iterator(p, eigen.eigenvalues.iter().map(|&e| e.max(1e-10)));
    let matrix = &eigen.eigenvectors * DMatrix::from_diagonal(&floored) * eigen.eigenvectors.transpose();
    Ok(InformationMatrix {
        group: group.to_string(),
        matrix,
    })
}

/// Two-sided normal quantile for a coverage level.
fn z_for_level(level: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&level) {
        return Err(Error::InvalidInput(format!(
            "confidence level must be in [0, 1), got {level}"
        )));
    }
    if level == 0.0 {
        return Ok(0.0);
    }
    let normal = statrs::distribution::Normal::new(0.0, 1.0).expect("unit normal");
    Ok(normal.inverse_cdf(0.5 + level / 2.0))
}

/// Pointwise confidence band `theta(t) +- z sqrt(b(t)' I^-1 b(t))`.
pub fn confidence_band(
    fit: &FittedModel,
    info: &InformationMatrix,
    level: f64,
    grid_hours: &[f64],
    horizon_hours: f64,
) -> Result<Vec<BandPoint>> {
    let coeffs = fit.coeffs_for_group(&info.group)?;
    let z = z_for_level(level)?;
    let chol = Cholesky::new(info.matrix.clone())
        .ok_or_else(|| Error::IndefiniteInformation(info.group.clone()))?;
    let mut out = Vec::with_capacity(grid_hours.len());
    for &hour in grid_hours {
        let t = hour / horizon_hours;
        let row = fit.model.basis.design_row(t);
        let est = row.dot(coeffs);
        let se = row.dot(&chol.solve(&row)).max(0.0).sqrt();
        out.push(BandPoint {
            time_hours: hour,
            estimate: est,
            std_error: se,
            lower: est - z * se,
            upper: est + z * se,
        });
    }
    Ok(out)
}

/// Draws from the approximate sampling distribution `N(c_hat, I^-1)` of one
/// group's coefficient estimator; deterministic given the seed.
pub fn sample_coefficients(
    fit: &FittedModel,
    info: &InformationMatrix,
    n_sim: usize,
    seed: u64,
) -> Result<Vec<DVector<f64>>> {
    let c_hat = fit.coeffs_for_group(&info.group)?;
    let p = c_hat.len();
    let chol = Cholesky::new(info.matrix.clone())
        .ok_or_else(|| Error::IndefiniteInformation(info.group.clone()))?;
    // x = c_hat + L^-T z has covariance (L L')^-1 = I^-1
    let l_t = chol.l().transpose();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Vec::with_capacity(n_sim);
    for i in 0..n_sim {
        let mut rng = substream(seed, &format!("infer/coeffs/{}", info.group), i as u64);
        let z = DVector::from_fn(p, |_, _| normal.sample(&mut rng));
        let x = l_t
            .clone()
            .solve_upper_triangular(&z)
            .ok_or_else(|| Error::IndefiniteInformation(info.group.clone()))?;
        out.push(c_hat + x);
    }
    Ok(out)
}

/// Argmax of the curve on a 1201-point grid (0.1-hour resolution over 120
/// hours) and the average log-scale decline from there to the horizon.
pub fn peak_stats(
    coeffs: &DVector<f64>,
    basis: &SplineBasis,
    horizon_hours: f64,
) -> Result<PeakStats> {
    if !(horizon_hours.is_finite() && horizon_hours > 0.0) {
        return Err(Error::InvalidInput(format!(
            "horizon must be positive, got {horizon_hours}"
        )));
    }
    let n_grid = 1201;
    let mut best_ix = 0;
    let mut best = f64::NEG_INFINITY;
    let mut value_end = 0.0;
    for i in 0..n_grid {
        let t = i as f64 / (n_grid - 1) as f64;
        let v = basis.eval(coeffs, t)?;
        if v > best {
            best = v;
            best_ix = i;
        }
        if i == n_grid - 1 {
            value_end = v;
        }
    }
    let location_hours = best_ix as f64 / (n_grid - 1) as f64 * horizon_hours;
    let at_horizon = best_ix == n_grid - 1;
    let decrease = if at_horizon {
        0.0
    } else {
        (best - value_end) / (horizon_hours - location_hours) * 100.0
    };
    Ok(PeakStats {
        location_hours,
        decrease_pct_per_hour: decrease,
        peak_value: best,
        at_horizon,
    })
}

/// Credibility `q = P(f(X) < f(Y))` from simulated estimator functionals;
/// ties count one half.
pub fn credibility_q(samples_fx: &[f64], samples_fy: &[f64], mode: PairingMode) -> Result<f64> {
    if samples_fx.is_empty() || samples_fy.is_empty() {
        return Err(Error::InvalidInput("empty credibility sample set".into()));
    }
    match mode {
        PairingMode::Paired => {
            if samples_fx.len() != samples_fy.len() {
                return Err(Error::InvalidInput(format!(
                    "paired comparison needs equal sample counts, got {} and {}",
                    samples_fx.len(),
                    samples_fy.len()
                )));
            }
            let mut q = 0.0;
            for (x, y) in samples_fx.iter().zip(samples_fy) {
                q += match x.partial_cmp(y) {
                    Some(std::cmp::Ordering::Less) => 1.0,
                    Some(std::cmp::Ordering::Equal) => 0.5,
                    _ => 0.0,
                };
            }
            Ok(q / samples_fx.len() as f64)
        }
        PairingMode::CrossProduct => {
            let mut q = 0.0;
            for x in samples_fx {
                for y in samples_fy {
                    q += match x.partial_cmp(y) {
                        Some(std::cmp::Ordering::Less) => 1.0,
                        Some(std::cmp::Ordering::Equal) => 0.5,
                        _ => 0.0,
                    };
                }
            }
            Ok(q / (samples_fx.len() * samples_fy.len()) as f64)
        }
    }
}

/// Simulate latent trajectories `theta(v(t, w)) + x(t)` from the fitted
/// model: warp draws from the fitted prior, amplitude draws from the fitted
/// kernel (eigenvalue-clamped on the dense grid, whose Gram is numerically
/// rank-deficient for smooth kernels). Deterministic given the seed.
pub fn simulate_trajectories(
    fit: &FittedModel,
    group: &str,
    n_traj: usize,
    grid_size: usize,
    horizon_hours: f64,
    include_amplitude: bool,
    seed: u64,
) -> Result<Trajectories> {
    if grid_size < 2 {
        return Err(Error::InvalidInput("trajectory grid needs at least 2 points".into()));
    }
    let coeffs = fit.coeffs_for_group(group)?;
    let times: Vec<f64> = (0..grid_size).map(|i| i as f64 / (grid_size - 1) as f64).collect();
    let times_hours: Vec<f64> = times.iter().map(|t| t * horizon_hours).collect();

    let warp_chol = fit.variance.warp_prior(&fit.model.warp)?.chol_l();
    let amp_factor = if include_amplitude {
        let mut gram = DMatrix::zeros(grid_size, grid_size);
        for i in 0..grid_size {
            for j in 0..=i {
                let v = crate::kernels::matern((times[i] - times[j]).abs(), &fit.variance.amplitude)?;
                gram[(i, j)] = v;
                gram[(j, i)] = v;
            }
        }
        let eigen = nalgebra::SymmetricEigen::new(gram);
        let sqrt = DVector::from_iterator(
            grid_size,
            eigen.eigenvalues.iter().map(|&e| e.max(0.0).sqrt()),
        );
        Some(&eigen.eigenvectors * DMatrix::from_diagonal(&sqrt))
    } else {
        None
    };

    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let m_w = fit.model.warp.len();
    let mut link = Vec::with_capacity(n_traj);
    for i in 0..n_traj {
        let mut rng = substream(seed, &format!("sim/trajectory/{group}"), i as u64);
        let mut w = DVector::zeros(m_w);
        for _ in 0..100 {
            let z = DVector::from_fn(m_w, |_, _| normal.sample(&mut rng));
            w = &warp_chol * z;
            if build_warp(&fit.model.warp, w.as_slice()).is_ok() {
                break;
            }
        }
        let warp = build_warp(&fit.model.warp, w.as_slice())?;
        let x = match &amp_factor {
            Some(f) => {
                let z = DVector::from_fn(grid_size, |_, _| normal.sample(&mut rng));
                f * z
            }
            None => DVector::zeros(grid_size),
        };
        let mut traj = DVector::zeros(grid_size);
        for (k, &t) in times.iter().enumerate() {
            traj[k] = fit.model.basis.eval(coeffs, warp.eval(t))? + x[k];
        }
        link.push(traj);
    }
    Ok(Trajectories {
        group: group.to_string(),
        times_hours,
        link,
    })
}

impl Trajectories {
    /// Intensity-scale view of one trajectory.
    pub fn intensity(&self, i: usize) -> DVector<f64> {
        self.link[i].map(f64::exp)
    }
}

/// First-crossing times and durations above each threshold, on the link
/// scale of the trajectories; durations are truncated at the horizon.
pub fn threshold_summary(
    trajectories: &Trajectories,
    thresholds: &[f64],
    horizon_hours: f64,
) -> Vec<ThresholdCrossing> {
    let n_grid = trajectories.times_hours.len();
    let dt = if n_grid > 1 {
        trajectories.times_hours[1] - trajectories.times_hours[0]
    } else {
        0.0
    };
    let mut out = Vec::with_capacity(trajectories.link.len() * thresholds.len());
    for (i, traj) in trajectories.link.iter().enumerate() {
        for &thr in thresholds {
            let mut first = None;
            let mut above = 0usize;
            for k in 0..n_grid {
                if traj[k] >= thr {
                    above += 1;
                    if first.is_none() {
                        first = Some(trajectories.times_hours[k]);
                    }
                }
            }
            out.push(ThresholdCrossing {
                trajectory: i,
                threshold: thr,
                first_crossing_hours: first,
                duration_hours: (above as f64 * dt).min(horizon_hours),
            });
        }
    }
    out
}

/// The default threshold ladder 0.5, 1.0, ..., 5.5. One step of 0.5 on the
/// link scale multiplies the intensity by e^0.5, about a 65% increase.
pub fn default_thresholds() -> Vec<f64> {
    (1..=11).map(|i| 0.5 * i as f64).collect()
}
