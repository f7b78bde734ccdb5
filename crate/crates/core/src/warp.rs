//! Monotone time transformations parametrized by latent anchor displacements.
//!
//! A warp `v(., w)` interpolates the knots `(0, 0), (t_k, t_k + w_k)` with a
//! cubic Hermite spline whose knot slopes start from centred differences and
//! are then limited de Boor/Hyman style, which guarantees a nondecreasing
//! interpolant for strictly increasing knot values. `w = 0` reproduces the
//! identity exactly. Past the last anchor the warp continues linearly with
//! the spline's right-end slope, so warped times may run beyond 1.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Anchor grid of a warp family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarpSpec {
    anchors: Vec<f64>,
}

impl WarpSpec {
    /// `m_w` equidistant internal anchors `k / (m_w + 1)`, `k = 1..m_w`.
    pub fn equidistant(m_w: usize) -> Result<Self> {
        if m_w < 1 {
            return Err(Error::InvalidInput("need at least one warp anchor".into()));
        }
        let anchors = (1..=m_w).map(|k| k as f64 / (m_w + 1) as f64).collect();
        Ok(Self { anchors })
    }

    /// Custom anchors, strictly increasing and strictly inside (0, 1).
    pub fn new(anchors: Vec<f64>) -> Result<Self> {
        if anchors.is_empty() {
            return Err(Error::InvalidInput("need at least one warp anchor".into()));
        }
        let inside = anchors.iter().all(|&a| a > 0.0 && a < 1.0 && a.is_finite());
        let increasing = anchors.windows(2).all(|w| w[1] > w[0]);
        if !inside || !increasing {
            return Err(Error::InvalidInput(
                "warp anchors must be strictly increasing inside (0, 1)".into(),
            ));
        }
        Ok(Self { anchors })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn anchors(&self) -> &[f64] {
        &self.anchors
    }
}

/// A built warp: an increasing piecewise-cubic map with linear right tail.
#[derive(Debug, Clone)]
pub struct MonotoneWarp {
    xs: Vec<f64>,
    ys: Vec<f64>,
    slopes: Vec<f64>,
}

/// Centred-difference knot slopes followed by the Hyman/de Boor limiter for
/// increasing data: each slope is clamped into `[0, 3 min(adjacent secants)]`.
fn limited_slopes(xs: &[f64], ys: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let secants: Vec<f64> = (0..n - 1)
        .map(|i| (ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i]))
        .collect();
    let mut slopes = vec![0.0; n];
    slopes[0] = secants[0];
    slopes[n - 1] = secants[n - 2];
    for i in 1..n - 1 {
        slopes[i] = (ys[i + 1] - ys[i - 1]) / (xs[i + 1] - xs[i - 1]);
    }
    for (i, s) in slopes.iter_mut().enumerate() {
        let cap = 3.0 * if i == 0 {
            secants[0]
        } else if i == n - 1 {
            secants[n - 2]
        } else {
            secants[i - 1].min(secants[i])
        };
        *s = s.max(0.0).min(cap);
    }
    slopes
}

impl MonotoneWarp {
    fn interval(&self, t: f64) -> usize {
        // rightmost interval with xs[i] <= t; callers handle the tails
        match self.xs.binary_search_by(|x| x.total_cmp(&t)) {
            Ok(i) => i.min(self.xs.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.xs.len() - 2),
        }
    }

    /// Evaluate the warp; linear continuation outside the knot span.
    pub fn eval(&self, t: f64) -> f64 {
        let n = self.xs.len();
        if t <= self.xs[0] {
            return self.ys[0] + self.slopes[0] * (t - self.xs[0]);
        }
        if t >= self.xs[n - 1] {
            return self.ys[n - 1] + self.slopes[n - 1] * (t - self.xs[n - 1]);
        }
        let i = self.interval(t);
        let h = self.xs[i + 1] - self.xs[i];
        let s = (t - self.xs[i]) / h;
        let (h00, h10, h01, h11) = hermite_basis(s);
        h00 * self.ys[i]
            + h10 * h * self.slopes[i]
            + h01 * self.ys[i + 1]
            + h11 * h * self.slopes[i + 1]
    }

    /// Evaluate at many points.
    pub fn eval_many(&self, times: &[f64]) -> Vec<f64> {
        times.iter().map(|&t| self.eval(t)).collect()
    }
}

fn hermite_basis(s: f64) -> (f64, f64, f64, f64) {
    let s2 = s * s;
    let s3 = s2 * s;
    (
        2.0 * s3 - 3.0 * s2 + 1.0,
        s3 - 2.0 * s2 + s,
        -2.0 * s3 + 3.0 * s2,
        s3 - s2,
    )
}

/// Build the monotone warp for displacement vector `w` (length `spec.len()`).
pub fn build_warp(spec: &WarpSpec, w: &[f64]) -> Result<MonotoneWarp> {
    if w.len() != spec.len() {
        return Err(Error::InvalidInput(format!(
            "warp coefficient length {} does not match {} anchors",
            w.len(),
            spec.len()
        )));
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidWarp("non-finite warp coefficient".into()));
    }
    let mut xs = Vec::with_capacity(spec.len() + 1);
    let mut ys = Vec::with_capacity(spec.len() + 1);
    xs.push(0.0);
    ys.push(0.0);
    for (a, wk) in spec.anchors().iter().zip(w) {
        xs.push(*a);
        ys.push(a + wk);
    }
    if ys.windows(2).any(|p| p[1] <= p[0]) {
        return Err(Error::InvalidWarp(
            "anchor values t_k + w_k are not strictly increasing".into(),
        ));
    }
    let slopes = limited_slopes(&xs, &ys);
    Ok(MonotoneWarp { xs, ys, slopes })
}

/// Jacobian `J[i][k] = d v(times[i], w) / d w_k`, obtained by differentiating
/// the spline construction (knot values, centred slopes, limiter branches,
/// Hermite weights are all piecewise linear in `w`).
pub fn warp_jacobian(spec: &WarpSpec, w: &[f64], times: &[f64]) -> Result<DMatrix<f64>> {
    let warp = build_warp(spec, w)?;
    let m = spec.len();
    let n = warp.xs.len();
    let xs = &warp.xs;
    let ys = &warp.ys;

    let secants: Vec<f64> = (0..n - 1)
        .map(|i| (ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i]))
        .collect();
    let raw: Vec<f64> = (0..n)
        .map(|i| {
            if i == 0 {
                secants[0]
            } else if i == n - 1 {
                secants[n - 2]
            } else {
                (ys[i + 1] - ys[i - 1]) / (xs[i + 1] - xs[i - 1])
            }
        })
        .collect();

    let mut jac = DMatrix::zeros(times.len(), m);
    // tangent pass per anchor: seed dy_j = 1 at knot j = k + 1
    for k in 0..m {
        let j = k + 1;
        let dy = |i: usize| if i == j { 1.0 } else { 0.0 };
        let dsec: Vec<f64> = (0..n - 1)
            .map(|i| (dy(i + 1) - dy(i)) / (xs[i + 1] - xs[i]))
            .collect();
        let draw: Vec<f64> = (0..n)
            .map(|i| {
                if i == 0 {
                    dsec[0]
                } else if i == n - 1 {
                    dsec[n - 2]
                } else {
                    (dy(i + 1) - dy(i - 1)) / (xs[i + 1] - xs[i - 1])
                }
            })
            .collect();
        let dslope: Vec<f64> = (0..n)
            .map(|i| {
                let (cap, dcap) = if i == 0 {
                    (3.0 * secants[0], 3.0 * dsec[0])
                } else if i == n - 1 {
                    (3.0 * secants[n - 2], 3.0 * dsec[n - 2])
                } else if secants[i - 1] <= secants[i] {
                    (3.0 * secants[i - 1], 3.0 * dsec[i - 1])
                } else {
                    (3.0 * secants[i], 3.0 * dsec[i])
                };
                if raw[i] <= 0.0 {
                    0.0
                } else if raw[i] >= cap {
                    dcap
                } else {
                    draw[i]
                }
            })
            .collect();

        for (row, &t) in times.iter().enumerate() {
            let v = if t <= xs[0] {
                dslope[0] * (t - xs[0])
            } else if t >= xs[n - 1] {
                dy(n - 1) + dslope[n - 1] * (t - xs[n - 1])
            } else {
                let i = warp.interval(t);
                let h = xs[i + 1] - xs[i];
                let s = (t - xs[i]) / h;
                let (h00, h10, h01, h11) = hermite_basis(s);
                h00 * dy(i) + h10 * h * dslope[i] + h01 * dy(i + 1) + h11 * h * dslope[i + 1]
            };
            jac[(row, k)] = v;
        }
    }
    Ok(jac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn zero_coefficients_give_identity() {
        let spec = WarpSpec::equidistant(7).unwrap();
        let warp = build_warp(&spec, &[0.0; 7]).unwrap();
        for i in 0..=100 {
            let t = i as f64 / 100.0;
            assert!((warp.eval(t) - t).abs() < 1e-12, "v({t}) = {}", warp.eval(t));
        }
        // identity continues past the last anchor
        assert_relative_eq!(warp.eval(1.2), 1.2, epsilon = 1e-12);
    }

    #[test]
    fn interpolates_anchor_values_exactly() {
        let spec = WarpSpec::equidistant(7).unwrap();
        let mut rng = crate::rng::stream(2, "test/warp-interp");
        let normal = Normal::new(0.0, 0.02).unwrap();
        for _ in 0..100 {
            let w: Vec<f64> = (0..7).map(|_| normal.sample(&mut rng)).collect();
            let warp = match build_warp(&spec, &w) {
                Ok(v) => v,
                Err(_) => continue,
            };
            for (a, wk) in spec.anchors().iter().zip(&w) {
                assert_relative_eq!(warp.eval(*a), a + wk, epsilon = 1e-14);
            }
            assert_eq!(warp.eval(0.0), 0.0);
        }
    }

    #[test]
    fn example_displacements_yield_strictly_increasing_warp() {
        let spec = WarpSpec::equidistant(7).unwrap();
        let w = [0.03, -0.02, 0.0, 0.01, 0.0, 0.0, -0.01];
        let warp = build_warp(&spec, &w).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for i in 0..10_000 {
            let t = i as f64 / 9_999.0;
            let v = warp.eval(t);
            assert!(v > prev, "not strictly increasing at t = {t}");
            prev = v;
        }
    }

    #[test]
    fn rejects_non_monotone_anchor_values() {
        let spec = WarpSpec::equidistant(3).unwrap();
        // anchors 0.25, 0.5, 0.75; w makes 0.5 + w2 < 0.25 + w1
        let res = build_warp(&spec, &[0.2, -0.2, 0.0]);
        assert!(matches!(res, Err(Error::InvalidWarp(_))));
        assert!(build_warp(&spec, &[f64::NAN, 0.0, 0.0]).is_err());
        assert!(build_warp(&spec, &[0.1, 0.1], ).is_err());
    }

    #[test]
    fn extrapolation_is_linear_with_right_slope() {
        let spec = WarpSpec::equidistant(5).unwrap();
        let w = [0.01, -0.01, 0.02, 0.0, 0.01];
        let warp = build_warp(&spec, &w).unwrap();
        let last = *spec.anchors().last().unwrap();
        let y_last = warp.eval(last);
        let slope = (warp.eval(last + 1e-7) - y_last) / 1e-7;
        for t in [1.0, 1.1, 1.4] {
            assert_relative_eq!(warp.eval(t), y_last + slope * (t - last), epsilon = 1e-6);
        }
        assert!(slope >= 0.0);
    }

    #[test]
    fn monotone_for_random_gaussian_displacements() {
        let spec = WarpSpec::equidistant(7).unwrap();
        let mut rng = crate::rng::stream(31, "test/warp-monotone");
        let normal = Normal::new(0.0, 0.03).unwrap();
        let mut built = 0;
        for _ in 0..1000 {
            let w: Vec<f64> = (0..7).map(|_| normal.sample(&mut rng)).collect();
            let warp = match build_warp(&spec, &w) {
                Ok(v) => v,
                Err(_) => continue, // degenerate draw, rejected upstream
            };
            built += 1;
            let mut prev = warp.eval(0.0);
            for i in 1..=1500 {
                let t = 1.5 * i as f64 / 1500.0;
                let v = warp.eval(t);
                assert!(v >= prev - 1e-13, "decrease at t = {t}");
                prev = v;
            }
        }
        assert!(built > 990, "too many rejected draws: {built}");
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let spec = WarpSpec::equidistant(7).unwrap();
        let mut rng = crate::rng::stream(13, "test/warp-jac");
        let normal = Normal::new(0.0, 0.02).unwrap();
        let times: Vec<f64> = (0..=40).map(|i| i as f64 / 40.0 * 1.1).collect();
        for _ in 0..20 {
            let w: Vec<f64> = (0..7).map(|_| normal.sample(&mut rng)).collect();
            if build_warp(&spec, &w).is_err() {
                continue;
            }
            let jac = warp_jacobian(&spec, &w, &times).unwrap();
            let h = 1e-6;
            for k in 0..7 {
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp[k] += h;
                wm[k] -= h;
                let (vp, vm) = match (build_warp(&spec, &wp), build_warp(&spec, &wm)) {
                    (Ok(a), Ok(b)) => (a, b),
                    _ => continue,
                };
                for (i, &t) in times.iter().enumerate() {
                    let fd = (vp.eval(t) - vm.eval(t)) / (2.0 * h);
                    let d = (jac[(i, k)] - fd).abs();
                    assert!(
                        d < 1e-4 * fd.abs().max(1.0),
                        "J[{i}][{k}] = {} vs fd {fd}",
                        jac[(i, k)]
                    );
                }
            }
        }
    }

    #[test]
    fn jacobian_rows_at_anchors_are_cardinal() {
        let spec = WarpSpec::equidistant(7).unwrap();
        let jac = warp_jacobian(&spec, &[0.0; 7], spec.anchors()).unwrap();
        for i in 0..7 {
            for k in 0..7 {
                let expect = if i == k { 1.0 } else { 0.0 };
                assert_relative_eq!(jac[(i, k)], expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn jacobian_row_sums_are_bounded_and_zero_at_origin() {
        let spec = WarpSpec::equidistant(7).unwrap();
        // at the anchors the rows are cardinal, so they sum to exactly one
        let jac_anchors = warp_jacobian(&spec, &[0.0; 7], spec.anchors()).unwrap();
        for i in 0..7 {
            let sum: f64 = (0..7).map(|k| jac_anchors[(i, k)]).sum();
            assert_relative_eq!(sum, 1.0, epsilon = 1e-12);
        }
        // between the first anchors the centred-slope coupling lets a uniform
        // shift of all anchor values overshoot slightly, so off-anchor row
        // sums are only bounded by a small margin above one
        let times: Vec<f64> = (0..=50).map(|i| i as f64 / 50.0).collect();
        let jac = warp_jacobian(&spec, &[0.0; 7], &times).unwrap();
        for i in 0..times.len() {
            let sum: f64 = (0..7).map(|k| jac[(i, k)]).sum();
            assert!((-1e-12..=1.1).contains(&sum), "row sum {sum}");
        }
        for k in 0..7 {
            assert_relative_eq!(jac[(0, k)], 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn jacobian_is_continuous_in_w() {
        let spec = WarpSpec::equidistant(7).unwrap();
        let times: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
        let w = [0.01, 0.005, -0.008, 0.002, 0.0, 0.004, -0.003];
        let j0 = warp_jacobian(&spec, &w, &times).unwrap();
        let mut rng = crate::rng::stream(41, "test/warp-jac-cont");
        let mut w2 = w;
        for v in &mut w2 {
            *v += rng.random_range(-1e-6..1e-6);
        }
        let j1 = warp_jacobian(&spec, &w2, &times).unwrap();
        let diff = (&j1 - &j0).abs().max();
        assert!(diff < 1e-3, "jacobian jumped by {diff}");
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(200))]
        #[test]
        fn warp_is_nondecreasing_on_and_past_the_domain(
            seed in 0u64..5000,
        ) {
            let spec = WarpSpec::equidistant(7).unwrap();
            let mut rng = crate::rng::substream(seed, "prop/warp", 0);
            let normal = Normal::new(0.0, 0.03).unwrap();
            let w: Vec<f64> = (0..7).map(|_| normal.sample(&mut rng)).collect();
            if let Ok(warp) = build_warp(&spec, &w) {
                let mut prev = warp.eval(0.0);
                for i in 1..=300 {
                    let t = 1.5 * i as f64 / 300.0;
                    let v = warp.eval(t);
                    proptest::prop_assert!(v >= prev - 1e-13);
                    prev = v;
                }
            }
        }
    }
}
