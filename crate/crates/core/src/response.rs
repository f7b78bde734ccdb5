//! Exponential-family observation models.
//!
//! Observations are modelled as `p(y | eta) = b(y) exp(eta * y~ - A(eta, y))`
//! where `eta` is the latent curve value, `y~` the canonical statistic and
//! `A` the cumulant term. `A` is strictly convex in `eta` for every family
//! here, which makes the inner latent optimization a convex problem.
//!
//! For the negative binomial family the cumulant depends on the observation:
//! `A(eta, y) = (r + y) log(1 + exp(eta)/r)`, with curvature
//! `A''(eta, y) = (y + r) r exp(eta) / (r + exp(eta))^2`. As `r -> inf` the
//! family degenerates to the Poisson model.
//!
//! Note the distinction between the conditional mean and the intensity: for
//! count families the conditional mean `E[Y | eta]` equals `exp(eta)`, the
//! intensity on the natural scale, and both accessors are provided. For the
//! Gaussian family the canonical statistic is `y / sigma2`, so the data side
//! of any likelihood term must use [`ResponseFamily::canonical_stat`].

use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::rng::stream;

/// Threshold beyond which `exp(eta)`-style cumulants are reported as infinite
/// rather than allowed to overflow into NaN arithmetic.
const ETA_OVERFLOW: f64 = 700.0;

/// An exponential-family response model with fixed hyperparameters.
///
/// Hyperparameters (the negative binomial rate, the Gaussian variance) are
/// fixed before model fitting and never re-estimated inside the fit loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ResponseFamily {
    /// Normal observations with known variance; the canonical statistic is
    /// `y / sigma2`.
    Gaussian { sigma2: f64 },
    /// Counts with `E[Y | eta] = Var[Y | eta] = exp(eta)`.
    Poisson,
    /// Overdispersed counts: `Var[Y | eta] = E[Y | eta] + E[Y | eta]^2 / r`.
    NegBinomial { r: f64 },
    /// Bernoulli observations with the logit link.
    Binary,
}

/// `log(1 + exp(x))` without overflow.
fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic function, stable at both tails.
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl ResponseFamily {
    /// Parse a family from its configuration string: `gaussian(sigma2=...)`,
    /// `poisson`, `negbin(r=...)` or `binary`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = |msg: &str| Error::InvalidInput(format!("response family '{s}': {msg}"));
        if s == "poisson" {
            return Ok(Self::Poisson);
        }
        if s == "binary" {
            return Ok(Self::Binary);
        }
        if let Some(rest) = s.strip_prefix("gaussian(").and_then(|r| r.strip_suffix(')')) {
            let v = rest
                .strip_prefix("sigma2=")
                .ok_or_else(|| bad("expected gaussian(sigma2=...)"))?
                .parse::<f64>()
                .map_err(|_| bad("sigma2 is not a number"))?;
            return Self::gaussian(v);
        }
        if let Some(rest) = s.strip_prefix("negbin(").and_then(|r| r.strip_suffix(')')) {
            let v = rest
                .strip_prefix("r=")
                .ok_or_else(|| bad("expected negbin(r=...)"))?
                .parse::<f64>()
                .map_err(|_| bad("r is not a number"))?;
            return Self::neg_binomial(v);
        }
        Err(bad(
            "expected one of gaussian(sigma2=...), poisson, negbin(r=...), binary",
        ))
    }

    pub fn gaussian(sigma2: f64) -> Result<Self> {
        if !(sigma2.is_finite() && sigma2 > 0.0) {
            return Err(Error::InvalidInput(format!(
                "gaussian variance must be positive, got {sigma2}"
            )));
        }
        Ok(Self::Gaussian { sigma2 })
    }

    pub fn neg_binomial(r: f64) -> Result<Self> {
        if !(r.is_finite() && r > 0.0) {
            return Err(Error::InvalidInput(format!(
                "negative binomial rate must be positive, got {r}"
            )));
        }
        Ok(Self::NegBinomial { r })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Gaussian { .. } => "gaussian",
            Self::Poisson => "poisson",
            Self::NegBinomial { .. } => "negbin",
            Self::Binary => "binary",
        }
    }

    /// Check that `y` lies in the family's sample space.
    pub fn check_observation(&self, y: f64) -> Result<()> {
        let fail = |detail: String| {
            Err(Error::InvalidObservation {
                family: self.name().to_string(),
                detail,
            })
        };
        if !y.is_finite() {
            return fail(format!("{y} is not finite"));
        }
        match self {
            Self::Gaussian { .. } => Ok(()),
            Self::Poisson | Self::NegBinomial { .. } => {
                if y < 0.0 || y.fract() != 0.0 {
                    fail(format!("{y} is not a nonnegative integer"))
                } else {
                    Ok(())
                }
            }
            Self::Binary => {
                if y == 0.0 || y == 1.0 {
                    Ok(())
                } else {
                    fail(format!("{y} is not in {{0, 1}}"))
                }
            }
        }
    }

    /// The canonical statistic entering the linear term of the log-density.
    /// Identity except for the Gaussian family, where it is `y / sigma2`.
    pub fn canonical_stat(&self, y: f64) -> f64 {
        match self {
            Self::Gaussian { sigma2 } => y / sigma2,
            _ => y,
        }
    }

    /// Cumulant term `A(eta, y)` of the log-density.
    pub fn a_value(&self, eta: f64, y: f64) -> f64 {
        match self {
            Self::Gaussian { sigma2 } => eta * eta / (2.0 * sigma2),
            Self::Poisson => {
                if eta > ETA_OVERFLOW {
                    log::warn!("poisson cumulant overflow at eta = {eta}");
                    f64::INFINITY
                } else {
                    eta.exp()
                }
            }
            Self::NegBinomial { r } => (r + y) * log1p_exp(eta - r.ln()),
            Self::Binary => log1p_exp(eta),
        }
    }

    /// First derivative of the cumulant in `eta`.
    pub fn a_prime(&self, eta: f64, y: f64) -> f64 {
        match self {
            Self::Gaussian { sigma2 } => eta / sigma2,
            Self::Poisson => {
                if eta > ETA_OVERFLOW {
                    f64::INFINITY
                } else {
                    eta.exp()
                }
            }
            Self::NegBinomial { r } => (r + y) * sigmoid(eta - r.ln()),
            Self::Binary => sigmoid(eta),
        }
    }

    /// Second derivative of the cumulant in `eta`; strictly positive.
    pub fn a_double_prime(&self, eta: f64, y: f64) -> f64 {
        match self {
            Self::Gaussian { sigma2 } => 1.0 / sigma2,
            Self::Poisson => {
                if eta > ETA_OVERFLOW {
                    f64::INFINITY
                } else {
                    eta.exp()
                }
            }
            Self::NegBinomial { r } => {
                let s = sigmoid(eta - r.ln());
                (r + y) * s * (1.0 - s)
            }
            Self::Binary => {
                let s = sigmoid(eta);
                s * (1.0 - s)
            }
        }
    }

    /// `log b(y)`, the part of the log-density that does not involve `eta`.
    ///
    /// For the negative binomial family this uses the log-gamma extension of
    /// the binomial coefficient, so non-integer rates (aggregated replicates)
    /// are supported.
    pub fn log_base(&self, y: f64) -> f64 {
        match self {
            Self::Gaussian { sigma2 } => {
                -y * y / (2.0 * sigma2) - 0.5 * (2.0 * std::f64::consts::PI * sigma2).ln()
            }
            Self::Poisson => -ln_gamma(y + 1.0),
            Self::NegBinomial { r } => {
                ln_gamma(y + r) - ln_gamma(*r) - ln_gamma(y + 1.0) - y * r.ln()
            }
            Self::Binary => 0.0,
        }
    }

    /// Full log-density `eta * y~ - A(eta, y) + log b(y)`.
    pub fn log_density(&self, eta: f64, y: f64) -> f64 {
        eta * self.canonical_stat(y) - self.a_value(eta, y) + self.log_base(y)
    }

    /// Conditional mean `E[Y | eta]` on the observation scale.
    pub fn conditional_mean(&self, eta: f64) -> f64 {
        match self {
            Self::Gaussian { .. } => eta,
            Self::Poisson | Self::NegBinomial { .. } => eta.exp(),
            Self::Binary => sigmoid(eta),
        }
    }

    /// Intensity `exp(eta)`, the natural scale for count models.
    pub fn intensity(&self, eta: f64) -> f64 {
        eta.exp()
    }

    /// Draw one observation from `p(. | eta)`, deterministic given the seed.
    pub fn sample(&self, eta: f64, seed: u64) -> f64 {
        let mut rng = stream(seed, "response/sample");
        self.sample_with(eta, &mut rng)
    }

    /// Draw one observation using the caller's RNG.
    pub fn sample_with<R: Rng + ?Sized>(&self, eta: f64, rng: &mut R) -> f64 {
        match self {
            Self::Gaussian { sigma2 } => {
                let n = Normal::new(eta, sigma2.sqrt()).expect("valid normal");
                n.sample(rng)
            }
            Self::Poisson => {
                let lambda = eta.exp();
                if lambda == 0.0 {
                    0.0
                } else {
                    Poisson::new(lambda).expect("valid poisson").sample(rng)
                }
            }
            Self::NegBinomial { r } => {
                // Gamma-Poisson mixture in the mean parametrization.
                let mu = eta.exp();
                if mu == 0.0 {
                    return 0.0;
                }
                let lambda = Gamma::new(*r, mu / r).expect("valid gamma").sample(rng);
                if lambda == 0.0 {
                    0.0
                } else {
                    Poisson::new(lambda).expect("valid poisson").sample(rng)
                }
            }
            Self::Binary => {
                let p = sigmoid(eta);
                if rng.random::<f64>() < p {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}
