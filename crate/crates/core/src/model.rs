//! Pre/post-change observation models.

use std::fmt;
use std::sync::Arc;

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf;

use crate::error::{invalid, Error, Result};
use crate::quadrature::integrate_unbounded;

/// Absolute tolerance for K-L divergences computed by quadrature.
pub const KL_QUAD_TOL: f64 = 1e-8;

/// A pre-change (`f0`) / post-change (`f1`) pair of scalar densities.
///
/// Densities are handled in log space. Implementations must be immutable:
/// samplers take the RNG stream as an argument and keep no state, so one pair
/// can be shared by every replication of a simulation.
pub trait DistributionPair: Send + Sync + fmt::Debug {
    fn ln_pdf0(&self, x: f64) -> f64;
    fn ln_pdf1(&self, x: f64) -> f64;

    fn pdf0(&self, x: f64) -> f64 {
        self.ln_pdf0(x).exp()
    }
    fn pdf1(&self, x: f64) -> f64 {
        self.ln_pdf1(x).exp()
    }

    fn cdf0(&self, x: f64) -> f64;
    fn cdf1(&self, x: f64) -> f64;

    /// Inverse of `cdf0`. The default brackets and bisects.
    fn quantile0(&self, p: f64) -> f64 {
        bisect_quantile(|x| self.cdf0(x), p)
    }

    fn sample0(&self, rng: &mut dyn RngCore) -> f64;
    fn sample1(&self, rng: &mut dyn RngCore) -> f64;

    /// `ln(f1(x) / f0(x))`.
    fn llr(&self, x: f64) -> f64 {
        self.ln_pdf1(x) - self.ln_pdf0(x)
    }

    /// True when `llr` is monotone in `x`, so a no-send interval in
    /// likelihood-ratio space is also an interval of observations.
    fn monotone_llr(&self) -> bool {
        false
    }

    /// `(I(f1||f0), I(f0||f1))` when known analytically.
    fn closed_form_kl(&self) -> Option<(f64, f64)> {
        None
    }
}

pub type SharedPair = Arc<dyn DistributionPair>;

fn bisect_quantile(cdf: impl Fn(f64) -> f64, p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let (mut lo, mut hi) = (-1.0_f64, 1.0_f64);
    while cdf(lo) > p {
        lo *= 2.0;
    }
    while cdf(hi) < p {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Standard normal CDF.
pub(crate) fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erf::erfc(-z / std::f64::consts::SQRT_2)
}

fn std_normal_ln_pdf(z: f64) -> f64 {
    -0.5 * z * z - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

fn std_normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let mut z = -std::f64::consts::SQRT_2 * erf::erfc_inv(2.0 * p);
    // Newton polish against the CDF actually used elsewhere.
    for _ in 0..3 {
        let dens = std_normal_ln_pdf(z).exp();
        if dens <= 0.0 {
            break;
        }
        let step = (std_normal_cdf(z) - p) / dens;
        z -= step;
        if step.abs() < 1e-15 * (1.0 + z.abs()) {
            break;
        }
    }
    z
}

/// Gaussian mean shift `N(mu0, sigma^2) -> N(mu1, sigma^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianMeanShift {
    pub mu0: f64,
    pub mu1: f64,
    pub sigma: f64,
}

/// Builds the Gaussian mean-shift pair, rejecting degenerate parameters.
pub fn gaussian_mean_shift(mu0: f64, mu1: f64, sigma: f64) -> Result<GaussianMeanShift> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(invalid(format!(
            "sigma must be positive and finite, got {sigma}"
        )));
    }
    if !mu0.is_finite() || !mu1.is_finite() {
        return Err(invalid("means must be finite"));
    }
    if mu0 == mu1 {
        return Err(Error::Divergence(format!(
            "mu0 = mu1 = {mu0} gives zero divergence"
        )));
    }
    Ok(GaussianMeanShift { mu0, mu1, sigma })
}

impl GaussianMeanShift {
    pub fn shared(self) -> SharedPair {
        Arc::new(self)
    }

    fn z(&self, x: f64, mu: f64) -> f64 {
        (x - mu) / self.sigma
    }
}

impl DistributionPair for GaussianMeanShift {
    fn ln_pdf0(&self, x: f64) -> f64 {
        std_normal_ln_pdf(self.z(x, self.mu0)) - self.sigma.ln()
    }
    fn ln_pdf1(&self, x: f64) -> f64 {
        std_normal_ln_pdf(self.z(x, self.mu1)) - self.sigma.ln()
    }
    fn cdf0(&self, x: f64) -> f64 {
        std_normal_cdf(self.z(x, self.mu0))
    }
    fn cdf1(&self, x: f64) -> f64 {
        std_normal_cdf(self.z(x, self.mu1))
    }
    fn quantile0(&self, p: f64) -> f64 {
        self.mu0 + self.sigma * std_normal_quantile(p)
    }
    fn sample0(&self, rng: &mut dyn RngCore) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        self.mu0 + self.sigma * z
    }
    fn sample1(&self, rng: &mut dyn RngCore) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        self.mu1 + self.sigma * z
    }
    fn llr(&self, x: f64) -> f64 {
        let s2 = self.sigma * self.sigma;
        (self.mu1 - self.mu0) * x / s2 - (self.mu1 * self.mu1 - self.mu0 * self.mu0) / (2.0 * s2)
    }
    fn monotone_llr(&self) -> bool {
        true
    }
    fn closed_form_kl(&self) -> Option<(f64, f64)> {
        let d = (self.mu1 - self.mu0) / self.sigma;
        let kl = 0.5 * d * d;
        Some((kl, kl))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlMethod {
    ClosedForm,
    Quadrature,
}

/// Both K-L divergences of a pair, in nats.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlReport {
    pub i_f1_f0: f64,
    pub i_f0_f1: f64,
    pub method: KlMethod,
}

/// Computes `I(f1||f0)` and `I(f0||f1)`; both must be positive and finite.
pub fn kl_divergence(pair: &dyn DistributionPair) -> Result<KlReport> {
    let report = match pair.closed_form_kl() {
        Some((i10, i01)) => KlReport {
            i_f1_f0: i10,
            i_f0_f1: i01,
            method: KlMethod::ClosedForm,
        },
        None => {
            let term = |p: f64, l: f64| if p > 0.0 { p * l } else { 0.0 };
            let i10 = integrate_unbounded(
                |x| term(pair.pdf1(x), pair.llr(x)),
                f64::NEG_INFINITY,
                f64::INFINITY,
                KL_QUAD_TOL,
            )
            .map_err(|e| Error::Divergence(format!("I(f1||f0) quadrature failed: {e:?}")))?;
            let i01 = integrate_unbounded(
                |x| term(pair.pdf0(x), -pair.llr(x)),
                f64::NEG_INFINITY,
                f64::INFINITY,
                KL_QUAD_TOL,
            )
            .map_err(|e| Error::Divergence(format!("I(f0||f1) quadrature failed: {e:?}")))?;
            KlReport {
                i_f1_f0: i10.value,
                i_f0_f1: i01.value,
                method: KlMethod::Quadrature,
            }
        }
    };
    // Quadrature noise is bounded by the tolerance, so anything below it is zero.
    let floor = match report.method {
        KlMethod::ClosedForm => 0.0,
        KlMethod::Quadrature => KL_QUAD_TOL * 10.0,
    };
    for (name, v) in [("I(f1||f0)", report.i_f1_f0), ("I(f0||f1)", report.i_f0_f1)] {
        if !v.is_finite() {
            return Err(Error::Divergence(format!("{name} is not finite")));
        }
        if v <= floor {
            return Err(Error::Divergence(format!("{name} = {v} is not positive")));
        }
    }
    Ok(report)
}
