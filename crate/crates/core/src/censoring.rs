//! Single-interval censoring rules and the rate-constrained optimizer.
//!
//! A strategy sends an observation unless it falls in a closed no-send
//! interval. When the pair has a monotone log-likelihood ratio the interval
//! is stored in observation space as well, and sensors compare `x` directly.

use std::io;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{kl_divergence, DistributionPair};
use crate::quadrature::integrate;

/// Smallest communication rate accepted by [`optimize`].
pub const MIN_RATE: f64 = 1e-3;
/// Quadrature tolerance for the reported post-censoring divergence.
pub const POST_KL_TOL: f64 = 1e-8;
/// Coarse grid size over the lower endpoint.
pub const OPT_GRID: usize = 256;
/// Probability margin keeping the rate constraint solvable at the search edges.
const EDGE_MASS: f64 = 1e-6;
const ROOT_TOL: f64 = 1e-10;
const TIE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CensoringStrategy {
    /// Pre-change send probability.
    pub rate: f64,
    pub nosend_llr_lo: f64,
    pub nosend_llr_hi: f64,
    /// Observation-space bounds; present only for monotone likelihood ratios.
    pub nosend_x_lo: Option<f64>,
    pub nosend_x_hi: Option<f64>,
    /// Censored LLR reported when nothing is sent; 0 for the full-rate rule.
    pub llr_censored: f64,
    pub p0_nosend: f64,
    pub p1_nosend: f64,
    /// Divergence of the censored observation, `E1[llr^psi]`.
    pub post_kl: f64,
}

impl CensoringStrategy {
    /// The rule that sends everything.
    pub fn full_rate(pair: &dyn DistributionPair) -> Result<Self> {
        let kl = kl_divergence(pair)?;
        Ok(Self {
            rate: 1.0,
            nosend_llr_lo: f64::INFINITY,
            nosend_llr_hi: f64::NEG_INFINITY,
            nosend_x_lo: Some(f64::INFINITY),
            nosend_x_hi: Some(f64::NEG_INFINITY),
            llr_censored: 0.0,
            p0_nosend: 0.0,
            p1_nosend: 0.0,
            post_kl: kl.i_f1_f0,
        })
    }

    /// Builds the rule whose no-send region is the observation interval `[lo, hi]`.
    ///
    /// The pair must have a monotone likelihood ratio.
    pub fn from_x_interval(pair: &dyn DistributionPair, lo: f64, hi: f64) -> Result<Self> {
        if !pair.monotone_llr() {
            return Err(invalid(
                "observation-space intervals need a monotone likelihood ratio",
            ));
        }
        if !(lo <= hi) {
            return Err(invalid(format!("empty no-send interval [{lo}, {hi}]")));
        }
        let p0 = pair.cdf0(hi) - pair.cdf0(lo);
        let p1 = pair.cdf1(hi) - pair.cdf1(lo);
        if !(p0 > 0.0) || p0 >= 1.0 {
            return Err(invalid(format!(
                "no-send probability {p0} must lie in (0, 1)"
            )));
        }
        let total = kl_divergence(pair)?.i_f1_f0;
        let post_kl = post_kl_for_interval(pair, total, lo, hi, p0, p1, POST_KL_TOL)?;
        let (a, b) = (pair.llr(lo), pair.llr(hi));
        Ok(Self {
            rate: 1.0 - p0,
            nosend_llr_lo: a.min(b),
            nosend_llr_hi: a.max(b),
            nosend_x_lo: Some(lo),
            nosend_x_hi: Some(hi),
            llr_censored: (p1 / p0).ln(),
            p0_nosend: p0,
            p1_nosend: p1,
            post_kl,
        })
    }

    pub fn is_full_rate(&self) -> bool {
        self.p0_nosend == 0.0
    }

    /// Send decision for observation `x`.
    #[inline]
    pub fn apply(&self, pair: &dyn DistributionPair, x: f64) -> bool {
        if self.is_full_rate() {
            return true;
        }
        match (self.nosend_x_lo, self.nosend_x_hi) {
            (Some(lo), Some(hi)) => !(x >= lo && x <= hi),
            _ => {
                let l = pair.llr(x);
                !(l >= self.nosend_llr_lo && l <= self.nosend_llr_hi)
            }
        }
    }

    /// Send decision taken in likelihood-ratio space regardless of the fast path.
    pub fn apply_llr_space(&self, pair: &dyn DistributionPair, x: f64) -> bool {
        if self.is_full_rate() {
            return true;
        }
        let l = pair.llr(x);
        !(l >= self.nosend_llr_lo && l <= self.nosend_llr_hi)
    }

    /// Sensor-side step: decide, and return the censored LLR the fusion
    /// center will add.
    #[inline]
    pub fn censor(&self, pair: &dyn DistributionPair, x: f64) -> (bool, f64) {
        if self.apply(pair, x) {
            (true, pair.llr(x))
        } else {
            (false, self.llr_censored)
        }
    }
}

/// `llr^psi(gamma, x)`: the raw LLR when sent, the no-send log ratio otherwise.
pub fn censored_llr(
    strategy: &CensoringStrategy,
    pair: &dyn DistributionPair,
    sent: bool,
    x: Option<f64>,
) -> Result<f64> {
    match (sent, x) {
        (true, Some(x)) => {
            if !strategy.apply(pair, x) {
                return Err(Error::InconsistentObservation(
                    "observation inside the no-send region reported as sent",
                ));
            }
            Ok(pair.llr(x))
        }
        (false, None) => {
            if strategy.is_full_rate() {
                return Err(Error::InconsistentObservation(
                    "full-rate strategy cannot censor",
                ));
            }
            Ok(strategy.llr_censored)
        }
        (true, None) => Err(Error::InconsistentObservation(
            "sent without an observation",
        )),
        (false, Some(_)) => Err(Error::InconsistentObservation(
            "censored slot carries an observation",
        )),
    }
}

/// Send probability after the change, `1 - p1_nosend`.
pub fn post_change_rate(strategy: &CensoringStrategy) -> f64 {
    1.0 - strategy.p1_nosend
}

fn post_kl_for_interval(
    pair: &dyn DistributionPair,
    total_kl: f64,
    lo: f64,
    hi: f64,
    p0: f64,
    p1: f64,
    tol: f64,
) -> Result<f64> {
    let inside = integrate(
        |x| {
            let d = pair.pdf1(x);
            if d > 0.0 {
                d * pair.llr(x)
            } else {
                0.0
            }
        },
        lo,
        hi,
        tol,
    )
    .map_err(|e| Error::Divergence(format!("post-censoring quadrature failed: {e:?}")))?;
    let censored = if p1 > 0.0 { p1 * (p1 / p0).ln() } else { 0.0 };
    Ok(total_kl - inside.value + censored)
}

/// Upper endpoint `u` with `cdf0(u) - cdf0(lo) = keep`.
fn upper_endpoint(pair: &dyn DistributionPair, lo: f64, keep: f64) -> f64 {
    let target = pair.cdf0(lo) + keep;
    let mut u = pair.quantile0(target);
    let resid = |u: f64| pair.cdf0(u) - target;
    if resid(u).abs() <= ROOT_TOL {
        return u;
    }
    // Polish with bisection when the quantile is not accurate enough.
    let step = 1e-3 * (1.0 + u.abs());
    let (mut a, mut b) = (u - step, u + step);
    while resid(a) > 0.0 {
        a -= 2.0 * (u - a);
    }
    while resid(b) < 0.0 {
        b += 2.0 * (b - u);
    }
    for _ in 0..200 {
        u = 0.5 * (a + b);
        let r = resid(u);
        if r.abs() <= ROOT_TOL || u == a || u == b {
            break;
        }
        if r < 0.0 {
            a = u;
        } else {
            b = u;
        }
    }
    u
}

/// The rate-`epsilon` rule with maximal post-censoring divergence.
///
/// Searches the lower endpoint `l` of the no-send interval; the upper endpoint
/// is pinned by the rate constraint. A 256-point grid locates the best basin
/// and golden-section search refines it. Ties within 1e-10 nats go to the
/// smallest `l`.
pub fn optimize(pair: &dyn DistributionPair, epsilon: f64) -> Result<CensoringStrategy> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(invalid(format!("rate {epsilon} outside (0, 1]")));
    }
    if epsilon == 1.0 {
        return CensoringStrategy::full_rate(pair);
    }
    if epsilon < MIN_RATE {
        return Err(invalid(format!(
            "rate {epsilon} below {MIN_RATE}: the censored statistic carries no information"
        )));
    }
    if !pair.monotone_llr() {
        return Err(invalid(
            "the interval optimizer needs a monotone likelihood ratio",
        ));
    }
    let keep = 1.0 - epsilon;
    let total = kl_divergence(pair)?.i_f1_f0;
    let objective = |l: f64| -> f64 {
        let u = upper_endpoint(pair, l, keep);
        let p1 = pair.cdf1(u) - pair.cdf1(l);
        post_kl_for_interval(pair, total, l, u, keep, p1, 1e-11).unwrap_or(f64::NEG_INFINITY)
    };

    let l_min = pair.quantile0(EDGE_MASS);
    let l_max = pair.quantile0(epsilon - EDGE_MASS);
    let grid: Vec<f64> = (0..OPT_GRID)
        .map(|i| l_min + (l_max - l_min) * i as f64 / (OPT_GRID - 1) as f64)
        .collect();
    let values: Vec<f64> = grid.iter().map(|&l| objective(l)).collect();
    let best_val = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let best = values
        .iter()
        .position(|&v| v >= best_val - TIE_TOL)
        .expect("grid is nonempty");

    let (mut a, mut b) = (
        grid[best.saturating_sub(1)],
        grid[(best + 1).min(OPT_GRID - 1)],
    );
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (objective(c), objective(d));
    while (b - a).abs() > 1e-10 * (1.0 + a.abs()) {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = objective(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = objective(d);
        }
    }
    let refined = 0.5 * (a + b);
    let l = if objective(refined) > best_val + TIE_TOL {
        refined
    } else {
        grid[best]
    };
    let u = upper_endpoint(pair, l, keep);
    let mut strategy = CensoringStrategy::from_x_interval(pair, l, u)?;
    // The constraint defines the class; keep the nominal rate exact.
    strategy.rate = epsilon;
    strategy.p0_nosend = keep;
    strategy.llr_censored = (strategy.p1_nosend / keep).ln();
    Ok(strategy)
}

/// Writes strategies as a flat CSV record set with shortest round-trip floats.
pub fn write_strategies<W: io::Write>(out: W, strategies: &[CensoringStrategy]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    for s in strategies {
        wtr.serialize(s)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_strategies<R: io::Read>(input: R) -> Result<Vec<CensoringStrategy>> {
    let mut rdr = csv::Reader::from_reader(input);
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}
