//! Renewal-cycle view of the two-level detector under the pre-change law.
//!
//! Above `a1` the statistic is an uncensored random walk that either falls
//! back below `a1` (re-entering at `s_hat`) or reaches `a`. Below `a1` it is
//! a censored CuSum that climbs back to `a1` after `phi(s_hat)` steps.

use std::io;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detectors::{CusumAcConfig, Detector};
use crate::error::{invalid, Error, Result};
use crate::model::SharedPair;
use crate::montecarlo::{McEstimate, Path};

/// Step cap for any single excursion; runs reaching it are flagged.
pub const EXCURSION_CAP: u64 = 10_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleStats {
    pub a1: f64,
    pub a: f64,
    pub eps1: f64,
    pub n_reps: u64,
    pub seed: u64,
    pub mean_eta0: f64,
    pub se_eta0: f64,
    pub mean_eta0_given_return: f64,
    pub se_eta0_given_return: f64,
    pub p_return: f64,
    pub se_p_return: f64,
    pub mean_phi_given_return: f64,
    pub se_phi_given_return: f64,
    pub mean_t_a1: f64,
    pub se_t_a1: f64,
    /// `mean_eta0 + p_return * mean_phi_given_return`.
    pub mean_cycle_composed: f64,
    pub se_cycle_composed: f64,
    /// Whole cycles simulated directly with the detector itself.
    pub mean_cycle_direct: f64,
    pub se_cycle_direct: f64,
    pub p_return_direct: f64,
    pub se_p_return_direct: f64,
    pub truncated_reps: u64,
    #[serde(skip)]
    pub return_value_samples: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EprimeVerdict {
    Member,
    Rejected,
    Indeterminate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EprimeCheck {
    /// Point comparison `mean_phi_given_return >= mean_t_a1`.
    pub member: bool,
    /// Difference in combined standard errors.
    pub margin: f64,
    pub verdict: EprimeVerdict,
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let e = McEstimate::from_samples(v, 0, 0);
    (e.mean, e.std_error)
}

fn proportion(hits: usize, n: usize) -> (f64, f64) {
    let p = hits as f64 / n as f64;
    (p, (p * (1.0 - p) / n as f64).sqrt())
}

/// Cycle statistics for the two-level detector with identical rates at
/// every sensor.
pub fn estimate_cycle(
    pairs: &[SharedPair],
    a1: f64,
    a: f64,
    eps1: f64,
    n_reps: u64,
    seed: u64,
) -> Result<CycleStats> {
    if pairs.is_empty() {
        return Err(invalid("at least one sensor is required"));
    }
    if !(a1 > 0.0) || !(a > a1) {
        return Err(invalid(format!("need 0 < a1 < a, got a1 = {a1}, a = {a}")));
    }
    if !(eps1 > 1e-3 && eps1 <= 1.0) {
        return Err(invalid(format!("rate {eps1} outside (1e-3, 1]")));
    }
    let config = CusumAcConfig::two_level(pairs[0].as_ref(), a, a1, eps1)?;
    estimate_cycle_for(&config, pairs, n_reps, seed)
}

/// Cycle statistics for a prepared two-level configuration.
pub fn estimate_cycle_for(
    config: &CusumAcConfig,
    pairs: &[SharedPair],
    n_reps: u64,
    seed: u64,
) -> Result<CycleStats> {
    if config.levels.len() != 1 {
        return Err(invalid("cycle analysis needs exactly one censoring level"));
    }
    if n_reps < 2 {
        return Err(invalid("at least two replications are required"));
    }
    let det = Detector::CusumAc(config.clone());
    det.validate(pairs.len())?;
    let (a1, a) = (config.a1(), config.a);
    let free = Detector::CusumAc(config.with_threshold(f64::INFINITY));
    let plain = Detector::Cusum { a: a1 };
    let n = n_reps as usize;

    // eta(0): the uncensored walk W from 0, leaving [0, a - a1).
    let eta: Vec<(f64, bool, f64, bool)> = (0..n_reps)
        .into_par_iter()
        .map(|i| {
            let mut p = Path::new(&plain, pairs.len(), seed, i);
            let mut w = 0.0;
            let mut k = 0u64;
            loop {
                w += p.raw_increment(pairs);
                k += 1;
                if w < 0.0 {
                    return (k as f64, true, (w + a1).max(0.0), false);
                }
                if w >= a - a1 {
                    return (k as f64, false, 0.0, false);
                }
                if k >= EXCURSION_CAP {
                    return (k as f64, false, 0.0, true);
                }
            }
        })
        .collect();
    let samples: Vec<f64> = eta.iter().filter(|e| e.1).map(|e| e.2).collect();
    if samples.is_empty() {
        return Err(Error::Infeasible(format!(
            "no excursion above a1 = {a1} returned in {n_reps} replications"
        )));
    }
    let eta_all: Vec<f64> = eta.iter().map(|e| e.0).collect();
    let eta_ret: Vec<f64> = eta.iter().filter(|e| e.1).map(|e| e.0).collect();
    let (mean_eta0, se_eta0) = mean_se(&eta_all);
    let (mean_eta0_given_return, se_eta0_given_return) = if eta_ret.len() > 1 {
        mean_se(&eta_ret)
    } else {
        (eta_ret[0], f64::NAN)
    };
    let (p_return, se_p_return) = proportion(samples.len(), n);

    // phi(z): censored CuSum from a resampled re-entry point up to a1.
    let phi: Vec<(f64, bool)> = (0..n_reps)
        .into_par_iter()
        .map(|i| {
            let mut p = Path::new(&free, pairs.len(), seed, n_reps + i);
            let z = samples[p.coin.random_range(0..samples.len())];
            p.state = config.state_at(z);
            while p.state.active_level != 0 && p.state.k < EXCURSION_CAP {
                p.step(&free, pairs, false);
            }
            (p.state.k as f64, p.state.active_level != 0)
        })
        .collect();
    let phi_v: Vec<f64> = phi.iter().map(|r| r.0).collect();
    let (mean_phi, se_phi) = mean_se(&phi_v);

    // T(a1): plain CuSum with threshold a1.
    let t: Vec<(f64, bool)> = (0..n_reps)
        .into_par_iter()
        .map(|i| {
            let mut p = Path::new(&plain, pairs.len(), seed, 2 * n_reps + i);
            p.run(&plain, pairs, u64::MAX, EXCURSION_CAP);
            (p.state.k as f64, !p.state.stopped)
        })
        .collect();
    let t_v: Vec<f64> = t.iter().map(|r| r.0).collect();
    let (mean_t_a1, se_t_a1) = mean_se(&t_v);

    // Whole cycles: from a1 at full rate until the alarm or the next return to a1.
    let direct: Vec<(f64, bool, bool)> = (0..n_reps)
        .into_par_iter()
        .map(|i| {
            let mut p = Path::new(&det, pairs.len(), seed, 3 * n_reps + i);
            p.state = config.state_at(a1);
            let mut returned = false;
            while !p.state.stopped && p.state.k < EXCURSION_CAP {
                p.step(&det, pairs, false);
                if p.state.active_level != 0 {
                    returned = true;
                } else if returned {
                    break;
                }
            }
            let done = p.state.stopped || (returned && p.state.active_level == 0);
            (p.state.k as f64, returned, !done)
        })
        .collect();
    let cyc: Vec<f64> = direct.iter().map(|r| r.0).collect();
    let (mean_cycle_direct, se_cycle_direct) = mean_se(&cyc);
    let (p_return_direct, se_p_return_direct) =
        proportion(direct.iter().filter(|r| r.1).count(), n);

    let composed: Vec<f64> = eta
        .iter()
        .map(|e| e.0 + if e.1 { mean_phi } else { 0.0 })
        .collect();
    let (mean_cycle_composed, se_c) = mean_se(&composed);
    let se_cycle_composed = se_c.hypot(p_return * se_phi);

    let truncated_reps = (eta.iter().filter(|e| e.3).count()
        + phi.iter().filter(|r| r.1).count()
        + t.iter().filter(|r| r.1).count()
        + direct.iter().filter(|r| r.2).count()) as u64;

    Ok(CycleStats {
        a1,
        a,
        eps1: config.levels[0].rate,
        n_reps,
        seed,
        mean_eta0,
        se_eta0,
        mean_eta0_given_return,
        se_eta0_given_return,
        p_return,
        se_p_return,
        mean_phi_given_return: mean_phi,
        se_phi_given_return: se_phi,
        mean_t_a1,
        se_t_a1,
        mean_cycle_composed,
        se_cycle_composed,
        mean_cycle_direct,
        se_cycle_direct,
        p_return_direct,
        se_p_return_direct,
        truncated_reps,
        return_value_samples: samples,
    })
}

/// Compares the censored return time with the plain CuSum run length to `a1`.
/// Membership needs a margin of at least +3 standard errors, rejection at
/// most -3.
pub fn check_eprime_membership(stats: &CycleStats) -> EprimeCheck {
    let diff = stats.mean_phi_given_return - stats.mean_t_a1;
    let se = stats.se_phi_given_return.hypot(stats.se_t_a1);
    let margin = if se > 0.0 {
        diff / se
    } else if diff > 0.0 {
        f64::INFINITY
    } else if diff < 0.0 {
        f64::NEG_INFINITY
    } else {
        0.0
    };
    let verdict = if margin >= 3.0 {
        EprimeVerdict::Member
    } else if margin <= -3.0 {
        EprimeVerdict::Rejected
    } else {
        EprimeVerdict::Indeterminate
    };
    EprimeCheck {
        member: diff >= 0.0,
        margin,
        verdict,
    }
}

/// Renewal bound on the pre-change communication rate.
pub fn rate_upper_bound(stats: &CycleStats, eps1: f64) -> f64 {
    let eta = stats.mean_eta0_given_return;
    let phi = stats.mean_phi_given_return;
    (eta + eps1 * phi) / (eta + phi)
}

/// Delta-method standard error of [`rate_upper_bound`].
pub fn rate_upper_bound_se(stats: &CycleStats, eps1: f64) -> f64 {
    let eta = stats.mean_eta0_given_return;
    let phi = stats.mean_phi_given_return;
    let d = (1.0 - eps1) / ((eta + phi) * (eta + phi));
    (phi * d * stats.se_eta0_given_return).hypot(eta * d * stats.se_phi_given_return)
}

/// Same bound with the unconditional excursion mean.
pub fn rate_upper_bound_unconditional(stats: &CycleStats, eps1: f64) -> f64 {
    let eta = stats.mean_eta0;
    let phi = stats.mean_phi_given_return;
    (eta + eps1 * phi) / (eta + phi)
}

/// Expected feedback messages per alarm, `2 / (1 - p_return)`, counting the
/// alarm itself as the last message.
pub fn feedback_expectation(stats: &CycleStats) -> Result<f64> {
    if stats.p_return >= 1.0 - 1.0 / stats.n_reps as f64 {
        return Err(Error::Unbounded(
            "every excursion returned: feedback count per alarm is unbounded",
        ));
    }
    Ok(2.0 / (1.0 - stats.p_return))
}

/// Delta-method standard error of [`feedback_expectation`].
pub fn feedback_expectation_se(stats: &CycleStats) -> f64 {
    let q = 1.0 - stats.p_return;
    2.0 * stats.se_p_return / (q * q)
}

/// Simulated feedback messages per alarm from a zero start: level switches
/// plus the alarm.
pub fn simulate_feedback_per_alarm(
    config: &CusumAcConfig,
    pairs: &[SharedPair],
    n_reps: u64,
    seed: u64,
    cap: u64,
) -> Result<McEstimate> {
    let det = Detector::CusumAc(config.clone());
    det.validate(pairs.len())?;
    let runs: Vec<(f64, bool)> = (0..n_reps)
        .into_par_iter()
        .map(|i| {
            let mut p = Path::new(&det, pairs.len(), seed, i);
            p.run(&det, pairs, u64::MAX, cap);
            (p.state.feedback_count as f64 + 1.0, !p.state.stopped)
        })
        .collect();
    let v: Vec<f64> = runs.iter().map(|r| r.0).collect();
    let truncated = runs.iter().filter(|r| r.1).count() as u64;
    Ok(McEstimate::from_samples(&v, seed, truncated))
}

pub fn write_cycle_stats<W: io::Write>(out: W, stats: &[CycleStats]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    for s in stats {
        wtr.serialize(s)?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{gaussian_mean_shift, std_normal_cdf};

    fn pairs(m: usize) -> Vec<SharedPair> {
        vec![gaussian_mean_shift(0.0, 0.5, 1.0).unwrap().shared(); m]
    }

    fn stats(p: f64, n: u64) -> CycleStats {
        CycleStats {
            a1: 1.0,
            a: 5.0,
            eps1: 0.5,
            n_reps: n,
            seed: 0,
            mean_eta0: 3.0,
            se_eta0: 0.1,
            mean_eta0_given_return: 2.0,
            se_eta0_given_return: 0.1,
            p_return: p,
            se_p_return: 0.0,
            mean_phi_given_return: 10.0,
            se_phi_given_return: 0.5,
            mean_t_a1: 5.0,
            se_t_a1: 0.5,
            mean_cycle_composed: 0.0,
            se_cycle_composed: 0.0,
            mean_cycle_direct: 0.0,
            se_cycle_direct: 0.0,
            p_return_direct: p,
            se_p_return_direct: 0.0,
            truncated_reps: 0,
            return_value_samples: vec![],
        }
    }

    #[test]
    fn feedback_formula() {
        assert_eq!(feedback_expectation(&stats(0.0, 100)).unwrap(), 2.0);
        assert_eq!(feedback_expectation(&stats(0.5, 100)).unwrap(), 4.0);
        assert!(matches!(
            feedback_expectation(&stats(1.0, 100)),
            Err(Error::Unbounded(_))
        ));
    }

    #[test]
    fn rate_bound_limits() {
        let s = stats(0.5, 100);
        assert_eq!(rate_upper_bound(&s, 1.0), 1.0);
        let mut long = s.clone();
        long.mean_phi_given_return = 1e12;
        assert!((rate_upper_bound(&long, 0.3) - 0.3).abs() < 1e-9);
        assert!(rate_upper_bound_unconditional(&s, 0.5) > 0.5);
    }

    #[test]
    fn verdict_bands() {
        let s = stats(0.5, 100);
        let c = check_eprime_membership(&s);
        assert!(c.member);
        assert_eq!(c.verdict, EprimeVerdict::Member);
        let mut close = s.clone();
        close.mean_phi_given_return = 5.5;
        assert_eq!(
            check_eprime_membership(&close).verdict,
            EprimeVerdict::Indeterminate
        );
        close.mean_phi_given_return = 2.0;
        assert_eq!(
            check_eprime_membership(&close).verdict,
            EprimeVerdict::Rejected
        );
    }

    #[test]
    fn narrow_band_exits_in_one_step() {
        let p = pairs(1);
        let s = estimate_cycle(&p, 0.78, 0.78 + 1e-9, 0.5, 4000, 2).unwrap();
        assert!((s.mean_eta0 - 1.0).abs() < 1e-12);
        // One step exits down exactly when llr < 0, i.e. x < 0.25.
        let expect = std_normal_cdf(0.25);
        assert!(
            (s.p_return - expect).abs() < 3.0 * s.se_p_return + 1e-3,
            "{}",
            s.p_return
        );
    }

    #[test]
    fn bad_arguments_rejected() {
        let p = pairs(1);
        assert!(estimate_cycle(&p, 1.0, 1.0, 0.5, 100, 1).is_err());
        assert!(estimate_cycle(&p, 1.0, 0.5, 0.5, 100, 1).is_err());
        assert!(estimate_cycle(&p, 1.0, 3.0, 5e-4, 100, 1).is_err());
    }

    #[test]
    fn unbounded_band_is_finite() {
        let p = pairs(1);
        let s = estimate_cycle(&p, 0.78, f64::INFINITY, 0.5, 2000, 3).unwrap();
        assert_eq!(s.truncated_reps, 0);
        assert_eq!(s.p_return, 1.0);
        assert!(s.mean_eta0.is_finite() && s.mean_eta0 > 1.0);
        assert!(feedback_expectation(&s).is_err());
    }

    #[test]
    fn stats_serialize_to_csv() {
        let mut buf = Vec::new();
        write_cycle_stats(&mut buf, &[stats(0.5, 100)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("a1,a,eps1,n_reps,seed,mean_eta0,"));
        assert_eq!(text.lines().count(), 2);
    }
}
