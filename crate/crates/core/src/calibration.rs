//! Threshold calibration against an ARLFA target and the brute-force
//! two-level parameter search.

use std::io;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detectors::{CusumAcConfig, Detector};
use crate::error::{invalid, Error, Result};
use crate::model::SharedPair;
use crate::montecarlo::{
    estimate_delay, rate_diagnostics, DelayConditioning, FirstPassageCurve, McEstimate, PerfReport,
    DEFAULT_HORIZON,
};
use crate::renewal::{check_eprime_membership, estimate_cycle_for, EprimeCheck, EprimeVerdict};

const BISECTION_STEPS: usize = 40;
const STEP_UP: f64 = 1.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCalibration {
    pub a: f64,
    /// ARLFA estimate at `a`; absent for degenerate targets.
    pub arlfa: Option<McEstimate>,
    /// Every probed threshold with whether its estimated ARLFA reached the target.
    pub probes: Vec<(f64, bool)>,
}

/// Smallest `a` in `[ln(zeta)/4, 4 ln(zeta)]` whose estimated ARLFA reaches
/// `zeta`, found by bisection starting from `a = ln(zeta)`.
///
/// All probes share one set of replications, so the estimated ARLFA is
/// monotone in `a` and the result equals `estimate_arlfa` at the same seed.
/// `cap` defaults to `100 * zeta` steps per replication.
pub fn calibrate_threshold(
    det: &Detector,
    pairs: &[SharedPair],
    zeta: f64,
    n_reps: u64,
    seed: u64,
    cap: Option<u64>,
) -> Result<ThresholdCalibration> {
    if !(zeta.is_finite() && zeta > 0.0) {
        return Err(invalid(format!(
            "ARLFA target {zeta} must be positive and finite"
        )));
    }
    if zeta <= 1.0 {
        return Ok(ThresholdCalibration {
            a: 0.0,
            arlfa: None,
            probes: Vec::new(),
        });
    }
    let cap = cap.unwrap_or((100.0 * zeta).ceil() as u64);
    let ln = zeta.ln();
    let floor = det.min_threshold();
    let lo0 = (ln / 4.0).max(floor + 1e-9 * (1.0 + floor));
    let hi0 = 4.0 * ln;
    if lo0 >= hi0 {
        return Err(Error::BracketFailure {
            zeta,
            probes: 0,
            best_a: lo0,
        });
    }
    let mut curve = FirstPassageCurve::new(det, pairs, n_reps, cap, seed)?;
    let mut probes = Vec::new();
    let mut probe = |a: f64, probes: &mut Vec<(f64, bool)>| {
        let ok = curve.arlfa_at_least(a, zeta);
        probes.push((a, ok));
        ok
    };

    let mut p = ln.clamp(lo0, hi0);
    let (mut lo, mut hi);
    if probe(p, &mut probes) {
        if probe(lo0, &mut probes) {
            let arlfa = curve.arlfa(lo0);
            return Ok(ThresholdCalibration {
                a: lo0,
                arlfa: Some(arlfa),
                probes,
            });
        }
        lo = lo0;
        hi = p;
    } else {
        loop {
            if p >= hi0 {
                return Err(Error::BracketFailure {
                    zeta,
                    probes: probes.len(),
                    best_a: p,
                });
            }
            let next = (p * STEP_UP).min(hi0);
            if probe(next, &mut probes) {
                lo = p;
                hi = next;
                break;
            }
            p = next;
        }
    }
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if probe(mid, &mut probes) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let arlfa = curve.arlfa(hi);
    Ok(ThresholdCalibration {
        a: hi,
        arlfa: Some(arlfa),
        probes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTarget {
    pub zeta: f64,
    pub epsilon: f64,
    pub nu: u64,
    /// Relative ARLFA shortfall accepted as admissible.
    pub tolerance: f64,
}

impl CalibrationTarget {
    pub fn new(zeta: f64, epsilon: f64) -> Result<Self> {
        let t = Self {
            zeta,
            epsilon,
            nu: 1,
            tolerance: 0.05,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.zeta >= 1.0 && self.zeta.is_finite()) {
            return Err(invalid(format!(
                "ARLFA target {} must be at least 1",
                self.zeta
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(invalid(format!(
                "rate budget {} outside (0, 1]",
                self.epsilon
            )));
        }
        if self.nu < 1 {
            return Err(invalid("change time must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.tolerance) {
            return Err(invalid("tolerance must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    pub n_reps: u64,
    pub seed: u64,
    pub horizon: u64,
    /// Per-replication cap for ARLFA runs; `100 * zeta` when absent.
    pub cap: Option<u64>,
    /// Replications for the renewal diagnostics of each candidate.
    pub cycle_reps: u64,
    /// Reject candidates whose rate is not a member of E'.
    pub require_eprime: bool,
    /// Drop clearly rate-infeasible candidates after a run with `n_reps / 10`.
    pub screen: bool,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            n_reps: 2000,
            seed: 0,
            horizon: DEFAULT_HORIZON,
            cap: None,
            cycle_reps: 2000,
            require_eprime: false,
            screen: true,
        }
    }
}

/// Default grids for the two-level search.
pub fn default_a1_grid() -> Vec<f64> {
    (1..=10).map(|i| 0.2 * i as f64).collect()
}

pub fn default_eps1_grid() -> Vec<f64> {
    (1..=9).map(|i| 0.1 * i as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateEval {
    pub a1: f64,
    pub eps1: f64,
    pub screen_rate: McEstimate,
    pub screened_out: bool,
    pub a: Option<f64>,
    pub arlfa: Option<McEstimate>,
    pub comm_rate: Option<McEstimate>,
    pub delay: Option<McEstimate>,
    pub feedback_ratio: Option<McEstimate>,
    pub frac_time_above_a1: Option<McEstimate>,
    pub eprime: Option<EprimeCheck>,
    pub error: Option<String>,
}

impl CandidateEval {
    pub fn is_evaluated(&self) -> bool {
        self.delay.is_some()
    }

    pub fn is_admissible(&self, target: &CalibrationTarget, require_eprime: bool) -> bool {
        let (Some(arl), Some(rate), Some(_)) = (self.arlfa, self.comm_rate, self.delay) else {
            return false;
        };
        let eprime_ok = !require_eprime
            || matches!(
                self.eprime,
                Some(EprimeCheck {
                    verdict: EprimeVerdict::Member,
                    ..
                })
            );
        arl.mean >= target.zeta * (1.0 - target.tolerance)
            && rate.mean <= target.epsilon + 3.0 * rate.std_error
            && eprime_ok
    }

    pub fn report(&self) -> Option<PerfReport> {
        Some(PerfReport {
            arlfa: self.arlfa?,
            delay: self.delay?,
            comm_rate: self.comm_rate?,
            feedback_ratio: self.feedback_ratio?,
            frac_time_above_a1: self.frac_time_above_a1?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    /// False when no candidate met the constraints; the fields then describe
    /// the best-effort candidate.
    pub feasible: bool,
    pub config: CusumAcConfig,
    pub report: PerfReport,
    pub eprime: Option<EprimeCheck>,
    pub chosen: usize,
    pub search_trace: Vec<CandidateEval>,
}

/// Builds the two-level detector for a sensor network with equal rates.
pub fn network_config(pairs: &[SharedPair], a: f64, a1: f64, eps1: f64) -> Result<CusumAcConfig> {
    if pairs.is_empty() {
        return Err(invalid("at least one sensor is required"));
    }
    let first = std::sync::Arc::as_ptr(&pairs[0]) as *const ();
    if pairs
        .iter()
        .all(|p| std::sync::Arc::as_ptr(p) as *const () == first)
    {
        CusumAcConfig::two_level(pairs[0].as_ref(), a, a1, eps1)
    } else {
        let levels = vec![crate::detectors::Level {
            threshold: a1,
            rate: eps1,
        }];
        CusumAcConfig::build_per_sensor(pairs, a, levels, &vec![vec![eps1]; pairs.len()])
    }
}

fn evaluate_candidate(
    pairs: &[SharedPair],
    zeta: f64,
    nu: u64,
    a1: f64,
    eps1: f64,
    rate_ceiling: f64,
    opts: &SearchOptions,
) -> Result<CandidateEval> {
    let config = network_config(pairs, f64::INFINITY, a1, eps1)?;
    let det = Detector::CusumAc(config.clone());
    let screen_reps = (opts.n_reps / 10).max(20);
    let [screen_rate, ..] = rate_diagnostics(&det, pairs, opts.horizon, screen_reps, opts.seed)?;
    let mut eval = CandidateEval {
        a1,
        eps1,
        screen_rate,
        screened_out: false,
        a: None,
        arlfa: None,
        comm_rate: None,
        delay: None,
        feedback_ratio: None,
        frac_time_above_a1: None,
        eprime: None,
        error: None,
    };
    if opts.screen && screen_rate.mean - 3.0 * screen_rate.std_error > rate_ceiling {
        eval.screened_out = true;
        return Ok(eval);
    }
    let cal = match calibrate_threshold(&det, pairs, zeta, opts.n_reps, opts.seed, opts.cap) {
        Ok(c) => c,
        Err(e) => {
            eval.error = Some(e.to_string());
            return Ok(eval);
        }
    };
    let det = Detector::CusumAc(config.with_threshold(cal.a));
    let [rate, fb, above] = rate_diagnostics(&det, pairs, opts.horizon, opts.n_reps, opts.seed)?;
    let cap = opts.cap.unwrap_or((100.0 * zeta).ceil() as u64);
    let delay = estimate_delay(
        &det,
        pairs,
        opts.n_reps,
        opts.seed,
        nu,
        DelayConditioning::None,
        cap,
    )?;
    eval.eprime = match estimate_cycle_for(
        &config.with_threshold(cal.a),
        pairs,
        opts.cycle_reps,
        opts.seed,
    ) {
        Ok(stats) => Some(check_eprime_membership(&stats)),
        Err(e) => {
            eval.error = Some(e.to_string());
            None
        }
    };
    eval.a = Some(cal.a);
    eval.arlfa = cal.arlfa;
    eval.comm_rate = Some(rate);
    eval.delay = Some(delay);
    eval.feedback_ratio = Some(fb);
    eval.frac_time_above_a1 = Some(above);
    Ok(eval)
}

/// Evaluates every `(a1, eps1)` pair at ARLFA `zeta`. Candidates whose
/// screened rate clearly exceeds `rate_ceiling` are not calibrated.
pub fn evaluate_grid(
    pairs: &[SharedPair],
    zeta: f64,
    nu: u64,
    a1_grid: &[f64],
    eps1_grid: &[f64],
    rate_ceiling: f64,
    opts: &SearchOptions,
) -> Result<Vec<CandidateEval>> {
    if a1_grid.is_empty() || eps1_grid.is_empty() {
        return Err(invalid("search grids must be nonempty"));
    }
    if let Some(e) = eps1_grid.iter().find(|&&e| !(e > 1e-3 && e <= 1.0)) {
        return Err(invalid(format!("grid rate {e} outside (1e-3, 1]")));
    }
    if let Some(a) = a1_grid.iter().find(|&&a| !(a > 0.0 && a.is_finite())) {
        return Err(invalid(format!("grid threshold {a} must be positive")));
    }
    let mut grid: Vec<(f64, f64)> = a1_grid
        .iter()
        .flat_map(|&a1| eps1_grid.iter().map(move |&e| (a1, e)))
        .collect();
    grid.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));
    grid.dedup();
    let evals: Vec<Result<CandidateEval>> = grid
        .par_iter()
        .map(|&(a1, eps1)| evaluate_candidate(pairs, zeta, nu, a1, eps1, rate_ceiling, opts))
        .collect();
    evals.into_iter().collect()
}

/// Index of the admissible candidate with the smallest delay; ties go to the
/// lexicographically smallest `(a1, eps1)`.
pub fn select_candidate(
    trace: &[CandidateEval],
    target: &CalibrationTarget,
    require_eprime: bool,
) -> Option<usize> {
    trace
        .iter()
        .enumerate()
        .filter(|(_, c)| c.is_admissible(target, require_eprime))
        .min_by(|(_, x), (_, y)| {
            let (dx, dy) = (x.delay.unwrap().mean, y.delay.unwrap().mean);
            dx.total_cmp(&dy)
                .then(x.a1.total_cmp(&y.a1))
                .then(x.eps1.total_cmp(&y.eps1))
        })
        .map(|(i, _)| i)
}

fn best_effort(trace: &[CandidateEval], target: &CalibrationTarget) -> Option<usize> {
    let excess = |c: &CandidateEval| {
        let rate = c
            .comm_rate
            .map_or(f64::INFINITY, |r| (r.mean - target.epsilon).max(0.0));
        let arl = c.arlfa.map_or(f64::INFINITY, |a| {
            (target.zeta - a.mean).max(0.0) / target.zeta
        });
        rate + arl
    };
    trace
        .iter()
        .enumerate()
        .filter(|(_, c)| c.is_evaluated())
        .min_by(|(_, x), (_, y)| {
            excess(x)
                .total_cmp(&excess(y))
                .then(x.delay.unwrap().mean.total_cmp(&y.delay.unwrap().mean))
        })
        .map(|(i, _)| i)
}

/// Picks the result for `target` from an evaluated grid.
pub fn assemble_result(
    pairs: &[SharedPair],
    target: &CalibrationTarget,
    mut trace: Vec<CandidateEval>,
    opts: &SearchOptions,
) -> Result<CalibrationResult> {
    let (chosen, feasible) = match select_candidate(&trace, target, opts.require_eprime) {
        Some(i) => (i, true),
        None => {
            let i = match best_effort(&trace, target) {
                Some(i) => i,
                None => {
                    // Nothing was calibrated: evaluate the lowest-rate candidate in full.
                    let i = trace
                        .iter()
                        .enumerate()
                        .min_by(|x, y| x.1.screen_rate.mean.total_cmp(&y.1.screen_rate.mean))
                        .map(|(i, _)| i)
                        .ok_or_else(|| invalid("empty search trace"))?;
                    let c = &trace[i];
                    let no_screen = SearchOptions {
                        screen: false,
                        ..*opts
                    };
                    trace[i] = evaluate_candidate(
                        pairs,
                        target.zeta,
                        target.nu,
                        c.a1,
                        c.eps1,
                        f64::INFINITY,
                        &no_screen,
                    )?;
                    i
                }
            };
            (i, false)
        }
    };
    let c = &trace[chosen];
    let report = c.report().ok_or_else(|| {
        Error::Infeasible(format!(
            "no candidate could be calibrated: {}",
            c.error.clone().unwrap_or_default()
        ))
    })?;
    let config = network_config(pairs, c.a.expect("calibrated"), c.a1, c.eps1)?;
    Ok(CalibrationResult {
        feasible,
        config,
        report,
        eprime: c.eprime,
        chosen,
        search_trace: trace,
    })
}

/// Brute-force search over `(a1, eps1)`: each candidate is calibrated to the
/// ARLFA target and the admissible one with the smallest delay is returned.
pub fn search_two_level(
    pairs: &[SharedPair],
    target: &CalibrationTarget,
    a1_grid: &[f64],
    eps1_grid: &[f64],
    opts: &SearchOptions,
) -> Result<CalibrationResult> {
    target.validate()?;
    let trace = evaluate_grid(
        pairs,
        target.zeta,
        target.nu,
        a1_grid,
        eps1_grid,
        target.epsilon,
        opts,
    )?;
    assemble_result(pairs, target, trace, opts)
}

#[derive(Serialize)]
struct TraceRow {
    a1: f64,
    eps1: f64,
    a: Option<f64>,
    arlfa: Option<f64>,
    arlfa_se: Option<f64>,
    rate: Option<f64>,
    rate_se: Option<f64>,
    delay: Option<f64>,
    delay_se: Option<f64>,
    screen_rate: f64,
    screened_out: bool,
    eprime_verdict: Option<EprimeVerdict>,
    eprime_margin: Option<f64>,
    admissible: bool,
}

/// One row per candidate.
pub fn write_search_trace<W: io::Write>(
    out: W,
    trace: &[CandidateEval],
    target: &CalibrationTarget,
    require_eprime: bool,
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    for c in trace {
        wtr.serialize(TraceRow {
            a1: c.a1,
            eps1: c.eps1,
            a: c.a,
            arlfa: c.arlfa.map(|e| e.mean),
            arlfa_se: c.arlfa.map(|e| e.std_error),
            rate: c.comm_rate.map(|e| e.mean),
            rate_se: c.comm_rate.map(|e| e.std_error),
            delay: c.delay.map(|e| e.mean),
            delay_se: c.delay.map(|e| e.std_error),
            screen_rate: c.screen_rate.mean,
            screened_out: c.screened_out,
            eprime_verdict: c.eprime.map(|e| e.verdict),
            eprime_margin: c.eprime.map(|e| e.margin),
            admissible: c.is_admissible(target, require_eprime),
        })?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::gaussian_mean_shift;
    use crate::montecarlo::estimate_arlfa;

    fn pairs(m: usize) -> Vec<SharedPair> {
        vec![gaussian_mean_shift(0.0, 0.5, 1.0).unwrap().shared(); m]
    }

    #[test]
    fn degenerate_target() {
        let p = pairs(1);
        let c = calibrate_threshold(&Detector::Cusum { a: 1.0 }, &p, 1.0, 100, 1, None).unwrap();
        assert_eq!(c.a, 0.0);
        assert!(c.arlfa.is_none());
    }

    #[test]
    fn calibrated_threshold_reaches_target_minimally() {
        let p = pairs(1);
        let det = Detector::Cusum { a: 1.0 };
        let c = calibrate_threshold(&det, &p, 200.0, 400, 5, None).unwrap();
        let at = estimate_arlfa(&det.with_threshold(c.a), &p, 400, 20_000, 5).unwrap();
        assert_eq!(Some(at), c.arlfa);
        assert!(at.mean >= 200.0);
        let below = estimate_arlfa(&det.with_threshold(c.a - 1e-6), &p, 400, 20_000, 5).unwrap();
        assert!(below.mean < 200.0);
    }

    #[test]
    fn threshold_grows_with_target() {
        let p = pairs(1);
        let det = Detector::Cusum { a: 1.0 };
        let a: Vec<f64> = [50.0, 200.0, 800.0]
            .iter()
            .map(|&z| calibrate_threshold(&det, &p, z, 300, 2, None).unwrap().a)
            .collect();
        assert!(a[0] <= a[1] && a[1] <= a[2], "{a:?}");
    }

    #[test]
    fn bracket_failure_reported() {
        let p = pairs(1);
        // A 10-step cap can never reach an ARLFA of 1000.
        let r = calibrate_threshold(&Detector::Cusum { a: 1.0 }, &p, 1000.0, 50, 1, Some(10));
        assert!(matches!(r, Err(Error::BracketFailure { .. })));
    }

    #[test]
    fn target_validation() {
        assert!(CalibrationTarget::new(0.5, 0.5).is_err());
        assert!(CalibrationTarget::new(100.0, 0.0).is_err());
        assert!(CalibrationTarget::new(100.0, 1.5).is_err());
        assert!(CalibrationTarget::new(100.0, 1.0).is_ok());
    }

    #[test]
    fn small_search_is_deterministic_and_admissible() {
        let p = pairs(1);
        let target = CalibrationTarget::new(300.0, 0.6).unwrap();
        let opts = SearchOptions {
            n_reps: 200,
            seed: 3,
            cycle_reps: 200,
            ..Default::default()
        };
        let r1 = search_two_level(&p, &target, &[0.6, 1.2], &[0.3, 0.5], &opts).unwrap();
        let r2 = search_two_level(&p, &target, &[0.6, 1.2], &[0.3, 0.5], &opts).unwrap();
        assert_eq!(r1, r2);
        assert!(r1.feasible);
        assert!(r1.report.arlfa.mean >= 300.0 * 0.95);
        assert!(r1.report.comm_rate.mean <= 0.6 + 3.0 * r1.report.comm_rate.std_error);
        assert_eq!(r1.search_trace.len(), 4);
        let mut buf = Vec::new();
        write_search_trace(&mut buf, &r1.search_trace, &target, false).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 5);
    }

    #[test]
    fn infeasible_budget_flagged() {
        let p = pairs(1);
        let target = CalibrationTarget::new(100.0, 0.05).unwrap();
        let opts = SearchOptions {
            n_reps: 100,
            seed: 1,
            cycle_reps: 100,
            ..Default::default()
        };
        let r = search_two_level(&p, &target, &[0.5], &[0.5], &opts).unwrap();
        assert!(!r.feasible);
    }
}
