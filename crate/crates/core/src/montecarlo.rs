//! Replicated simulation of run lengths, delays and communication rates.
//!
//! Replication `i` draws observations from a ChaCha8 stream keyed by
//! `(seed, 2i)` and transmission coins from `(seed, 2i + 1)`. Replications
//! run on the rayon pool and are reduced in index order, so results do not
//! depend on the thread count. Detectors evaluated at the same seed see the
//! same observation sequences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detectors::{Detector, DetectorState, TraceRecord};
use crate::error::{invalid, Error, Result};
use crate::model::SharedPair;

/// Default rate horizon.
pub const DEFAULT_HORIZON: u64 = 10_000;
/// Default per-replication step cap for runs without a natural scale.
pub const DEFAULT_CAP: u64 = 10_000_000;
const MAX_ATTEMPTS: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_reps: u64,
    pub seed: u64,
    pub truncated_reps: u64,
}

impl McEstimate {
    pub fn from_samples(samples: &[f64], seed: u64, truncated_reps: u64) -> Self {
        let n = samples.len();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self {
            mean,
            std_error: (var / n as f64).sqrt(),
            n_reps: n as u64,
            seed,
            truncated_reps,
        }
    }

    pub fn combined_se(&self, other: &McEstimate) -> f64 {
        self.std_error.hypot(other.std_error)
    }

    /// `(self - other)` in units of the combined standard error.
    pub fn z_diff(&self, other: &McEstimate) -> f64 {
        (self.mean - other.mean) / self.combined_se(other)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerfReport {
    pub arlfa: McEstimate,
    pub delay: McEstimate,
    pub comm_rate: McEstimate,
    /// Level switches per time step before the change.
    pub feedback_ratio: McEstimate,
    pub frac_time_above_a1: McEstimate,
}

/// How pre-change history enters the delay when `nu > 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelayConditioning {
    /// Alarms before `nu` count as zero delay.
    #[default]
    None,
    /// Paths that alarm before `nu` are redrawn.
    NoAlarm,
    /// The statistic is reset to 0 just before the change.
    WorstCase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateMode {
    /// Stopping disabled; transmissions over a fixed horizon.
    #[default]
    NoStop,
    /// Stopping enabled; only paths surviving the horizon count.
    Conditional,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub n_reps: u64,
    pub seed: u64,
    pub cap: u64,
    pub horizon: u64,
    pub nu: u64,
    pub conditioning: DelayConditioning,
    pub rate_mode: RateMode,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            n_reps: 2000,
            seed: 0,
            cap: DEFAULT_CAP,
            horizon: DEFAULT_HORIZON,
            nu: 1,
            conditioning: DelayConditioning::None,
            rate_mode: RateMode::NoStop,
        }
    }
}

pub(crate) fn rep_streams(seed: u64, rep: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut obs = ChaCha8Rng::seed_from_u64(seed);
    obs.set_stream(2 * rep);
    let mut coin = ChaCha8Rng::seed_from_u64(seed);
    coin.set_stream(2 * rep + 1);
    (obs, coin)
}

/// A replication in progress: detector state plus its random streams.
pub(crate) struct Path {
    pub state: DetectorState,
    pub obs: ChaCha8Rng,
    pub coin: ChaCha8Rng,
    xs: Vec<f64>,
}

impl Path {
    pub fn new(det: &Detector, n_sensors: usize, seed: u64, rep: u64) -> Self {
        let (obs, coin) = rep_streams(seed, rep);
        Self {
            state: det.initial_state(),
            obs,
            coin,
            xs: vec![0.0; n_sensors],
        }
    }

    /// One step with observations from the post-change law when `post`.
    #[inline]
    pub fn step(&mut self, det: &Detector, pairs: &[SharedPair], post: bool) {
        for (x, p) in self.xs.iter_mut().zip(pairs) {
            *x = if post {
                p.sample1(&mut self.obs)
            } else {
                p.sample0(&mut self.obs)
            };
        }
        self.state = det.advance(self.state, &self.xs, pairs, &mut self.coin, None);
    }

    /// Pre-change fused LLR of one fresh observation vector; the state is untouched.
    #[inline]
    pub fn raw_increment(&mut self, pairs: &[SharedPair]) -> f64 {
        let mut inc = 0.0;
        for p in pairs {
            inc += p.llr(p.sample0(&mut self.obs));
        }
        inc
    }

    /// Steps until stop or until `k == until`; observations switch to the
    /// post-change law at step `nu`.
    pub fn run(&mut self, det: &Detector, pairs: &[SharedPair], nu: u64, until: u64) {
        while !self.state.stopped && self.state.k < until {
            let post = self.state.k + 1 >= nu;
            self.step(det, pairs, post);
        }
    }
}

fn check_common(det: &Detector, pairs: &[SharedPair], n_reps: u64) -> Result<()> {
    det.validate(pairs.len())?;
    if n_reps < 2 {
        return Err(invalid("at least two replications are required"));
    }
    Ok(())
}

/// Pre-change run lengths, capped at `cap` steps; capped runs count as `cap`.
pub fn estimate_arlfa(
    det: &Detector,
    pairs: &[SharedPair],
    n_reps: u64,
    cap: u64,
    seed: u64,
) -> Result<McEstimate> {
    check_common(det, pairs, n_reps)?;
    let runs: Vec<(f64, bool)> = (0..n_reps)
        .into_par_iter()
        .map(|i| {
            let mut p = Path::new(det, pairs.len(), seed, i);
            p.run(det, pairs, u64::MAX, cap);
            (p.state.k as f64, !p.state.stopped)
        })
        .collect();
    Ok(summarize(&runs, seed))
}

fn summarize(runs: &[(f64, bool)], seed: u64) -> McEstimate {
    let values: Vec<f64> = runs.iter().map(|r| r.0).collect();
    let truncated = runs.iter().filter(|r| r.1).count() as u64;
    McEstimate::from_samples(&values, seed, truncated)
}

/// Detection delay `(T - nu + 1)^+` with the change at step `nu`.
pub fn estimate_delay(
    det: &Detector,
    pairs: &[SharedPair],
    n_reps: u64,
    seed: u64,
    nu: u64,
    conditioning: DelayConditioning,
    cap: u64,
) -> Result<McEstimate> {
    check_common(det, pairs, n_reps)?;
    if nu < 1 {
        return Err(invalid("change time must be at least 1"));
    }
    let runs: Vec<Result<(f64, bool)>> = (0..n_reps)
        .into_par_iter()
        .map(|i| delay_rep(det, pairs, seed, i, n_reps, nu, conditioning, cap))
        .collect();
    let runs: Vec<(f64, bool)> = runs.into_iter().collect::<Result<_>>()?;
    Ok(summarize(&runs, seed))
}

#[allow(clippy::too_many_arguments)]
fn delay_rep(
    det: &Detector,
    pairs: &[SharedPair],
    seed: u64,
    rep: u64,
    n_reps: u64,
    nu: u64,
    conditioning: DelayConditioning,
    cap: u64,
) -> Result<(f64, bool)> {
    let until = (nu - 1).saturating_add(cap);
    let finish = |p: &Path| {
        if p.state.stopped {
            ((p.state.k + 1).saturating_sub(nu) as f64, false)
        } else {
            (cap as f64, true)
        }
    };
    match conditioning {
        DelayConditioning::None => {
            let mut p = Path::new(det, pairs.len(), seed, rep);
            p.run(det, pairs, nu, until);
            Ok(finish(&p))
        }
        DelayConditioning::NoAlarm => {
            for attempt in 0..MAX_ATTEMPTS {
                let mut p = Path::new(det, pairs.len(), seed, rep + attempt * n_reps);
                p.run(det, pairs, nu, nu - 1);
                if p.state.stopped {
                    continue;
                }
                p.run(det, pairs, nu, until);
                return Ok(finish(&p));
            }
            Err(Error::Infeasible(format!(
                "every path alarmed before the change at {nu} in {MAX_ATTEMPTS} attempts"
            )))
        }
        DelayConditioning::WorstCase => {
            let free = det.with_threshold(f64::INFINITY);
            let mut p = Path::new(det, pairs.len(), seed, rep);
            p.run(&free, pairs, nu, nu - 1);
            p.state = DetectorState {
                s: 0.0,
                active_level: det.initial_state().active_level,
                stopped: false,
                ..p.state
            };
            p.run(det, pairs, nu, until);
            Ok(finish(&p))
        }
    }
}

/// Per-replication pre-change sample over a fixed horizon with stopping off:
/// (send fraction per sensor-slot, level switches per slot, fraction of slots
/// at full rate).
fn free_runs(
    det: &Detector,
    pairs: &[SharedPair],
    horizon: u64,
    n_reps: u64,
    seed: u64,
) -> Vec<[f64; 3]> {
    let free = det.with_threshold(f64::INFINITY);
    let m = pairs.len() as f64;
    let h = horizon as f64;
    (0..n_reps)
        .into_par_iter()
        .map(|i| {
            let mut p = Path::new(&free, pairs.len(), seed, i);
            p.run(&free, pairs, u64::MAX, horizon);
            let above = match det {
                Detector::CusumAc(_) => p.state.time_above_a1 as f64 / h,
                _ => 1.0,
            };
            [
                p.state.tx_count as f64 / (m * h),
                p.state.feedback_count as f64 / h,
                above,
            ]
        })
        .collect()
}

fn column(rows: &[[f64; 3]], j: usize) -> Vec<f64> {
    rows.iter().map(|r| r[j]).collect()
}

/// Pre-change communication rate averaged over sensors.
pub fn estimate_comm_rate(
    det: &Detector,
    pairs: &[SharedPair],
    horizon: u64,
    n_reps: u64,
    seed: u64,
    mode: RateMode,
) -> Result<McEstimate> {
    check_common(det, pairs, n_reps)?;
    if horizon < DEFAULT_HORIZON {
        return Err(invalid(format!(
            "rate horizon {horizon} below {DEFAULT_HORIZON}"
        )));
    }
    match mode {
        RateMode::NoStop => {
            let rows = free_runs(det, pairs, horizon, n_reps, seed);
            Ok(McEstimate::from_samples(&column(&rows, 0), seed, 0))
        }
        RateMode::Conditional => {
            let m = pairs.len() as f64;
            let runs: Vec<Option<f64>> = (0..n_reps)
                .into_par_iter()
                .map(|i| {
                    (0..MAX_ATTEMPTS).find_map(|attempt| {
                        let mut p = Path::new(det, pairs.len(), seed, i + attempt * n_reps);
                        p.run(det, pairs, u64::MAX, horizon);
                        (!p.state.stopped).then(|| p.state.tx_count as f64 / (m * horizon as f64))
                    })
                })
                .collect();
            let values: Option<Vec<f64>> = runs.into_iter().collect();
            let values = values.ok_or_else(|| {
                Error::Infeasible(format!(
                    "too few paths survive {horizon} steps for a conditional rate estimate"
                ))
            })?;
            Ok(McEstimate::from_samples(&values, seed, 0))
        }
    }
}

/// All performance indices for one detector.
pub fn evaluate(det: &Detector, pairs: &[SharedPair], opts: &EvalOptions) -> Result<PerfReport> {
    let arlfa = estimate_arlfa(det, pairs, opts.n_reps, opts.cap, opts.seed)?;
    let delay = estimate_delay(
        det,
        pairs,
        opts.n_reps,
        opts.seed,
        opts.nu,
        opts.conditioning,
        opts.cap,
    )?;
    let rows = free_runs(det, pairs, opts.horizon, opts.n_reps, opts.seed);
    let comm_rate = match opts.rate_mode {
        RateMode::NoStop => {
            if opts.horizon < DEFAULT_HORIZON {
                return Err(invalid(format!(
                    "rate horizon {} below {DEFAULT_HORIZON}",
                    opts.horizon
                )));
            }
            McEstimate::from_samples(&column(&rows, 0), opts.seed, 0)
        }
        RateMode::Conditional => estimate_comm_rate(
            det,
            pairs,
            opts.horizon,
            opts.n_reps,
            opts.seed,
            opts.rate_mode,
        )?,
    };
    Ok(PerfReport {
        arlfa,
        delay,
        comm_rate,
        feedback_ratio: McEstimate::from_samples(&column(&rows, 1), opts.seed, 0),
        frac_time_above_a1: McEstimate::from_samples(&column(&rows, 2), opts.seed, 0),
    })
}

/// Rate, switch frequency and full-rate fraction from one set of free runs.
pub(crate) fn rate_diagnostics(
    det: &Detector,
    pairs: &[SharedPair],
    horizon: u64,
    n_reps: u64,
    seed: u64,
) -> Result<[McEstimate; 3]> {
    check_common(det, pairs, n_reps)?;
    let rows = free_runs(det, pairs, horizon, n_reps, seed);
    Ok([0, 1, 2].map(|j| McEstimate::from_samples(&column(&rows, j), seed, 0)))
}

/// Single trajectory with the change at `nu`, recorded step by step.
pub fn simulate_trace(
    det: &Detector,
    pairs: &[SharedPair],
    nu: u64,
    max_steps: u64,
    seed: u64,
) -> Result<Vec<TraceRecord>> {
    det.validate(pairs.len())?;
    let mut p = Path::new(det, pairs.len(), seed, 0);
    let mut out = Vec::new();
    let mut sent = vec![false; pairs.len()];
    while !p.state.stopped && p.state.k < max_steps {
        let post = p.state.k + 1 >= nu;
        for (x, pair) in p.xs.iter_mut().zip(pairs) {
            *x = if post {
                pair.sample1(&mut p.obs)
            } else {
                pair.sample0(&mut p.obs)
            };
        }
        p.state = det.advance(p.state, &p.xs, pairs, &mut p.coin, Some(&mut sent));
        out.push(TraceRecord {
            k: p.state.k,
            s: p.state.s,
            level: p.state.active_level,
            sent: sent.iter().filter(|&&g| g).count() as u32,
            stopped: p.state.stopped,
        });
    }
    Ok(out)
}

/// Resumable first-passage records of the pre-change statistic.
///
/// The statistic's path does not depend on the stopping threshold, so one
/// set of paths answers "when is `s` first at or above `a`" for every `a`.
/// Stop times read from the curve equal those of [`estimate_arlfa`] at the
/// same seed.
pub(crate) struct FirstPassageCurve<'a> {
    det: Detector,
    pairs: &'a [SharedPair],
    inclusive: bool,
    cap: u64,
    seed: u64,
    reps: Vec<RecordPath>,
}

struct RecordPath {
    path: Path,
    max: f64,
    records: Vec<(f64, u64)>,
}

impl<'a> FirstPassageCurve<'a> {
    pub fn new(
        det: &Detector,
        pairs: &'a [SharedPair],
        n_reps: u64,
        cap: u64,
        seed: u64,
    ) -> Result<Self> {
        check_common(det, pairs, n_reps)?;
        let free = det.with_threshold(f64::INFINITY);
        let reps = (0..n_reps)
            .map(|i| RecordPath {
                path: Path::new(&free, pairs.len(), seed, i),
                max: f64::NEG_INFINITY,
                records: Vec::new(),
            })
            .collect();
        Ok(Self {
            inclusive: det.inclusive_stop(),
            det: free,
            pairs,
            cap,
            seed,
            reps,
        })
    }

    /// Runs every path until its maximum exceeds `level` or it reaches the cap.
    pub fn extend_to(&mut self, level: f64) {
        self.extend_by(level, u64::MAX);
    }

    /// Like [`extend_to`](Self::extend_to) but advances each path by at most `budget` steps.
    fn extend_by(&mut self, level: f64, budget: u64) {
        let (det, pairs, cap) = (&self.det, self.pairs, self.cap);
        self.reps.par_iter_mut().for_each(|r| {
            let stop = r.path.state.k.saturating_add(budget).min(cap);
            while r.max <= level && r.path.state.k < stop {
                r.path.step(det, pairs, false);
                let s = r.path.state.s;
                if s > r.max {
                    r.max = s;
                    r.records.push((s, r.path.state.k));
                }
            }
        });
    }

    fn resolved(&self, r: &RecordPath, a: f64) -> bool {
        r.path.state.k >= self.cap
            || if self.inclusive {
                r.max >= a
            } else {
                r.max > a
            }
    }

    /// Whether the estimated ARLFA at `a` is at least `zeta`.
    ///
    /// Paths are extended in chunks and the answer is returned as soon as the
    /// partially observed run lengths already bound the mean from below.
    pub fn arlfa_at_least(&mut self, a: f64, zeta: f64) -> bool {
        let n = self.reps.len() as f64;
        let chunk = (zeta.ceil() as u64).max(1000);
        loop {
            let mut lower = 0.0;
            let mut open = false;
            for r in &self.reps {
                if self.resolved(r, a) {
                    lower += self.stop_time(r, a).0;
                } else {
                    lower += r.path.state.k as f64;
                    open = true;
                }
            }
            if !open {
                return self.arlfa(a).mean >= zeta;
            }
            if lower / n >= zeta {
                return true;
            }
            self.extend_by(a, chunk);
        }
    }

    fn stop_time(&self, r: &RecordPath, a: f64) -> (f64, bool) {
        let hit = if self.inclusive {
            r.records.iter().find(|rec| rec.0 >= a)
        } else {
            r.records.iter().find(|rec| rec.0 > a)
        };
        match hit {
            Some(&(_, k)) => (k as f64, false),
            None => (self.cap as f64, true),
        }
    }

    pub fn arlfa(&mut self, a: f64) -> McEstimate {
        self.extend_to(a);
        let runs: Vec<(f64, bool)> = self.reps.iter().map(|r| self.stop_time(r, a)).collect();
        summarize(&runs, self.seed)
    }
}
