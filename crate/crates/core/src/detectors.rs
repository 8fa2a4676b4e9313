//! Step-wise detector state machines.
//!
//! Every step function is pure: it takes a [`DetectorState`] by value and
//! returns the next one. Stepping a stopped detector through the public
//! functions is an error.

use std::io;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::censoring::{optimize, CensoringStrategy};
use crate::error::{invalid, Error, Result};
use crate::model::{DistributionPair, SharedPair};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectorState {
    pub s: f64,
    /// Censoring level for the next observation; 0 is full rate.
    pub active_level: usize,
    pub k: u64,
    pub stopped: bool,
    pub tx_count: u64,
    pub feedback_count: u64,
    pub time_above_a1: u64,
    pub time_below_a1: u64,
}

impl DetectorState {
    pub fn stop_time(&self) -> Option<u64> {
        self.stopped.then_some(self.k)
    }

    fn ensure_running(&self) -> Result<()> {
        if self.stopped {
            Err(Error::Stopped(self.k))
        } else {
            Ok(())
        }
    }
}

/// One censoring band: statistic values below `threshold` use rate `rate`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Level {
    pub threshold: f64,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CusumAcConfig {
    pub a: f64,
    /// Bands in descending threshold order: `levels[0]` is `(a_1, eps_1)`.
    pub levels: Vec<Level>,
    /// `strategies[m][n]` is sensor `m`'s rule at level `n`; column 0 is full rate.
    /// A single row is shared by every sensor.
    pub strategies: Vec<Vec<CensoringStrategy>>,
}

impl CusumAcConfig {
    pub fn new(
        a: f64,
        levels: Vec<Level>,
        strategies: Vec<Vec<CensoringStrategy>>,
    ) -> Result<Self> {
        let cfg = Self {
            a,
            levels,
            strategies,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Builds the optimal strategies for every level, shared by all sensors.
    pub fn build(pair: &dyn DistributionPair, a: f64, levels: Vec<Level>) -> Result<Self> {
        let row = Self::strategy_row(pair, &levels)?;
        Self::new(a, levels, vec![row])
    }

    /// Per-sensor strategies; `rates[m]` overrides the level rates for sensor `m`.
    pub fn build_per_sensor(
        pairs: &[SharedPair],
        a: f64,
        levels: Vec<Level>,
        rates: &[Vec<f64>],
    ) -> Result<Self> {
        if rates.len() != pairs.len() {
            return Err(Error::LengthMismatch {
                what: "per-sensor rates",
                got: rates.len(),
                expected: pairs.len(),
            });
        }
        let mut rows = Vec::with_capacity(pairs.len());
        for (pair, r) in pairs.iter().zip(rates) {
            if r.len() != levels.len() {
                return Err(Error::LengthMismatch {
                    what: "sensor rate list",
                    got: r.len(),
                    expected: levels.len(),
                });
            }
            let lv: Vec<Level> = levels
                .iter()
                .zip(r)
                .map(|(l, &rate)| Level { rate, ..*l })
                .collect();
            rows.push(Self::strategy_row(pair.as_ref(), &lv)?);
        }
        Self::new(a, levels, rows)
    }

    /// The usual two-band detector.
    pub fn two_level(pair: &dyn DistributionPair, a: f64, a1: f64, eps1: f64) -> Result<Self> {
        Self::build(
            pair,
            a,
            vec![Level {
                threshold: a1,
                rate: eps1,
            }],
        )
    }

    fn strategy_row(
        pair: &dyn DistributionPair,
        levels: &[Level],
    ) -> Result<Vec<CensoringStrategy>> {
        let mut row = vec![optimize(pair, 1.0)?];
        for l in levels {
            row.push(optimize(pair, l.rate)?);
        }
        Ok(row)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0) {
            return Err(invalid(format!(
                "threshold a = {} must be positive",
                self.a
            )));
        }
        if self.levels.is_empty() {
            return Err(invalid("at least one censoring level is required"));
        }
        let mut upper = self.a;
        let mut upper_rate = 1.0;
        for l in &self.levels {
            if !(l.threshold > 0.0 && l.threshold < upper) {
                return Err(invalid(format!(
                    "level thresholds must decrease strictly from a = {} and stay positive",
                    self.a
                )));
            }
            if !(l.rate > 0.0 && l.rate <= upper_rate) {
                return Err(invalid(
                    "level rates must lie in (0, 1] and not increase toward lower levels",
                ));
            }
            upper = l.threshold;
            upper_rate = l.rate;
        }
        if self.strategies.is_empty() {
            return Err(invalid("no censoring strategies"));
        }
        for row in &self.strategies {
            if row.len() != self.n_levels() {
                return Err(Error::LengthMismatch {
                    what: "strategy row",
                    got: row.len(),
                    expected: self.n_levels(),
                });
            }
            if !row[0].is_full_rate() {
                return Err(invalid("level 0 must use the full-rate strategy"));
            }
            if row.windows(2).any(|w| w[1].rate > w[0].rate) {
                return Err(invalid(
                    "strategy rates must not increase toward lower levels",
                ));
            }
        }
        Ok(())
    }

    /// Number of bands including the full-rate top band.
    pub fn n_levels(&self) -> usize {
        self.levels.len() + 1
    }

    pub fn a1(&self) -> f64 {
        self.levels[0].threshold
    }

    /// Band index containing `s`: the count of level thresholds above `s`.
    #[inline]
    pub fn level_of(&self, s: f64) -> usize {
        self.levels.iter().take_while(|l| l.threshold > s).count()
    }

    #[inline]
    pub fn strategy(&self, sensor: usize, level: usize) -> &CensoringStrategy {
        let row = if self.strategies.len() == 1 {
            &self.strategies[0]
        } else {
            &self.strategies[sensor]
        };
        &row[level]
    }

    pub fn with_threshold(&self, a: f64) -> Self {
        Self { a, ..self.clone() }
    }

    pub fn initial_state(&self) -> DetectorState {
        self.state_at(0.0)
    }

    /// Fresh state with the statistic set to `s`.
    pub fn state_at(&self, s: f64) -> DetectorState {
        DetectorState {
            s,
            active_level: self.level_of(s),
            ..DetectorState::default()
        }
    }

    fn check_sensors(&self, m: usize) -> Result<()> {
        if self.strategies.len() != 1 && self.strategies.len() != m {
            return Err(Error::LengthMismatch {
                what: "observations",
                got: m,
                expected: self.strategies.len(),
            });
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn cusum_advance(
    mut state: DetectorState,
    increment: f64,
    a: f64,
    sent: u64,
) -> DetectorState {
    state.s = (state.s + increment).max(0.0);
    state.k += 1;
    state.tx_count += sent;
    state.stopped = state.s > a;
    state
}

#[inline]
pub(crate) fn ac_advance(
    mut state: DetectorState,
    config: &CusumAcConfig,
    increment: f64,
    sent: u64,
) -> DetectorState {
    let prev = state.s;
    let tilde = (prev + increment).max(0.0);
    let mut next = tilde;
    for l in &config.levels {
        if prev < l.threshold && l.threshold <= tilde {
            next = l.threshold;
            break;
        }
    }
    if state.active_level == 0 {
        state.time_above_a1 += 1;
    } else {
        state.time_below_a1 += 1;
    }
    let level = config.level_of(next);
    if level != state.active_level {
        state.feedback_count += 1;
        state.active_level = level;
    }
    state.s = next;
    state.k += 1;
    state.tx_count += sent;
    state.stopped = next >= config.a;
    state
}

/// Fused CuSum-AC step without precondition checks. Writes the per-sensor
/// send flags into `sent` when given.
#[inline]
pub(crate) fn ac_fused(
    state: DetectorState,
    config: &CusumAcConfig,
    xs: &[f64],
    pairs: &[SharedPair],
    mut sent: Option<&mut [bool]>,
) -> DetectorState {
    let mut increment = 0.0;
    let mut count = 0;
    for (m, (&x, pair)) in xs.iter().zip(pairs).enumerate() {
        let (g, l) = config
            .strategy(m, state.active_level)
            .censor(pair.as_ref(), x);
        increment += l;
        count += g as u64;
        if let Some(flags) = sent.as_deref_mut() {
            flags[m] = g;
        }
    }
    ac_advance(state, config, increment, count)
}

/// Plain CuSum update `c' = max(0, c + llr)`, stopping when `c' > a`.
pub fn cusum_step(state: DetectorState, llr_value: f64, a: f64) -> Result<DetectorState> {
    state.ensure_running()?;
    Ok(cusum_advance(state, llr_value, a, 1))
}

/// Single-sensor CuSum-AC step; returns the new state and the send decision.
pub fn cusum_ac_step(
    state: DetectorState,
    config: &CusumAcConfig,
    x: f64,
    pair: &dyn DistributionPair,
) -> Result<(DetectorState, bool)> {
    state.ensure_running()?;
    let (sent, l) = config.strategy(0, state.active_level).censor(pair, x);
    Ok((ac_advance(state, config, l, sent as u64), sent))
}

/// Fused multi-sensor CuSum-AC step; all sensors switch level together.
pub fn cusum_ac_multi_step(
    state: DetectorState,
    config: &CusumAcConfig,
    xs: &[f64],
    pairs: &[SharedPair],
) -> Result<(DetectorState, Vec<bool>)> {
    state.ensure_running()?;
    if xs.len() != pairs.len() || xs.is_empty() {
        return Err(Error::LengthMismatch {
            what: "observations",
            got: xs.len(),
            expected: pairs.len(),
        });
    }
    config.check_sensors(xs.len())?;
    let mut sent = vec![false; xs.len()];
    let next = ac_fused(state, config, xs, pairs, Some(&mut sent));
    Ok((next, sent))
}

/// CuSum fed by a Bernoulli(`epsilon`) transmission coin independent of `x`.
/// Unsent slots contribute nothing.
pub fn random_tx_cusum_step(
    state: DetectorState,
    x: f64,
    pair: &dyn DistributionPair,
    epsilon: f64,
    a: f64,
    rng: &mut dyn RngCore,
) -> Result<(DetectorState, bool)> {
    state.ensure_running()?;
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(invalid(format!(
            "transmission probability {epsilon} outside [0, 1]"
        )));
    }
    let sent = rng.random_bool(epsilon);
    let inc = if sent { pair.llr(x) } else { 0.0 };
    Ok((cusum_advance(state, inc, a, sent as u64), sent))
}

/// A detector family with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Detector {
    Cusum { a: f64 },
    CusumAc(CusumAcConfig),
    RandomTx { a: f64, epsilon: f64 },
}

impl Detector {
    pub fn threshold(&self) -> f64 {
        match self {
            Detector::Cusum { a } | Detector::RandomTx { a, .. } => *a,
            Detector::CusumAc(c) => c.a,
        }
    }

    pub fn with_threshold(&self, a: f64) -> Self {
        match self {
            Detector::Cusum { .. } => Detector::Cusum { a },
            Detector::RandomTx { epsilon, .. } => Detector::RandomTx {
                a,
                epsilon: *epsilon,
            },
            Detector::CusumAc(c) => Detector::CusumAc(c.with_threshold(a)),
        }
    }

    pub fn initial_state(&self) -> DetectorState {
        match self {
            Detector::CusumAc(c) => c.initial_state(),
            _ => DetectorState::default(),
        }
    }

    /// Lowest statistic value the stopping threshold may take.
    pub fn min_threshold(&self) -> f64 {
        match self {
            Detector::CusumAc(c) => c.a1(),
            _ => 0.0,
        }
    }

    /// Whether the stop test is `s >= a` rather than `s > a`.
    pub fn inclusive_stop(&self) -> bool {
        matches!(self, Detector::CusumAc(_))
    }

    pub fn validate(&self, n_sensors: usize) -> Result<()> {
        if n_sensors == 0 {
            return Err(invalid("at least one sensor is required"));
        }
        match self {
            Detector::Cusum { a } if !(*a >= 0.0) => Err(invalid("threshold must be nonnegative")),
            Detector::RandomTx { a, epsilon } => {
                if !(*a >= 0.0) {
                    return Err(invalid("threshold must be nonnegative"));
                }
                if !(*epsilon > 0.0 && *epsilon <= 1.0) {
                    return Err(invalid(format!(
                        "transmission probability {epsilon} outside (0, 1]"
                    )));
                }
                Ok(())
            }
            Detector::CusumAc(c) => {
                c.validate()?;
                c.check_sensors(n_sensors)
            }
            _ => Ok(()),
        }
    }

    /// Unchecked fused step used by the simulation engine.
    #[inline]
    pub(crate) fn advance(
        &self,
        state: DetectorState,
        xs: &[f64],
        pairs: &[SharedPair],
        coin: &mut dyn RngCore,
        sent: Option<&mut [bool]>,
    ) -> DetectorState {
        match self {
            Detector::Cusum { a } => {
                let inc: f64 = xs.iter().zip(pairs).map(|(&x, p)| p.llr(x)).sum();
                if let Some(flags) = sent {
                    flags.fill(true);
                }
                cusum_advance(state, inc, *a, xs.len() as u64)
            }
            Detector::RandomTx { a, epsilon } => {
                let mut inc = 0.0;
                let mut count = 0;
                let mut flags = sent;
                for (m, (&x, p)) in xs.iter().zip(pairs).enumerate() {
                    let g = coin.random_bool(*epsilon);
                    if g {
                        inc += p.llr(x);
                        count += 1;
                    }
                    if let Some(f) = flags.as_deref_mut() {
                        f[m] = g;
                    }
                }
                cusum_advance(state, inc, *a, count)
            }
            Detector::CusumAc(c) => ac_fused(state, c, xs, pairs, sent),
        }
    }

    /// Checked fused step for any detector family.
    pub fn step(
        &self,
        state: DetectorState,
        xs: &[f64],
        pairs: &[SharedPair],
        coin: &mut dyn RngCore,
    ) -> Result<(DetectorState, Vec<bool>)> {
        state.ensure_running()?;
        if xs.len() != pairs.len() || xs.is_empty() {
            return Err(Error::LengthMismatch {
                what: "observations",
                got: xs.len(),
                expected: pairs.len(),
            });
        }
        self.validate(xs.len())?;
        let mut sent = vec![false; xs.len()];
        let next = self.advance(state, xs, pairs, coin, Some(&mut sent));
        Ok((next, sent))
    }
}

/// One row of a per-step trajectory dump.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub k: u64,
    pub s: f64,
    pub level: usize,
    /// Number of sensors that transmitted at this step.
    pub sent: u32,
    pub stopped: bool,
}

pub fn write_trace<W: io::Write>(out: W, records: &[TraceRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    for r in records {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::gaussian_mean_shift;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(a1: f64, eps1: f64, a: f64) -> CusumAcConfig {
        let g = gaussian_mean_shift(0.0, 0.5, 1.0).unwrap();
        CusumAcConfig::two_level(&g, a, a1, eps1).unwrap()
    }

    #[test]
    fn cusum_reflects_at_zero() {
        let s = cusum_step(DetectorState::default(), -1.0, 4.5).unwrap();
        assert_eq!(s.s, 0.0);
        assert!(!s.stopped);
        assert_eq!(s.tx_count, 1);
    }

    #[test]
    fn cusum_crosses_strictly() {
        let st = DetectorState {
            s: 4.4,
            ..Default::default()
        };
        let n = cusum_step(st, 0.2, 4.5).unwrap();
        assert!((n.s - 4.6).abs() < 1e-12);
        assert!(n.stopped);
        assert_eq!(n.stop_time(), Some(1));
        let at = DetectorState {
            s: 4.0,
            ..Default::default()
        };
        assert!(!cusum_step(at, 0.5, 4.5).unwrap().stopped);
        assert!(matches!(cusum_step(n, 0.1, 4.5), Err(Error::Stopped(1))));
    }

    #[test]
    fn reset_clamps_upward_crossing() {
        let c = cfg(0.78, 0.5, 4.5);
        let st = c.state_at(0.5);
        assert_eq!(st.active_level, 1);
        let n = ac_advance(st, &c, 0.4, 1);
        assert_eq!(n.s, 0.78);
        assert_eq!(n.active_level, 0);
        assert_eq!(n.feedback_count, 1);
        assert_eq!(n.time_below_a1, 1);
    }

    #[test]
    fn no_reset_above_a1() {
        let c = cfg(0.78, 0.5, 4.5);
        let n = ac_advance(c.state_at(0.9), &c, 0.4, 1);
        assert!((n.s - 1.3).abs() < 1e-12);
        assert_eq!(n.feedback_count, 0);
        assert_eq!(n.time_above_a1, 1);
    }

    #[test]
    fn cannot_stop_from_below_a1() {
        let c = cfg(0.78, 0.5, 1.0);
        let n = ac_advance(c.state_at(0.1), &c, 5.0, 1);
        assert_eq!(n.s, 0.78);
        assert!(!n.stopped);
        let m = ac_advance(n, &c, 0.22, 1);
        assert!(m.stopped);
    }

    #[test]
    fn inclusive_stop() {
        let c = cfg(0.78, 0.5, 1.0);
        let n = ac_advance(c.state_at(0.9), &c, 0.1, 1);
        assert_eq!(n.s, 1.0);
        assert!(n.stopped);
    }

    #[test]
    fn multi_level_reset_goes_to_highest_crossed() {
        let g = gaussian_mean_shift(0.0, 0.5, 1.0).unwrap();
        let c = CusumAcConfig::build(
            &g,
            5.0,
            vec![
                Level {
                    threshold: 2.0,
                    rate: 0.6,
                },
                Level {
                    threshold: 1.0,
                    rate: 0.3,
                },
            ],
        )
        .unwrap();
        assert_eq!(c.level_of(0.5), 2);
        assert_eq!(c.level_of(1.0), 1);
        assert_eq!(c.level_of(2.0), 0);
        let n = ac_advance(c.state_at(0.5), &c, 3.0, 1);
        assert_eq!(n.s, 2.0);
        assert_eq!(n.active_level, 0);
        let m = ac_advance(c.state_at(0.5), &c, 0.7, 1);
        assert_eq!(m.s, 1.0);
        assert_eq!(m.active_level, 1);
        let d = ac_advance(c.state_at(2.5), &c, -2.0, 1);
        assert_eq!(d.active_level, 2);
        assert_eq!(d.feedback_count, 1);
    }

    #[test]
    fn config_validation() {
        let g = gaussian_mean_shift(0.0, 0.5, 1.0).unwrap();
        assert!(CusumAcConfig::two_level(&g, 0.5, 0.78, 0.5).is_err());
        assert!(CusumAcConfig::two_level(&g, 4.0, 0.0, 0.5).is_err());
        let bad_order = CusumAcConfig::build(
            &g,
            5.0,
            vec![
                Level {
                    threshold: 2.0,
                    rate: 0.3,
                },
                Level {
                    threshold: 1.0,
                    rate: 0.6,
                },
            ],
        );
        assert!(bad_order.is_err());
    }

    #[test]
    fn multi_sensor_sums_censored_values() {
        let g = gaussian_mean_shift(0.0, 0.5, 1.0).unwrap().shared();
        let c = cfg(0.78, 0.4, 10.0);
        let pairs = vec![g.clone(), g.clone(), g.clone()];
        let st = c.state_at(5.0);
        let xs = [0.3, -1.0, 2.0];
        let (n, sent) = cusum_ac_multi_step(st, &c, &xs, &pairs).unwrap();
        assert_eq!(sent, vec![true; 3]);
        let expect: f64 = 5.0 + xs.iter().map(|&x| g.llr(x)).sum::<f64>();
        assert!((n.s - expect).abs() < 1e-12);
        assert_eq!(n.tx_count, 3);

        let strat = c.strategy(0, 1);
        let inside = 0.5 * (strat.nosend_x_lo.unwrap() + strat.nosend_x_hi.unwrap());
        let (m, sent) = cusum_ac_multi_step(c.state_at(0.0), &c, &[inside; 3], &pairs).unwrap();
        assert_eq!(sent, vec![false; 3]);
        assert_eq!(m.s, (3.0 * strat.llr_censored).max(0.0));
        let (m, _) = cusum_ac_multi_step(c.state_at(0.5), &c, &[inside; 3], &pairs).unwrap();
        assert!((m.s - (0.5 + 3.0 * strat.llr_censored).max(0.0)).abs() < 1e-15);
        assert_eq!(m.tx_count, 0);

        assert!(cusum_ac_multi_step(st, &c, &xs[..2], &pairs).is_err());
    }

    #[test]
    fn random_tx_extremes() {
        let g = gaussian_mean_shift(0.0, 0.5, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = DetectorState::default();
        let mut b = DetectorState::default();
        let mut z = DetectorState::default();
        for _ in 0..500 {
            let x = g.sample1(&mut rng);
            let (na, sa) = random_tx_cusum_step(a, x, &g, 1.0, 1e9, &mut rng).unwrap();
            assert!(sa);
            a = na;
            b = cusum_step(b, g.llr(x), 1e9).unwrap();
            assert_eq!(a.s, b.s);
            let (nz, sz) = random_tx_cusum_step(z, x, &g, 0.0, 1e9, &mut rng).unwrap();
            assert!(!sz);
            z = nz;
            assert_eq!(z.s, 0.0);
        }
    }

    #[test]
    fn trace_csv_has_fixed_header() {
        let mut buf = Vec::new();
        let rec = TraceRecord {
            k: 1,
            s: 0.25,
            level: 1,
            sent: 2,
            stopped: false,
        };
        write_trace(&mut buf, &[rec]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "k,s,level,sent,stopped\n1,0.25,1,2,false\n");
    }
}
