//! Declarative experiment files and the canned figure reproductions.
//!
//! An experiment file is TOML with a top-level `seed` and one
//! `[[experiment]]` table per run. Unknown keys are rejected. Every
//! experiment is validated before any simulation starts, and outputs are
//! returned as in-memory files so callers write them once at the end.
//!
//! CSV schemas, one per kind:
//!
//! * `trace`: `k,s,level,sent,stopped`
//! * `arlfa`, `delay`, `rate`: [`PointRow`]
//! * `delay_vs_arlfa`, `delay_vs_rate`, `calibrate`: [`FigureRow`]; `calibrate`
//!   also writes `<name>_trace.csv` with one row per search candidate.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::{
    assemble_result, calibrate_threshold, default_a1_grid, default_eps1_grid, evaluate_grid,
    search_two_level, write_search_trace, CalibrationTarget, SearchOptions,
};
use crate::detectors::{write_trace, CusumAcConfig, Detector, Level};
use crate::error::{Error, Result};
use crate::model::{gaussian_mean_shift, SharedPair};
use crate::montecarlo::{
    estimate_arlfa, estimate_comm_rate, estimate_delay, simulate_trace, DelayConditioning,
    McEstimate, RateMode, DEFAULT_CAP,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Trace,
    Arlfa,
    Delay,
    Rate,
    DelayVsArlfa,
    DelayVsRate,
    Calibrate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    Cusum,
    CusumAc,
    RandomTx,
}

impl DetectorKind {
    fn label(self) -> &'static str {
        match self {
            DetectorKind::Cusum => "cusum",
            DetectorKind::CusumAc => "cusum_ac",
            DetectorKind::RandomTx => "random_tx",
        }
    }
}

fn d_mu1() -> f64 {
    0.5
}
fn d_sigma() -> f64 {
    1.0
}
fn d_one_usize() -> usize {
    1
}
fn d_one() -> u64 {
    1
}
fn d_reps() -> u64 {
    2000
}
fn d_horizon() -> u64 {
    10_000
}
fn d_max_steps() -> u64 {
    100_000
}

/// One experiment. Fields that do not apply to its kind are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub kind: Kind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default)]
    pub mu0: f64,
    #[serde(default = "d_mu1")]
    pub mu1: f64,
    #[serde(default = "d_sigma")]
    pub sigma: f64,
    #[serde(default = "d_one_usize", alias = "M")]
    pub sensors: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detector: Option<DetectorKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detectors: Option<Vec<DetectorKind>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps1: Option<f64>,
    /// `[threshold, rate]` pairs in descending threshold order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zeta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zeta_grid: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon_grid: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a1_grid: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps1_grid: Option<Vec<f64>>,
    #[serde(default = "d_reps")]
    pub n_reps: u64,
    #[serde(default = "d_horizon")]
    pub horizon: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cap: Option<u64>,
    #[serde(default = "d_one")]
    pub nu: u64,
    #[serde(default)]
    pub conditioning: DelayConditioning,
    #[serde(default)]
    pub rate_mode: RateMode,
    #[serde(default = "d_max_steps")]
    pub max_steps: u64,
    #[serde(default)]
    pub require_eprime: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cycle_reps: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ExperimentSpec {
    pub fn new(kind: Kind) -> Self {
        Self {
            kind,
            name: None,
            mu0: 0.0,
            mu1: d_mu1(),
            sigma: d_sigma(),
            sensors: 1,
            detector: None,
            detectors: None,
            a: None,
            a1: None,
            eps1: None,
            levels: None,
            epsilon: None,
            zeta: None,
            zeta_grid: None,
            epsilon_grid: None,
            a1_grid: None,
            eps1_grid: None,
            n_reps: d_reps(),
            horizon: d_horizon(),
            cap: None,
            nu: 1,
            conditioning: DelayConditioning::None,
            rate_mode: RateMode::NoStop,
            max_steps: d_max_steps(),
            require_eprime: false,
            cycle_reps: None,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunStamp {
    pub tool_version: String,
    pub wall_time_s: f64,
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<RunStamp>,
    #[serde(default, rename = "experiment")]
    pub experiments: Vec<ExperimentSpec>,
}

impl ExperimentFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Fills per-experiment seeds and names; the result re-runs identically.
    pub fn resolve(&self, seed_override: Option<u64>, reps_override: Option<u64>) -> Result<Self> {
        let seed = seed_override
            .or(self.seed)
            .ok_or_else(|| Error::Config("a top-level seed is required".into()))?;
        if seed > i64::MAX as u64 {
            return Err(Error::Config(format!(
                "seed {seed} does not fit a TOML integer"
            )));
        }
        let experiments = self
            .experiments
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let mut e = e.clone();
                if let Some(r) = reps_override {
                    e.n_reps = r;
                }
                if e.seed.is_none() || seed_override.is_some() {
                    e.seed = Some(derive_seed(seed, i as u64));
                }
                if e.name.is_none() {
                    e.name = Some(format!("{:02}_{}", i, kind_label(e.kind)));
                }
                e
            })
            .collect();
        Ok(Self {
            seed: Some(seed),
            run: None,
            experiments,
        })
    }
}

fn kind_label(k: Kind) -> &'static str {
    match k {
        Kind::Trace => "trace",
        Kind::Arlfa => "arlfa",
        Kind::Delay => "delay",
        Kind::Rate => "rate",
        Kind::DelayVsArlfa => "delay_vs_arlfa",
        Kind::DelayVsRate => "delay_vs_rate",
        Kind::Calibrate => "calibrate",
    }
}

/// SplitMix64 of the top seed mixed with the experiment index, kept to 63
/// bits so it fits a TOML integer.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    (z ^ (z >> 31)) >> 1
}

/// Hex prefix of the SHA-256 of the experiment's TOML form.
pub fn config_hash(spec: &ExperimentSpec) -> Result<String> {
    let text = toml::to_string(spec).map_err(|e| Error::Config(e.to_string()))?;
    let digest = Sha256::digest(text.as_bytes());
    let mut out = String::with_capacity(16);
    for b in &digest[..8] {
        write!(out, "{b:02x}").expect("write to string");
    }
    Ok(out)
}

/// Row schema for `arlfa`, `delay` and `rate` experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointRow {
    pub config_hash: String,
    pub experiment: String,
    pub detector: String,
    pub sensors: usize,
    pub mu0: f64,
    pub mu1: f64,
    pub sigma: f64,
    pub a: f64,
    pub a1: Option<f64>,
    pub eps1: Option<f64>,
    pub epsilon: Option<f64>,
    pub nu: u64,
    pub horizon: u64,
    pub metric: String,
    pub mean: f64,
    pub std_error: f64,
    pub n_reps: u64,
    pub truncated_reps: u64,
    pub seed: u64,
}

/// Row schema for the figure-style experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FigureRow {
    pub config_hash: String,
    pub experiment: String,
    pub detector: String,
    pub zeta: f64,
    pub epsilon: Option<f64>,
    pub a: f64,
    pub a1: Option<f64>,
    pub eps1: Option<f64>,
    pub arlfa: f64,
    pub arlfa_se: f64,
    pub rate: f64,
    pub rate_se: f64,
    pub delay: f64,
    pub delay_se: f64,
    pub n_reps: u64,
    pub truncated_reps: u64,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputFile {
    pub name: String,
    pub contents: Vec<u8>,
}

fn missing(spec: &ExperimentSpec, field: &str) -> Error {
    Error::Config(format!(
        "experiment {:?} ({}) needs `{field}`",
        spec.name.as_deref().unwrap_or(""),
        kind_label(spec.kind)
    ))
}

fn pairs_for(spec: &ExperimentSpec) -> Result<Vec<SharedPair>> {
    if spec.sensors == 0 {
        return Err(Error::Config("sensors must be at least 1".into()));
    }
    let g = gaussian_mean_shift(spec.mu0, spec.mu1, spec.sigma)?.shared();
    Ok(vec![g; spec.sensors])
}

fn levels_for(spec: &ExperimentSpec) -> Result<Vec<Level>> {
    if let Some(ls) = &spec.levels {
        if spec.a1.is_some() || spec.eps1.is_some() {
            return Err(Error::Config(
                "give either `levels` or `a1`/`eps1`, not both".into(),
            ));
        }
        return Ok(ls
            .iter()
            .map(|&[threshold, rate]| Level { threshold, rate })
            .collect());
    }
    let a1 = spec.a1.ok_or_else(|| missing(spec, "a1"))?;
    let rate = spec.eps1.ok_or_else(|| missing(spec, "eps1"))?;
    Ok(vec![Level {
        threshold: a1,
        rate,
    }])
}

fn build_detector(
    spec: &ExperimentSpec,
    pairs: &[SharedPair],
    kind: DetectorKind,
    a: f64,
) -> Result<Detector> {
    let det = match kind {
        DetectorKind::Cusum => Detector::Cusum { a },
        DetectorKind::RandomTx => Detector::RandomTx {
            a,
            epsilon: spec.epsilon.ok_or_else(|| missing(spec, "epsilon"))?,
        },
        DetectorKind::CusumAc => Detector::CusumAc(CusumAcConfig::build(
            pairs[0].as_ref(),
            a,
            levels_for(spec)?,
        )?),
    };
    det.validate(pairs.len())?;
    Ok(det)
}

fn positive_grid(spec: &ExperimentSpec, grid: &Option<Vec<f64>>, field: &str) -> Result<Vec<f64>> {
    let g = grid.clone().ok_or_else(|| missing(spec, field))?;
    if g.is_empty() || g.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::Config(format!(
            "`{field}` must be a nonempty list of positive numbers"
        )));
    }
    Ok(g)
}

/// Checks every field the experiment's kind needs without simulating.
pub fn validate(spec: &ExperimentSpec) -> Result<()> {
    let pairs = pairs_for(spec)?;
    if spec.n_reps < 2 {
        return Err(Error::Config("n_reps must be at least 2".into()));
    }
    if spec.nu < 1 {
        return Err(Error::Config("nu must be at least 1".into()));
    }
    match spec.kind {
        Kind::Trace | Kind::Arlfa | Kind::Delay | Kind::Rate => {
            let kind = spec.detector.ok_or_else(|| missing(spec, "detector"))?;
            let a = spec.a.ok_or_else(|| missing(spec, "a"))?;
            build_detector(spec, &pairs, kind, a)?;
            if spec.kind == Kind::Rate && spec.horizon < d_horizon() {
                return Err(Error::Config(format!(
                    "horizon must be at least {}",
                    d_horizon()
                )));
            }
        }
        Kind::DelayVsArlfa => {
            let grid = positive_grid(spec, &spec.zeta_grid, "zeta_grid")?;
            if grid.iter().any(|&z| z <= 1.0) {
                return Err(Error::Config("ARLFA targets must exceed 1".into()));
            }
            for &k in spec
                .detectors
                .as_deref()
                .unwrap_or(&[DetectorKind::Cusum, DetectorKind::CusumAc])
            {
                build_detector(spec, &pairs, k, f64::INFINITY)?;
            }
        }
        Kind::DelayVsRate => {
            let z = spec.zeta.ok_or_else(|| missing(spec, "zeta"))?;
            let eps = positive_grid(spec, &spec.epsilon_grid, "epsilon_grid")?;
            CalibrationTarget::new(z, 1.0)?;
            if eps.iter().any(|&e| e > 1.0) {
                return Err(Error::Config(
                    "epsilon_grid entries must lie in (0, 1]".into(),
                ));
            }
            grids(spec)?;
        }
        Kind::Calibrate => {
            let z = spec.zeta.ok_or_else(|| missing(spec, "zeta"))?;
            let e = spec.epsilon.ok_or_else(|| missing(spec, "epsilon"))?;
            CalibrationTarget::new(z, e)?;
            grids(spec)?;
        }
    }
    Ok(())
}

fn grids(spec: &ExperimentSpec) -> Result<(Vec<f64>, Vec<f64>)> {
    let a1 = spec.a1_grid.clone().unwrap_or_else(default_a1_grid);
    let e1 = spec.eps1_grid.clone().unwrap_or_else(default_eps1_grid);
    if a1.is_empty() || e1.is_empty() {
        return Err(Error::Config("search grids must be nonempty".into()));
    }
    if e1.iter().any(|&e| !(e > 1e-3 && e <= 1.0)) {
        return Err(Error::Config(
            "eps1_grid entries must lie in (1e-3, 1]".into(),
        ));
    }
    if a1.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
        return Err(Error::Config("a1_grid entries must be positive".into()));
    }
    Ok((a1, e1))
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn search_opts(spec: &ExperimentSpec, seed: u64) -> SearchOptions {
    SearchOptions {
        n_reps: spec.n_reps,
        seed,
        horizon: spec.horizon,
        cap: spec.cap,
        cycle_reps: spec.cycle_reps.unwrap_or(spec.n_reps),
        require_eprime: spec.require_eprime,
        screen: true,
    }
}

fn ac_params(det: &Detector) -> (Option<f64>, Option<f64>) {
    match det {
        Detector::CusumAc(c) => (Some(c.a1()), Some(c.levels[0].rate)),
        _ => (None, None),
    }
}

/// Runs one resolved experiment.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<OutputFile>> {
    validate(spec)?;
    let seed = spec
        .seed
        .ok_or_else(|| Error::Config("unresolved experiment seed".into()))?;
    let name = spec
        .name
        .clone()
        .unwrap_or_else(|| kind_label(spec.kind).into());
    let hash = config_hash(spec)?;
    let pairs = pairs_for(spec)?;
    let cap = spec.cap.unwrap_or(DEFAULT_CAP);
    let file = |suffix: &str, contents| OutputFile {
        name: format!("{name}{suffix}.csv"),
        contents,
    };

    match spec.kind {
        Kind::Trace => {
            let det = build_detector(spec, &pairs, spec.detector.unwrap(), spec.a.unwrap())?;
            let trace = simulate_trace(&det, &pairs, spec.nu, spec.max_steps, seed)?;
            let mut buf = Vec::new();
            write_trace(&mut buf, &trace)?;
            Ok(vec![file("", buf)])
        }
        Kind::Arlfa | Kind::Delay | Kind::Rate => {
            let kind = spec.detector.unwrap();
            let det = build_detector(spec, &pairs, kind, spec.a.unwrap())?;
            let (metric, est) = match spec.kind {
                Kind::Arlfa => (
                    "arlfa",
                    estimate_arlfa(&det, &pairs, spec.n_reps, cap, seed)?,
                ),
                Kind::Delay => (
                    "delay",
                    estimate_delay(
                        &det,
                        &pairs,
                        spec.n_reps,
                        seed,
                        spec.nu,
                        spec.conditioning,
                        cap,
                    )?,
                ),
                _ => (
                    "comm_rate",
                    estimate_comm_rate(
                        &det,
                        &pairs,
                        spec.horizon,
                        spec.n_reps,
                        seed,
                        spec.rate_mode,
                    )?,
                ),
            };
            let (a1, eps1) = ac_params(&det);
            let row = PointRow {
                config_hash: hash,
                experiment: name.clone(),
                detector: kind.label().into(),
                sensors: spec.sensors,
                mu0: spec.mu0,
                mu1: spec.mu1,
                sigma: spec.sigma,
                a: det.threshold(),
                a1,
                eps1,
                epsilon: spec.epsilon,
                nu: spec.nu,
                horizon: spec.horizon,
                metric: metric.into(),
                mean: est.mean,
                std_error: est.std_error,
                n_reps: est.n_reps,
                truncated_reps: est.truncated_reps,
                seed,
            };
            Ok(vec![file("", csv_bytes(&[row])?)])
        }
        Kind::DelayVsArlfa => {
            let kinds = spec
                .detectors
                .clone()
                .unwrap_or_else(|| vec![DetectorKind::Cusum, DetectorKind::CusumAc]);
            let mut rows = Vec::new();
            for &zeta in spec.zeta_grid.as_ref().unwrap() {
                for &kind in &kinds {
                    let det = build_detector(spec, &pairs, kind, f64::INFINITY)?;
                    rows.push(figure_point(
                        spec, &hash, &name, &pairs, kind, &det, zeta, None, seed,
                    )?);
                }
            }
            Ok(vec![file("", csv_bytes(&rows)?)])
        }
        Kind::DelayVsRate => {
            let zeta = spec.zeta.unwrap();
            let eps_grid = spec.epsilon_grid.clone().unwrap();
            let (a1_grid, e1_grid) = grids(spec)?;
            let opts = search_opts(spec, seed);
            let ceiling = eps_grid.iter().copied().fold(0.0, f64::max);
            let trace = evaluate_grid(&pairs, zeta, spec.nu, &a1_grid, &e1_grid, ceiling, &opts)?;

            let mut rows = Vec::new();
            let cusum = Detector::Cusum { a: f64::INFINITY };
            rows.push(figure_point(
                spec,
                &hash,
                &name,
                &pairs,
                DetectorKind::Cusum,
                &cusum,
                zeta,
                Some(1.0),
                seed,
            )?);
            for &eps in &eps_grid {
                let target = CalibrationTarget {
                    nu: spec.nu,
                    ..CalibrationTarget::new(zeta, eps)?
                };
                let res = assemble_result(&pairs, &target, trace.clone(), &opts)?;
                let c = &res.search_trace[res.chosen];
                rows.push(FigureRow {
                    config_hash: hash.clone(),
                    experiment: name.clone(),
                    detector: "cusum_ac".into(),
                    zeta,
                    epsilon: Some(eps),
                    a: res.config.a,
                    a1: Some(c.a1),
                    eps1: Some(c.eps1),
                    arlfa: res.report.arlfa.mean,
                    arlfa_se: res.report.arlfa.std_error,
                    rate: res.report.comm_rate.mean,
                    rate_se: res.report.comm_rate.std_error,
                    delay: res.report.delay.mean,
                    delay_se: res.report.delay.std_error,
                    n_reps: res.report.delay.n_reps,
                    truncated_reps: res.report.arlfa.truncated_reps,
                    feasible: res.feasible,
                });
                let rt = Detector::RandomTx {
                    a: f64::INFINITY,
                    epsilon: eps,
                };
                rows.push(figure_point(
                    spec,
                    &hash,
                    &name,
                    &pairs,
                    DetectorKind::RandomTx,
                    &rt,
                    zeta,
                    Some(eps),
                    seed,
                )?);
            }
            Ok(vec![file("", csv_bytes(&rows)?)])
        }
        Kind::Calibrate => {
            let target = CalibrationTarget {
                nu: spec.nu,
                ..CalibrationTarget::new(spec.zeta.unwrap(), spec.epsilon.unwrap())?
            };
            let (a1_grid, e1_grid) = grids(spec)?;
            let opts = search_opts(spec, seed);
            let res = search_two_level(&pairs, &target, &a1_grid, &e1_grid, &opts)?;
            let c = &res.search_trace[res.chosen];
            let row = FigureRow {
                config_hash: hash,
                experiment: name.clone(),
                detector: "cusum_ac".into(),
                zeta: target.zeta,
                epsilon: Some(target.epsilon),
                a: res.config.a,
                a1: Some(c.a1),
                eps1: Some(c.eps1),
                arlfa: res.report.arlfa.mean,
                arlfa_se: res.report.arlfa.std_error,
                rate: res.report.comm_rate.mean,
                rate_se: res.report.comm_rate.std_error,
                delay: res.report.delay.mean,
                delay_se: res.report.delay.std_error,
                n_reps: res.report.delay.n_reps,
                truncated_reps: res.report.arlfa.truncated_reps,
                feasible: res.feasible,
            };
            let mut trace = Vec::new();
            write_search_trace(&mut trace, &res.search_trace, &target, opts.require_eprime)?;
            Ok(vec![file("", csv_bytes(&[row])?), file("_trace", trace)])
        }
    }
}

/// Calibrates `det` to `zeta` and measures its delay and rate.
#[allow(clippy::too_many_arguments)]
fn figure_point(
    spec: &ExperimentSpec,
    hash: &str,
    name: &str,
    pairs: &[SharedPair],
    kind: DetectorKind,
    det: &Detector,
    zeta: f64,
    epsilon: Option<f64>,
    seed: u64,
) -> Result<FigureRow> {
    let cal = calibrate_threshold(det, pairs, zeta, spec.n_reps, seed, spec.cap)?;
    let det = det.with_threshold(cal.a);
    let cap = spec.cap.unwrap_or((100.0 * zeta).ceil() as u64);
    let delay = estimate_delay(
        &det,
        pairs,
        spec.n_reps,
        seed,
        spec.nu,
        spec.conditioning,
        cap,
    )?;
    let rate = match kind {
        DetectorKind::Cusum => McEstimate {
            mean: 1.0,
            std_error: 0.0,
            n_reps: spec.n_reps,
            seed,
            truncated_reps: 0,
        },
        _ => estimate_comm_rate(
            &det,
            pairs,
            spec.horizon,
            spec.n_reps,
            seed,
            RateMode::NoStop,
        )?,
    };
    let arlfa = cal.arlfa.unwrap_or(McEstimate {
        mean: 1.0,
        std_error: 0.0,
        n_reps: spec.n_reps,
        seed,
        truncated_reps: 0,
    });
    let (a1, eps1) = ac_params(&det);
    Ok(FigureRow {
        config_hash: hash.into(),
        experiment: name.into(),
        detector: kind.label().into(),
        zeta,
        epsilon,
        a: cal.a,
        a1,
        eps1,
        arlfa: arlfa.mean,
        arlfa_se: arlfa.std_error,
        rate: rate.mean,
        rate_se: rate.std_error,
        delay: delay.mean,
        delay_se: delay.std_error,
        n_reps: delay.n_reps,
        truncated_reps: arlfa.truncated_reps,
        feasible: true,
    })
}

/// Runs a whole file: validates everything first, then runs in order.
pub fn run_file(resolved: &ExperimentFile) -> Result<Vec<OutputFile>> {
    for e in &resolved.experiments {
        validate(e)?;
    }
    let mut names = std::collections::HashSet::new();
    for e in &resolved.experiments {
        if !names.insert(e.name.clone()) {
            return Err(Error::Config(format!(
                "duplicate experiment name {:?}",
                e.name
            )));
        }
    }
    let mut out = Vec::new();
    for e in &resolved.experiments {
        out.extend(run_experiment(e)?);
    }
    Ok(out)
}

/// Canned figure experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Figure {
    Fig4,
    Fig5,
    Fig6,
}

impl std::str::FromStr for Figure {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fig4" => Ok(Figure::Fig4),
            "fig5" => Ok(Figure::Fig5),
            "fig6" => Ok(Figure::Fig6),
            other => Err(Error::Config(format!(
                "unknown figure {other:?}; expected fig4, fig5 or fig6"
            ))),
        }
    }
}

/// The experiment file behind a canned figure, without a seed.
pub fn figure_spec(fig: Figure) -> ExperimentFile {
    let mut e = match fig {
        Figure::Fig4 | Figure::Fig5 => {
            let mut e = ExperimentSpec::new(Kind::DelayVsArlfa);
            let (a1, eps1, name) = if fig == Figure::Fig4 {
                (0.78, 0.63, "fig4")
            } else {
                (0.79, 0.27, "fig5")
            };
            e.name = Some(name.into());
            e.a1 = Some(a1);
            e.eps1 = Some(eps1);
            e.detectors = Some(vec![DetectorKind::Cusum, DetectorKind::CusumAc]);
            e.zeta_grid = Some(vec![1e3, 2e3, 5e3, 1e4]);
            e
        }
        Figure::Fig6 => {
            let mut e = ExperimentSpec::new(Kind::DelayVsRate);
            e.name = Some("fig6".into());
            e.zeta = Some(1e4);
            e.epsilon_grid = Some((1..=10).map(|i| i as f64 / 10.0).collect());
            e.a1_grid = Some(vec![0.4, 0.8, 1.2, 1.6, 1.8, 2.0, 2.4]);
            e.eps1_grid = Some(vec![
                0.05, 0.06, 0.07, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0,
            ]);
            e
        }
    };
    e.sensors = 3;
    ExperimentFile {
        seed: None,
        run: None,
        experiments: vec![e],
    }
}
