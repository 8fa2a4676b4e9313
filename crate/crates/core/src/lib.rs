//! Minimax quickest change detection over rate-limited sensor links.
//!
//! Sensors censor their observations with a send/no-send rule chosen by the
//! fusion center from the current CuSum statistic (CuSum-AC). The crate
//! provides the observation models, the optimal single-interval censoring
//! rules, the detector state machines, a replicated Monte Carlo engine, the
//! renewal-cycle diagnostics and the parameter search used to tune the
//! detector against an ARLFA target and a communication budget.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod censoring;
pub mod detectors;
mod error;
pub mod experiment;
pub mod model;
pub mod montecarlo;
mod quadrature;
pub mod renewal;

pub use calibration::{
    assemble_result, calibrate_threshold, evaluate_grid, network_config, search_two_level,
    select_candidate, CalibrationResult, CalibrationTarget, CandidateEval, SearchOptions,
    ThresholdCalibration,
};
pub use censoring::{censored_llr, optimize, post_change_rate, CensoringStrategy};
pub use detectors::{
    cusum_ac_multi_step, cusum_ac_step, cusum_step, random_tx_cusum_step, CusumAcConfig, Detector,
    DetectorState, Level,
};
pub use error::{Error, Result};
pub use experiment::{ExperimentFile, ExperimentSpec, Figure};
pub use model::{
    gaussian_mean_shift, kl_divergence, DistributionPair, GaussianMeanShift, KlMethod, KlReport,
    SharedPair,
};
pub use montecarlo::{
    estimate_arlfa, estimate_comm_rate, estimate_delay, evaluate, DelayConditioning, EvalOptions,
    McEstimate, PerfReport, RateMode,
};
pub use renewal::{
    check_eprime_membership, estimate_cycle, estimate_cycle_for, feedback_expectation,
    feedback_expectation_se, rate_upper_bound, rate_upper_bound_se, rate_upper_bound_unconditional,
    simulate_feedback_per_alarm, CycleStats, EprimeCheck, EprimeVerdict,
};
