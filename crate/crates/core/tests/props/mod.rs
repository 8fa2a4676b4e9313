//! Property checks shared by the proptest suite and the acceptance binary.

#![allow(dead_code)]

use cusum_ac::{
    cusum_ac_multi_step, cusum_ac_step, cusum_step, estimate_arlfa, estimate_comm_rate,
    estimate_delay, gaussian_mean_shift, optimize, random_tx_cusum_step, CusumAcConfig,
    DelayConditioning, Detector, DetectorState, RateMode, SharedPair,
};
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

/// Large enough that no generated path stops.
pub const NEVER: f64 = 1e9;

pub fn pair(mu1: f64) -> SharedPair {
    gaussian_mean_shift(0.0, mu1, 1.0).unwrap().shared()
}

fn ok<T>(r: cusum_ac::Result<T>) -> Result<T, TestCaseError> {
    r.map_err(|e| TestCaseError::fail(e.to_string()))
}

pub fn observations() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4.0f64..5.0, 1..300)
}

pub fn nonnegative(xs: &[f64], a1: f64, eps1: f64, seed: u64) -> Result<(), TestCaseError> {
    let g = pair(0.5);
    let cfg = ok(CusumAcConfig::two_level(g.as_ref(), NEVER, a1, eps1))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut c, mut s, mut r) = (
        DetectorState::default(),
        cfg.initial_state(),
        DetectorState::default(),
    );
    for &x in xs {
        c = ok(cusum_step(c, g.llr(x), NEVER))?;
        s = ok(cusum_ac_step(s, &cfg, x, g.as_ref()))?.0;
        r = ok(random_tx_cusum_step(
            r,
            x,
            g.as_ref(),
            eps1,
            NEVER,
            &mut rng,
        ))?
        .0;
        prop_assert!(
            c.s >= 0.0 && s.s >= 0.0 && r.s >= 0.0,
            "{} {} {}",
            c.s,
            s.s,
            r.s
        );
    }
    Ok(())
}

/// An upward crossing of `a1` lands exactly on `a1`; otherwise the update
/// is the plain reflected sum.
pub fn reset_exact(xs: &[f64], a1: f64, eps1: f64) -> Result<(), TestCaseError> {
    let g = pair(0.5);
    let cfg = ok(CusumAcConfig::two_level(g.as_ref(), NEVER, a1, eps1))?;
    let mut s = cfg.initial_state();
    for &x in xs {
        let prev = s;
        let (_, l) = cfg.strategy(0, prev.active_level).censor(g.as_ref(), x);
        let tilde = (prev.s + l).max(0.0);
        s = ok(cusum_ac_step(s, &cfg, x, g.as_ref()))?.0;
        let expect = if prev.s < a1 && tilde >= a1 {
            a1
        } else {
            tilde
        };
        prop_assert_eq!(
            s.s.to_bits(),
            expect.to_bits(),
            "prev {} tilde {}",
            prev.s,
            tilde
        );
        prop_assert_eq!(s.active_level, cfg.level_of(s.s));
    }
    Ok(())
}

/// With full-rate censoring at every level, CuSum-AC never exceeds CuSum.
pub fn full_rate_dominated(xs: &[f64], a1: f64) -> Result<(), TestCaseError> {
    let g = pair(0.5);
    let cfg = ok(CusumAcConfig::two_level(g.as_ref(), NEVER, a1, 1.0))?;
    let (mut c, mut s) = (DetectorState::default(), cfg.initial_state());
    for &x in xs {
        c = ok(cusum_step(c, g.llr(x), NEVER))?;
        s = ok(cusum_ac_step(s, &cfg, x, g.as_ref()))?.0;
        prop_assert!(s.s <= c.s, "{} > {}", s.s, c.s);
    }
    Ok(())
}

/// The fused multi-sensor update with one sensor is the single-sensor update.
pub fn single_sensor_fusion(xs: &[f64], a1: f64, eps1: f64, a: f64) -> Result<(), TestCaseError> {
    let g = pair(0.5);
    let cfg = ok(CusumAcConfig::two_level(g.as_ref(), a, a1, eps1))?;
    let det = Detector::CusumAc(cfg.clone());
    let pairs = [g.clone()];
    let mut coin = ChaCha8Rng::seed_from_u64(0);
    let (mut s1, mut s2, mut s3) = (
        cfg.initial_state(),
        cfg.initial_state(),
        cfg.initial_state(),
    );
    for &x in xs {
        if s1.stopped {
            break;
        }
        let (n1, sent1) = ok(cusum_ac_step(s1, &cfg, x, g.as_ref()))?;
        let (n2, sent2) = ok(cusum_ac_multi_step(s2, &cfg, &[x], &pairs))?;
        let (n3, sent3) = ok(det.step(s3, &[x], &pairs, &mut coin))?;
        prop_assert_eq!(n1, n2);
        prop_assert_eq!(n1, n3);
        prop_assert_eq!(n1.s.to_bits(), n2.s.to_bits());
        prop_assert_eq!(vec![sent1], sent2);
        prop_assert_eq!(vec![sent1], sent3);
        (s1, s2, s3) = (n1, n2, n3);
    }
    Ok(())
}

/// The optimal post-change divergence is nondecreasing in the send rate.
pub fn kl_monotone(mu1: f64, e_lo: f64, e_hi: f64) -> Result<(), TestCaseError> {
    let g = pair(mu1);
    let lo = ok(optimize(g.as_ref(), e_lo))?.post_kl;
    let hi = ok(optimize(g.as_ref(), e_hi))?.post_kl;
    prop_assert!(lo <= hi + 1e-9, "psi({e_lo}) = {lo} > psi({e_hi}) = {hi}");
    Ok(())
}

/// Post-change divergence of N(0,1) -> N(mu,1) when no-send is the
/// interval `[l, h]`, in closed form.
pub fn interval_kl(mu: f64, l: f64, h: f64) -> f64 {
    let n = Normal::standard();
    let p1 = n.cdf(h - mu) - n.cdf(l - mu);
    let p0 = n.cdf(h) - n.cdf(l);
    let ex1 = mu * p1 + n.pdf(l - mu) - n.pdf(h - mu);
    let inside = mu * ex1 - 0.5 * mu * mu * p1;
    let sent = 0.5 * mu * mu - inside;
    let censored = if p1 > 0.0 { p1 * (p1 / p0).ln() } else { 0.0 };
    sent + censored
}

/// Best divergence over 2000 no-send intervals of pre-change mass `1 - eps`.
pub fn grid_oracle(mu: f64, eps: f64) -> f64 {
    let n = Normal::standard();
    (0..2000)
        .map(|i| {
            let p = eps * (i as f64 + 0.5) / 2000.0;
            interval_kl(mu, n.inverse_cdf(p), n.inverse_cdf(p + 1.0 - eps))
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn optimizer_matches_grid(mu1: f64, eps: f64) -> Result<(), TestCaseError> {
    let s = ok(optimize(pair(mu1).as_ref(), eps))?;
    let oracle = grid_oracle(mu1, eps);
    prop_assert!(
        (s.post_kl - oracle).abs() <= 1e-4,
        "optimizer {} oracle {}",
        s.post_kl,
        oracle
    );
    let (l, h) = (s.nosend_x_lo.unwrap(), s.nosend_x_hi.unwrap());
    prop_assert!((interval_kl(mu1, l, h) - s.post_kl).abs() <= 1e-6);
    Ok(())
}

/// Fixed seed gives bit-identical estimates, whatever the thread count.
pub fn deterministic(seed: u64, a1: f64, eps1: f64) -> Result<(), TestCaseError> {
    let g = pair(0.5);
    let pairs = vec![g.clone(); 2];
    let det = Detector::CusumAc(ok(CusumAcConfig::two_level(g.as_ref(), 2.5, a1, eps1))?);
    let run = || -> cusum_ac::Result<[u64; 3]> {
        let arl = estimate_arlfa(&det, &pairs, 40, 1_000_000, seed)?;
        let d = estimate_delay(
            &det,
            &pairs,
            40,
            seed,
            5,
            DelayConditioning::None,
            1_000_000,
        )?;
        let r = estimate_comm_rate(&det, &pairs, 10_000, 4, seed, RateMode::NoStop)?;
        Ok([arl.mean.to_bits(), d.mean.to_bits(), r.mean.to_bits()])
    };
    let first = ok(run())?;
    for threads in [1, 3] {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        prop_assert_eq!(ok(pool.install(run))?, first);
    }
    Ok(())
}
