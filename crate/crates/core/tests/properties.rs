mod props;

use proptest::prelude::*;

proptest! {
    #[test]
    fn statistics_stay_nonnegative(xs in props::observations(), a1 in 0.1f64..3.0, eps1 in 0.01f64..1.0, seed: u64) {
        props::nonnegative(&xs, a1, eps1, seed)?;
    }

    #[test]
    fn upward_crossing_resets_to_a1(xs in props::observations(), a1 in 0.1f64..3.0, eps1 in 0.01f64..1.0) {
        props::reset_exact(&xs, a1, eps1)?;
    }

    #[test]
    fn full_rate_is_dominated_by_cusum(xs in props::observations(), a1 in 0.1f64..3.0) {
        props::full_rate_dominated(&xs, a1)?;
    }

    #[test]
    fn one_sensor_fusion_matches_single_step(
        xs in props::observations(), a1 in 0.1f64..2.0, eps1 in 0.01f64..1.0, extra in 0.1f64..4.0,
    ) {
        props::single_sensor_fusion(&xs, a1, eps1, a1 + extra)?;
    }

    #[test]
    fn censored_kl_monotone_in_rate(mu1 in 0.1f64..2.5, e1 in 0.01f64..1.0, e2 in 0.01f64..1.0) {
        props::kl_monotone(mu1, e1.min(e2), e1.max(e2))?;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn optimizer_matches_exhaustive_grid(mu1 in 0.1f64..2.5, eps in 0.02f64..0.98) {
        props::optimizer_matches_grid(mu1, eps)?;
    }

    #[test]
    fn reruns_are_bit_identical(seed: u64, a1 in 0.3f64..1.5, eps1 in 0.05f64..1.0) {
        props::deterministic(seed, a1, eps1)?;
    }
}

#[test]
fn kl_monotone_on_fixed_grid() {
    let g = props::pair(0.5);
    let mut last = 0.0;
    for i in 1..=100 {
        let k = cusum_ac::optimize(g.as_ref(), i as f64 / 100.0)
            .unwrap()
            .post_kl;
        assert!(k >= last - 1e-9, "rate {}: {k} < {last}", i as f64 / 100.0);
        last = k;
    }
    assert!((last - 0.125).abs() < 1e-9);
}
