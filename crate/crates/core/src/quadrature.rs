//! Globally adaptive Gauss-Kronrod (7/15) quadrature.

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_41,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
// Gauss weights for XGK[1], XGK[3], XGK[5], XGK[7].
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

const MAX_INTERVALS: usize = 2000;

#[derive(Debug, Clone, Copy)]
pub(crate) struct Quad {
    pub value: f64,
    #[allow(dead_code)]
    pub abs_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum QuadFailure {
    NotFinite,
    NoConvergence,
}

fn kronrod<F: Fn(f64) -> f64>(f: &F, lo: f64, hi: f64) -> (f64, f64) {
    let center = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    let fc = f(center);
    let mut kron = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for (j, (&x, &w)) in XGK[..7].iter().zip(&WGK[..7]).enumerate() {
        let dx = half * x;
        let pair = f(center - dx) + f(center + dx);
        kron += w * pair;
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    (kron * half, ((kron - gauss) * half).abs())
}

/// Integrates `f` over a finite interval to absolute tolerance `tol`.
pub(crate) fn integrate<F: Fn(f64) -> f64>(
    f: F,
    lo: f64,
    hi: f64,
    tol: f64,
) -> Result<Quad, QuadFailure> {
    if lo == hi {
        return Ok(Quad {
            value: 0.0,
            abs_error: 0.0,
        });
    }
    let (value, err) = kronrod(&f, lo, hi);
    let mut pieces = vec![(lo, hi, value, err)];
    let mut total = value;
    let mut total_err = err;
    while total_err > tol {
        if pieces.len() >= MAX_INTERVALS {
            return Err(QuadFailure::NoConvergence);
        }
        let (worst, _) = pieces
            .iter()
            .enumerate()
            .max_by(|a, b| a.1 .3.total_cmp(&b.1 .3))
            .expect("nonempty");
        let (a, b, v, e) = pieces.swap_remove(worst);
        let mid = 0.5 * (a + b);
        let (v1, e1) = kronrod(&f, a, mid);
        let (v2, e2) = kronrod(&f, mid, b);
        total += v1 + v2 - v;
        total_err += e1 + e2 - e;
        pieces.push((a, mid, v1, e1));
        pieces.push((mid, b, v2, e2));
        if !total.is_finite() {
            return Err(QuadFailure::NotFinite);
        }
        // Re-sum occasionally so cancellation in the running totals cannot stall.
        if pieces.len() % 64 == 0 {
            total = pieces.iter().map(|p| p.2).sum();
            total_err = pieces.iter().map(|p| p.3).sum();
        }
    }
    if !total.is_finite() {
        return Err(QuadFailure::NotFinite);
    }
    Ok(Quad {
        value: total,
        abs_error: total_err,
    })
}

/// Integrates `f` over `(lo, hi)` where either end may be infinite.
pub(crate) fn integrate_unbounded<F: Fn(f64) -> f64>(
    f: F,
    lo: f64,
    hi: f64,
    tol: f64,
) -> Result<Quad, QuadFailure> {
    let guard = |v: f64| if v.is_finite() { v } else { 0.0 };
    match (lo.is_finite(), hi.is_finite()) {
        (true, true) => integrate(f, lo, hi, tol),
        (false, false) => integrate(
            |t| {
                let d = 1.0 - t * t;
                guard(f(t / d) * (1.0 + t * t) / (d * d))
            },
            -1.0,
            1.0,
            tol,
        ),
        (true, false) => integrate(
            |t| {
                let d = 1.0 - t;
                guard(f(lo + t / d) / (d * d))
            },
            0.0,
            1.0,
            tol,
        ),
        (false, true) => integrate(|t| guard(f(hi - (1.0 - t) / t) / (t * t)), 0.0, 1.0, tol),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_is_exact() {
        let q = integrate(|x| x * x * x - 2.0 * x, 0.0, 3.0, 1e-12).unwrap();
        assert!((q.value - (81.0 / 4.0 - 9.0)).abs() < 1e-12);
    }

    #[test]
    fn gaussian_mass_over_real_line() {
        let norm = (2.0 * std::f64::consts::PI).sqrt();
        let q = integrate_unbounded(
            |x| (-0.5 * x * x).exp() / norm,
            f64::NEG_INFINITY,
            f64::INFINITY,
            1e-10,
        )
        .unwrap();
        assert!((q.value - 1.0).abs() < 1e-10);
        let half = integrate_unbounded(|x| (-0.5 * x * x).exp() / norm, 0.0, f64::INFINITY, 1e-10)
            .unwrap();
        assert!((half.value - 0.5).abs() < 1e-10);
        let lower = integrate_unbounded(
            |x| (-0.5 * x * x).exp() / norm,
            f64::NEG_INFINITY,
            1.0,
            1e-10,
        )
        .unwrap();
        assert!((lower.value - 0.841_344_746_068_542_9).abs() < 1e-10);
    }

    #[test]
    fn divergent_integral_fails() {
        assert!(integrate_unbounded(|x| 1.0 / (1.0 + x.abs()), 0.0, f64::INFINITY, 1e-8).is_err());
    }
}
