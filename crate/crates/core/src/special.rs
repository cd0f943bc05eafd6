//! Standard normal special functions in 64-bit precision.
//!
//! `erf` uses the positive-term series `e^{-x²} Σ 2ⁿx^{2n+1}/(2n+1)!!` up to
//! |x| = 3 and a continued fraction for `erfc` beyond. `erf_inv` uses a
//! Maclaurin series on the small arguments that dominate basis sampling and
//! a Halley-polished rational guess elsewhere.

use std::f64::consts::{FRAC_1_SQRT_2, FRAC_2_SQRT_PI as TWO_OVER_SQRT_PI, PI, SQRT_2};
use std::sync::LazyLock;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Below this magnitude `erf_inv` is evaluated from its power series.
pub const ERF_INV_SERIES_LIMIT: f64 = 0.1;

const SERIES_TERMS: usize = 12;
const ERF_SERIES_LIMIT: f64 = 3.0;

// erf_inv(x) = sum_k SERIES[k] * z^(2k+1) with z = sqrt(pi)/2 * x.
static SERIES: LazyLock<[f64; SERIES_TERMS]> = LazyLock::new(|| {
    let mut c = [0.0f64; SERIES_TERMS];
    c[0] = 1.0;
    for k in 1..SERIES_TERMS {
        let mut acc = 0.0;
        for m in 0..k {
            acc += c[m] * c[k - 1 - m] / (((m + 1) * (2 * m + 1)) as f64);
        }
        c[k] = acc;
    }
    let mut out = [0.0f64; SERIES_TERMS];
    for (k, o) in out.iter_mut().enumerate() {
        *o = c[k] / (2 * k + 1) as f64;
    }
    out
});

fn erf_series(x: f64) -> f64 {
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    let mut n = 0u32;
    loop {
        n += 1;
        term *= 2.0 * x2 / (2 * n + 1) as f64;
        sum += term;
        if term <= sum * 1e-17 || n > 200 {
            break;
        }
    }
    TWO_OVER_SQRT_PI * (-x2).exp() * sum
}

// erfc(x) for x >= 3 by modified Lentz on
// erfc(x) = e^{-x²}/√π · 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...)))).
fn erfc_fraction(x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut f = x;
    let mut c = x;
    let mut d = 0.0;
    for n in 1..300 {
        let a = n as f64 * 0.5;
        d = x + a * d;
        d = if d.abs() < TINY { 1.0 / TINY } else { 1.0 / d };
        c = x + a / c;
        if c.abs() < TINY {
            c = TINY;
        }
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x * x).exp() / (PI.sqrt() * f)
}

/// Error function.
pub fn erf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    let ax = x.abs();
    let v = if ax < ERF_SERIES_LIMIT {
        erf_series(ax)
    } else {
        1.0 - erfc_fraction(ax)
    };
    v.copysign(x)
}

/// Complementary error function.
pub fn erfc(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x >= ERF_SERIES_LIMIT {
        erfc_fraction(x)
    } else if x <= -ERF_SERIES_LIMIT {
        2.0 - erfc_fraction(-x)
    } else {
        1.0 - erf(x)
    }
}

/// Standard normal density.
#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

// Single-precision rational guess (Giles 2010), ~1e-7 relative.
fn erf_inv_guess(x: f64) -> f64 {
    let mut w = -((1.0 - x) * (1.0 + x)).ln();
    let p = if w < 5.0 {
        w -= 2.5;
        let mut p = 2.810_226_36e-08;
        p = 3.432_739_39e-07 + p * w;
        p = -3.523_387_7e-06 + p * w;
        p = -4.391_506_54e-06 + p * w;
        p = 0.000_218_580_87 + p * w;
        p = -0.001_253_725_03 + p * w;
        p = -0.004_177_681_64 + p * w;
        p = 0.246_640_727 + p * w;
        1.501_409_41 + p * w
    } else {
        w = w.sqrt() - 3.0;
        let mut p = -0.000_200_214_257;
        p = 0.000_100_950_558 + p * w;
        p = 0.001_349_343_22 + p * w;
        p = -0.003_673_428_44 + p * w;
        p = 0.005_739_507_73 + p * w;
        p = -0.007_622_461_3 + p * w;
        p = 0.009_438_870_47 + p * w;
        p = 1.001_674_06 + p * w;
        2.832_976_82 + p * w
    };
    p * x
}

/// Inverse error function on (-1, 1).
pub fn erf_inv(x: f64) -> f64 {
    if x.is_nan() || x <= -1.0 || x >= 1.0 {
        return if x == 1.0 {
            f64::INFINITY
        } else if x == -1.0 {
            f64::NEG_INFINITY
        } else {
            f64::NAN
        };
    }
    if x.abs() <= ERF_INV_SERIES_LIMIT {
        let z = 0.5 * PI.sqrt() * x;
        let z2 = z * z;
        let mut acc = 0.0;
        for c in SERIES.iter().rev() {
            acc = acc * z2 + c;
        }
        return acc * z;
    }
    let mut y = erf_inv_guess(x);
    for _ in 0..2 {
        // Halley step on erf(y) - x, using f'' = -2y f'.
        let slope = TWO_OVER_SQRT_PI * (-y * y).exp();
        if slope == 0.0 {
            break;
        }
        let u = (erf(y) - x) / slope;
        y -= u / (1.0 + y * u);
    }
    y
}

/// Standard normal quantile, `Φ⁻¹(p)` for p in (0, 1).
pub fn normal_quantile(p: f64) -> f64 {
    SQRT_2 * erf_inv(2.0 * p - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Composite Simpson quadrature of 2/√π ∫ₐᵇ e^{-t²} dt.
    fn gauss_integral(a: f64, b: f64) -> f64 {
        let n = 20_000;
        let h = (b - a) / n as f64;
        let mut acc = 0.0;
        for i in 0..=n {
            let t = a + h * i as f64;
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc += w * (-t * t).exp();
        }
        TWO_OVER_SQRT_PI * acc * h / 3.0
    }

    fn erf_quadrature(x: f64) -> f64 {
        gauss_integral(0.0, x)
    }

    #[test]
    fn erf_matches_quadrature() {
        for i in 0..=120 {
            let x = -3.0 + 0.05 * i as f64;
            let a = erf(x);
            let b = erf_quadrature(x);
            assert!((a - b).abs() <= 5e-14 * b.abs() + 1e-16, "x={x}: {a} vs {b}");
        }
    }

    #[test]
    fn erfc_tail_is_accurate() {
        for &x in &[3.0, 3.5, 4.0, 5.0] {
            let want = gauss_integral(x, x + 8.0);
            assert!(((erfc(x) - want) / want).abs() < 1e-9, "x={x}");
        }
        // Asymptotic expansion far in the tail.
        let x = 10.0f64;
        let asym = (-x * x).exp() / (x * PI.sqrt()) * (1.0 - 0.5 / (x * x) + 0.75 / x.powi(4));
        assert!(((erfc(x) - asym) / asym).abs() < 1e-4);
        assert!((erf(3.0) + erfc(3.0) - 1.0).abs() < 1e-16);
    }

    #[test]
    fn erf_inv_round_trips_against_independent_erf() {
        let points = [
            1e-12, 1e-6, 1e-3, 0.01, 0.05, 0.0999, 0.1, 0.1001, 0.2, 0.5, 0.68, 0.9, 0.99, 0.9999,
        ];
        for &x in points.iter().chain(points.iter().map(|p| -p).collect::<Vec<_>>().iter()) {
            let y = erf_inv(x);
            let back = erf_quadrature(y);
            assert!(((back - x) / x).abs() < 1e-12, "x={x}, erf(erf_inv(x))={back}");
        }
    }

    #[test]
    fn series_branch_agrees_with_halley_branch() {
        let x = ERF_INV_SERIES_LIMIT;
        let series = erf_inv(x);
        let mut y = erf_inv_guess(x);
        for _ in 0..3 {
            let slope = TWO_OVER_SQRT_PI * (-y * y).exp();
            let u = (erf(y) - x) / slope;
            y -= u / (1.0 + y * u);
        }
        assert!(((series - y) / y).abs() < 1e-15);
    }

    #[test]
    fn quantile_relative_error_below_1e9() {
        // Oracle: bisection on the quadrature erf.
        for &p in &[0.02, 0.3, 0.45, 0.4999, 0.5001, 0.55, 0.7, 0.841_344_746_068_542_9, 0.975] {
            let (mut lo, mut hi) = (-10.0f64, 10.0f64);
            for _ in 0..100 {
                let mid = 0.5 * (lo + hi);
                if 0.5 * (1.0 + erf_quadrature(mid / SQRT_2)) < p {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let want = 0.5 * (lo + hi);
            let got = normal_quantile(p);
            assert!(((got - want) / want).abs() < 1e-9, "p={p}: {got} vs {want}");
        }
    }

    #[test]
    fn pdf_and_cdf_reference_points() {
        assert!((normal_pdf(1.0) - 0.241_970_724_519_143_37).abs() < 1e-16);
        assert!((normal_cdf(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-16);
        assert!((normal_cdf(-5.0) - 2.866_515_718_791_939e-7).abs() < 1e-20);
    }

    #[test]
    fn out_of_domain() {
        assert!(erf_inv(1.5).is_nan());
        assert_eq!(erf_inv(1.0), f64::INFINITY);
        assert_eq!(erf_inv(0.0), 0.0);
    }
}
