//! Scalar special functions: gamma-family CDFs, the normal CDF, and the
//! one-dimensional q-exponential law `π_q(u) ∝ exp(-|u|^q / 2)`.
//!
//! Log-gamma and the regularized incomplete gamma functions come from
//! `statrs`; everything built on top of them (quantiles, the π_q law) is
//! implemented here.

use std::f64::consts::{FRAC_1_SQRT_2, LN_2, PI};

use statrs::function::{erf, gamma};

pub use statrs::function::gamma::ln_gamma;

/// Regularized lower incomplete gamma `P(a, x)`.
pub fn gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x.is_infinite() {
        1.0
    } else {
        gamma::gamma_lr(a, x)
    }
}

/// Regularized upper incomplete gamma `Q(a, x) = 1 - P(a, x)`.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else if x.is_infinite() {
        0.0
    } else {
        gamma::gamma_ur(a, x)
    }
}

/// CDF of the chi-squared law with `dof` degrees of freedom.
pub fn chi2_cdf(x: f64, dof: f64) -> f64 {
    gamma_p(0.5 * dof, 0.5 * x)
}

/// Quantile of the chi-squared law.
pub fn chi2_quantile(p: f64, dof: f64) -> f64 {
    2.0 * gamma_p_inv(0.5 * dof, p)
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erf::erfc(-z * FRAC_1_SQRT_2)
}

pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erf::erfc_inv(2.0 * p)
}

/// Solves `Q(a, y) = target` for `y >= 0`.
///
/// Newton steps are kept inside a bracket that is maintained throughout, and
/// any step leaving the bracket falls back to bisection. Converges to a
/// relative tolerance of about 1e-14 in `y`.
pub fn gamma_q_inv(a: f64, target: f64) -> f64 {
    if target >= 1.0 {
        return 0.0;
    }
    if target <= 0.0 {
        return f64::INFINITY;
    }
    solve_gamma(a, target, Tail::Upper)
}

/// Solves `P(a, y) = target` for `y >= 0`.
pub fn gamma_p_inv(a: f64, target: f64) -> f64 {
    if target <= 0.0 {
        return 0.0;
    }
    if target >= 1.0 {
        return f64::INFINITY;
    }
    solve_gamma(a, target, Tail::Lower)
}

#[derive(Clone, Copy)]
enum Tail {
    Lower,
    Upper,
}

fn solve_gamma(a: f64, target: f64, tail: Tail) -> f64 {
    // residual is increasing in y for both tails after the sign flip
    let residual = |y: f64| match tail {
        Tail::Lower => gamma_p(a, y) - target,
        Tail::Upper => target - gamma_q(a, y),
    };
    let ln_norm = ln_gamma(a);
    let density = |y: f64| ((a - 1.0) * y.ln() - y - ln_norm).exp();

    let mut lo = 0.0_f64;
    let mut hi = a.max(1.0);
    while residual(hi) < 0.0 {
        lo = hi;
        hi *= 2.0;
        if hi > 1e300 {
            return f64::INFINITY;
        }
    }
    let mut y = 0.5 * (lo + hi);
    for _ in 0..300 {
        let f = residual(y);
        if f == 0.0 {
            return y;
        }
        if f < 0.0 {
            lo = y;
        } else {
            hi = y;
        }
        let slope = density(y);
        let mut next = if slope > 0.0 && slope.is_finite() {
            y - f / slope
        } else {
            f64::NAN
        };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - y).abs() <= 1e-15 * y.abs().max(f64::MIN_POSITIVE) || hi - lo <= 1e-15 * hi {
            return next;
        }
        y = next;
    }
    y
}

/// Log of the normalizing constant of `π_q`: `∫ exp(-|u|^q/2) du = 2^{1+1/q} Γ(1/q) / q`.
pub fn piq_log_normalizer(q: f64) -> f64 {
    (1.0 + 1.0 / q) * LN_2 + ln_gamma(1.0 / q) - q.ln()
}

/// Normalized density of `π_q`.
pub fn piq_pdf(u: f64, q: f64) -> f64 {
    (-0.5 * u.abs().powf(q) - piq_log_normalizer(q)).exp()
}

/// CDF of `π_q`; `|u|^q` follows Gamma(shape 1/q, rate 1/2) with a symmetric sign.
pub fn piq_cdf(u: f64, q: f64) -> f64 {
    let tail = 0.5 * gamma_q(1.0 / q, 0.5 * u.abs().powf(q));
    if u >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Quantile of `π_q`, computed through the smaller tail for accuracy.
pub fn piq_quantile(p: f64, q: f64) -> f64 {
    if p == 0.5 {
        return 0.0;
    }
    let tail = p.min(1.0 - p);
    let magnitude = piq_upper_tail_inv(tail, q);
    if p > 0.5 {
        magnitude
    } else {
        -magnitude
    }
}

/// Returns `m >= 0` with `P(U > m) = tail` for `U ~ π_q`, `tail <= 1/2`.
fn piq_upper_tail_inv(tail: f64, q: f64) -> f64 {
    let y = gamma_q_inv(1.0 / q, 2.0 * tail);
    (2.0 * y).powf(1.0 / q)
}

/// Maps a standard normal value to the `π_q` value with the same CDF level,
/// `F_q^{-1}(Φ(z))`, together with its derivative in `z`.
pub fn normal_to_piq(z: f64, q: f64) -> (f64, f64) {
    if q == 2.0 {
        return (z, 1.0);
    }
    if z == 0.0 {
        return (0.0, normal_pdf(0.0) / piq_pdf(0.0, q));
    }
    // Φ(-|z|) avoids cancellation in the far tail
    let tail = normal_cdf(-z.abs());
    let magnitude = piq_upper_tail_inv(tail, q);
    let value = magnitude.copysign(z);
    let slope = normal_pdf(z) / piq_pdf(value, q);
    (value, slope)
}

/// Inverse of [`normal_to_piq`]: `Φ^{-1}(F_q(u))`.
pub fn piq_to_normal(u: f64, q: f64) -> f64 {
    if q == 2.0 || u == 0.0 {
        return u;
    }
    let tail = 0.5 * gamma_q(1.0 / q, 0.5 * u.abs().powf(q));
    (-normal_quantile(tail)).copysign(u)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chi2_quantile_inverts_cdf() {
        for &dof in &[1.0, 2.0, 4.0, 10.0, 57.0] {
            for &p in &[1e-6, 0.01, 0.3, 0.5, 0.9, 0.999] {
                let x = chi2_quantile(p, dof);
                assert!((chi2_cdf(x, dof) - p).abs() < 1e-12, "dof={dof} p={p}");
            }
        }
    }

    #[test]
    fn piq_q2_is_standard_normal() {
        for &u in &[-3.0, -0.4, 0.0, 1.3, 2.5] {
            assert!((piq_pdf(u, 2.0) - normal_pdf(u)).abs() < 1e-14);
            // the incomplete gamma series is accurate to ~1e-11 here
            assert!((piq_cdf(u, 2.0) - normal_cdf(u)).abs() < 1e-10);
        }
    }

    #[test]
    fn piq_q1_is_laplace() {
        // π_1 is Laplace with scale 2
        for &u in &[-5.0, -1.0, 0.5, 4.0] {
            let expect = 0.25 * (-0.5 * f64::abs(u)).exp();
            assert!((piq_pdf(u, 1.0) - expect).abs() < 1e-14);
        }
        let p: f64 = 0.9;
        let expect = -2.0 * (2.0 * (1.0 - p)).ln();
        assert!((piq_quantile(p, 1.0) - expect).abs() < 1e-10);
    }

    #[test]
    fn piq_round_trip() {
        for &q in &[0.7, 1.0, 1.5, 2.0, 3.0] {
            for i in 0..=200 {
                let p = 1e-6 + (1.0 - 2e-6) * i as f64 / 200.0;
                let back = piq_cdf(piq_quantile(p, q), q);
                assert!((back - p).abs() < 1e-10, "q={q} p={p} back={back}");
            }
        }
    }

    #[test]
    fn piq_normal_round_trip() {
        for &q in &[0.8, 1.0, 1.5] {
            for &z in &[-5.0, -1.0, -1e-3, 0.4, 2.5, 6.0] {
                let back = piq_to_normal(normal_to_piq(z, q).0, q);
                assert!((back - z).abs() < 1e-9 * z.abs().max(1.0), "q={q} z={z} back={back}");
            }
        }
    }

    #[test]
    fn normal_to_piq_slope_matches_difference() {
        for &q in &[1.0, 1.5] {
            for &z in &[-2.0, -0.3, 0.7, 3.0] {
                let h = 1e-6;
                let (_, slope) = normal_to_piq(z, q);
                let fd = (normal_to_piq(z + h, q).0 - normal_to_piq(z - h, q).0) / (2.0 * h);
                assert!((slope - fd).abs() < 1e-6 * fd.abs().max(1.0));
            }
        }
    }
}
