//! Digamma and trigamma on the positive reals.
//!
//! Both use the upward recurrence until the argument is at least
//! [`ASYMPTOTIC_THRESHOLD`], then the Stirling-type asymptotic series with
//! Bernoulli numbers through B14.

/// Arguments at or above this value go straight to the asymptotic series.
pub const ASYMPTOTIC_THRESHOLD: f64 = 10.0;

// B2, B4, ..., B14
const BERNOULLI_EVEN: [f64; 7] = [
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
];

/// ln Γ(x) for x > 0.
pub fn ln_gamma(x: f64) -> f64 {
    libm::lgamma(x)
}

/// ψ(x) = d/dx ln Γ(x) for x > 0. Returns NaN outside the domain.
pub fn digamma(x: f64) -> f64 {
    if !(x > 0.0) || !x.is_finite() {
        return f64::NAN;
    }
    let mut x = x;
    let mut shift = 0.0;
    while x < ASYMPTOTIC_THRESHOLD {
        shift -= 1.0 / x;
        x += 1.0;
    }
    let inv2 = 1.0 / (x * x);
    let mut pow = inv2;
    let mut series = 0.0;
    for (k, b) in BERNOULLI_EVEN.iter().enumerate() {
        let two_k = 2.0 * (k as f64 + 1.0);
        series += b / two_k * pow;
        pow *= inv2;
    }
    shift + libm::log(x) - 0.5 / x - series
}

/// ψ'(x) for x > 0. Returns NaN outside the domain.
pub fn trigamma(x: f64) -> f64 {
    if !(x > 0.0) || !x.is_finite() {
        return f64::NAN;
    }
    let mut x = x;
    let mut shift = 0.0;
    while x < ASYMPTOTIC_THRESHOLD {
        shift += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let mut pow = inv2 * inv; // x^{-(2k+1)} starting at k = 1
    let mut series = 0.0;
    for b in BERNOULLI_EVEN.iter() {
        series += b * pow;
        pow *= inv2;
    }
    shift + inv + 0.5 * inv2 + series
}

#[cfg(test)]
mod tests {
    use super::*;

    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
    const PI2_OVER_6: f64 = 1.644_934_066_848_226_4;

    // ψ(x) = -γ + Σ_{n≥0} (1/(n+1) - 1/(n+x)), summed slowly.
    fn digamma_series(x: f64) -> f64 {
        let terms = 2_000_000usize;
        let mut s = 0.0;
        for n in (0..terms).rev() {
            let n = n as f64;
            s += 1.0 / (n + 1.0) - 1.0 / (n + x);
        }
        let m = terms as f64;
        // Euler-Maclaurin tail: integral plus half the first omitted term
        s += ((m + x) / (m + 1.0)).ln() + 0.5 * (1.0 / (m + 1.0) - 1.0 / (m + x));
        -EULER_GAMMA + s
    }

    // ψ'(x) = Σ_{n≥0} 1/(n+x)^2 with integral tail.
    fn trigamma_series(x: f64) -> f64 {
        let terms = 2_000_000usize;
        let mut s = 0.0;
        for n in (0..terms).rev() {
            let v = n as f64 + x;
            s += 1.0 / (v * v);
        }
        let m = terms as f64 + x;
        s + 1.0 / m + 0.5 / (m * m) + 1.0 / (6.0 * m * m * m)
    }

    #[test]
    fn digamma_and_trigamma_at_one() {
        assert!((digamma(1.0) + EULER_GAMMA).abs() < 1e-10);
        assert!((trigamma(1.0) - PI2_OVER_6).abs() < 1e-10);
        // the slow series agree with the closed forms too
        assert!((digamma_series(1.0) + EULER_GAMMA).abs() < 1e-10);
        assert!((trigamma_series(1.0) - PI2_OVER_6).abs() < 1e-10);
    }

    #[test]
    fn match_slow_series_oracle() {
        for &x in &[0.05, 0.5, 1.3, 2.7, 9.99, 10.0, 17.5, 123.4] {
            let d = digamma(x);
            let t = trigamma(x);
            assert!((d - digamma_series(x)).abs() < 1e-9 * (1.0 + d.abs()), "digamma({x})");
            assert!((t - trigamma_series(x)).abs() < 1e-9 * (1.0 + t.abs()), "trigamma({x})");
        }
    }

    #[test]
    fn recurrence_holds() {
        for &x in &[0.3, 1.0, 4.2, 12.0] {
            assert!((digamma(x + 1.0) - digamma(x) - 1.0 / x).abs() < 1e-13 * (1.0 + 1.0 / x));
            assert!((trigamma(x) - trigamma(x + 1.0) - 1.0 / (x * x)).abs() < 1e-12 / (x * x));
        }
    }

    #[test]
    fn half_integer_values() {
        // ψ(1/2) = -γ - 2 ln 2, ψ'(1/2) = π²/2
        let ln2 = core::f64::consts::LN_2;
        assert!((digamma(0.5) - (-EULER_GAMMA - 2.0 * ln2)).abs() < 1e-13);
        assert!((trigamma(0.5) - 3.0 * PI2_OVER_6).abs() < 1e-12);
    }

    #[test]
    fn outside_domain_is_nan() {
        assert!(digamma(0.0).is_nan());
        assert!(trigamma(-1.0).is_nan());
        assert!(digamma(f64::NAN).is_nan());
    }
}
