//! Log-gamma, digamma, and trigamma for Dirichlet KL terms, plus the
//! standard normal CDF for rank-correlation p-values.
//!
//! Log-gamma uses a Lanczos approximation; digamma and trigamma use the
//! upward recurrence into the asymptotic regime. All three are checked
//! against closed-form values at integers and half-integers to 1e-12.

/// Lanczos g = 7, 9-term coefficients.
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function, x > 0.
pub fn ln_gamma(x: f64) -> f64 {
    debug_assert!(x > 0.0);
    if x < 0.5 {
        // reflection
        let pi = core::f64::consts::PI;
        return libm::log(pi / libm::sin(pi * x)) - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * libm::log(2.0 * core::f64::consts::PI) + (x + 0.5) * libm::log(t) - t
        + libm::log(acc)
}

/// Digamma psi(x), x > 0. Recurrence up to x >= 10, then the asymptotic
/// series in 1/x^2.
pub fn digamma(x: f64) -> f64 {
    debug_assert!(x > 0.0);
    let mut x = x;
    let mut acc = 0.0;
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // B_2n / (2n x^{2n}) terms
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0)))));
    acc + libm::log(x) - 0.5 * inv - series
}

/// Trigamma psi'(x), x > 0.
pub fn trigamma(x: f64) -> f64 {
    debug_assert!(x > 0.0);
    let mut x = x;
    let mut acc = 0.0;
    while x < 12.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv
        * (1.0
            + inv * (0.5
                + inv * (1.0 / 6.0
                    - inv2
                        * (1.0 / 30.0
                            - inv2 * (1.0 / 42.0 - inv2 * (1.0 / 30.0 - inv2 * (5.0 / 66.0)))))));
    acc + series
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / core::f64::consts::SQRT_2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

    #[test]
    fn ln_gamma_integers_and_halves() {
        // Gamma(n) = (n-1)!, Gamma(1/2) = sqrt(pi), Gamma(x+1) = x Gamma(x)
        let mut fact = 1.0_f64;
        for n in 1..15u32 {
            assert_relative_eq!(ln_gamma(n as f64), fact.ln(), max_relative = 1e-13, epsilon = 1e-13);
            fact *= n as f64;
        }
        let pi = core::f64::consts::PI;
        assert_relative_eq!(ln_gamma(0.5), (pi.sqrt()).ln(), epsilon = 1e-13);
        assert_relative_eq!(ln_gamma(1.5), (0.5 * pi.sqrt()).ln(), epsilon = 1e-13);
        assert_relative_eq!(ln_gamma(2.5), (0.75 * pi.sqrt()).ln(), epsilon = 1e-13);
    }

    #[test]
    fn digamma_closed_forms() {
        // psi(1) = -gamma, psi(n) = -gamma + H_{n-1}, psi(1/2) = -gamma - 2 ln 2
        assert_relative_eq!(digamma(1.0), -EULER_GAMMA, epsilon = 1e-13);
        let mut harmonic = 0.0;
        for n in 2..20u32 {
            harmonic += 1.0 / (n as f64 - 1.0);
            assert_relative_eq!(digamma(n as f64), -EULER_GAMMA + harmonic, epsilon = 1e-12);
        }
        assert_relative_eq!(
            digamma(0.5),
            -EULER_GAMMA - 2.0 * core::f64::consts::LN_2,
            epsilon = 1e-13
        );
    }

    #[test]
    fn trigamma_closed_forms() {
        // psi'(1) = pi^2/6, psi'(n) = pi^2/6 - sum_{k<n} 1/k^2, psi'(1/2) = pi^2/2
        let pi2_6 = core::f64::consts::PI * core::f64::consts::PI / 6.0;
        assert_relative_eq!(trigamma(1.0), pi2_6, epsilon = 1e-13);
        let mut partial = 0.0;
        for n in 2..20u32 {
            let k = n as f64 - 1.0;
            partial += 1.0 / (k * k);
            assert_relative_eq!(trigamma(n as f64), pi2_6 - partial, epsilon = 1e-12);
        }
        assert_relative_eq!(trigamma(0.5), 3.0 * pi2_6, epsilon = 1e-12);
    }

    #[test]
    fn recurrence_identities_hold_off_grid() {
        // psi(x+1) = psi(x) + 1/x, psi'(x+1) = psi'(x) - 1/x^2
        let mut x = 0.137;
        while x < 8.0 {
            assert_relative_eq!(digamma(x + 1.0), digamma(x) + 1.0 / x, epsilon = 1e-12, max_relative = 1e-12);
            assert_relative_eq!(
                trigamma(x + 1.0),
                trigamma(x) - 1.0 / (x * x),
                epsilon = 1e-12,
                max_relative = 1e-12
            );
            x += 0.61;
        }
    }

    #[test]
    fn trigamma_is_derivative_of_digamma() {
        let h = 1e-6;
        for &x in &[0.7, 1.3, 2.9, 5.5, 12.0] {
            let fd = (digamma(x + h) - digamma(x - h)) / (2.0 * h);
            assert_relative_eq!(trigamma(x), fd, max_relative = 1e-8);
        }
    }

    #[test]
    fn normal_cdf_values() {
        assert_relative_eq!(normal_cdf(0.0), 0.5, epsilon = 1e-15);
        assert_relative_eq!(normal_cdf(1.959_963_984_540_054), 0.975, epsilon = 1e-12);
        assert_relative_eq!(normal_cdf(-1.959_963_984_540_054), 0.025, epsilon = 1e-12);
    }
}
