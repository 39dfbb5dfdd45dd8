//! Digamma and trigamma for positive real arguments.
//!
//! Both use the same scheme: shift the argument upward with the recurrence
//! until it reaches [`ASYMPTOTIC_FROM`], then evaluate the asymptotic
//! expansion. The truncation error there is below 1e-12.

use crate::error::{Result, TensorError};

const ASYMPTOTIC_FROM: f64 = 6.0;

/// ψ(x), the logarithmic derivative of the gamma function.
pub fn digamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(TensorError::Domain { op: "digamma", value: x });
    }
    Ok(digamma_unchecked(x))
}

/// ψ'(x), the derivative of [`digamma`].
pub fn trigamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(TensorError::Domain { op: "trigamma", value: x });
    }
    Ok(trigamma_unchecked(x))
}

pub(crate) fn digamma_unchecked(mut x: f64) -> f64 {
    // ψ(x) = ψ(x+1) - 1/x
    let mut acc = 0.0;
    while x < ASYMPTOTIC_FROM {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // Bernoulli-number series in 1/x^2, Horner form.
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2
                                        * (1.0 / 132.0
                                            - inv2 * (691.0 / 32760.0 - inv2 / 12.0))))));
    acc + x.ln() - 0.5 * inv - series
}

pub(crate) fn trigamma_unchecked(mut x: f64) -> f64 {
    // ψ'(x) = ψ'(x+1) + 1/x^2
    let mut acc = 0.0;
    while x < ASYMPTOTIC_FROM {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv
        + 0.5 * inv2
        + inv
            * inv2
            * (1.0 / 6.0
                - inv2
                    * (1.0 / 30.0
                        - inv2
                            * (1.0 / 42.0
                                - inv2
                                    * (1.0 / 30.0
                                        - inv2
                                            * (5.0 / 66.0
                                                - inv2 * (691.0 / 2730.0 - inv2 * 7.0 / 6.0))))));
    acc + series
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

    /// ψ(x) = -γ + Σ_{n≥0} [1/(n+1) - 1/(n+x)], summed directly with a tail
    /// correction. Independent of the recurrence/asymptotic path.
    fn digamma_series(x: f64) -> f64 {
        let n_terms = 2_000_000usize;
        let mut s = 0.0;
        for n in (0..n_terms).rev() {
            let n = n as f64;
            s += 1.0 / (n + 1.0) - 1.0 / (n + x);
        }
        // tail Σ_{n≥N} (x-1)/((n+1)(n+x)) ≈ (x-1)/N
        let tail = (x - 1.0) / n_terms as f64;
        -EULER_GAMMA + s + tail
    }

    /// ψ'(x) = Σ_{n≥0} 1/(n+x)^2 with an integral tail estimate.
    fn trigamma_series(x: f64) -> f64 {
        let n_terms = 2_000_000usize;
        let mut s = 0.0;
        for n in (0..n_terms).rev() {
            let t = n as f64 + x;
            s += 1.0 / (t * t);
        }
        let t = n_terms as f64 + x;
        s + 1.0 / t + 0.5 / (t * t)
    }

    #[test]
    fn digamma_at_one_is_negative_euler_gamma() {
        assert!((digamma(1.0).unwrap() + EULER_GAMMA).abs() < 1e-10);
        assert!((digamma_series(1.0) + EULER_GAMMA).abs() < 1e-10);
    }

    #[test]
    fn digamma_recurrence_difference() {
        let d = digamma(6.0).unwrap() - digamma(4.0).unwrap();
        assert!((d - 0.45).abs() < 1e-12);
    }

    #[test]
    fn recurrence_identity_holds() {
        for &x in &[0.5, 1.0, 2.0, 10.0] {
            let d = digamma(x + 1.0).unwrap() - digamma(x).unwrap();
            assert!((d - 1.0 / x).abs() < 1e-10, "x = {x}");
        }
    }

    #[test]
    fn trigamma_at_one_is_pi_squared_over_six() {
        assert!((trigamma(1.0).unwrap() - PI * PI / 6.0).abs() < 1e-10);
        assert!((trigamma_series(1.0) - PI * PI / 6.0).abs() < 1e-10);
    }

    #[test]
    fn matches_series_oracle_across_range() {
        for &x in &[0.05, 0.3, 0.5, 1.7, 3.2, 5.99, 6.0, 12.5, 40.0] {
            let d = digamma(x).unwrap();
            let t = trigamma(x).unwrap();
            assert!((d - digamma_series(x)).abs() < 1e-9, "digamma({x})");
            assert!((t - trigamma_series(x)).abs() < 1e-9, "trigamma({x})");
        }
    }

    #[test]
    fn trigamma_is_derivative_of_digamma() {
        for &x in &[0.4, 1.0, 2.5, 7.0, 30.0] {
            let h = 1e-5;
            let fd = (digamma(x + h).unwrap() - digamma(x - h).unwrap()) / (2.0 * h);
            assert!((fd - trigamma(x).unwrap()).abs() < 1e-6, "x = {x}");
        }
    }

    #[test]
    fn domain_errors() {
        assert!(digamma(0.0).is_err());
        assert!(digamma(-1.5).is_err());
        assert!(trigamma(0.0).is_err());
        assert!(digamma(f64::NAN).is_err());
    }
}
