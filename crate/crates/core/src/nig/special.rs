//! Log-gamma, digamma and trigamma for positive real arguments.
//!
//! Each function shifts small arguments upward with the standard recurrence
//! and then evaluates the asymptotic (Stirling-type) series.

use crate::error::{Error, Result};

const SHIFT: f64 = 10.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Natural log of the gamma function. Returns NaN for `x <= 0`.
pub fn ln_gamma(x: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NAN;
    }
    let mut x = x;
    let mut shift = 0.0;
    if x < SHIFT {
        let mut prod = 1.0;
        while x < SHIFT {
            prod *= x;
            x += 1.0;
        }
        shift = prod.ln();
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv
        * (1.0 / 12.0
            + inv2
                * (-1.0 / 360.0
                    + inv2
                        * (1.0 / 1260.0
                            + inv2 * (-1.0 / 1680.0 + inv2 * (1.0 / 1188.0 + inv2 * (-691.0 / 360360.0 + inv2 / 156.0))))));
    (x - 0.5) * x.ln() - x + HALF_LN_2PI + series - shift
}

/// Digamma (psi) function. Returns NaN for `x <= 0`.
pub fn digamma(x: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NAN;
    }
    let mut x = x;
    let mut acc = 0.0;
    while x < SHIFT {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv2 = 1.0 / (x * x);
    let series = inv2
        * (-1.0 / 12.0
            + inv2
                * (1.0 / 120.0
                    + inv2
                        * (-1.0 / 252.0
                            + inv2 * (1.0 / 240.0 + inv2 * (-1.0 / 132.0 + inv2 * (691.0 / 32760.0 - inv2 / 12.0))))));
    acc + x.ln() - 0.5 / x + series
}

/// Trigamma function, the derivative of [`digamma`]. Returns NaN for `x <= 0`.
pub fn trigamma(x: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NAN;
    }
    let mut x = x;
    let mut acc = 0.0;
    while x < SHIFT {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv
        + inv2 / 2.0
        + inv2
            * inv
            * (1.0 / 6.0
                + inv2 * (-1.0 / 30.0 + inv2 * (1.0 / 42.0 + inv2 * (-1.0 / 30.0 + inv2 * (5.0 / 66.0 + inv2 * (-691.0 / 2730.0 + inv2 * 7.0 / 6.0))))));
    acc + series
}

fn check_positive(x: f64, name: &str) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{name} requires a positive finite argument, got {x}")))
    }
}

pub fn checked_ln_gamma(x: f64) -> Result<f64> {
    check_positive(x, "ln_gamma")?;
    Ok(ln_gamma(x))
}

pub fn checked_digamma(x: f64) -> Result<f64> {
    check_positive(x, "digamma")?;
    Ok(digamma(x))
}

#[cfg(test)]
mod tests {
    use super::*;

    const EULER: f64 = 0.577_215_664_901_532_9;

    #[test]
    fn known_values() {
        assert!(ln_gamma(1.0).abs() < 1e-14);
        assert!(ln_gamma(2.0).abs() < 1e-14);
        assert!((ln_gamma(0.5) - 0.5 * std::f64::consts::PI.ln()).abs() < 1e-13);
        assert!((digamma(1.0) + EULER).abs() < 1e-13);
        assert!((digamma(2.0) - (1.0 - EULER)).abs() < 1e-13);
        let pi2_6 = std::f64::consts::PI.powi(2) / 6.0;
        assert!((trigamma(1.0) - pi2_6).abs() < 1e-12);
        assert!((trigamma(2.0) - (pi2_6 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn factorials() {
        let mut f = 1.0f64;
        for n in 1..30 {
            f *= n as f64;
            // ln Gamma(n + 1) = ln n!
            let got = ln_gamma(n as f64 + 1.0);
            assert!((got - f.ln()).abs() <= 1e-12 * f.ln().max(1.0), "n={n}");
        }
    }

    #[test]
    fn recurrences_hold_over_range() {
        let mut x = 1e-3;
        while x < 1e6 {
            let lg = ln_gamma(x + 1.0) - ln_gamma(x) - x.ln();
            assert!(lg.abs() <= 1e-10f64.max(4.0 * f64::EPSILON * ln_gamma(x + 1.0).abs()), "lgamma x={x} {lg}");
            let dg = digamma(x + 1.0) - digamma(x) - 1.0 / x;
            assert!(dg.abs() <= 1e-10f64.max(1e-14 / x), "digamma x={x} {dg}");
            x *= 1.37;
        }
    }

    #[test]
    fn trigamma_matches_digamma_slope() {
        for &x in &[0.01f64, 0.3, 1.0, 2.5, 7.0, 9.99, 10.0, 55.0, 180.5, 1e4] {
            let h = 1e-5 * x.max(1e-2);
            let fd = (digamma(x + h) - digamma(x - h)) / (2.0 * h);
            assert!((fd - trigamma(x)).abs() < 1e-6 * trigamma(x).max(1.0), "x={x}");
        }
    }

    #[test]
    fn non_positive_inputs() {
        assert!(ln_gamma(0.0).is_nan());
        assert!(digamma(-1.0).is_nan());
        assert!(checked_ln_gamma(0.0).is_err());
        assert!(checked_digamma(-2.0).is_err());
        assert!(checked_digamma(3.0).is_ok());
    }

    #[test]
    fn agrees_with_statrs_reference() {
        let mut x = 1e-3;
        while x <= 1e6 {
            let lg_ref = statrs::function::gamma::ln_gamma(x);
            let tol = 1e-10f64.max(1e-14 * lg_ref.abs());
            assert!((ln_gamma(x) - lg_ref).abs() < tol, "ln_gamma({x}): {} vs {lg_ref}", ln_gamma(x));
            let dg_ref = statrs::function::gamma::digamma(x);
            let tol = 1e-10f64.max(1e-13 * dg_ref.abs());
            assert!((digamma(x) - dg_ref).abs() < tol, "digamma({x}): {} vs {dg_ref}", digamma(x));
            x *= 1.9;
        }
    }
}
