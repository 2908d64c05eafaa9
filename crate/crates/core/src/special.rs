//! Modified Bessel function of the second kind and the Matérn correlation.

use statrs::function::gamma::gamma;

const STEP: f64 = 0.05;

/// `K_nu(x)` for `x > 0`, from the integral representation
/// `K_nu(x) = int_0^inf exp(-x cosh t) cosh(nu t) dt`.
///
/// The integrand is analytic in a strip around the real axis, so the
/// trapezoid rule converges geometrically in the step size.
pub fn bessel_k(nu: f64, x: f64) -> f64 {
    assert!(x > 0.0, "bessel_k requires x > 0");
    let nu = nu.abs();
    // past this point exp(-x cosh t) < e^-60 of the peak
    let upper = ((60.0 + x) / x).acosh() + 1.0;
    let n = (upper / STEP).ceil() as usize;
    let mut sum = 0.5 * (-x).exp();
    for i in 1..=n {
        let t = i as f64 * STEP;
        sum += (-x * t.cosh()).exp() * (nu * t).cosh();
    }
    sum * STEP
}

/// Matérn correlation `x^nu K_nu(x) / (Gamma(nu) 2^(nu-1))` at scaled lag `x >= 0`.
pub fn matern_correlation(x: f64, nu: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if nu == 0.5 {
        return (-x).exp();
    }
    if nu == 1.5 {
        return (1.0 + x) * (-x).exp();
    }
    if nu == 2.5 {
        return (1.0 + x + x * x / 3.0) * (-x).exp();
    }
    if x > 700.0 {
        return 0.0;
    }
    let c = x.powf(nu) * bessel_k(nu, x) / (gamma(nu) * 2f64.powf(nu - 1.0));
    c.clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn half_order_closed_form() {
        for &x in &[1e-6, 0.01, 0.3, 1.0, 4.0, 20.0] {
            let exact = (PI / (2.0 * x)).sqrt() * (-x).exp();
            let approx = bessel_k(0.5, x);
            assert!((approx / exact - 1.0).abs() < 1e-10, "x={x}");
        }
    }

    #[test]
    fn three_half_order_closed_form() {
        for &x in &[0.05, 0.7, 3.0] {
            let exact = (PI / (2.0 * x)).sqrt() * (-x).exp() * (1.0 + 1.0 / x);
            assert!((bessel_k(1.5, x) / exact - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn general_order_agrees_with_half_integer_shortcut() {
        // nudge the order off 0.5 and check continuity of the correlation
        for &x in &[0.01, 0.2, 1.0, 3.0] {
            let a = matern_correlation(x, 0.5);
            let b = matern_correlation(x, 0.5 - 1e-9);
            assert!((a - b).abs() < 1e-7, "x={x}: {a} vs {b}");
        }
    }

    #[test]
    fn small_lag_tends_to_one() {
        for &nu in &[0.1, 0.25, 0.4] {
            let c = matern_correlation(1e-10, nu);
            assert!(c <= 1.0 && c > 0.95, "nu={nu}: {c}");
            assert!(matern_correlation(1e-3, nu) > matern_correlation(1e-2, nu));
        }
    }

    #[test]
    fn recurrence_holds() {
        // K_{nu+1}(x) = K_{nu-1}(x) + (2 nu / x) K_nu(x)
        let (nu, x) = (0.8, 1.7);
        let lhs = bessel_k(nu + 1.0, x);
        let rhs = bessel_k(nu - 1.0, x) + 2.0 * nu / x * bessel_k(nu, x);
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
