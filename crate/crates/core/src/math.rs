//! Scalar math routed through `libm` so results do not depend on the
//! platform's libm or on whether `std` is enabled.

pub use libm::{asinh, atanh, exp, expm1, log, log1p, sinh, sqrt, tanh};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        exp(x)
    } else {
        log1p(exp(x))
    }
}

/// `ln(sinh(x) / x)`, even in `x`, zero at the origin.
pub fn log_sinhc(x: f64) -> f64 {
    let a = x.abs();
    if a < 1e-4 {
        // x²/6 − x⁴/180
        let s = a * a;
        s / 6.0 - s * s / 180.0
    } else if a > 20.0 {
        // sinh(a) = e^a (1 − e^{−2a}) / 2
        a - core::f64::consts::LN_2 + log1p(-exp(-2.0 * a)) - log(a)
    } else {
        log(sinh(a) / a)
    }
}

/// Derivative of [`log_sinhc`]: `coth(x) − 1/x`.
pub fn log_sinhc_grad(x: f64) -> f64 {
    let a = x.abs();
    let g = if a < 1e-4 { a / 3.0 - a * a * a / 45.0 } else { 1.0 / tanh(a) - 1.0 / a };
    if x < 0.0 {
        -g
    } else {
        g
    }
}

pub fn norm(v: &[f64]) -> f64 {
    sqrt(dot(v, v))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + log(xs.iter().map(|x| exp(x - m)).sum::<f64>())
}
