//! Small numerical helpers shared across modules.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Standard normal CDF, accurate in both tails.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// `log(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Logistic function `1 / (1 + e^{-z})`.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(log(1 + e^z))`, stable for very negative `z` where `softplus` underflows.
pub fn log_softplus(z: f64) -> f64 {
    if z < -30.0 {
        let e = z.exp();
        z + (-0.5 * e).ln_1p()
    } else {
        softplus(z).ln()
    }
}

pub fn ln_factorial(k: f64) -> f64 {
    libm::lgamma(k + 1.0)
}

/// E‖z‖ for z standard Gaussian in `p` dimensions.
pub fn expected_gaussian_norm(p: usize) -> f64 {
    let p = p as f64;
    (2f64.ln() * 0.5 + libm::lgamma((p + 1.0) / 2.0) - libm::lgamma(p / 2.0)).exp()
}

/// Mean and standard error (sample std / √m).
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let m = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / m;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0);
    (mean, (var / m).sqrt())
}

/// Unbiased sample variance.
pub fn sample_var(xs: &[f64]) -> f64 {
    let m = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / m;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0)
}

/// Ordinary least squares of `y` on `x` with intercept; returns (slope, intercept).
pub fn ols(x: &[f64], y: &[f64]) -> (f64, f64) {
    let m = x.len() as f64;
    let mx = x.iter().sum::<f64>() / m;
    let my = y.iter().sum::<f64>() / m;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Empirical quantile with linear interpolation; `xs` must be sorted.
pub fn quantile_sorted(xs: &[f64], q: f64) -> f64 {
    let h = (xs.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    xs[lo] + (h - lo as f64) * (xs[hi] - xs[lo])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_cdf_tails() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-16);
        assert!((normal_cdf(-3.0) - 0.0013498980316301).abs() < 1e-15);
        assert!(normal_cdf(-37.0) > 0.0);
    }

    #[test]
    fn softplus_matches_naive_in_range() {
        for &z in &[-5.0, -0.3, 0.0, 0.7, 12.0] {
            let naive = (1.0 + f64::exp(z)).ln();
            assert!((softplus(z) - naive).abs() < 1e-14);
            assert!((log_softplus(z) - naive.ln()).abs() < 1e-12);
        }
        assert_eq!(softplus(1000.0), 1000.0);
        assert!((log_softplus(-40.0) - (-40.0)).abs() < 1e-15);
    }

    #[test]
    fn gaussian_norm_small_dims() {
        // E|z| = sqrt(2/pi) in one dimension, sqrt(pi/2) in two.
        assert!((expected_gaussian_norm(1) - (2.0 / PI).sqrt()).abs() < 1e-12);
        assert!((expected_gaussian_norm(2) - (PI / 2.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn ols_recovers_line() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| -1.0 * v + 0.5).collect();
        let (s, b) = ols(&x, &y);
        assert!((s + 1.0).abs() < 1e-12 && (b - 0.5).abs() < 1e-12);
    }
}
