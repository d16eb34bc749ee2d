//! Gaussian smoothing r₀^α(β) = E r₀(β − w/α), w ~ N(0, I_p).

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use std::f64::consts::PI;

use super::r0::{eval_r0, subgrad_r0, R0Variant};
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::stats::{expected_gaussian_norm, mean_se, normal_cdf, normal_pdf};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SmoothingMode {
    /// Exact Gaussian convolution; available for the LASSO only.
    ClosedForm,
    /// Sample average over `samples` fixed Gaussian perturbations (common
    /// random numbers for value and gradient).
    MonteCarlo { samples: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedPenalty {
    pub base: R0Variant,
    pub alpha: f64,
    pub mode: SmoothingMode,
}

/// E|b + u| for u ~ N(0, 1/α²).
pub fn smoothed_abs(b: f64, alpha: f64) -> f64 {
    b * (1.0 - 2.0 * normal_cdf(-b * alpha)) + 2.0 / alpha * normal_pdf(b * alpha)
}

pub fn smoothed_abs_grad(b: f64, alpha: f64) -> f64 {
    1.0 - 2.0 * normal_cdf(-b * alpha)
}

pub fn smoothed_abs_hess(b: f64, alpha: f64) -> f64 {
    2.0 * alpha * normal_pdf(b * alpha)
}

/// argmin_x τ·smoothed_abs(x, α) + ½(x − u)², by safeguarded Newton.
pub fn prox_smoothed_abs(u: f64, tau: f64, alpha: f64) -> f64 {
    prox_smoothed_abs_from(0.0, u, tau, alpha)
}

/// Same prox at u = x0 + v, solved for the increment x − x0. Near a fixed
/// point v is almost cancelled by the penalty gradient; working with the
/// increment keeps x accurate to relative precision even when α|x| ≪ 1 and
/// x0 is tiny.
pub fn prox_smoothed_abs_from(x0: f64, v: f64, tau: f64, alpha: f64) -> f64 {
    if tau == 0.0 {
        return x0 + v;
    }
    // G is increasing with G' ≥ 1 and the root lies within τ of v.
    let g = |d: f64| d - v + tau * smoothed_abs_grad(x0 + d, alpha);
    let (mut lo, mut hi) = (v - tau, v + tau);
    let mut d = 0.0f64.clamp(lo, hi);
    for _ in 0..200 {
        let gd = g(d);
        if gd == 0.0 {
            break;
        }
        if gd > 0.0 {
            hi = d;
        } else {
            lo = d;
        }
        let slope = 1.0 + tau * smoothed_abs_hess(x0 + d, alpha);
        let mut next = d - gd / slope;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        let scale = (x0 + next).abs().max(f64::MIN_POSITIVE);
        let done = next == d || (next - d).abs() <= 2.0 * f64::EPSILON * scale;
        d = next;
        if done {
            break;
        }
    }
    x0 + d
}

fn check(s: &SmoothedPenalty) -> Result<()> {
    if !(s.alpha > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "smoothing level alpha must be positive, got {}",
            s.alpha
        )));
    }
    match s.mode {
        SmoothingMode::ClosedForm if s.base != R0Variant::Lasso => Err(Error::Unsupported(
            format!("closed-form smoothing of {}", s.base.name()),
        )),
        SmoothingMode::MonteCarlo { samples, .. } if samples < 100 => Err(
            Error::InvalidParameter(format!("Monte Carlo smoothing needs >= 100 samples, got {samples}")),
        ),
        _ => Ok(()),
    }
}

fn perturbations(p: usize, samples: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = rng::stream(seed, Purpose::Smoothing);
    (0..samples)
        .map(|_| DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

/// r₀^α(β) together with its Monte Carlo standard error (zero in closed form).
pub fn eval_smoothed_with_se(s: &SmoothedPenalty, beta: &DVector<f64>) -> Result<(f64, f64)> {
    check(s)?;
    match s.mode {
        SmoothingMode::ClosedForm => Ok((beta.iter().map(|&b| smoothed_abs(b, s.alpha)).sum(), 0.0)),
        SmoothingMode::MonteCarlo { samples, seed } => {
            let vals = perturbations(beta.len(), samples, seed)
                .iter()
                .map(|w| eval_r0(&s.base, &(beta - w / s.alpha)))
                .collect::<Result<Vec<f64>>>()?;
            Ok(mean_se(&vals))
        }
    }
}

pub fn eval_smoothed(s: &SmoothedPenalty, beta: &DVector<f64>) -> Result<f64> {
    eval_smoothed_with_se(s, beta).map(|(v, _)| v)
}

/// ∇r₀^α(β). In Monte Carlo mode, the average subgradient over the same
/// perturbations used by [`eval_smoothed`].
pub fn grad_smoothed(s: &SmoothedPenalty, beta: &DVector<f64>) -> Result<DVector<f64>> {
    check(s)?;
    match s.mode {
        SmoothingMode::ClosedForm => Ok(beta.map(|b| smoothed_abs_grad(b, s.alpha))),
        SmoothingMode::MonteCarlo { samples, seed } => {
            eval_r0(&s.base, beta)?;
            let mut acc = DVector::zeros(beta.len());
            for w in perturbations(beta.len(), samples, seed) {
                acc += subgrad_r0(&s.base, &(beta - w / s.alpha));
            }
            Ok(acc / samples as f64)
        }
    }
}

/// Upper bound on sup_β |r₀^α(β) − r₀(β)|: exact p√(2/π)/α for the LASSO,
/// L·E‖w‖/α otherwise.
pub fn sup_gap_bound(base: &R0Variant, p: usize, alpha: f64) -> f64 {
    match base {
        R0Variant::Lasso => p as f64 * (2.0 / PI).sqrt() / alpha,
        other => other.lipschitz(p) * expected_gaussian_norm(p) / alpha,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::penalty::r0::eval_r0;
    use crate::rng::{stream, Purpose};
    use rand::Rng;

    fn closed(alpha: f64) -> SmoothedPenalty {
        SmoothedPenalty {
            base: R0Variant::Lasso,
            alpha,
            mode: SmoothingMode::ClosedForm,
        }
    }

    fn mc(base: R0Variant, alpha: f64, samples: usize) -> SmoothedPenalty {
        SmoothedPenalty {
            base,
            alpha,
            mode: SmoothingMode::MonteCarlo { samples, seed: 17 },
        }
    }

    #[test]
    fn value_at_origin() {
        for (p, alpha) in [(1, 1.0), (5, 3.0), (12, 0.5)] {
            let v = eval_smoothed(&closed(alpha), &DVector::zeros(p)).unwrap();
            assert!((v - p as f64 * (2.0 / PI).sqrt() / alpha).abs() < 1e-14);
        }
        // E|u| by brute-force sampling at 10^6 draws
        let mut rng = stream(99, Purpose::Smoothing);
        let m = 1_000_000;
        let alpha = 2.0;
        let draws: Vec<f64> = (0..m).map(|_| (rng.sample::<f64, _>(StandardNormal) / alpha).abs()).collect();
        let (mean, se) = mean_se(&draws);
        let closed_val = smoothed_abs(0.0, alpha);
        assert!((mean - closed_val).abs() < 3.0 * se, "{mean} vs {closed_val}");
    }

    #[test]
    fn closed_form_agrees_with_monte_carlo() {
        // p = 1, β = 3, α = 1
        let beta = DVector::from_element(1, 3.0);
        let exact = eval_smoothed(&closed(1.0), &beta).unwrap();
        assert!((exact - 3.000_764_3).abs() < 1e-6, "{exact}");
        let (est, se) = eval_smoothed_with_se(&mc(R0Variant::Lasso, 1.0, 200_000), &beta).unwrap();
        assert!((est - exact).abs() < 3.0 * se, "{est} ± {se} vs {exact}");
    }

    #[test]
    fn large_alpha_is_close_to_r0() {
        let beta = DVector::from_column_slice(&[0.4, -1.2, 0.0, 2.0]);
        let alpha = 1e6;
        let bound = sup_gap_bound(&R0Variant::Lasso, 4, alpha);
        let gap = (eval_smoothed(&closed(alpha), &beta).unwrap() - eval_r0(&R0Variant::Lasso, &beta).unwrap()).abs();
        assert!(gap <= bound);
        for base in [R0Variant::fused(4), R0Variant::nuclear(2, 2), R0Variant::contiguous_groups(4, 2).unwrap()] {
            let s = mc(base.clone(), alpha, 200);
            let gap = (eval_smoothed(&s, &beta).unwrap() - eval_r0(&base, &beta).unwrap()).abs();
            assert!(gap <= base.lipschitz(4) * expected_gaussian_norm(4) / alpha + 1e-12);
        }
    }

    #[test]
    fn closed_form_gradient_limits_and_fd() {
        assert_eq!(smoothed_abs_grad(0.0, 3.0), 0.0);
        assert!((smoothed_abs_grad(50.0, 1.0) - 1.0).abs() < 1e-15);
        assert!((smoothed_abs_grad(-50.0, 1.0) + 1.0).abs() < 1e-15);
        let mut rng = stream(5, Purpose::Init);
        for _ in 0..5 {
            let beta = DVector::from_fn(6, |_, _| rng.random_range(-2.0..2.0));
            let s = closed(2.5);
            let g = grad_smoothed(&s, &beta).unwrap();
            for j in 0..6 {
                let h = 1e-5;
                let mut bp = beta.clone();
                let mut bm = beta.clone();
                bp[j] += h;
                bm[j] -= h;
                let num = (eval_smoothed(&s, &bp).unwrap() - eval_smoothed(&s, &bm).unwrap()) / (2.0 * h);
                assert!((g[j] - num).abs() <= 1e-4 * g[j].abs().max(1e-3));
            }
        }
    }

    #[test]
    fn monte_carlo_gradient_matches_finite_differences() {
        // With common random numbers the MC value is piecewise smooth; its
        // directional derivative is the average subgradient. Check it against
        // finite differences with per-sample variability as the yardstick.
        let base = R0Variant::nuclear(3, 3);
        let s = mc(base.clone(), 2.0, 400);
        let mut rng = stream(8, Purpose::Init);
        for _ in 0..5 {
            let beta = DVector::from_fn(9, |_, _| rng.random_range(-1.0..1.0));
            let dir = DVector::from_fn(9, |_, _| rng.random_range(-1.0..1.0)).normalize();
            let g = grad_smoothed(&s, &beta).unwrap().dot(&dir);
            let h = 1e-6;
            let num = (eval_smoothed(&s, &(&beta + &dir * h)).unwrap()
                - eval_smoothed(&s, &(&beta - &dir * h)).unwrap())
                / (2.0 * h);
            let per_sample: Vec<f64> = perturbations(9, 400, 17)
                .iter()
                .map(|w| subgrad_r0(&base, &(&beta - w / 2.0)).dot(&dir))
                .collect();
            let (_, se) = mean_se(&per_sample);
            assert!((g - num).abs() <= 3.0 * se + 1e-6, "{g} vs {num} (se {se})");
        }
    }

    #[test]
    fn uniform_gap_bound_and_monotone_improvement() {
        let p = 5;
        let mut rng = stream(21, Purpose::Init);
        let probes: Vec<DVector<f64>> = (0..1000)
            .map(|_| DVector::from_fn(p, |_, _| rng.random_range(-3.0..3.0)))
            .collect();
        let alpha = 1.7;
        let sup_gap = |a: f64| {
            probes
                .iter()
                .map(|b| (eval_smoothed(&closed(a), b).unwrap() - b.lp_norm(1)).abs())
                .fold(0.0, f64::max)
        };
        let g1 = sup_gap(alpha);
        let g2 = sup_gap(2.0 * alpha);
        assert!(g1 <= p as f64 * (2.0 / PI).sqrt() / alpha + 1e-9);
        assert!(g2 <= g1);
    }

    #[test]
    fn scalar_prox_solves_optimality() {
        for &alpha in &[0.5, 10.0, 1e4, 1e8] {
            for &u in &[-3.0, -0.2, 0.0, 1e-9, 0.7, 5.0] {
                for &tau in &[0.1, 1.0, 2.5] {
                    let x = prox_smoothed_abs(u, tau, alpha);
                    let r = tau * smoothed_abs_grad(x, alpha) + x - u;
                    let scale = 1.0 + tau * smoothed_abs_hess(x, alpha);
                    assert!(r.abs() <= 1e-12 * scale, "u={u} tau={tau} alpha={alpha}: {r}");
                }
            }
        }
    }

    #[test]
    fn rejects_bad_settings() {
        assert!(eval_smoothed(&mc(R0Variant::Lasso, 1.0, 50), &DVector::zeros(2)).is_err());
        let bad = SmoothedPenalty { base: R0Variant::fused(3), alpha: 1.0, mode: SmoothingMode::ClosedForm };
        assert!(eval_smoothed(&bad, &DVector::zeros(3)).is_err());
        assert!(eval_smoothed(&closed(0.0), &DVector::zeros(3)).is_err());
    }
}
