//! Leave-one-out risk, Monte Carlo out-of-sample risk and the V₁/V₂
//! decomposition of their difference.
//!
//! Fresh draws never materialize x₀: for Gaussian designs the pair
//! (x₀ᵀβ*, x₀ᵀβ̂) is bivariate normal with covariance built from the three
//! quadratic forms of Σ, which is all φ(y₀, x₀ᵀβ̂) depends on.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{Dataset, ErrorMetric, ModelSpec};
use crate::rng::{self, Purpose};
use crate::solver::{FitResult, LooFits};

pub const MIN_MC_DRAWS: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct LoEstimate {
    pub lo: f64,
    pub per_i_phi: Vec<f64>,
    /// Some refit did not reach tolerance; the value is still computed.
    pub degraded: bool,
}

/// LO = n⁻¹ Σ φ(y_i, x_iᵀβ̂_{/i}).
pub fn compute_lo(loo: &LooFits, data: &Dataset, metric: ErrorMetric) -> Result<LoEstimate> {
    if loo.per_i.len() != data.n() {
        return Err(Error::Shape {
            expected: data.n(),
            got: loo.per_i.len(),
        });
    }
    let per_i_phi: Vec<f64> = loo
        .per_i
        .iter()
        .enumerate()
        .map(|(i, fit)| {
            let z = data.x.row(i).transpose().dot(&fit.beta_hat);
            metric.eval(data.y[i], z)
        })
        .collect();
    let lo = per_i_phi.iter().sum::<f64>() / per_i_phi.len() as f64;
    Ok(LoEstimate {
        lo,
        per_i_phi,
        degraded: !loo.all_converged(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OoEstimate {
    pub mean: f64,
    /// Sample std of φ over √m. Covers Monte Carlo noise only.
    pub se: f64,
    /// Sample variance of φ over the draws.
    pub var_phi: f64,
    pub m: usize,
}

impl OoEstimate {
    /// Expected upward bias Var(φ)/m that the Monte Carlo noise adds to (LO − OO)².
    pub fn sq_err_bias(&self) -> f64 {
        self.var_phi / self.m as f64
    }
}

/// Draws (x₀ᵀβ*, x₀ᵀb) for several b at once; all b share the same draws.
struct PairSampler {
    sd_star: f64,
    /// (regression coefficient on x₀ᵀβ*, residual sd) per b.
    coefs: Vec<(f64, f64)>,
}

impl PairSampler {
    fn new(spec: &ModelSpec, betas: &[&DVector<f64>]) -> Self {
        let cov = &spec.covariance;
        let c = spec.signal_variance();
        let coefs = betas
            .iter()
            .map(|b| {
                let a = cov.quad_form(b, b);
                if c > 0.0 {
                    let cross = cov.quad_form(b, &spec.beta_star);
                    (cross / c, (a - cross * cross / c).max(0.0).sqrt())
                } else {
                    (0.0, a.max(0.0).sqrt())
                }
            })
            .collect();
        PairSampler {
            sd_star: c.max(0.0).sqrt(),
            coefs,
        }
    }

    /// Monte Carlo mean and variance of f(φ(y₀, x₀ᵀb)) for every b.
    fn run(&self, spec: &ModelSpec, m: usize, seed: u64, purpose: Purpose, f: fn(f64) -> f64) -> Vec<(f64, f64)> {
        let mut rng = rng::stream(seed, purpose);
        let k = self.coefs.len();
        // Welford accumulators
        let mut mean = vec![0.0; k];
        let mut m2 = vec![0.0; k];
        for t in 0..m {
            let g1: f64 = rng.sample(StandardNormal);
            let g2: f64 = rng.sample(StandardNormal);
            let v = self.sd_star * g1;
            let y0 = spec.sample_response(&mut rng, v);
            for (j, &(slope, resid)) in self.coefs.iter().enumerate() {
                let u = slope * v + resid * g2;
                let phi = f(spec.metric.eval(y0, u));
                let d = phi - mean[j];
                mean[j] += d / (t + 1) as f64;
                m2[j] += d * (phi - mean[j]);
            }
        }
        mean.into_iter()
            .zip(m2)
            .map(|(mu, s)| (mu, s / (m as f64 - 1.0)))
            .collect()
    }
}

fn check_draws(m: usize) -> Result<()> {
    if m < MIN_MC_DRAWS {
        return Err(Error::InvalidParameter(format!(
            "Monte Carlo risk needs at least {MIN_MC_DRAWS} draws, got {m}"
        )));
    }
    Ok(())
}

/// E[φ(y₀, x₀ᵀβ) | β] by Monte Carlo over fresh draws from the model.
pub fn out_of_sample_risk(beta: &DVector<f64>, spec: &ModelSpec, m: usize, seed: u64) -> Result<OoEstimate> {
    check_draws(m)?;
    if beta.len() != spec.p {
        return Err(Error::Shape {
            expected: spec.p,
            got: beta.len(),
        });
    }
    let (mean, var_phi) = PairSampler::new(spec, &[beta]).run(spec, m, seed, Purpose::OutOfSample, |v| v)[0];
    Ok(OoEstimate {
        mean,
        se: (var_phi / m as f64).sqrt(),
        var_phi,
        m,
    })
}

/// E[φ(y₀, x₀ᵀβ)² | β] and its Monte Carlo standard error.
pub fn out_of_sample_second_moment(beta: &DVector<f64>, spec: &ModelSpec, m: usize, seed: u64) -> Result<(f64, f64)> {
    check_draws(m)?;
    let (mean, var) = PairSampler::new(spec, &[beta]).run(spec, m, seed, Purpose::Moments, |v| v * v)[0];
    Ok((mean, (var / m as f64).sqrt()))
}

/// OO for a fitted model.
pub fn compute_oo(fit: &FitResult, spec: &ModelSpec, m: usize, seed: u64) -> Result<OoEstimate> {
    out_of_sample_risk(&fit.beta_hat, spec, m, seed)
}

/// Exact OO for the Gaussian linear model with squared-error φ:
/// ½(σ² + (β − β*)ᵀΣ(β − β*)).
pub fn squared_loss_risk(beta: &DVector<f64>, spec: &ModelSpec) -> f64 {
    let d = beta - &spec.beta_star;
    0.5 * (spec.noise_sigma * spec.noise_sigma + spec.covariance.quad_form(&d, &d))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionReport {
    /// LO − mean_i E[φ_i(β̂_{/i}) | D_{/i}].
    pub v1: f64,
    /// mean_i E[φ_i(β̂_{/i}) | D_{/i}] − OO.
    pub v2: f64,
    pub cond_mean_per_i: Vec<f64>,
    pub cond_se_per_i: Vec<f64>,
}

/// Conditional means use common random numbers across i, so identical
/// refits get identical estimates.
pub fn compute_decomposition(
    loo: &LooFits,
    lo: &LoEstimate,
    oo: &OoEstimate,
    spec: &ModelSpec,
    m_cond: usize,
    seed: u64,
) -> Result<DecompositionReport> {
    check_draws(m_cond)?;
    let betas: Vec<&DVector<f64>> = loo.per_i.iter().map(|f| &f.beta_hat).collect();
    let stats = PairSampler::new(spec, &betas).run(spec, m_cond, seed, Purpose::ConditionalMean, |v| v);
    let cond_mean_per_i: Vec<f64> = stats.iter().map(|s| s.0).collect();
    let cond_se_per_i = stats.iter().map(|s| (s.1 / m_cond as f64).sqrt()).collect();
    let avg = cond_mean_per_i.iter().sum::<f64>() / cond_mean_per_i.len() as f64;
    Ok(DecompositionReport {
        v1: lo.lo - avg,
        v2: avg - oo.mean,
        cond_mean_per_i,
        cond_se_per_i,
    })
}

/// One experiment outcome, serialized as a CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskReport {
    pub n: usize,
    pub p: usize,
    pub gamma0: f64,
    pub lambda: f64,
    pub eta: f64,
    pub penalty: String,
    pub loss: String,
    pub seed: u64,
    pub lo: f64,
    pub oo_mc: f64,
    pub oo_mc_se: f64,
    pub sq_err: f64,
    pub v1: Option<f64>,
    pub v2: Option<f64>,
    /// Var̂(φ)/m, the Monte Carlo bias carried by sq_err.
    pub mc_bias: f64,
    pub degraded: bool,
}

pub const RISK_CSV_HEADER: &str = "n,p,gamma0,lambda,eta,penalty,loss,seed,lo,oo_mc,oo_mc_se,sq_err,v1,v2";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl RiskReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.n,
            self.p,
            self.gamma0,
            self.lambda,
            self.eta,
            self.penalty,
            self.loss,
            self.seed,
            self.lo,
            self.oo_mc,
            self.oo_mc_se,
            self.sq_err,
            opt(self.v1),
            opt(self.v2)
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::Execution;
    use crate::stats::mean_se;
    use crate::model::{generate_dataset, BetaStarMode, CovarianceSpec, LossFamily};
    use crate::penalty::{ConstraintSet, PenaltySpec, R0Variant};
    use crate::solver::{fit_loo, Problem, SolverConfig};

    fn spec(loss: LossFamily, p: usize, beta: BetaStarMode, cov: CovarianceSpec) -> ModelSpec {
        ModelSpec::new(p, 2.0, beta.generate(p, 1), cov, loss, 1.0).unwrap()
    }

    #[test]
    fn null_models() {
        let s = spec(LossFamily::SquaredError, 5, BetaStarMode::Zero, CovarianceSpec::ScaledIdentity(1.0));
        let oo = out_of_sample_risk(&DVector::zeros(5), &s, 20_000, 3).unwrap();
        assert!((oo.mean - 0.5).abs() <= 3.0 * oo.se);
        let s = spec(LossFamily::LogisticNll, 5, BetaStarMode::Rademacher { xi: 1.0 }, CovarianceSpec::ScaledIdentity(1.0));
        let oo = out_of_sample_risk(&DVector::zeros(5), &s, 2000, 3).unwrap();
        // φ(y, 0) = log 2 for both labels: no spread at all.
        assert!((oo.mean - 2f64.ln()).abs() < 1e-12 && oo.se < 1e-12);
        assert!(out_of_sample_risk(&DVector::zeros(5), &s, 999, 3).is_err());
    }

    #[test]
    fn matches_analytic_risk_for_linear_model() {
        for cov in [CovarianceSpec::ScaledIdentity(1.0), CovarianceSpec::ScaledAr1(0.5)] {
            let s = spec(LossFamily::SquaredError, 30, BetaStarMode::SortedGaussian { xi: 1.0 }, cov);
            for seed in 0..5 {
                let beta = BetaStarMode::Rademacher { xi: 0.7 }.generate(30, 100 + seed);
                let oo = out_of_sample_risk(&beta, &s, 50_000, seed).unwrap();
                assert!((oo.mean - squared_loss_risk(&beta, &s)).abs() <= 3.0 * oo.se, "seed {seed}");
            }
        }
    }

    #[test]
    fn matches_direct_sampling_of_x() {
        // Draw full x₀ for a logistic model and compare with the reduction.
        let s = spec(LossFamily::LogisticNll, 8, BetaStarMode::SortedGaussian { xi: 1.0 }, CovarianceSpec::ScaledAr1(0.5));
        let beta = BetaStarMode::Rademacher { xi: 0.8 }.generate(8, 4);
        let oo = out_of_sample_risk(&beta, &s, 40_000, 5).unwrap();
        let mut direct = s.clone();
        direct.n = 40_000;
        direct.gamma0 = 5000.0;
        let d = generate_dataset(&direct, 6).unwrap();
        let z = &d.x * &beta;
        let phis: Vec<f64> = (0..d.n()).map(|i| s.metric.eval(d.y[i], z[i])).collect();
        let (m, se) = mean_se(&phis);
        assert!((m - oo.mean).abs() <= 3.0 * (se * se + oo.se * oo.se).sqrt());
    }

    #[test]
    fn se_halves_when_draws_quadruple() {
        let s = spec(LossFamily::PoissonNll, 10, BetaStarMode::Constant { xi: 0.5 }, CovarianceSpec::ScaledIdentity(1.0));
        let beta = BetaStarMode::Constant { xi: 0.3 }.generate(10, 0);
        let a = out_of_sample_risk(&beta, &s, 10_000, 1).unwrap();
        let b = out_of_sample_risk(&beta, &s, 40_000, 1).unwrap();
        let ratio = b.se / a.se;
        assert!((ratio - 0.5).abs() <= 0.1, "{ratio}");
        assert_eq!(a, out_of_sample_risk(&beta, &s, 10_000, 1).unwrap());
    }

    fn loo_for(loss: LossFamily, lambda: f64, dup: bool) -> (ModelSpec, Dataset, LooFits) {
        let mut s = spec(loss, 10, BetaStarMode::Rademacher { xi: 1.0 }, CovarianceSpec::ScaledIdentity(1.0));
        s.n = 24;
        s.gamma0 = 2.4;
        let mut data = generate_dataset(&s, 2).unwrap();
        if dup {
            for j in 0..10 {
                data.x[(7, j)] = data.x[(3, j)];
            }
            data.y[7] = data.y[3];
        }
        let pr = Problem::new(loss, PenaltySpec::new(R0Variant::Lasso, 0.3, lambda, ConstraintSet::FullSpace).unwrap());
        let loo = fit_loo(&pr, &data, &SolverConfig::default(), Execution::Sequential).unwrap();
        (s, data, loo)
    }

    #[test]
    fn lo_with_zero_fits_is_mean_half_square() {
        let (_, data, loo) = loo_for(LossFamily::SquaredError, 1e7, false);
        let lo = compute_lo(&loo, &data, ErrorMetric(LossFamily::SquaredError)).unwrap();
        let want = data.y.iter().map(|y| 0.5 * y * y).sum::<f64>() / data.n() as f64;
        assert!((lo.lo - want).abs() < 1e-9);
        assert!(!lo.degraded);
    }

    #[test]
    fn decomposition_sums_and_degenerates() {
        let (s, data, loo) = loo_for(LossFamily::SquaredError, 1e7, false);
        let lo = compute_lo(&loo, &data, s.metric).unwrap();
        let oo = compute_oo(&loo.full, &s, 20_000, 1).unwrap();
        let dec = compute_decomposition(&loo, &lo, &oo, &s, 20_000, 2).unwrap();
        assert!((dec.v1 + dec.v2 - (lo.lo - oo.mean)).abs() < 1e-12);
        let se = (dec.cond_se_per_i[0].powi(2) + oo.se.powi(2)).sqrt();
        assert!(dec.v2.abs() <= 3.0 * se);
    }

    #[test]
    fn conditional_means_match_analytic_risk() {
        let (s, data, loo) = loo_for(LossFamily::SquaredError, 0.5, true);
        let lo = compute_lo(&loo, &data, s.metric).unwrap();
        let oo = compute_oo(&loo.full, &s, 20_000, 1).unwrap();
        let dec = compute_decomposition(&loo, &lo, &oo, &s, 20_000, 2).unwrap();
        for (i, fit) in loo.per_i.iter().enumerate() {
            let want = squared_loss_risk(&fit.beta_hat, &s);
            assert!((dec.cond_mean_per_i[i] - want).abs() <= 3.0 * dec.cond_se_per_i[i]);
        }
        assert!((dec.cond_mean_per_i[3] - dec.cond_mean_per_i[7]).abs() < 1e-9);
        assert!((lo.per_i_phi[3] - lo.per_i_phi[7]).abs() < 1e-6);
    }

    #[test]
    fn csv_row_follows_header() {
        let r = RiskReport {
            n: 100,
            p: 50,
            gamma0: 2.0,
            lambda: 1.0,
            eta: 0.3,
            penalty: "lasso".into(),
            loss: "logistic".into(),
            seed: 7,
            lo: 0.5,
            oo_mc: 0.25,
            oo_mc_se: 0.01,
            sq_err: 0.0625,
            v1: None,
            v2: Some(-0.5),
            mc_bias: 0.0,
            degraded: false,
        };
        assert_eq!(r.csv_row(), "100,50,2,1,0.3,lasso,logistic,7,0.5,0.25,0.01,0.0625,,-0.5");
        assert_eq!(RISK_CSV_HEADER.split(',').count(), r.csv_row().split(',').count());
    }
}
