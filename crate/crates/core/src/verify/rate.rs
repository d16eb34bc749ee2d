//! E(LO − OO)² against n at fixed γ₀, with a log-log slope and a
//! replicate bootstrap interval.

use nalgebra::DVector;
use rand::Rng;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{generate_dataset, ModelSpec, ModelTemplate};
use crate::penalty::{PenaltySpec, PenaltyTemplate};
use crate::risk::{compute_decomposition, compute_lo, compute_oo, out_of_sample_risk, RiskReport};
use crate::rng::{self, derive_seed, Purpose};
use crate::solver::{fit_loo, LooFits, Problem, SolverConfig};
use crate::stats::{mean_se, ols, quantile_sorted};

/// Tag mixed into the seed of β* so it never collides with replicate streams.
const BETA_TAG: u64 = 0xB5;
const BOOT_TAG: u64 = 0xB0;

#[derive(Debug, Clone, PartialEq)]
pub struct RateExperiment {
    pub model: ModelTemplate,
    pub penalty: PenaltyTemplate,
    pub n_grid: Vec<usize>,
    pub replicates: usize,
    pub m_oo: usize,
    /// Ceiling for the automatic increase of m_oo.
    pub m_oo_max: usize,
    /// Draws per conditional mean for V₁/V₂; `None` skips the decomposition.
    pub m_cond: Option<usize>,
    pub bootstrap: usize,
    pub base_seed: u64,
    pub solver: SolverConfig,
}

impl RateExperiment {
    pub fn validate(&self) -> Result<()> {
        if self.replicates < 10 {
            return Err(Error::InvalidParameter(format!(
                "a rate experiment needs at least 10 replicates, got {}",
                self.replicates
            )));
        }
        if self.n_grid.len() < 2 || self.n_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter(
                "n_grid must hold at least two strictly increasing sizes".into(),
            ));
        }
        if self.m_oo < 1000 || self.m_oo_max < self.m_oo {
            return Err(Error::InvalidParameter("need 1000 <= m_oo <= m_oo_max".into()));
        }
        for &n in &self.n_grid {
            let spec = self.model.at_n(n, 0)?;
            self.penalty.build(spec.p)?;
        }
        self.solver.validate()
    }

    /// (model, penalty) at grid size n; β* is fixed per n across replicates.
    pub fn instance(&self, n: usize) -> Result<(ModelSpec, PenaltySpec)> {
        let spec = self.model.at_n(n, derive_seed(self.base_seed, &[BETA_TAG, n as u64]))?;
        let pen = self.penalty.build(spec.p)?;
        Ok((spec, pen))
    }

    pub fn replicate_seed(&self, n: usize, r: usize) -> u64 {
        derive_seed(self.base_seed, &[n as u64, r as u64])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateRow {
    pub n: usize,
    pub p: usize,
    /// Bias-corrected mean of sq_err, clamped at 0.
    pub mse: f64,
    /// Standard error of mean(sq_err) over replicates.
    pub mse_se: f64,
    /// Mean of Var̂(φ)/m_oo, subtracted from the raw mean.
    pub mc_bias: f64,
    pub replicates_ok: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateReport {
    pub rows: Vec<RiskReport>,
    pub per_n: Vec<RateRow>,
    pub slope: f64,
    /// Fitted log C.
    pub intercept: f64,
    pub slope_ci: (f64, f64),
    /// Bootstrap resamples with all MSE_n positive.
    pub bootstrap_used: usize,
    pub m_oo_initial: usize,
    pub m_oo_used: usize,
    pub m_oo_raised: bool,
    pub failures: usize,
    pub total: usize,
}

impl RateReport {
    pub fn ci_width(&self) -> f64 {
        self.slope_ci.1 - self.slope_ci.0
    }

    /// Bias at the largest n relative to the corrected MSE there.
    pub fn bias_ratio(&self) -> f64 {
        let last = self.per_n.last().expect("nonempty grid");
        last.mc_bias / last.mse
    }
}

struct Replicate {
    report: RiskReport,
    beta_hat: DVector<f64>,
    seed: u64,
}

/// One LO/OO replicate: data from `seed`, full fit plus leave-one-out refits,
/// Monte Carlo OO with `m_oo` draws and, if `m_cond` is set, the V₁/V₂ split.
pub fn risk_replicate(
    spec: &ModelSpec,
    pen: &PenaltySpec,
    solver: &SolverConfig,
    seed: u64,
    m_oo: usize,
    m_cond: Option<usize>,
    exec: Execution,
) -> Result<(RiskReport, LooFits)> {
    let data = generate_dataset(spec, seed)?;
    let problem = Problem::from_spec(spec, pen.clone());
    let loo = fit_loo(&problem, &data, solver, exec)?;
    let lo = compute_lo(&loo, &data, spec.metric)?;
    let oo = compute_oo(&loo.full, spec, m_oo, seed)?;
    let (v1, v2) = match m_cond {
        Some(m) => {
            let d = compute_decomposition(&loo, &lo, &oo, spec, m, seed)?;
            (Some(d.v1), Some(d.v2))
        }
        None => (None, None),
    };
    let report = RiskReport {
        n: spec.n,
        p: spec.p,
        gamma0: spec.gamma0,
        lambda: pen.lambda,
        eta: pen.eta,
        penalty: pen.r0.name().to_string(),
        loss: spec.loss.name().to_string(),
        seed,
        lo: lo.lo,
        oo_mc: oo.mean,
        oo_mc_se: oo.se,
        sq_err: (lo.lo - oo.mean).powi(2),
        v1,
        v2,
        mc_bias: oo.sq_err_bias(),
        degraded: lo.degraded,
    };
    Ok((report, loo))
}

fn run_replicate(exp: &RateExperiment, spec: &ModelSpec, pen: &PenaltySpec, seed: u64) -> Result<Replicate> {
    let (report, loo) = risk_replicate(spec, pen, &exp.solver, seed, exp.m_oo, exp.m_cond, Execution::Sequential)?;
    Ok(Replicate {
        report,
        beta_hat: loo.full.beta_hat,
        seed,
    })
}

fn corrected_mse(sq: &[f64], bias: &[f64]) -> f64 {
    let k = sq.len() as f64;
    (sq.iter().sum::<f64>() / k - bias.iter().sum::<f64>() / k).max(0.0)
}

fn summarize(groups: &[(usize, usize, Vec<&Replicate>, usize)]) -> Vec<RateRow> {
    groups
        .iter()
        .map(|(n, p, reps, failures)| {
            let sq: Vec<f64> = reps.iter().map(|r| r.report.sq_err).collect();
            let bias: Vec<f64> = reps.iter().map(|r| r.report.mc_bias).collect();
            RateRow {
                n: *n,
                p: *p,
                mse: corrected_mse(&sq, &bias),
                mse_se: mean_se(&sq).1,
                mc_bias: bias.iter().sum::<f64>() / bias.len() as f64,
                replicates_ok: reps.len(),
                failures: *failures,
            }
        })
        .collect()
}

/// Runs the grid; replicates are distributed by `exec` and collected in
/// index order, so the output does not depend on scheduling.
pub fn run_rate_experiment(exp: &RateExperiment, exec: Execution) -> Result<RateReport> {
    exp.validate()?;
    let r = exp.replicates;
    let instances = exp
        .n_grid
        .iter()
        .map(|&n| exp.instance(n))
        .collect::<Result<Vec<_>>>()?;
    let jobs = exp.n_grid.len() * r;
    let outcomes = exec.map(jobs, |k| {
        let (g, rep) = (k / r, k % r);
        let (spec, pen) = &instances[g];
        run_replicate(exp, spec, pen, exp.replicate_seed(spec.n, rep))
    });

    let mut failures = 0;
    let mut kept: Vec<Vec<Replicate>> = (0..exp.n_grid.len()).map(|_| vec![]).collect();
    let mut failed_per_n = vec![0; exp.n_grid.len()];
    for (k, out) in outcomes.into_iter().enumerate() {
        match out {
            Ok(rep) => kept[k / r].push(rep),
            Err(_) => {
                failures += 1;
                failed_per_n[k / r] += 1;
            }
        }
    }
    if failures as f64 > 0.05 * jobs as f64 || kept.iter().any(|g| g.len() < 2) {
        return Err(Error::TooManyFailures { failed: failures, total: jobs });
    }

    // Raise m_oo until its bias is small next to the signal at the largest n.
    let mut m_oo = exp.m_oo;
    loop {
        let groups: Vec<_> = kept
            .iter()
            .enumerate()
            .map(|(g, reps)| (instances[g].0.n, instances[g].0.p, reps.iter().collect::<Vec<_>>(), failed_per_n[g]))
            .collect();
        let last = summarize(&groups).pop().expect("nonempty grid");
        if last.mc_bias <= 0.1 * last.mse || m_oo >= exp.m_oo_max {
            break;
        }
        m_oo = (m_oo * 4).min(exp.m_oo_max);
        let flat: Vec<(usize, usize)> = kept
            .iter()
            .enumerate()
            .flat_map(|(g, reps)| (0..reps.len()).map(move |j| (g, j)))
            .collect();
        let fresh = exec.map(flat.len(), |k| {
            let (g, j) = flat[k];
            let rep = &kept[g][j];
            out_of_sample_risk(&rep.beta_hat, &instances[g].0, m_oo, rep.seed)
        });
        for (k, oo) in fresh.into_iter().enumerate() {
            let oo = oo?;
            let (g, j) = flat[k];
            let rep = &mut kept[g][j].report;
            rep.oo_mc = oo.mean;
            rep.oo_mc_se = oo.se;
            rep.sq_err = (rep.lo - oo.mean).powi(2);
            rep.mc_bias = oo.sq_err_bias();
            if let Some(v1) = rep.v1 {
                // V₁ does not involve OO; V₂ absorbs the new estimate.
                rep.v2 = Some(rep.lo - v1 - oo.mean);
            }
        }
    }

    let groups: Vec<_> = kept
        .iter()
        .enumerate()
        .map(|(g, reps)| (instances[g].0.n, instances[g].0.p, reps.iter().collect::<Vec<_>>(), failed_per_n[g]))
        .collect();
    let per_n = summarize(&groups);
    if per_n.iter().any(|row| !(row.mse > 0.0)) {
        return Err(Error::InvalidParameter(
            "bias-corrected MSE is zero at some n; raise m_oo or replicates".into(),
        ));
    }
    let log_n: Vec<f64> = per_n.iter().map(|row| (row.n as f64).ln()).collect();
    let log_mse: Vec<f64> = per_n.iter().map(|row| row.mse.ln()).collect();
    let (slope, intercept) = ols(&log_n, &log_mse);

    let mut rng = rng::stream(derive_seed(exp.base_seed, &[BOOT_TAG]), Purpose::Bootstrap);
    let mut slopes = Vec::with_capacity(exp.bootstrap);
    for _ in 0..exp.bootstrap {
        let mut ys = Vec::with_capacity(kept.len());
        for reps in &kept {
            let k = reps.len();
            let (mut sq, mut bias) = (Vec::with_capacity(k), Vec::with_capacity(k));
            for _ in 0..k {
                let rep = &reps[rng.random_range(0..k)].report;
                sq.push(rep.sq_err);
                bias.push(rep.mc_bias);
            }
            ys.push(corrected_mse(&sq, &bias));
        }
        if ys.iter().all(|&v| v > 0.0) {
            let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
            slopes.push(ols(&log_n, &ly).0);
        }
    }
    slopes.sort_by(f64::total_cmp);
    let slope_ci = if slopes.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        (quantile_sorted(&slopes, 0.025), quantile_sorted(&slopes, 0.975))
    };

    Ok(RateReport {
        rows: kept.into_iter().flatten().map(|r| r.report).collect(),
        per_n,
        slope,
        intercept,
        slope_ci,
        bootstrap_used: slopes.len(),
        m_oo_initial: exp.m_oo,
        m_oo_used: m_oo,
        m_oo_raised: m_oo > exp.m_oo,
        failures,
        total: jobs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BetaStarMode, CovarianceSpec, ErrorMetric, LossFamily};
    use crate::penalty::{R0Kind, Smoothing, ThetaKind};

    fn experiment(lambda: f64) -> RateExperiment {
        RateExperiment {
            model: ModelTemplate {
                loss: LossFamily::SquaredError,
                metric: ErrorMetric(LossFamily::SquaredError),
                gamma0: 2.0,
                covariance: CovarianceSpec::ScaledIdentity(1.0),
                beta_star: BetaStarMode::Rademacher { xi: 1.0 },
                noise_sigma: 1.0,
                xi_bounds: (0.0, 10.0),
            },
            penalty: PenaltyTemplate {
                r0: R0Kind::Lasso,
                theta: ThetaKind::Full,
                eta: 0.3,
                lambda,
                smoothing: Smoothing::None,
            },
            n_grid: vec![20, 40, 80, 160],
            replicates: 40,
            m_oo: 20_000,
            m_oo_max: 1_000_000,
            m_cond: None,
            bootstrap: 300,
            base_seed: 11,
            solver: SolverConfig::default(),
        }
    }

    #[test]
    fn degenerate_template_decays_like_one_over_n() {
        // λ huge: β̂ = β̂_{/i} = 0, LO is a plain sample mean of φ(y_i, 0).
        let rep = run_rate_experiment(&experiment(1e8), Execution::Parallel).unwrap();
        assert!(rep.slope > -1.5 && rep.slope < -0.6, "slope {}", rep.slope);
        assert!(rep.slope_ci.0 <= rep.slope && rep.slope <= rep.slope_ci.1);
        assert_eq!(rep.rows.len(), 160);
        assert_eq!(rep.failures, 0);
    }

    #[test]
    fn deterministic_across_execution_policies() {
        let mut exp = experiment(1.0);
        exp.n_grid = vec![20, 40];
        exp.replicates = 10;
        exp.bootstrap = 50;
        let a = run_rate_experiment(&exp, Execution::Sequential).unwrap();
        let b = run_rate_experiment(&exp, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_grids() {
        let mut exp = experiment(1.0);
        exp.replicates = 5;
        assert!(exp.validate().is_err());
        let mut exp = experiment(1.0);
        exp.n_grid = vec![40, 20];
        assert!(exp.validate().is_err());
        let mut exp = experiment(1.0);
        exp.n_grid = vec![2, 40];
        assert!(exp.validate().is_err());
    }
}
