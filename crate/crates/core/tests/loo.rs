use approx::assert_relative_eq;
use nalgebra::DVector;

use lo_risk_core::model::{
    generate_dataset, BetaStarMode, CovarianceSpec, Dataset, ErrorMetric, LossFamily, ModelTemplate,
};
use lo_risk_core::penalty::{PenaltyTemplate, R0Kind, Smoothing, ThetaKind};
use lo_risk_core::risk::compute_lo;
use lo_risk_core::solver::reference::ridge_closed_form;
use lo_risk_core::solver::{fit, fit_loo, Problem, SolverConfig};
use lo_risk_core::Execution;

fn template(loss: LossFamily, cov: CovarianceSpec) -> ModelTemplate {
    ModelTemplate {
        loss,
        metric: ErrorMetric(loss),
        gamma0: 2.0,
        covariance: cov,
        beta_star: BetaStarMode::Rademacher { xi: 1.0 },
        noise_sigma: 1.0,
        xi_bounds: (0.0, 10.0),
    }
}

fn penalty(r0: R0Kind, theta: ThetaKind) -> PenaltyTemplate {
    PenaltyTemplate {
        r0,
        theta,
        eta: 0.3,
        lambda: 1.0,
        smoothing: Smoothing::None,
    }
}

fn drop_row(data: &Dataset, i: usize) -> Dataset {
    Dataset {
        x: data.x.clone().remove_row(i),
        y: data.y.clone().remove_row(i),
        seed: data.seed,
    }
}

#[test]
fn loo_refits_match_cold_refits_without_the_row() {
    let cases = [
        (LossFamily::LogisticNll, R0Kind::Lasso, ThetaKind::Full),
        (LossFamily::PoissonNll, R0Kind::Group { size: 3 }, ThetaKind::Nonnegative),
        (LossFamily::SquaredError, R0Kind::Fused, ThetaKind::Full),
    ];
    let cfg = SolverConfig {
        tol: 1e-10,
        ..SolverConfig::default()
    };
    for (k, (loss, r0, theta)) in cases.into_iter().enumerate() {
        let spec = template(loss, CovarianceSpec::ScaledAr1(0.5)).with_np(30, 12, 3 + k as u64).unwrap();
        let pen = penalty(r0, theta).build(12).unwrap();
        let problem = Problem::from_spec(&spec, pen);
        let data = generate_dataset(&spec, 40 + k as u64).unwrap();
        let loo = fit_loo(&problem, &data, &cfg, Execution::Parallel).unwrap();
        assert!(loo.all_converged());
        for i in [0, 7, 29] {
            let cold = fit(&problem, &drop_row(&data, i), &cfg, None).unwrap();
            let gap = (&cold.beta_hat - &loo.per_i[i].beta_hat).norm();
            assert!(gap <= 1e-7, "{loss:?} i={i} gap {gap:e}");
        }
    }
}

#[test]
fn sequential_and_parallel_loo_agree_bitwise() {
    let spec = template(LossFamily::LogisticNll, CovarianceSpec::ScaledIdentity(1.0))
        .with_np(40, 20, 1)
        .unwrap();
    let problem = Problem::from_spec(&spec, penalty(R0Kind::Lasso, ThetaKind::Full).build(20).unwrap());
    let data = generate_dataset(&spec, 2).unwrap();
    let cfg = SolverConfig::default();
    let a = fit_loo(&problem, &data, &cfg, Execution::Sequential).unwrap();
    let b = fit_loo(&problem, &data, &cfg, Execution::Parallel).unwrap();
    assert_eq!(a, b);
    let la = compute_lo(&a, &data, spec.metric).unwrap();
    let lb = compute_lo(&b, &data, spec.metric).unwrap();
    assert_eq!(la.lo.to_bits(), lb.lo.to_bits());
}

#[test]
fn ridge_loo_matches_closed_form_per_row() {
    let spec = template(LossFamily::SquaredError, CovarianceSpec::ScaledIdentity(1.0))
        .with_np(24, 8, 5)
        .unwrap();
    let problem = Problem::from_spec(&spec, penalty(R0Kind::Zero, ThetaKind::Full).build(8).unwrap());
    let data = generate_dataset(&spec, 6).unwrap();
    let loo = fit_loo(&problem, &data, &SolverConfig::default(), Execution::Parallel).unwrap();
    let mut phi = vec![];
    for i in 0..data.n() {
        let d = drop_row(&data, i);
        let b = ridge_closed_form(&d.x, &d.y, 0.3).unwrap();
        assert_relative_eq!(loo.per_i[i].beta_hat, b, epsilon = 1e-7, max_relative = 1e-6);
        let r = data.y[i] - data.x.row(i).transpose().dot(&b);
        phi.push(0.5 * r * r);
    }
    let lo = compute_lo(&loo, &data, spec.metric).unwrap();
    let want = DVector::from_vec(phi).mean();
    assert_relative_eq!(lo.lo, want, max_relative = 1e-6);
}
