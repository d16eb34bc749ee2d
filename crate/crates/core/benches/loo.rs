use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use lo_risk_core::model::{generate_dataset, BetaStarMode, CovarianceSpec, ErrorMetric, LossFamily, ModelTemplate};
use lo_risk_core::penalty::{PenaltyTemplate, R0Kind, Smoothing, ThetaKind};
use lo_risk_core::solver::{fit_loo, Problem, SolverConfig};
use lo_risk_core::Execution;

fn loo_policies(c: &mut Criterion) {
    let model = ModelTemplate {
        loss: LossFamily::LogisticNll,
        metric: ErrorMetric(LossFamily::LogisticNll),
        gamma0: 2.0,
        covariance: CovarianceSpec::ScaledIdentity(1.0),
        beta_star: BetaStarMode::Rademacher { xi: 1.0 },
        noise_sigma: 1.0,
        xi_bounds: (0.0, 10.0),
    };
    let penalty = PenaltyTemplate {
        r0: R0Kind::Lasso,
        theta: ThetaKind::Full,
        eta: 0.3,
        lambda: 1.0,
        smoothing: Smoothing::None,
    };
    let cfg = SolverConfig::default();
    let mut group = c.benchmark_group("fit_loo");
    group.sample_size(10);
    for n in [100, 200] {
        let spec = model.at_n(n, 1).unwrap();
        let problem = Problem::from_spec(&spec, penalty.build(spec.p).unwrap());
        let data = generate_dataset(&spec, 2).unwrap();
        for (name, exec) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
            group.bench_with_input(BenchmarkId::new(name, n), &n, |b, _| {
                b.iter(|| fit_loo(black_box(&problem), black_box(&data), &cfg, exec).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, loo_policies);
criterion_main!(benches);
