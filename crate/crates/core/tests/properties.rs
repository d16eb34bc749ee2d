use nalgebra::DVector;
use proptest::prelude::*;

use lo_risk_core::config::validate_config;
use lo_risk_core::penalty::{
    eval_r0, project, prox_r0, CompositeProx, ConstraintSet, NonsmoothPart, R0Variant,
};
use lo_risk_core::rng::derive_seed;

fn vec_of(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4.0f64..4.0, len)
}

fn r0_of(kind: u8, p: usize) -> R0Variant {
    match kind % 4 {
        0 => R0Variant::Lasso,
        1 => R0Variant::fused(p),
        2 => R0Variant::contiguous_groups(p, 2).unwrap(),
        _ => R0Variant::nuclear(2, p / 2),
    }
}

fn theta_of(kind: u8, p: usize) -> ConstraintSet {
    match kind % 4 {
        0 => ConstraintSet::NonnegativeOrthant,
        1 => ConstraintSet::IsotoneCone,
        2 => ConstraintSet::EuclideanBall { radius: 1.5 },
        _ => ConstraintSet::Box { lo: vec![-0.5; p], hi: vec![1.0; p] },
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prox_is_firmly_nonexpansive(kind in 0u8..4, a in vec_of(8), b in vec_of(8), t in 0.05f64..3.0) {
        let r0 = r0_of(kind, 8);
        let (a, b) = (DVector::from_vec(a), DVector::from_vec(b));
        let d = prox_r0(&r0, &a, t).unwrap() - prox_r0(&r0, &b, t).unwrap();
        prop_assert!(d.dot(&(&a - &b)) >= d.norm_squared() - 1e-10);
    }

    #[test]
    fn prox_does_not_increase_the_penalty(kind in 0u8..4, u in vec_of(8), t in 0.05f64..3.0) {
        let r0 = r0_of(kind, 8);
        let u = DVector::from_vec(u);
        let x = prox_r0(&r0, &u, t).unwrap();
        prop_assert!(eval_r0(&r0, &x).unwrap() <= eval_r0(&r0, &u).unwrap() + 1e-10);
    }

    #[test]
    fn projection_is_idempotent(kind in 0u8..4, u in vec_of(7)) {
        let theta = theta_of(kind, 7);
        let u = DVector::from_vec(u);
        let x = project(&theta, &u);
        prop_assert!(theta.contains(&x, 1e-12));
        prop_assert!((project(&theta, &x) - &x).norm() <= 1e-12 * (1.0 + x.norm()));
    }

    #[test]
    fn composite_prox_is_feasible_and_beats_the_projection(
        kind in 0u8..4, tk in 0u8..4, u in vec_of(8), t in 0.1f64..2.0,
    ) {
        let r0 = r0_of(kind, 8);
        let theta = theta_of(tk, 8);
        let u = DVector::from_vec(u);
        let x = CompositeProx::new(NonsmoothPart::Exact(&r0), 1.0, &theta).apply(&u, t).unwrap();
        prop_assert!(theta.contains(&x, 1e-9));
        let obj = |v: &DVector<f64>| t * eval_r0(&r0, v).unwrap() + 0.5 * (v - &u).norm_squared();
        prop_assert!(obj(&x) <= obj(&project(&theta, &u)) + 1e-9);
    }

    #[test]
    fn seed_derivation_is_a_function_of_its_path(base in any::<u64>(), a in any::<u64>(), b in any::<u64>()) {
        prop_assert_eq!(derive_seed(base, &[a, b]), derive_seed(base, &[a, b]));
        if a != b {
            prop_assert_ne!(derive_seed(base, &[a]), derive_seed(base, &[b]));
        }
    }

    #[test]
    fn config_round_trips(lambda in 0.01f64..10.0, eta in 0.01f64..0.99, seed in 0u64..1000, n in 20usize..200) {
        let doc = format!(
            "[model]\nloss = \"poisson\"\ngamma0 = 2.0\nn = {n}\n\n[penalty]\nlambda = {lambda:?}\neta = {eta:?}\n\n\
             [penalty.r0]\nkind = \"lasso\"\n\n[experiment]\nseed = {seed}\n"
        );
        let c = validate_config(&doc).unwrap();
        prop_assert_eq!(c.penalty.lambda, lambda);
        prop_assert_eq!(c.seed(), seed);
        prop_assert_eq!(validate_config(&c.to_toml()).unwrap(), c);
    }
}
