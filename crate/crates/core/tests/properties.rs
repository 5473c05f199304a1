//! Property-based invariants across modules.

use nalgebra::DVector;
use proptest::prelude::*;

use spde_ldp::action::action_of;
use spde_ldp::coefficients::make_preset;
use spde_ldp::evolvers::{Evolver, EvolverOptions};
use spde_ldp::grid_kernel::{assemble_operator, build_grid, DomainSpec, EllipticCoefficients, KernelOperator};
use spde_ldp::ldp_lab::{fit_rate, Method, ProbabilityEstimate};
use spde_ldp::action::TargetSpec;
use spde_ldp::stochastics::{sample_brownian, Control, TimeGrid};

fn heat_1d(n: usize) -> KernelOperator {
    let grid = build_grid(&DomainSpec::unit_interval(n)).unwrap();
    assemble_operator(&grid, &EllipticCoefficients::identity(1)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn semigroup_and_positivity(s in 0.0f64..0.2, t in 0.0f64..0.2, coeffs in prop::collection::vec(-1.0f64..1.0, 15)) {
        let op = heat_1d(16);
        let xi = DVector::from_vec(coeffs);
        let lhs = op.kernel_apply(s, &op.kernel_apply(t, &xi).unwrap()).unwrap();
        let rhs = op.kernel_apply(s + t, &xi).unwrap();
        prop_assert!((lhs - rhs).amax() <= 1e-12);
        let positive = xi.map(f64::abs);
        prop_assert!(op.kernel_apply(t, &positive).unwrap().min() >= -1e-12);
    }

    #[test]
    fn decomposition_closes(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0, eps in 0.0f64..0.5) {
        let op = heat_1d(16);
        let c = make_preset("reaction_diffusion", 1, 2).unwrap();
        let grid = TimeGrid::uniform(0.25, 32).unwrap();
        let ev = Evolver::new(&op, &c, &grid, 4.0, EvolverOptions::default()).unwrap();
        let xi = op.grid().sample(|x| a * (std::f64::consts::PI * x[0]).sin());
        let phi = Control::from_fn(&grid, 2, |t, j| b * (t + j as f64));
        let path = sample_brownian(2, &grid, seed).unwrap();
        let dec = ev.decompose_terms(&xi, eps, &path, &phi).unwrap();
        prop_assert!(dec.closure_error() <= 1e-10);
    }

    #[test]
    fn action_is_quadratic(values in prop::collection::vec(-3.0f64..3.0, 16), s in -4.0f64..4.0) {
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let beta = Control::new(grid, 2, values, None).unwrap();
        let scaled = beta.scaled(s);
        prop_assert!((action_of(&scaled) - s * s * action_of(&beta)).abs() <= 1e-12 * (1.0 + action_of(&scaled)));
        prop_assert!(action_of(&beta) >= 0.0);
    }

    #[test]
    fn affine_rate_fit_is_exact(rate in 0.1f64..5.0, log_prefactor in -3.0f64..0.0) {
        let estimates: Vec<ProbabilityEstimate> = [0.4, 0.2, 0.1, 0.05]
            .iter()
            .map(|&eps| ProbabilityEstimate {
                p_hat: (log_prefactor - rate / eps).exp(),
                stderr: 0.0,
                n: 100,
                method: Method::Plain,
                eps,
                event: TargetSpec::TubeExit { radius: 1.0, rho: 2.0 },
                hits: 1,
                effective_sample_size: 1.0,
            })
            .collect();
        let fit = fit_rate(&estimates).unwrap();
        prop_assert!((fit.rate - rate).abs() <= 1e-9 * (1.0 + rate));
        prop_assert!((fit.slope + log_prefactor).abs() <= 1e-9);
    }

    #[test]
    fn runs_are_reproducible(seed in 0u64..1000) {
        let op = heat_1d(16);
        let c = make_preset("burgers", 1, 1).unwrap();
        let grid = TimeGrid::uniform(0.25, 32).unwrap();
        let ev = Evolver::new(&op, &c, &grid, 5.0, EvolverOptions::default()).unwrap();
        let xi = op.grid().sample(|x| (std::f64::consts::PI * x[0]).sin());
        let a = ev.integrate_spde(&xi, 0.1, &sample_brownian(1, &grid, seed).unwrap()).unwrap().0;
        let b = ev.integrate_spde(&xi, 0.1, &sample_brownian(1, &grid, seed).unwrap()).unwrap().0;
        prop_assert_eq!(a, b);
    }
}
