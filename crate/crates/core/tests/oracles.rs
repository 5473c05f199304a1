//! Oracle checks of module behavior against independently computed values.

use approx::assert_relative_eq;
use nalgebra::{DMatrix, DVector, Matrix2, SymmetricEigen};
use statrs::distribution::{ContinuousCDF, Normal};

use spde_ldp::action::{lsc_probe, minimize_action_with, ActionOptions, LinearFunctional, TargetSpec};
use spde_ldp::coefficients::{make_preset, ScalarFn};
use spde_ldp::evolvers::{Evolver, EvolverOptions, PicardStart};
use spde_ldp::grid_kernel::{assemble_operator, build_grid, DomainSpec, EllipticCoefficients, KernelOperator};
use spde_ldp::ldp_lab::{convergence_experiment, estimate_event, ControlFamily, EstimateOptions, FieldFamily, Gamma, Method};
use spde_ldp::stochastics::{Control, TimeGrid};

fn heat_1d(n: usize) -> KernelOperator {
    let grid = build_grid(&DomainSpec::unit_interval(n)).unwrap();
    assemble_operator(&grid, &EllipticCoefficients::identity(1)).unwrap()
}

fn sine(op: &KernelOperator, amplitude: f64) -> DVector<f64> {
    op.grid().sample(|x| amplitude * (std::f64::consts::PI * x[0]).sin())
}

#[test]
fn scaled_diffusion_doubles_the_spectrum() {
    let grid = build_grid(&DomainSpec::unit_square(8)).unwrap();
    let lap = assemble_operator(&grid, &EllipticCoefficients::identity(2)).unwrap();
    let scaled = assemble_operator(&grid, &EllipticCoefficients::constant(2, Matrix2::identity() * 2.0, 0.4)).unwrap();
    // Oracle: eigen-solve of twice the Laplacian matrix.
    let oracle = SymmetricEigen::new(lap.matrix() * 2.0).eigenvalues;
    let mut oracle: Vec<f64> = oracle.iter().copied().collect();
    oracle.sort_by(|a, b| b.total_cmp(a));
    for (a, b) in scaled.eigenvalues().iter().zip(&oracle) {
        assert_relative_eq!(*a, *b, max_relative = 1e-10);
    }
}

#[test]
fn ellipticity_sandwich_holds_per_index() {
    let grid = build_grid(&DomainSpec::unit_square(8)).unwrap();
    let lap = assemble_operator(&grid, &EllipticCoefficients::identity(2)).unwrap();
    let kappa = 0.5;
    let b = EllipticCoefficients::from_fn(2, kappa, |x: &[f64]| {
        let s = 1.0 + 0.5 * (3.0 * x[0]).sin() * x[1];
        Matrix2::new(s, 0.2 * x[0], 0.2 * x[0], 1.2)
    });
    let op = assemble_operator(&grid, &b).unwrap();
    for (mu, lam) in op.eigenvalues().iter().zip(lap.eigenvalues().iter()) {
        assert!(-mu >= kappa * -lam - 1e-9 && -mu <= -lam / kappa + 1e-9);
    }
}

#[test]
fn kernel_gradient_matches_dense_product() {
    let op = heat_1d(16);
    let grid = op.grid();
    let t = 0.02;
    let constant = DVector::from_element(grid.len(), 1.5);
    let got = op.kernel_grad_apply(t, &constant).unwrap();
    // Oracle: ∫ ∂_y G_t(x, y) c dy with ∂_y taken as the central difference of
    // the kernel rows, summed with the grid weight.
    let g = op.kernel_matrix(t).unwrap();
    let vol = grid.cell_volume();
    let h = grid.spacing()[0];
    let n = grid.len();
    let mut oracle = DVector::zeros(n);
    for x in 0..n {
        for y in 0..n {
            let right = if y + 1 < n { g[(x, y + 1)] } else { 0.0 };
            let left = if y > 0 { g[(x, y - 1)] } else { 0.0 };
            oracle[x] += (right - left) / (2.0 * h) * 1.5 * vol;
        }
    }
    assert!((&got[0] - &oracle).amax() < 1e-10);
    let late = op.kernel_grad_apply(5.0, &constant).unwrap();
    assert!(late[0].amax() < 1e-10);
}

#[test]
fn kernel_gradient_maps_even_to_odd() {
    let op = heat_1d(8);
    let even = op.grid().sample(|x| (x[0] - 0.5).powi(2));
    let out = &op.kernel_grad_apply(0.01, &even).unwrap()[0];
    let n = out.len();
    for i in 0..n {
        assert!((out[i] + out[n - 1 - i]).abs() < 1e-12);
    }
}

#[test]
fn heat_flow_contracts_lp_norms() {
    let op = heat_1d(32);
    let xi = op.grid().sample(|x| (7.0 * x[0]).sin() + (x[0] - 0.3).abs());
    for p in [1.0, 2.0, 5.0] {
        for t in [1e-4, 1e-2, 0.3] {
            let u = op.kernel_apply(t, &xi).unwrap();
            assert!(op.grid().lp_norm(&u, p) <= op.grid().lp_norm(&xi, p) * (1.0 + 1e-12));
        }
    }
}

#[test]
fn linear_skeleton_matches_spectral_duhamel_sum() {
    let op = heat_1d(64);
    let c = make_preset("linear_gaussian", 1, 1).unwrap();
    let grid = TimeGrid::uniform(0.5, 64).unwrap();
    let ev = Evolver::new(&op, &c, &grid, 4.0, EvolverOptions::default()).unwrap();
    let xi = sine(&op, 1.0);
    let phi = 0.7;
    let (psi, _) = ev.solve_skeleton(&xi, &Control::constant(&grid, &[phi])).unwrap();
    let dt = 0.5 / 64.0;
    let ones = DVector::from_element(op.grid().len(), phi * dt);
    for (m, t) in grid.times().iter().enumerate() {
        let mut oracle = op.kernel_apply(*t, &xi).unwrap();
        for l in 0..m {
            oracle += op.kernel_apply(t - grid.times()[l], &ones).unwrap();
        }
        assert!((psi.at(m) - oracle).amax() < 1e-8);
    }
}

#[test]
fn picard_fixed_point_is_start_independent() {
    let op = heat_1d(32);
    let c = make_preset("burgers", 1, 1).unwrap();
    let grid = TimeGrid::uniform(0.5, 128).unwrap();
    let ev = Evolver::new(&op, &c, &grid, 5.0, EvolverOptions::default()).unwrap();
    let phi = Control::from_fn(&grid, 1, |t, _| 1.0 - t);
    let xi = sine(&op, 1.0);
    let (a, da) = ev.solve_skeleton_from(&xi, &phi, PicardStart::HeatFlow).unwrap();
    let (b, db) = ev.solve_skeleton_from(&xi, &phi, PicardStart::Zero).unwrap();
    assert!(da.converged && db.converged);
    assert!(da.last_increment < 1e-10 && db.last_increment < 1e-10);
    let scale = a.values().iter().map(|v| v.amax()).fold(1.0, f64::max);
    assert!(a.max_abs_difference(&b) <= 10.0 * 1e-10 * scale);
}

#[test]
fn exponential_euler_is_first_order_for_linear_reaction() {
    // u' = Au − u has the exact solution e^{t(A − I)}ξ = e^{−t} e^{tA}ξ.
    let op = heat_1d(32);
    let mut c = make_preset("linear_gaussian", 1, 1).unwrap();
    c.f = ScalarFn::Polynomial { coeffs: vec![0.0, -1.0] };
    c.sigma = vec![ScalarFn::Zero];
    let xi = sine(&op, 1.0) + op.grid().sample(|x| 0.3 * (5.0 * std::f64::consts::PI * x[0]).sin());
    let horizon = 0.5;
    let exact = op.kernel_apply(horizon, &xi).unwrap() * (-horizon).exp();
    let error = |steps: usize| {
        let grid = TimeGrid::uniform(horizon, steps).unwrap();
        let ev = Evolver::new(&op, &c, &grid, 4.0, EvolverOptions::default()).unwrap();
        let (u, _) = ev.solve_skeleton(&xi, &Control::zero(&grid, 1)).unwrap();
        op.grid().lp_norm(&(u.terminal() - &exact), 2.0)
    };
    for steps in [16, 32, 64] {
        let ratio = error(steps) / error(2 * steps);
        assert!((ratio - 2.0).abs() <= 0.4, "steps {steps}: ratio {ratio}");
    }
}

fn linear_gaussian_event(op: &KernelOperator, grid: &TimeGrid, xi: &DVector<f64>, eps: f64, tail: f64) -> (TargetSpec, f64, f64) {
    // Terminal value at x0 is Gaussian with mean (e^{TA}ξ)(x0) and variance
    // ε Σ_m Δ (e^{(T − t_m)A}1)(x0)².
    let x0 = op.grid().nearest_interior(&[0.5]);
    let dt = grid.uniform_step().unwrap();
    let ones = DVector::from_element(op.grid().len(), 1.0);
    let mean = op.kernel_apply(grid.horizon(), xi).unwrap()[x0];
    let var: f64 = (0..grid.steps())
        .map(|m| dt * op.kernel_apply(grid.horizon() - grid.times()[m], &ones).unwrap()[x0].powi(2))
        .sum();
    let normal = Normal::new(0.0, 1.0).unwrap();
    let level = mean + (eps * var).sqrt() * normal.inverse_cdf(1.0 - tail);
    let event = TargetSpec::TerminalFunctionalThreshold {
        functional: LinearFunctional::point(op.grid(), &[0.5]),
        level,
    };
    (event, level, 1.0 - normal.cdf((level - mean) / (eps * var).sqrt()))
}

#[test]
fn plain_estimate_matches_gaussian_tail() {
    let op = heat_1d(16);
    let c = make_preset("linear_gaussian", 1, 1).unwrap();
    let grid = TimeGrid::uniform(0.25, 32).unwrap();
    let ev = Evolver::new(&op, &c, &grid, 4.0, EvolverOptions::default()).unwrap();
    let xi = sine(&op, 0.3);
    let (event, _, p) = linear_gaussian_event(&op, &grid, &xi, 0.2, 0.1);
    let est = estimate_event(&ev, &xi, 0.2, &event, 20_000, Method::Plain, None, &EstimateOptions::default()).unwrap();
    assert!((est.p_hat - p).abs() <= 3.0 * est.stderr, "{} vs {p}", est.p_hat);
}

#[test]
fn plain_and_importance_agree_and_importance_reduces_variance() {
    let op = heat_1d(16);
    let c = make_preset("linear_gaussian", 1, 1).unwrap();
    let opts = ActionOptions {
        horizon: 0.25,
        steps: 32,
        ..ActionOptions::default()
    };
    let grid = opts.time_grid().unwrap();
    let ev = Evolver::new(&op, &c, &grid, 4.0, EvolverOptions::default()).unwrap();
    let xi = sine(&op, 0.3);
    let eps = 0.2;
    let n = 20_000;

    let (moderate, _, _) = linear_gaussian_event(&op, &grid, &xi, eps, 0.05);
    let bias = minimize_action_with(&ev, &xi, &moderate, &opts).unwrap().beta;
    let plain = estimate_event(&ev, &xi, eps, &moderate, n, Method::Plain, None, &EstimateOptions::default()).unwrap();
    let is = estimate_event(&ev, &xi, eps, &moderate, n, Method::Importance, Some(&bias), &EstimateOptions::default()).unwrap();
    let combined = (plain.stderr.powi(2) + is.stderr.powi(2)).sqrt();
    assert!((plain.p_hat - is.p_hat).abs() <= 3.0 * combined);

    let (rare, _, p) = linear_gaussian_event(&op, &grid, &xi, eps, 5e-4);
    let bias = minimize_action_with(&ev, &xi, &rare, &opts).unwrap().beta;
    let plain = estimate_event(&ev, &xi, eps, &rare, n, Method::Plain, None, &EstimateOptions::default()).unwrap();
    let is = estimate_event(&ev, &xi, eps, &rare, n, Method::Importance, Some(&bias), &EstimateOptions::default()).unwrap();
    assert!(plain.p_hat <= 1e-3);
    assert!(is.effective_sample_size >= 1.0);
    assert!((is.p_hat - p).abs() <= 3.0 * is.stderr);
    assert!(plain.relative_error() >= 5.0 * is.relative_error(), "{} vs {}", plain.relative_error(), is.relative_error());
}

#[test]
fn lsc_probe_follows_least_squares_values() {
    // A coarse grid keeps the Duhamel map well conditioned: constant noise
    // only reaches the two symmetric modes, both with moderate singular values.
    let op = heat_1d(4);
    let c = make_preset("linear_gaussian", 1, 1).unwrap();
    let opts = ActionOptions {
        horizon: 0.25,
        steps: 8,
        ..ActionOptions::default()
    };
    let grid = opts.time_grid().unwrap();
    let dt = grid.uniform_step().unwrap();
    let ev = Evolver::new(&op, &c, &grid, 4.0, EvolverOptions::default()).unwrap();
    let xi = sine(&op, 1.0);
    let (psi, _) = ev.solve_skeleton(&xi, &Control::constant(&grid, &[0.8])).unwrap();
    // A low-mode perturbation keeps every target well inside the reachable range.
    let perturbation = sine(&op, 0.5);
    let sequence: Vec<DVector<f64>> = [1.0, 2.0, 4.0, 8.0, f64::INFINITY]
        .iter()
        .map(|n| &xi + &perturbation / *n)
        .collect();
    let values = lsc_probe(&ev, &sequence, &psi, &opts).unwrap();

    // Oracle: minimum-norm least squares on the Duhamel map built from the
    // spectral kernel.
    let len = op.grid().len();
    let ones = DVector::from_element(len, dt);
    let mut duhamel = DMatrix::zeros(len, grid.steps());
    for m in 0..grid.steps() {
        duhamel.set_column(m, &op.kernel_apply(0.25 - grid.times()[m], &ones).unwrap());
    }
    let last = values.last().unwrap();
    // The generating control reaches ψ(T), so the infimum is at most its action.
    assert!(*last <= 0.5 * 0.8 * 0.8 * 0.25 + 1e-9);
    let gaps: Vec<f64> = values.iter().map(|v| (v - last).abs()).collect();
    assert!(gaps.windows(2).all(|w| w[1] <= w[0] + 1e-9));
    for (xi_n, v) in sequence.iter().zip(&values) {
        let rhs = psi.terminal() - op.kernel_apply(0.25, xi_n).unwrap();
        let beta = duhamel.clone().svd(true, true).solve(&rhs, 1e-10).unwrap();
        let oracle = 0.5 * dt * beta.norm_squared();
        let reached = &duhamel * &beta - &rhs;
        assert!(reached.norm() < 1e-10);
        assert_relative_eq!(*v, oracle, max_relative = 1e-3);
    }
    let constant = lsc_probe(&ev, &[xi.clone(), xi.clone()], &psi, &opts).unwrap();
    assert_eq!(constant[0], constant[1]);
}

#[test]
fn lsc_probe_is_infinite_without_noise() {
    let op = heat_1d(16);
    let mut c = make_preset("linear_gaussian", 1, 1).unwrap();
    let opts = ActionOptions {
        horizon: 0.25,
        steps: 8,
        ..ActionOptions::default()
    };
    let grid = opts.time_grid().unwrap();
    let ev = Evolver::new(&op, &c, &grid, 4.0, EvolverOptions::default()).unwrap();
    let (psi, _) = ev.solve_skeleton(&sine(&op, 1.0), &Control::constant(&grid, &[2.0])).unwrap();
    c.sigma = vec![ScalarFn::Zero];
    let quiet = Evolver::new(&op, &c, &grid, 4.0, EvolverOptions::default()).unwrap();
    let far: Vec<DVector<f64>> = (1..4).map(|i| sine(&op, -(i as f64))).collect();
    let values = lsc_probe(&quiet, &far, &psi, &opts).unwrap();
    assert!(values.iter().all(|v| v.is_infinite()));
}

#[test]
fn zero_gamma_isolates_data_perturbations() {
    let op = heat_1d(16);
    let c = make_preset("burgers", 1, 1).unwrap();
    let grid = TimeGrid::uniform(0.25, 64).unwrap();
    let ev = Evolver::new(&op, &c, &grid, 5.0, EvolverOptions::default()).unwrap();
    let xi = FieldFamily {
        base: sine(&op, 1.0),
        perturbation: sine(&op, 1.0),
        power: 1.0,
    };
    let phi = ControlFamily::constant(Control::constant(&grid, &[0.5]));
    let table = convergence_experiment(&ev, &xi, &phi, &[0.4, 0.2, 0.1, 0.0], Gamma::Zero, 100, 0).unwrap();
    assert!(table.strictly_decreasing());
    assert!(table.rows.iter().all(|r| r.stderr == 0.0));
    assert!(table.rows[3].mean_distance < 1e-9);
    // Deterministic and Lipschitz in the data: the distance scales like ε.
    assert!((table.slope.unwrap() - 1.0).abs() < 0.1);
}
