//! One function per subcommand. Each reads the resolved configuration,
//! writes its artifacts into the run directory and returns a one-line summary.

use nalgebra::DVector;
use serde::Serialize;
use serde_json::json;

use spde_ldp::action::{action_of, minimize_action_with, ActionValue, TargetSpec};
use spde_ldp::coefficients::{validate_assumptions, CoefficientSet, SampleSpec};
use spde_ldp::evolvers::Evolver;
use spde_ldp::grid_kernel::{
    assemble_operator, build_grid, default_time_samples, EllipticCoefficients, GaussianSampling, KernelOperator,
};
use spde_ldp::ldp_lab::{
    convergence_experiment, estimate_event, fit_rate, mean_and_stderr, run_ensemble, tightness_probe, ControlFamily,
    EstimateOptions, FieldFamily, Method, ProbabilityEstimate,
};
use spde_ldp::stochastics::{girsanov_log_weight, sample_brownian_stream, TimeGrid};

use crate::config::RunConfig;
use crate::svg::{line_plot, Series};
use crate::{CliError, Command, RunDir};

pub fn dispatch(command: Command, cfg: &RunConfig, dir: &mut RunDir) -> Result<String, CliError> {
    match command {
        Command::Simulate => simulate(cfg, dir),
        Command::Skeleton => skeleton(cfg, dir),
        Command::Controlled => controlled(cfg, dir),
        Command::MinimizeAction => minimize(cfg, dir),
        Command::McEstimate => mc_estimate(cfg, dir),
        Command::FitRate => rate(cfg, dir),
        Command::Converge => converge(cfg, dir),
        Command::Tightness => tightness(cfg, dir),
        Command::VerifyKernel => verify_kernel(cfg, dir),
        Command::ValidateCoeffs => validate_coeffs(cfg, dir),
    }
}

fn invalid(field: &str, message: impl Into<String>) -> CliError {
    CliError::Config {
        field: field.to_string(),
        message: message.into(),
    }
}

/// Operator, coefficients and time grid shared by the solver stages.
struct Setup {
    op: KernelOperator,
    coefficients: CoefficientSet,
    time: TimeGrid,
}

impl Setup {
    fn new(cfg: &RunConfig) -> Result<Self, CliError> {
        let grid = build_grid(&cfg.grid.domain()).map_err(|e| invalid("grid", e.to_string()))?;
        let op = assemble_operator(&grid, &EllipticCoefficients::identity(grid.dim()))?;
        Ok(Self {
            op,
            coefficients: cfg.coefficient_set()?,
            time: cfg.time_grid()?,
        })
    }

    fn evolver(&self, cfg: &RunConfig) -> Result<Evolver<'_>, CliError> {
        Ok(Evolver::new(&self.op, &self.coefficients, &self.time, cfg.rho(), cfg.evolver_options())?)
    }

    fn initial(&self, cfg: &RunConfig) -> DVector<f64> {
        cfg.initial.sample(self.op.grid())
    }
}

#[derive(Serialize)]
struct PathRow {
    index: usize,
    sup_lp_norm: f64,
    terminal_lp_norm: f64,
    terminal_integral: f64,
}

fn simulate(cfg: &RunConfig, dir: &mut RunDir) -> Result<String, CliError> {
    let s = Setup::new(cfg)?;
    let ev = s.evolver(cfg)?;
    let xi = s.initial(cfg);
    let grid = s.op.grid();
    let rho = cfg.rho();
    let paths = if cfg.eps == 0.0 { 1 } else { cfg.paths };
    let k = s.coefficients.k;

    let first = sample_brownian_stream(k, &s.time, cfg.seed, 0)?;
    let (field, diag) = ev.integrate_spde(&xi, cfg.eps, &first)?;
    dir.write_with("field.csv", |w| field.write_csv(w))?;

    let rows = run_ensemble(&ev, paths, cfg.seed, |i, path| {
        let mut sup: f64 = 0.0;
        let mut terminal = DVector::zeros(0);
        ev.run_with(&xi, cfg.eps, Some(path), None, |m, u| {
            sup = sup.max(grid.lp_norm(u, rho));
            if m == s.time.steps() {
                terminal = u.clone();
            }
        })?;
        Ok(PathRow {
            index: i,
            sup_lp_norm: sup,
            terminal_lp_norm: grid.lp_norm(&terminal, rho),
            terminal_integral: terminal.sum() * grid.cell_volume(),
        })
    })?;
    let mut csv = String::from("index,sup_lp_norm,terminal_lp_norm,terminal_integral\n");
    for r in &rows {
        csv += &format!("{},{:.17e},{:.17e},{:.17e}\n", r.index, r.sup_lp_norm, r.terminal_lp_norm, r.terminal_integral);
    }
    dir.write_bytes("ensemble.csv", csv.as_bytes())?;

    let (sup_mean, sup_se) = mean_and_stderr(&rows.iter().map(|r| r.sup_lp_norm).collect::<Vec<_>>());
    let (int_mean, int_se) = mean_and_stderr(&rows.iter().map(|r| r.terminal_integral).collect::<Vec<_>>());
    dir.write_json(
        "summary.json",
        &json!({
            "paths": paths,
            "eps": cfg.eps,
            "rho": rho,
            "sup_lp_norm": { "mean": sup_mean, "stderr": sup_se },
            "terminal_integral": { "mean": int_mean, "stderr": int_se },
            "path0_solver": diag,
        }),
    )?;
    Ok(format!(
        "simulate: {paths} paths, mean sup |u|_rho = {sup_mean:.6} ± {sup_se:.2e}"
    ))
}

fn skeleton(cfg: &RunConfig, dir: &mut RunDir) -> Result<String, CliError> {
    let s = Setup::new(cfg)?;
    let ev = s.evolver(cfg)?;
    let xi = s.initial(cfg);
    let phi = cfg.control(&s.time);
    let (psi, diag) = ev.solve_skeleton(&xi, &phi)?;
    dir.write_with("skeleton.csv", |w| psi.write_csv(w))?;
    dir.write_with("skeleton.stf", |w| psi.write_snapshot(w))?;
    dir.write_with("control.csv", |w| phi.write_csv(w))?;
    let action = action_of(&phi);
    dir.write_json(
        "summary.json",
        &json!({
            "control_action": action,
            "sup_lp_norm": (0..=s.time.steps()).map(|m| psi.lp_norm(m, cfg.rho())).fold(0.0, f64::max),
            "solver": diag,
        }),
    )?;
    Ok(format!(
        "skeleton: {} Picard sweeps, increment {:.2e}, control action {action:.6}",
        diag.iterations, diag.last_increment
    ))
}

fn controlled(cfg: &RunConfig, dir: &mut RunDir) -> Result<String, CliError> {
    let s = Setup::new(cfg)?;
    let ev = s.evolver(cfg)?;
    let xi = s.initial(cfg);
    let phi = cfg.control(&s.time);
    let path = sample_brownian_stream(s.coefficients.k, &s.time, cfg.seed, 0)?;
    let (field, diag) = ev.integrate_controlled(&xi, cfg.eps, &path, &phi)?;
    dir.write_with("field.csv", |w| field.write_csv(w))?;
    let log_weight = if cfg.eps > 0.0 {
        Some(girsanov_log_weight(&phi, &path, cfg.eps)?)
    } else {
        None
    };
    dir.write_json(
        "summary.json",
        &json!({ "eps": cfg.eps, "girsanov_log_weight": log_weight, "solver": diag }),
    )?;
    Ok(format!("controlled: eps = {}, sup |u| = {:.6}", cfg.eps, field.sup_norm()))
}

fn write_action(dir: &mut RunDir, av: &ActionValue) -> Result<(), CliError> {
    dir.write_with("control.csv", |w| av.beta.write_csv(w))?;
    dir.write_with("trajectory.csv", |w| av.psi.write_csv(w))?;
    dir.write_with("trace.csv", |w| av.write_trace_csv(w))?;
    dir.write_json(
        "action.json",
        &json!({
            "value": finite_or_null(av.value),
            "feasible": av.feasible,
            "residual": av.residual,
            "iterations": av.iterations,
        }),
    )
}

fn finite_or_null(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn minimize(cfg: &RunConfig, dir: &mut RunDir) -> Result<String, CliError> {
    let s = Setup::new(cfg)?;
    let ev = s.evolver(cfg)?;
    let xi = s.initial(cfg);
    let target = cfg.target(s.op.grid());
    let av = minimize_action_with(&ev, &xi, &target, &cfg.action_options())?;
    write_action(dir, &av)?;
    Ok(format!(
        "minimize-action: value = {}, residual = {:.2e}, {} iterations",
        av.value, av.residual, av.iterations
    ))
}

/// Optimal control for the event, used as the importance-sampling bias.
fn bias_control(cfg: &RunConfig, ev: &Evolver, xi: &DVector<f64>, target: &TargetSpec) -> Result<ActionValue, CliError> {
    let av = minimize_action_with(ev, xi, target, &cfg.action_options())?;
    if !av.feasible {
        return Err(CliError::Numerical(spde_ldp::Error::DegenerateEstimate(
            "the event is unreachable by the skeleton, so no importance bias exists".to_string(),
        )));
    }
    Ok(av)
}

fn check_paths(cfg: &RunConfig, minimum: usize) -> Result<(), CliError> {
    if cfg.paths < minimum {
        return Err(invalid("paths", format!("at least {minimum} paths are required, got {}", cfg.paths)));
    }
    Ok(())
}

fn estimate_options(cfg: &RunConfig, seed: u64) -> EstimateOptions {
    EstimateOptions {
        seed,
        field_tolerance: cfg.estimate.field_tolerance,
    }
}

fn mc_estimate(cfg: &RunConfig, dir: &mut RunDir) -> Result<String, CliError> {
    check_paths(cfg, 100)?;
    if !(cfg.eps > 0.0) {
        return Err(invalid("eps", "rare-event estimation needs eps > 0"));
    }
    let s = Setup::new(cfg)?;
    let ev = s.evolver(cfg)?;
    let xi = s.initial(cfg);
    let target = cfg.target(s.op.grid());
    let action = match cfg.estimate.method {
        Method::Importance => {
            let av = bias_control(cfg, &ev, &xi, &target)?;
            write_action(dir, &av)?;
            Some(av)
        }
        Method::Plain => None,
    };
    let est = estimate_event(
        &ev,
        &xi,
        cfg.eps,
        &target,
        cfg.paths,
        cfg.estimate.method,
        action.as_ref().map(|a| &a.beta),
        &estimate_options(cfg, cfg.seed),
    )?;
    dir.write_json(
        "estimate.json",
        &json!({
            "p_hat": est.p_hat,
            "stderr": est.stderr,
            "relative_error": finite_or_null(est.relative_error()),
            "n": est.n,
            "method": est.method,
            "eps": est.eps,
            "hits": est.hits,
            "effective_sample_size": est.effective_sample_size,
            "action": action.as_ref().map(|a| a.value),
        }),
    )?;
    Ok(format!(
        "mc-estimate: p = {:.6e} ± {:.2e} ({} hits of {})",
        est.p_hat, est.stderr, est.hits, est.n
    ))
}

fn rate(cfg: &RunConfig, dir: &mut RunDir) -> Result<String, CliError> {
    check_paths(cfg, 100)?;
    if cfg.eps_grid.iter().any(|e| *e <= 0.0) {
        return Err(invalid("eps_grid", "rate fits need every eps > 0"));
    }
    let mut distinct = cfg.eps_grid.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(invalid("eps_grid", "rate fits need at least 3 distinct eps values"));
    }
    let s = Setup::new(cfg)?;
    let ev = s.evolver(cfg)?;
    let xi = s.initial(cfg);
    let target = cfg.target(s.op.grid());
    let action = match cfg.estimate.method {
        Method::Importance => Some(bias_control(cfg, &ev, &xi, &target)?),
        Method::Plain => minimize_action_with(&ev, &xi, &target, &cfg.action_options()).ok(),
    };
    if let Some(av) = &action {
        write_action(dir, av)?;
    }
    let bias = match cfg.estimate.method {
        Method::Importance => action.as_ref().map(|a| &a.beta),
        Method::Plain => None,
    };
    let mut estimates: Vec<ProbabilityEstimate> = Vec::with_capacity(cfg.eps_grid.len());
    for (i, &eps) in cfg.eps_grid.iter().enumerate() {
        let opts = estimate_options(cfg, cfg.seed.wrapping_add(i as u64));
        estimates.push(estimate_event(&ev, &xi, eps, &target, cfg.paths, cfg.estimate.method, bias, &opts)?);
    }
    let mut csv = String::from("eps,p_hat,stderr,hits,effective_sample_size,minus_eps_log_p\n");
    for e in &estimates {
        csv += &format!(
            "{:.17e},{:.17e},{:.17e},{},{:.17e},{:.17e}\n",
            e.eps,
            e.p_hat,
            e.stderr,
            e.hits,
            e.effective_sample_size,
            -e.eps * e.p_hat.ln()
        );
    }
    dir.write_bytes("estimates.csv", csv.as_bytes())?;
    let fit = fit_rate(&estimates)?;
    let action_value = action.as_ref().and_then(|a| finite_or_null(a.value));
    dir.write_json(
        "rate.json",
        &json!({
            "rate": fit.rate,
            "slope": fit.slope,
            "residuals": fit.residuals,
            "action": action_value,
            "relative_gap": action_value.filter(|a| *a > 0.0).map(|a| (fit.rate - a) / a),
        }),
    )?;
    if cfg.plots {
        let mut series = vec![Series {
            label: "-eps log p".to_string(),
            points: fit.eps_grid.iter().copied().zip(fit.minus_eps_log_p.iter().copied()).collect(),
        }];
        let (lo, hi) = (distinct[0], distinct[distinct.len() - 1]);
        series.push(Series {
            label: "affine fit".to_string(),
            points: vec![(0.0, fit.rate), (lo, fit.rate + fit.slope * lo), (hi, fit.rate + fit.slope * hi)],
        });
        if let Some(a) = action_value {
            series.push(Series {
                label: "action".to_string(),
                points: vec![(0.0, a), (hi, a)],
            });
        }
        dir.write_bytes("rate.svg", line_plot("Rate fit", "eps", "-eps log p", &series).as_bytes())?;
    }
    Ok(format!(
        "fit-rate: rate = {:.6}, action = {}",
        fit.rate,
        action_value.map_or("n/a".to_string(), |a| format!("{a:.6}"))
    ))
}

fn converge(cfg: &RunConfig, dir: &mut RunDir) -> Result<String, CliError> {
    let s = Setup::new(cfg)?;
    let ev = s.evolver(cfg)?;
    let xi = FieldFamily::constant(s.initial(cfg));
    let phi = ControlFamily::constant(cfg.control(&s.time));
    let table = convergence_experiment(&ev, &xi, &phi, &cfg.eps_grid, cfg.gamma, cfg.paths, cfg.seed)?;
    let mut csv = String::from("eps,mean_distance,stderr\n");
    for r in &table.rows {
        csv += &format!("{:.17e},{:.17e},{:.17e}\n", r.eps, r.mean_distance, r.stderr);
    }
    dir.write_bytes("convergence.csv", csv.as_bytes())?;
    dir.write_json(
        "convergence.json",
        &json!({ "rows": table.rows, "slope": table.slope, "strictly_decreasing": table.strictly_decreasing() }),
    )?;
    if cfg.plots {
        let series = [Series {
            label: "mean distance".to_string(),
            points: table.rows.iter().map(|r| (r.eps, r.mean_distance)).collect(),
        }];
        dir.write_bytes(
            "convergence.svg",
            line_plot("Distance to the skeleton", "eps", "E sup_t |v - psi|_rho", &series).as_bytes(),
        )?;
    }
    Ok(format!(
        "converge: slope = {}, strictly decreasing = {}",
        table.slope.map_or("n/a".to_string(), |s| format!("{s:.4}")),
        table.strictly_decreasing()
    ))
}

fn tightness(cfg: &RunConfig, dir: &mut RunDir) -> Result<String, CliError> {
    check_paths(cfg, 1000)?;
    if cfg.levels.is_empty() || cfg.levels.iter().any(|c| !(*c > 0.0)) {
        return Err(invalid("levels", "needs at least one positive level"));
    }
    let s = Setup::new(cfg)?;
    let ev = s.evolver(cfg)?;
    let xi = s.initial(cfg);
    let table = tightness_probe(&ev, &xi, &cfg.eps_grid, &cfg.levels, cfg.paths, cfg.seed)?;
    let mut csv = String::from("eps,level,probability\n");
    for (e, row) in table.eps_grid.iter().zip(&table.probabilities) {
        for (c, p) in table.c_grid.iter().zip(row) {
            csv += &format!("{e:.17e},{c:.17e},{p:.17e}\n");
        }
    }
    dir.write_bytes("tightness.csv", csv.as_bytes())?;
    dir.write_json(
        "tightness.json",
        &json!({
            "eps_grid": table.eps_grid,
            "levels": table.c_grid,
            "sup_over_eps": table.sup_over_eps,
            "aborted": table.aborted,
            "nonincreasing_in_level": table.nonincreasing_in_c(),
        }),
    )?;
    if cfg.plots {
        let series = [Series {
            label: "sup over eps".to_string(),
            points: table.c_grid.iter().copied().zip(table.sup_over_eps.iter().copied()).collect(),
        }];
        dir.write_bytes(
            "tightness.svg",
            line_plot("Tail of sup_t |u|_rho", "level C", "sup_eps P(sup >= C)", &series).as_bytes(),
        )?;
    }
    Ok(format!(
        "tightness: sup over eps = {:?}, aborted = {:?}",
        table.sup_over_eps, table.aborted
    ))
}

fn verify_kernel(cfg: &RunConfig, dir: &mut RunDir) -> Result<String, CliError> {
    let grid = build_grid(&cfg.grid.domain()).map_err(|e| invalid("grid", e.to_string()))?;
    let op = assemble_operator(&grid, &EllipticCoefficients::identity(grid.dim()))?;
    dir.write_with("eigenvalues.csv", |w| op.write_eigen_csv(w))?;
    let report = op.fit_kernel_estimates(
        cfg.kernel.p,
        &default_time_samples(cfg.kernel.time_samples),
        &GaussianSampling {
            samples: cfg.kernel.gaussian_samples,
            seed: cfg.seed,
        },
    )?;
    dir.write_json("kernel_report.json", &report)?;
    let line = format!(
        "verify-kernel: lambda = {:.4}, E1..E4 = {} {} {} {}",
        report.lambda_p, report.pass_e1, report.pass_e2, report.pass_e3, report.pass_e4
    );
    if report.all_pass() {
        Ok(line)
    } else {
        Err(CliError::ChecksFailed(line))
    }
}

fn validate_coeffs(cfg: &RunConfig, dir: &mut RunDir) -> Result<String, CliError> {
    let c = cfg.coefficient_set()?;
    let extents = cfg.grid.domain().extents;
    let report = validate_assumptions(&c, cfg.horizon, &SampleSpec::default_for(extents))?;
    dir.write_json("validation.json", &report)?;
    let failing: Vec<&str> = report.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
    if failing.is_empty() {
        Ok(format!("validate-coeffs: all {} checks pass", report.checks.len()))
    } else {
        Err(CliError::ChecksFailed(format!("validate-coeffs: failing {}", failing.join(", "))))
    }
}

