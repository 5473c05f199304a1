//! The rate function `I_ξ(ψ) = ½ inf ∫|β|² ds` over controls steering the
//! skeleton to `ψ`, and its numerical minimization.
//!
//! The minimizer works on the discrete problem: `β` is piecewise constant on
//! the solver grid and the constraint is imposed on the exponential-Euler
//! skeleton. A quadratic penalty `μ/2 |r(β)|²` on the constraint residual is
//! increased geometrically; each penalized problem is solved by Gauss–Newton
//! steps with backtracking, using Jacobians from forward sensitivities.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::CoefficientSet;
use crate::error::{Error, Result};
use crate::evolvers::{Evolver, EvolverOptions, SpaceTimeField};
use crate::grid_kernel::{Grid, KernelOperator};
use crate::stochastics::{control_l2_norm, Control, TimeGrid};

/// `½ ∫₀ᵀ |β(s)|² ds`.
pub fn action_of(beta: &Control) -> f64 {
    0.5 * control_l2_norm(beta)
}

/// A linear functional `u ↦ Σ_i w_i u_i` of an interior field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFunctional {
    pub weights: DVector<f64>,
}

impl LinearFunctional {
    /// Point evaluation at the interior node nearest to `x`.
    pub fn point(grid: &Grid, x: &[f64]) -> Self {
        let mut weights = DVector::zeros(grid.len());
        weights[grid.nearest_interior(x)] = 1.0;
        Self { weights }
    }

    /// `∫_D u dx` by the grid quadrature.
    pub fn integral(grid: &Grid) -> Self {
        Self {
            weights: DVector::from_element(grid.len(), grid.cell_volume()),
        }
    }

    pub fn apply(&self, u: &DVector<f64>) -> f64 {
        self.weights.dot(u)
    }
}

/// A rare-event target. Each kind reduces to an equality constraint on the
/// skeleton for the minimizer and to an indicator for Monte Carlo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetSpec {
    /// `ψ(T) = target`.
    TerminalField { target: DVector<f64> },
    /// `Λ(ψ(T)) ≥ level`.
    TerminalFunctionalThreshold { functional: LinearFunctional, level: f64 },
    /// `sup_t |ψ(t) − ψ⁰(t)|_ρ ≥ radius`, with `ψ⁰` the uncontrolled skeleton.
    TubeExit { radius: f64, rho: f64 },
}

impl TargetSpec {
    pub fn check(&self, grid: &Grid) -> Result<()> {
        match self {
            TargetSpec::TerminalField { target } => {
                if target.len() != grid.len() || target.iter().any(|v| !v.is_finite()) {
                    return Err(Error::domain("terminal target must be a finite field on the grid"));
                }
            }
            TargetSpec::TerminalFunctionalThreshold { functional, level } => {
                if functional.weights.len() != grid.len() || !level.is_finite() {
                    return Err(Error::domain("functional weights must match the grid and level be finite"));
                }
            }
            TargetSpec::TubeExit { radius, rho } => {
                if !(*radius > 0.0) || !(*rho >= 1.0) {
                    return Err(Error::domain("tube exit needs radius > 0 and rho >= 1"));
                }
            }
        }
        Ok(())
    }

    /// Scale used in the feasibility tolerance `tol·(1 + |target|)`.
    fn magnitude(&self) -> f64 {
        match self {
            TargetSpec::TerminalField { target } => target.norm(),
            TargetSpec::TerminalFunctionalThreshold { level, .. } => level.abs(),
            TargetSpec::TubeExit { radius, .. } => *radius,
        }
    }

    /// Event indicator of a trajectory; `center` is the uncontrolled skeleton,
    /// needed only for tube exits. Terminal-field events use a sup-norm
    /// ball of radius `field_tolerance`.
    pub fn contains(&self, field: &SpaceTimeField, center: Option<&SpaceTimeField>, field_tolerance: f64) -> bool {
        match self {
            TargetSpec::TerminalField { target } => (field.terminal() - target).amax() <= field_tolerance,
            TargetSpec::TerminalFunctionalThreshold { functional, level } => {
                functional.apply(field.terminal()) >= *level
            }
            TargetSpec::TubeExit { radius, rho } => {
                let center = center.expect("tube exit needs the uncontrolled skeleton");
                field
                    .values()
                    .iter()
                    .zip(center.values())
                    .any(|(a, b)| field.grid().lp_norm(&(a - b), *rho) >= *radius)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub round: usize,
    pub mu: f64,
    pub action: f64,
    pub residual: f64,
}

/// Result of a minimization.
#[derive(Debug, Clone)]
pub struct ActionValue {
    /// `action_of(beta)` when feasible, `+∞` otherwise.
    pub value: f64,
    pub feasible: bool,
    pub beta: Control,
    pub psi: SpaceTimeField,
    /// Euclidean norm of the constraint residual at `beta`.
    pub residual: f64,
    pub iterations: usize,
    pub trace: Vec<TraceRow>,
}

impl ActionValue {
    pub fn write_trace_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "iteration,round,mu,action,residual")?;
        for r in &self.trace {
            writeln!(out, "{},{},{:e},{:.17e},{:.17e}", r.iteration, r.round, r.mu, r.action, r.residual)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionOptions {
    pub horizon: f64,
    pub steps: usize,
    pub rho: f64,
    /// Initial penalty weight.
    pub mu0: f64,
    /// Penalty growth per round.
    pub mu_growth: f64,
    /// Rounds always performed.
    pub rounds: usize,
    /// Extra rounds are added until feasible, up to this many.
    pub max_rounds: usize,
    pub max_inner: usize,
    pub grad_tolerance: f64,
    pub feasibility_tolerance: f64,
    /// Exit times probed for tube targets, spread evenly over `(0, T]`.
    pub tube_times: usize,
    /// Starting control; zero when absent.
    #[serde(skip)]
    pub initial: Option<Control>,
    pub evolver: EvolverOptions,
}

impl Default for ActionOptions {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            steps: 32,
            rho: 4.0,
            mu0: 10.0,
            mu_growth: 10.0,
            rounds: 6,
            max_rounds: 14,
            max_inner: 500,
            grad_tolerance: 1e-8,
            feasibility_tolerance: 1e-6,
            tube_times: 4,
            initial: None,
            evolver: EvolverOptions::default(),
        }
    }
}

impl ActionOptions {
    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::uniform(self.horizon, self.steps)
    }
}

/// The equality constraint at one time index.
#[derive(Debug, Clone)]
enum Constraint {
    Field { m: usize, target: DVector<f64> },
    Linear { m: usize, weights: DVector<f64>, level: f64 },
    Norm { m: usize, center: DVector<f64>, rho: f64, level: f64 },
}

impl Constraint {
    fn time(&self) -> usize {
        match self {
            Constraint::Field { m, .. } | Constraint::Linear { m, .. } | Constraint::Norm { m, .. } => *m,
        }
    }

    /// Residual and its derivative with respect to the state at the constraint time.
    fn residual(&self, grid: &Grid, u: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        match self {
            Constraint::Field { target, .. } => (u - target, DMatrix::identity(u.len(), u.len())),
            Constraint::Linear { weights, level, .. } => (
                DVector::from_element(1, weights.dot(u) - level),
                DMatrix::from_row_slice(1, u.len(), weights.as_slice()),
            ),
            Constraint::Norm { center, rho, level, .. } => {
                let v = u - center;
                let norm = grid.lp_norm(&v, *rho);
                let vol = grid.cell_volume();
                let grad: Vec<f64> = if norm > 0.0 {
                    v.iter()
                        .map(|x| vol * x.abs().powf(rho - 1.0) * x.signum() / norm.powf(rho - 1.0))
                        .collect()
                } else {
                    vec![0.0; v.len()]
                };
                (
                    DVector::from_element(1, norm - level),
                    DMatrix::from_row_slice(1, v.len(), &grad),
                )
            }
        }
    }
}

/// A forward solve with the constraint residual and its control Jacobian.
struct Evaluation {
    trajectory: SpaceTimeField,
    residual: DVector<f64>,
    jacobian: Option<DMatrix<f64>>,
}

/// The penalized objective `½ Σ Δ|β_m|² + μ/2 |r(β)|²` for a fixed
/// constraint, with forward-sensitivity gradients.
pub struct PenalizedProblem<'e, 'a> {
    ev: &'e Evolver<'a>,
    xi: DVector<f64>,
    constraint: Constraint,
}

impl<'e, 'a> PenalizedProblem<'e, 'a> {
    /// The problem for a terminal-field or terminal-functional target;
    /// threshold targets are imposed as equalities.
    pub fn new(ev: &'e Evolver<'a>, xi: &DVector<f64>, target: &TargetSpec) -> Result<Self> {
        let grid = ev.operator().grid();
        target.check(grid)?;
        let m = ev.time().steps();
        let constraint = match target {
            TargetSpec::TerminalField { target } => Constraint::Field { m, target: target.clone() },
            TargetSpec::TerminalFunctionalThreshold { functional, level } => Constraint::Linear {
                m,
                weights: functional.weights.clone(),
                level: *level,
            },
            TargetSpec::TubeExit { .. } => {
                return Err(Error::domain("tube exits are handled through minimize_action"));
            }
        };
        Ok(Self {
            ev,
            xi: xi.clone(),
            constraint,
        })
    }

    fn dimension(&self) -> usize {
        self.ev.time().steps() * self.ev.coefficients().k
    }

    fn control(&self, beta: &DVector<f64>) -> Result<Control> {
        Control::new(
            self.ev.time().clone(),
            self.ev.coefficients().k,
            beta.as_slice().to_vec(),
            None,
        )
    }

    fn evaluate(&self, beta: &DVector<f64>, sensitivities: bool) -> Result<Evaluation> {
        let control = self.control(beta)?;
        let mc = self.constraint.time();
        let n = self.xi.len();
        let k = self.ev.coefficients().k;
        let big_n = self.dimension();
        let mut sens = sensitivities.then(|| DMatrix::<f64>::zeros(n, big_n));
        let mut states: Vec<DVector<f64>> = Vec::with_capacity(self.ev.time().steps() + 1);
        self.ev.run_with(&self.xi, 0.0, None, Some(&control), |_, u| states.push(u.clone()))?;
        if let Some(s) = sens.as_mut() {
            let p = self.ev.propagator();
            for m in 0..mc {
                let active = m * k;
                let mut rhs = DMatrix::<f64>::zeros(n, active + k);
                if active > 0 {
                    let jac = self.ev.state_jacobian(m, &states[m], &control);
                    rhs.columns_mut(0, active).copy_from(&(jac * s.columns(0, active)));
                }
                for (j, col) in self.ev.control_columns(m, &states[m]).into_iter().enumerate() {
                    rhs.set_column(active + j, &col);
                }
                s.columns_mut(0, active + k).copy_from(&(p * rhs));
            }
        }
        let (residual, dr) = self.constraint.residual(self.ev.operator().grid(), &states[mc]);
        let jacobian = sens.map(|s| dr * s);
        let trajectory = SpaceTimeField::new(
            self.ev.operator().grid().clone(),
            self.ev.time().times().to_vec(),
            states,
            self.ev.rho(),
        )?;
        Ok(Evaluation {
            trajectory,
            residual,
            jacobian,
        })
    }

    fn action_part(&self, beta: &DVector<f64>) -> f64 {
        0.5 * self.ev.dt() * beta.norm_squared()
    }

    /// Objective value and gradient `Δβ + μ Jᵀ r`.
    pub fn objective(&self, beta: &DVector<f64>, mu: f64) -> Result<(f64, DVector<f64>)> {
        let e = self.evaluate(beta, true)?;
        let jac = e.jacobian.expect("requested");
        let value = self.action_part(beta) + 0.5 * mu * e.residual.norm_squared();
        let grad = beta * self.ev.dt() + jac.transpose() * &e.residual * mu;
        Ok((value, grad))
    }

    /// Objective value alone.
    pub fn value(&self, beta: &DVector<f64>, mu: f64) -> Result<f64> {
        let e = self.evaluate(beta, false)?;
        Ok(self.action_part(beta) + 0.5 * mu * e.residual.norm_squared())
    }

    fn solve(&self, start: DVector<f64>, opts: &ActionOptions, tolerance: f64) -> Result<ActionValue> {
        let dt = self.ev.dt();
        let mut beta = start;
        let mut trace = Vec::new();
        let mut iterations = 0;
        let mut eval = self.evaluate(&beta, true)?;
        let mut inner_converged;
        let mut round = 0;
        loop {
            let mu = opts.mu0 * opts.mu_growth.powi(round as i32);
            inner_converged = false;
            for _ in 0..opts.max_inner {
                let jac = eval.jacobian.as_ref().expect("requested");
                let jtr = jac.transpose() * &eval.residual * mu;
                let grad = &beta * dt + &jtr;
                let scale = 1.0 + (&beta * dt).norm() + jtr.norm();
                trace.push(TraceRow {
                    iteration: iterations,
                    round,
                    mu,
                    action: self.action_part(&beta),
                    residual: eval.residual.norm(),
                });
                if grad.norm() < opts.grad_tolerance * scale {
                    inner_converged = true;
                    break;
                }
                let step = gauss_newton_step(jac, &grad, dt, mu);
                let phi0 = self.action_part(&beta) + 0.5 * mu * eval.residual.norm_squared();
                let slope = grad.dot(&step);
                let mut t = 1.0;
                let mut accepted = None;
                for _ in 0..40 {
                    let trial = &beta + &step * t;
                    let e = match self.evaluate(&trial, true) {
                        Ok(e) => e,
                        Err(Error::BlowUp { .. }) | Err(Error::StepGuard { .. }) => {
                            t *= 0.5;
                            continue;
                        }
                        Err(e) => return Err(e),
                    };
                    let phi = self.action_part(&trial) + 0.5 * mu * e.residual.norm_squared();
                    if phi <= phi0 + 1e-4 * t * slope {
                        accepted = Some((trial, e));
                        break;
                    }
                    t *= 0.5;
                }
                iterations += 1;
                match accepted {
                    Some((trial, e)) => {
                        let moved = (&trial - &beta).norm();
                        beta = trial;
                        eval = e;
                        if moved <= 1e-13 * (1.0 + beta.norm()) {
                            inner_converged = true;
                            break;
                        }
                    }
                    None => {
                        // No decrease is possible along the Gauss–Newton
                        // direction: the iterate sits at the floating-point floor.
                        inner_converged = true;
                        break;
                    }
                }
            }
            round += 1;
            let feasible = eval.residual.norm() <= tolerance;
            if (round >= opts.rounds && feasible) || round >= opts.max_rounds {
                break;
            }
        }
        let residual = eval.residual.norm();
        let beta = self.control(&beta)?;
        let feasible = residual <= tolerance;
        let value = ActionValue {
            value: if feasible { action_of(&beta) } else { f64::INFINITY },
            feasible,
            beta,
            psi: eval.trajectory,
            residual,
            iterations,
            trace,
        };
        if !feasible && !inner_converged {
            return Err(Error::NonConvergence(Box::new(value)));
        }
        Ok(value)
    }
}

/// Minimizer of `½Δ|β+δ|² + μ/2|r + Jδ|²` over `δ`, i.e.
/// `δ = −(ΔI + μJᵀJ)⁻¹ g` evaluated through the SVD of `J`.
fn gauss_newton_step(jac: &DMatrix<f64>, grad: &DVector<f64>, dt: f64, mu: f64) -> DVector<f64> {
    let svd = jac.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested");
    let proj = &v_t * grad;
    let weighted = DVector::from_iterator(
        proj.len(),
        proj.iter().zip(svd.singular_values.iter()).map(|(p, s)| {
            let s2 = mu * s * s;
            p * s2 / (dt * (dt + s2))
        }),
    );
    -(grad / dt - v_t.transpose() * weighted)
}

fn uncontrolled(ev: &Evolver, xi: &DVector<f64>) -> Result<SpaceTimeField> {
    Ok(ev.skeleton_recursion(xi, &Control::zero(ev.time(), ev.coefficients().k))?.0)
}

fn feasible_zero(ev: &Evolver, psi: SpaceTimeField) -> ActionValue {
    ActionValue {
        value: 0.0,
        feasible: true,
        beta: Control::zero(ev.time(), ev.coefficients().k),
        psi,
        residual: 0.0,
        iterations: 0,
        trace: Vec::new(),
    }
}

/// Minimum action for `target` on the time grid of `ev`.
pub fn minimize_action_with(
    ev: &Evolver,
    xi: &DVector<f64>,
    target: &TargetSpec,
    opts: &ActionOptions,
) -> Result<ActionValue> {
    let grid = ev.operator().grid();
    target.check(grid)?;
    if xi.len() != grid.len() || xi.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("initial field must be finite and match the grid"));
    }
    let tolerance = opts.feasibility_tolerance * (1.0 + target.magnitude());
    let k = ev.coefficients().k;
    let dim = ev.time().steps() * k;
    let start = match &opts.initial {
        Some(c) => {
            if c.grid() != ev.time() || c.k() != k {
                return Err(Error::domain("initial control does not match the solver grid"));
            }
            DVector::from_column_slice(c.values())
        }
        None => DVector::zeros(dim),
    };
    match target {
        TargetSpec::TerminalField { .. } => PenalizedProblem::new(ev, xi, target)?.solve(start, opts, tolerance),
        TargetSpec::TerminalFunctionalThreshold { functional, level } => {
            let free = uncontrolled(ev, xi)?;
            if functional.apply(free.terminal()) >= *level {
                return Ok(feasible_zero(ev, free));
            }
            PenalizedProblem::new(ev, xi, target)?.solve(start, opts, tolerance)
        }
        TargetSpec::TubeExit { radius, rho } => {
            let center = uncontrolled(ev, xi)?;
            let steps = ev.time().steps();
            let count = opts.tube_times.clamp(1, steps);
            let mut times: Vec<usize> = (1..=count).map(|i| (i * steps).div_ceil(count)).collect();
            times.dedup();
            let results: Vec<Result<ActionValue>> = times
                .par_iter()
                .map(|&m| {
                    let problem = PenalizedProblem {
                        ev,
                        xi: xi.clone(),
                        constraint: Constraint::Norm {
                            m,
                            center: center.at(m).clone(),
                            rho: *rho,
                            level: *radius,
                        },
                    };
                    let start = if opts.initial.is_some() {
                        start.clone()
                    } else {
                        tube_start(&problem, m, *radius, *rho)?
                    };
                    problem.solve(start, opts, tolerance)
                })
                .collect();
            let mut best: Option<ActionValue> = None;
            let mut first_error = None;
            for r in results {
                match r {
                    Ok(v) => {
                        if best.as_ref().is_none_or(|b| v.value < b.value) {
                            best = Some(v);
                        }
                    }
                    Err(e) => {
                        first_error.get_or_insert(e);
                    }
                }
            }
            match (best, first_error) {
                (Some(b), _) if b.feasible => Ok(b),
                (_, Some(e)) => Err(e),
                (Some(b), None) => Ok(b),
                (None, None) => unreachable!("at least one exit time is probed"),
            }
        }
    }
}

/// Start for a tube exit at step `m`: the control pushing the integral of
/// the state up, scaled so the linearized deviation has norm `radius`.
fn tube_start(problem: &PenalizedProblem, m: usize, radius: f64, rho: f64) -> Result<DVector<f64>> {
    let grid = problem.ev.operator().grid();
    let probe = PenalizedProblem {
        ev: problem.ev,
        xi: problem.xi.clone(),
        constraint: Constraint::Linear {
            m,
            weights: LinearFunctional::integral(grid).weights,
            level: 0.0,
        },
    };
    let zero = DVector::zeros(problem.dimension());
    let e = probe.evaluate(&zero, true)?;
    let jac = e.jacobian.expect("requested");
    let direction: DVector<f64> = jac.row(0).transpose();
    if direction.norm() == 0.0 {
        return Ok(zero);
    }
    // Deviation produced by `direction`, measured through the full sensitivity.
    let full = PenalizedProblem {
        ev: problem.ev,
        xi: problem.xi.clone(),
        constraint: Constraint::Field {
            m,
            target: DVector::zeros(grid.len()),
        },
    };
    let sens = full.evaluate(&zero, true)?.jacobian.expect("requested");
    let deviation = grid.lp_norm(&(sens * &direction), rho);
    if deviation == 0.0 {
        return Ok(zero);
    }
    Ok(direction * (radius / deviation))
}

/// Minimum action with the skeleton discretized on `opts.horizon / opts.steps`.
pub fn minimize_action(
    op: &KernelOperator,
    c: &CoefficientSet,
    xi: &DVector<f64>,
    target: &TargetSpec,
    opts: &ActionOptions,
) -> Result<ActionValue> {
    let ev = Evolver::new(op, c, &opts.time_grid()?, opts.rho, opts.evolver)?;
    minimize_action_with(&ev, xi, target, opts)
}

/// Independent minimizations from several starting controls, run in parallel.
pub fn minimize_action_multistart(
    ev: &Evolver,
    xi: &DVector<f64>,
    target: &TargetSpec,
    opts: &ActionOptions,
    starts: &[Control],
) -> Vec<Result<ActionValue>> {
    starts
        .par_iter()
        .map(|s| {
            let o = ActionOptions {
                initial: Some(s.clone()),
                ..opts.clone()
            };
            minimize_action_with(ev, xi, target, &o)
        })
        .collect()
}

/// `I_{ξₙ}(ψ)` along a sequence of initial fields, for the terminal state
/// `ψ(T)` of the given trajectory.
pub fn lsc_probe(
    ev: &Evolver,
    xi_sequence: &[DVector<f64>],
    psi: &SpaceTimeField,
    opts: &ActionOptions,
) -> Result<Vec<f64>> {
    let target = TargetSpec::TerminalField {
        target: psi.terminal().clone(),
    };
    xi_sequence
        .par_iter()
        .map(|xi| minimize_action_with(ev, xi, &target, opts).map(|v| v.value))
        .collect()
}
