//! Verification experiments: rare-event Monte Carlo, rate fitting, the
//! controlled-process convergence table and the tightness proxy.
//!
//! Every ensemble draws path `i` from the counter-based stream `(seed, i)`
//! and aggregates per-path results sequentially in index order, so results do
//! not depend on the number of worker threads.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::action::TargetSpec;
use crate::error::{Error, Result};
use crate::evolvers::{Evolver, SpaceTimeField};
use crate::grid_kernel::least_squares_line;
use crate::stochastics::{girsanov_log_weight, sample_brownian_stream, Control, NoisePath};

/// Runs `f` on paths `0..n` in parallel and returns results in index order.
pub fn run_ensemble<T: Send>(
    ev: &Evolver,
    n: usize,
    seed: u64,
    f: impl Fn(usize, &NoisePath) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let k = ev.coefficients().k;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let path = sample_brownian_stream(k, ev.time(), seed, i as u64)?;
            f(i, &path)
        })
        .collect()
}

/// Sample mean and standard error of the mean.
pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Plain,
    Importance,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbabilityEstimate {
    pub p_hat: f64,
    pub stderr: f64,
    pub n: usize,
    pub method: Method,
    pub eps: f64,
    pub event: TargetSpec,
    /// Number of samples inside the event.
    pub hits: usize,
    /// `(Σ w)² / Σ w²` over the weighted indicators; `hits` for plain runs.
    pub effective_sample_size: f64,
}

impl ProbabilityEstimate {
    pub fn relative_error(&self) -> f64 {
        self.stderr / self.p_hat
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateOptions {
    pub seed: u64,
    /// Sup-norm radius of the ball used for terminal-field events.
    pub field_tolerance: f64,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            field_tolerance: 1e-2,
        }
    }
}

/// Streaming event indicator over a trajectory.
struct EventMonitor<'a> {
    event: &'a TargetSpec,
    center: Option<&'a SpaceTimeField>,
    grid: &'a crate::grid_kernel::Grid,
    steps: usize,
    tolerance: f64,
    hit: bool,
}

impl EventMonitor<'_> {
    fn observe(&mut self, m: usize, u: &DVector<f64>) {
        match self.event {
            TargetSpec::TubeExit { radius, rho } => {
                if !self.hit {
                    let c = self.center.expect("tube exit needs the uncontrolled skeleton").at(m);
                    self.hit = self.grid.lp_norm(&(u - c), *rho) >= *radius;
                }
            }
            TargetSpec::TerminalFunctionalThreshold { functional, level } => {
                if m == self.steps {
                    self.hit = functional.apply(u) >= *level;
                }
            }
            TargetSpec::TerminalField { target } => {
                if m == self.steps {
                    self.hit = (u - target).amax() <= self.tolerance;
                }
            }
        }
    }
}

/// `P(u^ε ∈ event)` by plain sampling or by sampling the controlled process
/// with `bias` and reweighting with the Girsanov density.
pub fn estimate_event(
    ev: &Evolver,
    xi: &DVector<f64>,
    eps: f64,
    event: &TargetSpec,
    n: usize,
    method: Method,
    bias: Option<&Control>,
    opts: &EstimateOptions,
) -> Result<ProbabilityEstimate> {
    if n < 100 {
        return Err(Error::domain(format!("at least 100 samples are required, got {n}")));
    }
    if !(eps > 0.0) {
        return Err(Error::domain(format!("rare-event estimation needs eps > 0, got {eps}")));
    }
    let grid = ev.operator().grid();
    event.check(grid)?;
    let control = match method {
        Method::Plain => None,
        Method::Importance => Some(bias.ok_or_else(|| Error::domain("importance sampling needs a bias control"))?),
    };
    let center = match event {
        TargetSpec::TubeExit { .. } => {
            Some(ev.skeleton_recursion(xi, &Control::zero(ev.time(), ev.coefficients().k))?.0)
        }
        _ => None,
    };
    let samples = run_ensemble(ev, n, opts.seed, |_, path| {
        let mut monitor = EventMonitor {
            event,
            center: center.as_ref(),
            grid,
            steps: ev.time().steps(),
            tolerance: opts.field_tolerance,
            hit: false,
        };
        ev.run_with(xi, eps, Some(path), control, |m, u| monitor.observe(m, u))?;
        let weight = match control {
            Some(c) => girsanov_log_weight(c, path, eps)?.exp(),
            None => 1.0,
        };
        Ok(if monitor.hit { weight } else { 0.0 })
    })?;
    let hits = samples.iter().filter(|w| **w > 0.0).count();
    let (p_hat, stderr) = mean_and_stderr(&samples);
    let effective_sample_size = match method {
        Method::Plain => hits as f64,
        Method::Importance => {
            let s: f64 = samples.iter().sum();
            let s2: f64 = samples.iter().map(|w| w * w).sum();
            if s2 > 0.0 {
                s * s / s2
            } else {
                0.0
            }
        }
    };
    if method == Method::Importance && effective_sample_size < 1.0 - 1e-12 {
        return Err(Error::DegenerateEstimate(format!(
            "no weighted sample hit the event at eps = {eps}"
        )));
    }
    Ok(ProbabilityEstimate {
        p_hat: p_hat.clamp(0.0, 1.0),
        stderr,
        n,
        method,
        eps,
        event: event.clone(),
        hits,
        effective_sample_size,
    })
}

/// Affine fit `−ε log p̂ = I∞ + c·ε`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub eps_grid: Vec<f64>,
    pub minus_eps_log_p: Vec<f64>,
    pub rate: f64,
    pub slope: f64,
    pub residuals: Vec<f64>,
}

pub fn fit_rate(estimates: &[ProbabilityEstimate]) -> Result<RateFit> {
    if let Some(e) = estimates.iter().find(|e| !(e.p_hat > 0.0)) {
        return Err(Error::InsufficientData { eps: e.eps });
    }
    let eps_grid: Vec<f64> = estimates.iter().map(|e| e.eps).collect();
    let mut distinct = eps_grid.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::domain(format!(
            "rate fit needs at least 3 distinct eps values, got {}",
            distinct.len()
        )));
    }
    let y: Vec<f64> = estimates.iter().map(|e| -e.eps * e.p_hat.ln()).collect();
    let (rate, slope) = least_squares_line(&eps_grid, &y);
    let residuals = eps_grid.iter().zip(&y).map(|(e, v)| v - rate - slope * e).collect();
    Ok(RateFit {
        eps_grid,
        minus_eps_log_p: y,
        rate,
        slope,
        residuals,
    })
}

/// `base + ε^power · perturbation` for initial fields.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldFamily {
    pub base: DVector<f64>,
    pub perturbation: DVector<f64>,
    pub power: f64,
}

impl FieldFamily {
    pub fn constant(base: DVector<f64>) -> Self {
        let n = base.len();
        Self {
            base,
            perturbation: DVector::zeros(n),
            power: 1.0,
        }
    }

    pub fn at(&self, eps: f64) -> DVector<f64> {
        if eps == 0.0 {
            return self.base.clone();
        }
        &self.base + &self.perturbation * eps.powf(self.power)
    }
}

/// `base + ε^power · perturbation` for controls.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlFamily {
    pub base: Control,
    pub perturbation: Control,
    pub power: f64,
}

impl ControlFamily {
    pub fn constant(base: Control) -> Self {
        let perturbation = Control::zero(base.grid(), base.k());
        Self {
            base,
            perturbation,
            power: 1.0,
        }
    }

    pub fn at(&self, eps: f64) -> Result<Control> {
        let s = if eps == 0.0 { 0.0 } else { eps.powf(self.power) };
        let values = self
            .base
            .values()
            .iter()
            .zip(self.perturbation.values())
            .map(|(b, p)| b + s * p)
            .collect();
        Control::new(self.base.grid().clone(), self.base.k(), values, None)
    }
}

/// Noise intensity `γ(ε)` of the controlled process in the convergence table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gamma {
    Identity,
    Zero,
}

impl Gamma {
    pub fn apply(self, eps: f64) -> f64 {
        match self {
            Gamma::Identity => eps,
            Gamma::Zero => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub eps: f64,
    pub mean_distance: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    /// Log-log slope of the mean distance against `ε` over rows with `ε > 0`.
    pub slope: Option<f64>,
}

impl ConvergenceTable {
    pub fn strictly_decreasing(&self) -> bool {
        let mut rows: Vec<_> = self.rows.iter().filter(|r| r.eps > 0.0).collect();
        rows.sort_by(|a, b| b.eps.total_cmp(&a.eps));
        rows.windows(2).all(|w| w[1].mean_distance < w[0].mean_distance)
    }
}

/// Mean of `sup_t |v^{γ(ε),φ^ε}_{ξ^ε}(t) − v^{0,φ}_ξ(t)|_ρ` per `ε`.
pub fn convergence_experiment(
    ev: &Evolver,
    xi: &FieldFamily,
    phi: &ControlFamily,
    eps_grid: &[f64],
    gamma: Gamma,
    n: usize,
    seed: u64,
) -> Result<ConvergenceTable> {
    let rho = ev.rho();
    let grid = ev.operator().grid();
    let (limit, _) = ev.solve_skeleton(&xi.at(0.0), &phi.at(0.0)?)?;
    let mut rows = Vec::with_capacity(eps_grid.len());
    for &eps in eps_grid {
        if !(eps >= 0.0) {
            return Err(Error::domain(format!("eps must be >= 0, got {eps}")));
        }
        let xi_eps = xi.at(eps);
        let phi_eps = phi.at(eps)?;
        let noise = gamma.apply(eps);
        let count = if noise > 0.0 { n } else { 1 };
        let distances = run_ensemble(ev, count, seed, |_, path| {
            let mut worst: f64 = 0.0;
            ev.run_with(&xi_eps, noise, Some(path), Some(&phi_eps), |m, u| {
                worst = worst.max(grid.lp_norm(&(u - limit.at(m)), rho));
            })
            .map_err(|e| tag_eps(e, eps))?;
            Ok(worst)
        })?;
        let (mean_distance, stderr) = mean_and_stderr(&distances);
        rows.push(ConvergenceRow {
            eps,
            mean_distance,
            stderr,
        });
    }
    let positive: Vec<_> = rows.iter().filter(|r| r.eps > 0.0 && r.mean_distance > 0.0).collect();
    let slope = (positive.len() >= 2).then(|| {
        let x: Vec<f64> = positive.iter().map(|r| r.eps.ln()).collect();
        let y: Vec<f64> = positive.iter().map(|r| r.mean_distance.ln()).collect();
        least_squares_line(&x, &y).1
    });
    Ok(ConvergenceTable { rows, slope })
}

fn tag_eps(e: Error, eps: f64) -> Error {
    match e {
        Error::BlowUp { t, norm } => Error::Domain(format!("eps = {eps}: blow-up at t = {t} (|u| = {norm:e})")),
        Error::StepGuard { t, dt, limit } => {
            Error::Domain(format!("eps = {eps}: step guard violated at t = {t}: dt = {dt} > {limit}"))
        }
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TightnessTable {
    pub eps_grid: Vec<f64>,
    pub c_grid: Vec<f64>,
    /// `probabilities[e][c] = P̂(sup_t |v|_ρ ≥ C_c)` at `ε_e`.
    pub probabilities: Vec<Vec<f64>>,
    /// `sup_ε P̂(· ≥ C_c)`.
    pub sup_over_eps: Vec<f64>,
    /// Paths aborted by the blow-up threshold or step guard, counted as
    /// exceeding every level.
    pub aborted: Vec<usize>,
}

impl TightnessTable {
    pub fn nonincreasing_in_c(&self) -> bool {
        let mut order: Vec<usize> = (0..self.c_grid.len()).collect();
        order.sort_by(|a, b| self.c_grid[*a].total_cmp(&self.c_grid[*b]));
        order.windows(2).all(|w| self.sup_over_eps[w[1]] <= self.sup_over_eps[w[0]])
    }
}

/// Empirical tails of `sup_t |u^ε(t)|_ρ`, all levels evaluated on the same samples per `ε`.
pub fn tightness_probe(
    ev: &Evolver,
    xi: &DVector<f64>,
    eps_grid: &[f64],
    c_grid: &[f64],
    n: usize,
    seed: u64,
) -> Result<TightnessTable> {
    if n < 1000 {
        return Err(Error::domain(format!("the tightness probe needs n >= 1000, got {n}")));
    }
    let rho = ev.rho();
    let grid = ev.operator().grid();
    let mut probabilities = Vec::with_capacity(eps_grid.len());
    let mut aborted = Vec::with_capacity(eps_grid.len());
    for &eps in eps_grid {
        let sups = run_ensemble(ev, n, seed, |_, path| {
            let mut sup: f64 = 0.0;
            match ev.run_with(xi, eps, Some(path), None, |_, u| sup = sup.max(grid.lp_norm(u, rho))) {
                Ok(_) => Ok(sup),
                Err(Error::BlowUp { .. }) | Err(Error::StepGuard { .. }) => Ok(f64::INFINITY),
                Err(e) => Err(e),
            }
        })?;
        aborted.push(sups.iter().filter(|s| s.is_infinite()).count());
        probabilities.push(
            c_grid
                .iter()
                .map(|c| sups.iter().filter(|s| **s >= *c).count() as f64 / n as f64)
                .collect::<Vec<_>>(),
        );
    }
    let sup_over_eps = (0..c_grid.len())
        .map(|c| probabilities.iter().map(|row| row[c]).fold(0.0, f64::max))
        .collect();
    Ok(TightnessTable {
        eps_grid: eps_grid.to_vec(),
        c_grid: c_grid.to_vec(),
        probabilities,
        sup_over_eps,
        aborted,
    })
}
