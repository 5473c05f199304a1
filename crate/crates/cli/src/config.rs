//! Run configuration: TOML input, dotted-key overrides, defaults and validation.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use spde_ldp::action::{ActionOptions, LinearFunctional, TargetSpec};
use spde_ldp::coefficients::{make_preset, CoefficientSet, ScalarFn};
use spde_ldp::evolvers::EvolverOptions;
use spde_ldp::grid_kernel::{DomainSpec, Grid};
use spde_ldp::ldp_lab::{Gamma, Method};
use spde_ldp::stochastics::{Control, TimeGrid};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    /// `[lower, upper]` per axis; one or two axes.
    pub extents: Vec<[f64; 2]>,
    /// Intervals per axis.
    pub resolution: Vec<usize>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            extents: vec![[0.0, 1.0]],
            resolution: vec![64],
        }
    }
}

impl GridConfig {
    pub fn dim(&self) -> usize {
        self.extents.len()
    }

    pub fn domain(&self) -> DomainSpec {
        DomainSpec {
            extents: self.extents.iter().map(|e| (e[0], e[1])).collect(),
            resolution: self.resolution.clone(),
        }
    }
}

/// Polynomial coefficients, each given by ascending power coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomCoefficients {
    pub nu: Option<f64>,
    #[serde(default = "one")]
    pub big_k: f64,
    #[serde(default = "one")]
    pub big_l: f64,
    #[serde(default)]
    pub f: Vec<f64>,
    /// Shared by every axis.
    #[serde(default)]
    pub g1: Vec<f64>,
    /// Shared by every axis.
    #[serde(default)]
    pub g2: Vec<f64>,
    /// Shared by every noise component.
    #[serde(default)]
    pub sigma: Vec<f64>,
}

impl CustomCoefficients {
    /// Growth exponent implied by the flux polynomials, at least 1.
    fn flux_degree(&self) -> f64 {
        let degree = |c: &[f64]| c.iter().rposition(|v| *v != 0.0).unwrap_or(0);
        degree(&self.g1).max(degree(&self.g2)).max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientConfig {
    pub preset: Option<String>,
    pub custom: Option<CustomCoefficients>,
    pub truncation: Option<f64>,
}

impl Default for CoefficientConfig {
    fn default() -> Self {
        Self {
            preset: Some("burgers".to_string()),
            custom: None,
            truncation: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialConfig {
    /// `amplitude · Π_i sin(mode π (x_i − a_i)/(b_i − a_i))`.
    Sine { amplitude: f64, mode: u32 },
    Zero,
}

impl Default for InitialConfig {
    fn default() -> Self {
        InitialConfig::Sine {
            amplitude: 1.0,
            mode: 1,
        }
    }
}

impl InitialConfig {
    pub fn sample(&self, grid: &Grid) -> DVector<f64> {
        match *self {
            InitialConfig::Sine { amplitude, mode } => sine_profile(grid, amplitude, mode),
            InitialConfig::Zero => DVector::zeros(grid.len()),
        }
    }
}

fn sine_profile(grid: &Grid, amplitude: f64, mode: u32) -> DVector<f64> {
    let extents = grid.extents();
    grid.sample(|x| {
        x.iter()
            .zip(&extents)
            .map(|(xi, (a, b))| (mode as f64 * std::f64::consts::PI * (xi - a) / (b - a)).sin())
            .product::<f64>()
            * amplitude
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    /// Constant value per noise component; empty means zero.
    #[serde(default)]
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FunctionalKind {
    Integral,
    Point,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EventConfig {
    /// `Λ(u(T)) ≥ level` with `Λ` the spatial integral or a point value.
    Threshold {
        functional: FunctionalKind,
        #[serde(default)]
        point: Vec<f64>,
        level: f64,
    },
    /// `sup_t |u(t) − ψ⁰(t)|_ρ ≥ radius`; `rho` defaults to the run's ρ.
    TubeExit { radius: f64, rho: Option<f64> },
    /// Terminal field equal to a sine profile.
    TerminalField { amplitude: f64, mode: u32 },
}

impl Default for EventConfig {
    fn default() -> Self {
        EventConfig::Threshold {
            functional: FunctionalKind::Integral,
            point: Vec::new(),
            level: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub mu0: f64,
    pub mu_growth: f64,
    pub rounds: usize,
    pub max_rounds: usize,
    pub max_inner: usize,
    pub grad_tolerance: f64,
    pub feasibility_tolerance: f64,
    pub tube_times: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let d = ActionOptions::default();
        Self {
            mu0: d.mu0,
            mu_growth: d.mu_growth,
            rounds: d.rounds,
            max_rounds: d.max_rounds,
            max_inner: d.max_inner,
            grad_tolerance: d.grad_tolerance,
            feasibility_tolerance: d.feasibility_tolerance,
            tube_times: d.tube_times,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub blow_up_threshold: f64,
    /// Constant of the flux step guard; `0` disables it.
    pub step_guard: f64,
    pub picard_tolerance: f64,
    pub picard_max_sweeps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let d = EvolverOptions::default();
        Self {
            blow_up_threshold: d.blow_up_threshold,
            step_guard: d.step_guard.unwrap_or(0.0),
            picard_tolerance: d.picard_tolerance,
            picard_max_sweeps: d.picard_max_sweeps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimateConfig {
    pub method: Method,
    /// Sup-norm ball radius for terminal-field events.
    pub field_tolerance: f64,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self {
            method: Method::Importance,
            field_tolerance: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelConfig {
    /// Integrability exponent of the fit.
    pub p: f64,
    pub time_samples: usize,
    pub gaussian_samples: usize,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            p: 1.0,
            time_samples: 12,
            gaussian_samples: 1000,
        }
    }
}

/// Everything a subcommand reads. `rho` is `None` only before [`RunConfig::resolve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub coefficients: CoefficientConfig,
    #[serde(default = "one_usize")]
    pub k: usize,
    #[serde(default = "one")]
    pub horizon: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    pub rho: Option<f64>,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_eps_grid")]
    pub eps_grid: Vec<f64>,
    #[serde(default = "default_paths")]
    pub paths: usize,
    #[serde(default)]
    pub initial: InitialConfig,
    #[serde(default)]
    pub control: ControlConfig,
    #[serde(default)]
    pub event: EventConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub estimate: EstimateConfig,
    #[serde(default = "default_gamma")]
    pub gamma: Gamma,
    #[serde(default = "default_levels")]
    pub levels: Vec<f64>,
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default)]
    pub plots: bool,
}

fn one() -> f64 {
    1.0
}
fn one_usize() -> usize {
    1
}
fn default_out() -> PathBuf {
    PathBuf::from("runs/latest")
}
fn default_dt() -> f64 {
    1.0 / 64.0
}
fn default_eps() -> f64 {
    0.1
}
fn default_eps_grid() -> Vec<f64> {
    vec![0.2, 0.1, 0.05, 0.025]
}
fn default_paths() -> usize {
    1000
}
fn default_gamma() -> Gamma {
    Gamma::Identity
}
fn default_levels() -> Vec<f64> {
    vec![0.5, 1.0, 2.0, 4.0, 8.0]
}

fn invalid(field: &str, message: impl Into<String>) -> CliError {
    CliError::Config {
        field: field.to_string(),
        message: message.into(),
    }
}

/// Reads the TOML file (or an empty table) and applies `key=value` overrides.
pub fn load_table(path: Option<&Path>, overrides: &[String]) -> Result<toml::Table, CliError> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| invalid("config", format!("cannot read {}: {e}", p.display())))?;
            parse_table(&text)?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    Ok(table)
}

/// Parses TOML text; parse errors carry the line and column.
pub fn parse_table(text: &str) -> Result<toml::Table, CliError> {
    text.parse::<toml::Table>().map_err(|e| {
        let location = e
            .span()
            .map(|s| {
                let before = &text[..s.start.min(text.len())];
                let line = before.matches('\n').count() + 1;
                let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
                format!(" at line {line}, column {column}")
            })
            .unwrap_or_default();
        invalid("config", format!("parse error{location}: {}", e.message()))
    })
}

/// `a.b.c=value`; the value is read as a TOML literal, or as a bare string
/// when it is not one.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| invalid("override", format!("expected key=value, got `{spec}`")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(invalid("override", format!("empty key segment in `{spec}`")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut segments: Vec<&str> = key.split('.').collect();
    let last = segments.pop().expect("non-empty key");
    let mut node = table;
    for seg in segments {
        let entry = node
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| invalid(key, format!("`{seg}` is not a table")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    pub fn from_table(table: toml::Table) -> Result<Self, CliError> {
        RunConfig::deserialize(toml::Value::Table(table)).map_err(|e| {
            let msg = e.message().to_string();
            let field = msg
                .split('`')
                .nth(1)
                .filter(|_| msg.contains("field"))
                .unwrap_or("config")
                .to_string();
            CliError::Config { field, message: msg }
        })
    }

    /// Fills the derived defaults and checks every field-level invariant.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        let d = self.grid.dim();
        if !(1..=2).contains(&d) {
            return Err(invalid("grid.extents", format!("one or two axes are supported, got {d}")));
        }
        if self.grid.resolution.len() != d {
            return Err(invalid("grid.resolution", "needs one entry per axis"));
        }
        if self.grid.resolution.iter().any(|n| *n < 2) {
            return Err(invalid("grid.resolution", "needs at least 2 intervals per axis"));
        }
        if self.grid.extents.iter().any(|e| !(e[1] > e[0]) || !e[0].is_finite() || !e[1].is_finite()) {
            return Err(invalid("grid.extents", "each axis needs finite lower < upper"));
        }
        if self.k == 0 {
            return Err(invalid("k", "at least one noise component is required"));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(invalid("horizon", "T must be > 0"));
        }
        if !(self.dt > 0.0) {
            return Err(invalid("dt", "dt must be > 0"));
        }
        let steps = (self.horizon / self.dt).round();
        if steps < 1.0 || (steps * self.dt - self.horizon).abs() > 1e-9 * self.horizon {
            return Err(invalid("dt", format!("dt = {} does not divide T = {}", self.dt, self.horizon)));
        }
        if !(self.eps >= 0.0) || !self.eps.is_finite() {
            return Err(invalid("eps", "eps must be >= 0"));
        }
        if self.eps_grid.iter().any(|e| !(*e >= 0.0) || !e.is_finite()) {
            return Err(invalid("eps_grid", "every eps must be >= 0"));
        }
        if self.paths == 0 {
            return Err(invalid("paths", "at least one path is required"));
        }
        match (&self.coefficients.preset, &self.coefficients.custom) {
            (Some(_), Some(_)) => {
                return Err(invalid("coefficients", "give either `preset` or `custom`, not both"));
            }
            (None, None) => return Err(invalid("coefficients", "a `preset` or a `custom` table is required")),
            _ => {}
        }
        if !self.control.values.is_empty() && self.control.values.len() != self.k {
            return Err(invalid("control.values", format!("expected {} values, got {}", self.k, self.control.values.len())));
        }
        let nu = self.known_nu()?;
        let rho = match (self.rho, nu) {
            (Some(r), _) => r,
            (None, Some(nu)) => (2.0 * nu).max(d as f64 + 1.0) + 1.0,
            (None, None) => {
                return Err(invalid(
                    "rho",
                    "missing; it has no default when `coefficients.custom.nu` is not given",
                ))
            }
        };
        if !(rho > d as f64) || !rho.is_finite() {
            return Err(invalid("rho", format!("rho = {rho} must exceed the dimension {d}")));
        }
        self.rho = Some(rho);
        if let EventConfig::Threshold { functional: FunctionalKind::Point, point, .. } = &self.event {
            if point.len() != d {
                return Err(invalid("event.point", format!("needs {d} coordinates")));
            }
        }
        self.coefficient_set()?;
        Ok(self)
    }

    fn known_nu(&self) -> Result<Option<f64>, CliError> {
        if let Some(name) = &self.coefficients.preset {
            let c = make_preset(name, self.grid.dim(), self.k)
                .map_err(|e| invalid("coefficients.preset", e.to_string()))?;
            return Ok(Some(c.nu));
        }
        Ok(self.coefficients.custom.as_ref().and_then(|c| c.nu))
    }

    pub fn rho(&self) -> f64 {
        self.rho.expect("resolved configuration")
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    pub fn time_grid(&self) -> Result<TimeGrid, CliError> {
        TimeGrid::uniform(self.horizon, self.steps()).map_err(|e| invalid("dt", e.to_string()))
    }

    pub fn coefficient_set(&self) -> Result<CoefficientSet, CliError> {
        let d = self.grid.dim();
        let set = if let Some(name) = &self.coefficients.preset {
            make_preset(name, d, self.k).map_err(|e| invalid("coefficients.preset", e.to_string()))?
        } else {
            let c = self.coefficients.custom.as_ref().expect("checked in resolve");
            let poly = |coeffs: &[f64]| {
                if coeffs.iter().all(|v| *v == 0.0) {
                    ScalarFn::Zero
                } else {
                    ScalarFn::Polynomial { coeffs: coeffs.to_vec() }
                }
            };
            CoefficientSet::new(
                d,
                self.k,
                c.nu.unwrap_or_else(|| c.flux_degree()),
                c.big_k,
                c.big_l,
                poly(&c.f),
                vec![poly(&c.g1); d],
                vec![poly(&c.g2); d],
                vec![poly(&c.sigma); self.k],
            )
            .map_err(|e| invalid("coefficients.custom", e.to_string()))?
        };
        if let Some(level) = self.coefficients.truncation {
            if !(level > 0.0) {
                return Err(invalid("coefficients.truncation", "level must be > 0"));
            }
        }
        Ok(set.with_truncation(self.coefficients.truncation))
    }

    pub fn evolver_options(&self) -> EvolverOptions {
        EvolverOptions {
            blow_up_threshold: self.solver.blow_up_threshold,
            step_guard: (self.solver.step_guard > 0.0).then_some(self.solver.step_guard),
            picard_tolerance: self.solver.picard_tolerance,
            picard_max_sweeps: self.solver.picard_max_sweeps,
        }
    }

    pub fn action_options(&self) -> ActionOptions {
        let o = &self.optimizer;
        ActionOptions {
            horizon: self.horizon,
            steps: self.steps(),
            rho: self.rho(),
            mu0: o.mu0,
            mu_growth: o.mu_growth,
            rounds: o.rounds,
            max_rounds: o.max_rounds,
            max_inner: o.max_inner,
            grad_tolerance: o.grad_tolerance,
            feasibility_tolerance: o.feasibility_tolerance,
            tube_times: o.tube_times,
            initial: None,
            evolver: self.evolver_options(),
        }
    }

    pub fn control(&self, time: &TimeGrid) -> Control {
        if self.control.values.is_empty() {
            Control::zero(time, self.k)
        } else {
            Control::constant(time, &self.control.values)
        }
    }

    pub fn target(&self, grid: &Grid) -> TargetSpec {
        match &self.event {
            EventConfig::Threshold { functional, point, level } => TargetSpec::TerminalFunctionalThreshold {
                functional: match functional {
                    FunctionalKind::Integral => LinearFunctional::integral(grid),
                    FunctionalKind::Point => LinearFunctional::point(grid, point),
                },
                level: *level,
            },
            EventConfig::TubeExit { radius, rho } => TargetSpec::TubeExit {
                radius: *radius,
                rho: rho.unwrap_or(self.rho()),
            },
            EventConfig::TerminalField { amplitude, mode } => TargetSpec::TerminalField {
                target: sine_profile(grid, *amplitude, *mode),
            },
        }
    }
}
