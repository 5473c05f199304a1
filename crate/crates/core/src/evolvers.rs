//! Exponential-Euler integrators for the mild forms of the stochastic
//! equation, the controlled equation and the skeleton equation.
//!
//! One step reads
//!
//! ```text
//! u_{m+1} = e^{ΔA} [ u_m + Δ f(u_m) + Δ ∇_h·g(u_m) + Σ_j σ_j(u_m) (√ε ΔB^j_m + φ_j(t_m) Δ) ]
//! ```
//!
//! where `∇_h·` is the transpose of the zero-extended central difference, so
//! the flux term equals `−∫ ∂_y G_Δ(x, y) g(u(y)) dy` on the grid.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::coefficients::CoefficientSet;
use crate::error::{Error, Result};
use crate::grid_kernel::{Grid, KernelOperator};
use crate::stochastics::{Control, NoisePath, TimeGrid};

/// A field on the time × interior-space grid. Boundary values are zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimeField {
    grid: Grid,
    times: Vec<f64>,
    values: Vec<DVector<f64>>,
    rho: f64,
}

impl SpaceTimeField {
    pub fn new(grid: Grid, times: Vec<f64>, values: Vec<DVector<f64>>, rho: f64) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::domain("one spatial field per time is required"));
        }
        if let Some(v) = values.iter().find(|v| v.len() != grid.len()) {
            return Err(Error::domain(format!(
                "field has {} nodes, grid has {}",
                v.len(),
                grid.len()
            )));
        }
        if values.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(Error::domain("field values must be finite"));
        }
        Ok(Self {
            grid,
            times,
            values,
            rho,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[DVector<f64>] {
        &self.values
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn with_rho(mut self, rho: f64) -> Self {
        self.rho = rho;
        self
    }

    pub fn at(&self, m: usize) -> &DVector<f64> {
        &self.values[m]
    }

    pub fn terminal(&self) -> &DVector<f64> {
        self.values.last().expect("nonempty field")
    }

    pub fn lp_norm(&self, m: usize, p: f64) -> f64 {
        self.grid.lp_norm(&self.values[m], p)
    }

    /// `sup_t |field(t)|_ρ`.
    pub fn sup_norm(&self) -> f64 {
        (0..self.values.len())
            .map(|m| self.lp_norm(m, self.rho))
            .fold(0.0, f64::max)
    }

    /// `sup_t |self(t) − other(t)|_p`.
    pub fn sup_distance(&self, other: &SpaceTimeField, p: f64) -> Result<f64> {
        if self.values.len() != other.values.len() || self.grid != other.grid {
            return Err(Error::domain("fields live on different grids"));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| self.grid.lp_norm(&(a - b), p))
            .fold(0.0, f64::max))
    }

    /// Largest node-wise difference over all times.
    pub fn max_abs_difference(&self, other: &SpaceTimeField) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).amax())
            .fold(0.0, f64::max)
    }

    /// Values on the full grid including the (zero) boundary trace.
    pub fn full_grid(&self, m: usize) -> Vec<([f64; 2], f64)> {
        let n = self.grid.resolution();
        let dim = self.grid.dim();
        let counts = if dim == 1 { [n[0] + 1, 1] } else { [n[0] + 1, n[1] + 1] };
        let mut out = Vec::with_capacity(counts[0] * counts[1]);
        for j in 0..counts[1] {
            for i in 0..counts[0] {
                let node = [i, j];
                let v = self.grid.interior_index(node).map_or(0.0, |idx| self.values[m][idx]);
                out.push((self.grid.node_coords(node), v));
            }
        }
        out
    }

    /// Rows `t,x[,y],value` over the full grid, boundary included.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        let dim = self.grid.dim();
        if dim == 1 {
            writeln!(out, "t,x,value")?;
        } else {
            writeln!(out, "t,x,y,value")?;
        }
        for (m, t) in self.times.iter().enumerate() {
            for (x, v) in self.full_grid(m) {
                if dim == 1 {
                    writeln!(out, "{t:.17e},{:.17e},{v:.17e}", x[0])?;
                } else {
                    writeln!(out, "{t:.17e},{:.17e},{:.17e},{v:.17e}", x[0], x[1])?;
                }
            }
        }
        Ok(())
    }

    /// Little-endian snapshot: magic, grid spec, rho, times and values.
    pub fn write_snapshot(&self, mut out: impl Write) -> Result<()> {
        out.write_all(SNAPSHOT_MAGIC)?;
        let dim = self.grid.dim();
        out.write_all(&(dim as u64).to_le_bytes())?;
        for (axis, (a, b)) in self.grid.extents().into_iter().enumerate() {
            out.write_all(&a.to_le_bytes())?;
            out.write_all(&b.to_le_bytes())?;
            out.write_all(&(self.grid.resolution()[axis] as u64).to_le_bytes())?;
        }
        out.write_all(&self.rho.to_le_bytes())?;
        out.write_all(&(self.times.len() as u64).to_le_bytes())?;
        for t in &self.times {
            out.write_all(&t.to_le_bytes())?;
        }
        for v in &self.values {
            for x in v.iter() {
                out.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_snapshot(mut input: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(Error::Parse("not a field snapshot".into()));
        }
        let read_u64 = |input: &mut dyn Read| -> Result<u64> {
            let mut b = [0u8; 8];
            input.read_exact(&mut b)?;
            Ok(u64::from_le_bytes(b))
        };
        let dim = read_u64(&mut input)? as usize;
        if !(1..=2).contains(&dim) {
            return Err(Error::Parse(format!("snapshot dimension {dim}")));
        }
        let mut extents = Vec::new();
        let mut resolution = Vec::new();
        for _ in 0..dim {
            let a = f64::from_bits(read_u64(&mut input)?);
            let b = f64::from_bits(read_u64(&mut input)?);
            extents.push((a, b));
            resolution.push(read_u64(&mut input)? as usize);
        }
        let grid = crate::grid_kernel::build_grid(&crate::grid_kernel::DomainSpec { extents, resolution })?;
        let rho = f64::from_bits(read_u64(&mut input)?);
        let count = read_u64(&mut input)? as usize;
        let times = (0..count)
            .map(|_| read_u64(&mut input).map(f64::from_bits))
            .collect::<Result<Vec<_>>>()?;
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            let v = (0..grid.len())
                .map(|_| read_u64(&mut input).map(f64::from_bits))
                .collect::<Result<Vec<_>>>()?;
            values.push(DVector::from_vec(v));
        }
        SpaceTimeField::new(grid, times, values, rho)
    }
}

const SNAPSHOT_MAGIC: &[u8; 4] = b"STF1";

/// Per-run solver record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub steps: usize,
    /// Global Picard sweeps for the skeleton, 1 for explicit runs.
    pub iterations: usize,
    /// Relative sup-increment of the last sweep (0 for explicit runs).
    pub last_increment: f64,
    pub converged: bool,
    pub truncation: Option<f64>,
    pub blow_up: bool,
    /// Largest `Δt / limit` of the flux step guard (0 without flux).
    pub max_guard_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvolverOptions {
    /// Abort once `max |u| > blow_up_threshold`.
    pub blow_up_threshold: f64,
    /// Constant `c` in `Δt ≤ c·h / max(1, sup|u|^{ν−1})`; `None` disables it.
    pub step_guard: Option<f64>,
    pub picard_tolerance: f64,
    pub picard_max_sweeps: usize,
}

impl Default for EvolverOptions {
    fn default() -> Self {
        Self {
            blow_up_threshold: 1e8,
            step_guard: Some(1.0),
            picard_tolerance: 1e-10,
            picard_max_sweeps: 50,
        }
    }
}

/// Where a Picard iteration for the skeleton starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PicardStart {
    /// `ψ⁰(t) = G_t ξ`.
    HeatFlow,
    Zero,
}

/// The separate contributions to one step.
struct StepTerms {
    drift: DVector<f64>,
    flux: DVector<f64>,
    noise: DVector<f64>,
    control: DVector<f64>,
}

/// Shared, immutable state for stepping many paths on one time grid.
pub struct Evolver<'a> {
    op: &'a KernelOperator,
    coeffs: &'a CoefficientSet,
    time: TimeGrid,
    dt: f64,
    propagator: DMatrix<f64>,
    coords: Vec<[f64; 2]>,
    options: EvolverOptions,
    rho: f64,
}

impl<'a> Evolver<'a> {
    pub fn new(
        op: &'a KernelOperator,
        coeffs: &'a CoefficientSet,
        time: &TimeGrid,
        rho: f64,
        options: EvolverOptions,
    ) -> Result<Self> {
        coeffs.check()?;
        if coeffs.d != op.grid().dim() {
            return Err(Error::domain(format!(
                "coefficients are {}-dimensional, grid is {}-dimensional",
                coeffs.d,
                op.grid().dim()
            )));
        }
        let dt = time
            .uniform_step()
            .ok_or_else(|| Error::domain("the exponential integrator needs a uniform time grid"))?;
        let grid = op.grid();
        let coords = (0..grid.len()).map(|i| grid.coords(i)).collect();
        Ok(Self {
            op,
            coeffs,
            time: time.clone(),
            dt,
            propagator: op.propagator(dt)?,
            coords,
            options,
            rho,
        })
    }

    pub fn time(&self) -> &TimeGrid {
        &self.time
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn propagator(&self) -> &DMatrix<f64> {
        &self.propagator
    }

    pub fn operator(&self) -> &KernelOperator {
        self.op
    }

    pub fn coefficients(&self) -> &CoefficientSet {
        self.coeffs
    }

    pub fn options(&self) -> &EvolverOptions {
        &self.options
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    fn dim(&self) -> usize {
        self.op.grid().dim()
    }

    fn x(&self, i: usize) -> &[f64] {
        &self.coords[i][..self.dim()]
    }

    fn check_xi(&self, xi: &DVector<f64>) -> Result<()> {
        if xi.len() != self.op.grid().len() {
            return Err(Error::domain(format!(
                "initial field has {} nodes, grid has {}",
                xi.len(),
                self.op.grid().len()
            )));
        }
        if xi.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("initial field must be finite"));
        }
        Ok(())
    }

    fn check_path(&self, path: &NoisePath) -> Result<()> {
        if path.grid() != &self.time {
            return Err(Error::domain("noise path and solver use different time grids"));
        }
        if path.k() != self.coeffs.k {
            return Err(Error::domain(format!(
                "noise path is {}-dimensional, coefficients expect k = {}",
                path.k(),
                self.coeffs.k
            )));
        }
        Ok(())
    }

    fn check_control(&self, phi: &Control) -> Result<()> {
        if phi.grid() != &self.time {
            return Err(Error::domain("control and solver use different time grids"));
        }
        if phi.k() != self.coeffs.k {
            return Err(Error::domain(format!(
                "control is {}-dimensional, coefficients expect k = {}",
                phi.k(),
                self.coeffs.k
            )));
        }
        Ok(())
    }

    /// `Δt / limit` for the flux guard at state `u`.
    fn guard_ratio(&self, u: &DVector<f64>) -> f64 {
        match self.options.step_guard {
            Some(c) if self.coeffs.has_flux() => {
                let sup = u.amax();
                let limit = c * self.op.grid().min_spacing()
                    / sup.powf(self.coeffs.nu - 1.0).max(1.0);
                self.dt / limit
            }
            _ => 0.0,
        }
    }

    fn check_state(&self, t: f64, u: &DVector<f64>) -> Result<()> {
        let norm = u.amax();
        if !norm.is_finite() || u.iter().any(|v| !v.is_finite()) || norm > self.options.blow_up_threshold {
            return Err(Error::BlowUp { t, norm });
        }
        Ok(())
    }

    fn check_guard(&self, t: f64, u: &DVector<f64>) -> Result<f64> {
        let ratio = self.guard_ratio(u);
        if ratio > 1.0 {
            return Err(Error::StepGuard {
                t,
                dt: self.dt,
                limit: self.dt / ratio,
            });
        }
        Ok(ratio)
    }

    /// `Δ f(u)`.
    fn drift_term(&self, t: f64, u: &DVector<f64>) -> DVector<f64> {
        if !self.coeffs.has_drift() {
            return DVector::zeros(u.len());
        }
        DVector::from_iterator(
            u.len(),
            u.iter().enumerate().map(|(i, &r)| self.dt * self.coeffs.f_at(t, self.x(i), r)),
        )
    }

    /// `Δ ∇_h·g(u)`.
    fn flux_term(&self, t: f64, u: &DVector<f64>) -> DVector<f64> {
        let grid = self.op.grid();
        let mut out = DVector::zeros(u.len());
        if !self.coeffs.has_flux() {
            return out;
        }
        for axis in 0..self.dim() {
            let g = DVector::from_iterator(
                u.len(),
                u.iter().enumerate().map(|(i, &r)| self.coeffs.g_at(axis, t, self.x(i), r)),
            );
            out += grid.central_difference(axis, &g) * self.dt;
        }
        out
    }

    /// Noise and control contributions `Σ_j σ_j(u) √ε ΔB^j` and `Σ_j σ_j(u) φ_j Δ`.
    fn sigma_terms(
        &self,
        m: usize,
        u: &DVector<f64>,
        sqrt_eps: f64,
        path: Option<&NoisePath>,
        control: Option<&Control>,
    ) -> (DVector<f64>, DVector<f64>) {
        let t = self.time.times()[m];
        let mut noise = DVector::zeros(u.len());
        let mut ctrl = DVector::zeros(u.len());
        for j in 0..self.coeffs.k {
            let db = path.map_or(0.0, |p| sqrt_eps * p.increment(m, j));
            let phi = control.map_or(0.0, |c| c.value(m, j) * self.dt);
            if db == 0.0 && phi == 0.0 {
                continue;
            }
            for (i, &r) in u.iter().enumerate() {
                let s = self.coeffs.sigma_at(j, t, self.x(i), r);
                noise[i] += s * db;
                ctrl[i] += s * phi;
            }
        }
        (noise, ctrl)
    }

    fn step_terms(
        &self,
        m: usize,
        u: &DVector<f64>,
        sqrt_eps: f64,
        path: Option<&NoisePath>,
        control: Option<&Control>,
    ) -> StepTerms {
        let t = self.time.times()[m];
        let (noise, control) = self.sigma_terms(m, u, sqrt_eps, path, control);
        StepTerms {
            drift: self.drift_term(t, u),
            flux: self.flux_term(t, u),
            noise,
            control,
        }
    }

    /// Single explicit step; the control contribution is summed with the
    /// noise so that `φ ≡ 0` reproduces the uncontrolled step bitwise.
    fn step(
        &self,
        m: usize,
        u: &DVector<f64>,
        sqrt_eps: f64,
        path: Option<&NoisePath>,
        control: Option<&Control>,
    ) -> DVector<f64> {
        let t = self.time.times()[m];
        let mut rhs = u.clone();
        if self.coeffs.has_drift() {
            rhs += self.drift_term(t, u);
        }
        if self.coeffs.has_flux() {
            rhs += self.flux_term(t, u);
        }
        for j in 0..self.coeffs.k {
            let mut drive = path.map_or(0.0, |p| sqrt_eps * p.increment(m, j));
            if let Some(c) = control {
                drive += c.value(m, j) * self.dt;
            }
            if drive == 0.0 {
                continue;
            }
            for (i, &r) in u.iter().enumerate() {
                rhs[i] += self.coeffs.sigma_at(j, t, self.x(i), r) * drive;
            }
        }
        &self.propagator * rhs
    }

    /// Runs the explicit recursion and hands every state to `observe`.
    pub fn run_with(
        &self,
        xi: &DVector<f64>,
        eps: f64,
        path: Option<&NoisePath>,
        control: Option<&Control>,
        mut observe: impl FnMut(usize, &DVector<f64>),
    ) -> Result<SolveDiagnostics> {
        self.check_xi(xi)?;
        if !(eps >= 0.0) {
            return Err(Error::domain(format!("eps must be >= 0, got {eps}")));
        }
        if let Some(p) = path {
            self.check_path(p)?;
        } else if eps > 0.0 {
            return Err(Error::domain("eps > 0 requires a noise path"));
        }
        if let Some(c) = control {
            self.check_control(c)?;
        }
        let sqrt_eps = eps.sqrt();
        let times = self.time.times();
        let mut u = xi.clone();
        observe(0, &u);
        let mut max_guard: f64 = 0.0;
        for m in 0..self.time.steps() {
            max_guard = max_guard.max(self.check_guard(times[m], &u)?);
            u = self.step(m, &u, sqrt_eps, path, control);
            self.check_state(times[m + 1], &u)?;
            observe(m + 1, &u);
        }
        Ok(SolveDiagnostics {
            steps: self.time.steps(),
            iterations: 1,
            last_increment: 0.0,
            converged: true,
            truncation: self.coeffs.truncation,
            blow_up: false,
            max_guard_ratio: max_guard,
        })
    }

    fn run_stored(
        &self,
        xi: &DVector<f64>,
        eps: f64,
        path: Option<&NoisePath>,
        control: Option<&Control>,
    ) -> Result<(SpaceTimeField, SolveDiagnostics)> {
        let mut values = Vec::with_capacity(self.time.steps() + 1);
        let diag = self.run_with(xi, eps, path, control, |_, u| values.push(u.clone()))?;
        let field = SpaceTimeField {
            grid: self.op.grid().clone(),
            times: self.time.times().to_vec(),
            values,
            rho: self.rho,
        };
        Ok((field, diag))
    }

    pub fn integrate_spde(
        &self,
        xi: &DVector<f64>,
        eps: f64,
        path: &NoisePath,
    ) -> Result<(SpaceTimeField, SolveDiagnostics)> {
        self.run_stored(xi, eps, Some(path), None)
    }

    pub fn integrate_controlled(
        &self,
        xi: &DVector<f64>,
        eps: f64,
        path: &NoisePath,
        phi: &Control,
    ) -> Result<(SpaceTimeField, SolveDiagnostics)> {
        self.run_stored(xi, eps, Some(path), Some(phi))
    }

    /// Explicit recursion of the skeleton; the fixed point of the Picard map.
    pub fn skeleton_recursion(&self, xi: &DVector<f64>, phi: &Control) -> Result<(SpaceTimeField, SolveDiagnostics)> {
        self.run_stored(xi, 0.0, None, Some(phi))
    }

    pub fn solve_skeleton(&self, xi: &DVector<f64>, phi: &Control) -> Result<(SpaceTimeField, SolveDiagnostics)> {
        self.solve_skeleton_from(xi, phi, PicardStart::HeatFlow)
    }

    /// Global Picard iteration of the discrete mild map
    /// `ψ ↦ e^{t_m A}ξ + Σ_{l<m} e^{(m−l)ΔA}[Δ f(ψ_l) + Δ ∇_h·g(ψ_l) + Σ_j σ_j(ψ_l) φ_j Δ]`.
    pub fn solve_skeleton_from(
        &self,
        xi: &DVector<f64>,
        phi: &Control,
        start: PicardStart,
    ) -> Result<(SpaceTimeField, SolveDiagnostics)> {
        self.check_xi(xi)?;
        self.check_control(phi)?;
        let steps = self.time.steps();
        let times = self.time.times();
        let mut current: Vec<DVector<f64>> = match start {
            PicardStart::HeatFlow => {
                let mut v = Vec::with_capacity(steps + 1);
                v.push(xi.clone());
                for m in 0..steps {
                    let next = &self.propagator * &v[m];
                    v.push(next);
                }
                v
            }
            PicardStart::Zero => vec![DVector::zeros(xi.len()); steps + 1],
        };

        let mut diag = SolveDiagnostics {
            steps,
            iterations: 0,
            last_increment: f64::INFINITY,
            converged: false,
            truncation: self.coeffs.truncation,
            blow_up: false,
            max_guard_ratio: 0.0,
        };
        while diag.iterations < self.options.picard_max_sweeps {
            let mut next = Vec::with_capacity(steps + 1);
            next.push(xi.clone());
            for m in 0..steps {
                let terms = self.step_terms(m, &current[m], 0.0, None, Some(phi));
                let rhs = &next[m] + terms.drift + terms.flux + terms.control;
                let u = &self.propagator * rhs;
                self.check_state(times[m + 1], &u)?;
                next.push(u);
            }
            let scale = next.iter().map(|v| v.amax()).fold(1.0, f64::max);
            let inc = next
                .iter()
                .zip(&current)
                .map(|(a, b)| (a - b).amax())
                .fold(0.0, f64::max)
                / scale;
            current = next;
            diag.iterations += 1;
            diag.last_increment = inc;
            if inc < self.options.picard_tolerance {
                diag.converged = true;
                break;
            }
        }
        if !diag.converged {
            return Err(Error::Convergence(diag));
        }
        for (m, u) in current.iter().enumerate().take(steps) {
            diag.max_guard_ratio = diag.max_guard_ratio.max(self.check_guard(times[m], u)?);
        }
        let field = SpaceTimeField {
            grid: self.op.grid().clone(),
            times: times.to_vec(),
            values: current,
            rho: self.rho,
        };
        Ok((field, diag))
    }

    /// The five mild-form contributions along a controlled trajectory:
    /// initial datum, stochastic convolution, flux, drift, control.
    pub fn decompose_terms(
        &self,
        xi: &DVector<f64>,
        eps: f64,
        path: &NoisePath,
        phi: &Control,
    ) -> Result<TermDecomposition> {
        let (trajectory, _) = self.integrate_controlled(xi, eps, path, phi)?;
        let steps = self.time.steps();
        let zero = DVector::zeros(xi.len());
        let mut parts: [Vec<DVector<f64>>; 5] = Default::default();
        parts[0].push(xi.clone());
        for p in parts.iter_mut().skip(1) {
            p.push(zero.clone());
        }
        let sqrt_eps = eps.sqrt();
        for m in 0..steps {
            let terms = self.step_terms(m, trajectory.at(m), sqrt_eps, Some(path), Some(phi));
            let increments = [&zero, &terms.noise, &terms.flux, &terms.drift, &terms.control];
            for (p, inc) in parts.iter_mut().zip(increments) {
                let next = &self.propagator * (&p[m] + inc);
                p.push(next);
            }
        }
        let wrap = |values: Vec<DVector<f64>>| SpaceTimeField {
            grid: self.op.grid().clone(),
            times: self.time.times().to_vec(),
            values,
            rho: self.rho,
        };
        let [z1, z2, z3, z4, z5] = parts;
        Ok(TermDecomposition {
            initial: wrap(z1),
            stochastic: wrap(z2),
            flux: wrap(z3),
            drift: wrap(z4),
            control: wrap(z5),
            trajectory,
        })
    }

    /// Linearization of one skeleton step in the state:
    /// `J_m s = e^{ΔA}[s + Δ f'(ψ)s + Δ ∇_h·(g'(ψ)s) + Σ_j σ_j'(ψ) β_j Δ s]`,
    /// returned as the matrix acting before the propagator.
    pub(crate) fn state_jacobian(&self, m: usize, u: &DVector<f64>, beta: &Control) -> DMatrix<f64> {
        let t = self.time.times()[m];
        let n = u.len();
        let grid = self.op.grid();
        let mut diag = DVector::from_element(n, 1.0);
        for (i, &r) in u.iter().enumerate() {
            let x = self.x(i);
            diag[i] += self.dt * self.coeffs.f_deriv_at(t, x, r);
            for j in 0..self.coeffs.k {
                diag[i] += self.dt * beta.value(m, j) * self.coeffs.sigma_deriv_at(j, t, x, r);
            }
        }
        let mut jac = DMatrix::from_diagonal(&diag);
        if self.coeffs.has_flux() {
            for axis in 0..self.dim() {
                for i in 0..n {
                    let gp = self.coeffs.g_deriv_at(axis, t, self.x(i), u[i]);
                    if gp == 0.0 {
                        continue;
                    }
                    // column i of ∇_h·(g' e_i)
                    let mut e = DVector::zeros(n);
                    e[i] = gp * self.dt;
                    let col = grid.central_difference(axis, &e);
                    for (r, v) in col.iter().enumerate() {
                        if *v != 0.0 {
                            jac[(r, i)] += v;
                        }
                    }
                }
            }
        }
        jac
    }

    /// `σ_j(t_m, ψ) Δ` per noise component, columns of the control Jacobian of one step.
    pub(crate) fn control_columns(&self, m: usize, u: &DVector<f64>) -> Vec<DVector<f64>> {
        let t = self.time.times()[m];
        (0..self.coeffs.k)
            .map(|j| {
                DVector::from_iterator(
                    u.len(),
                    u.iter()
                        .enumerate()
                        .map(|(i, &r)| self.dt * self.coeffs.sigma_at(j, t, self.x(i), r)),
                )
            })
            .collect()
    }
}

/// `Z₁ … Z₅` together with the trajectory they sum to.
#[derive(Debug, Clone)]
pub struct TermDecomposition {
    pub initial: SpaceTimeField,
    pub stochastic: SpaceTimeField,
    pub flux: SpaceTimeField,
    pub drift: SpaceTimeField,
    pub control: SpaceTimeField,
    pub trajectory: SpaceTimeField,
}

impl TermDecomposition {
    pub fn terms(&self) -> [&SpaceTimeField; 5] {
        [&self.initial, &self.stochastic, &self.flux, &self.drift, &self.control]
    }

    /// Largest node-wise `|Σ_ℓ Z_ℓ − v|`.
    pub fn closure_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for m in 0..self.trajectory.times.len() {
            let mut sum = DVector::zeros(self.trajectory.grid.len());
            for z in self.terms() {
                sum += z.at(m);
            }
            worst = worst.max((sum - self.trajectory.at(m)).amax());
        }
        worst
    }
}

pub fn integrate_spde(
    op: &KernelOperator,
    c: &CoefficientSet,
    xi: &DVector<f64>,
    eps: f64,
    path: &NoisePath,
    rho: f64,
    options: EvolverOptions,
) -> Result<(SpaceTimeField, SolveDiagnostics)> {
    Evolver::new(op, c, path.grid(), rho, options)?.integrate_spde(xi, eps, path)
}

pub fn integrate_controlled(
    op: &KernelOperator,
    c: &CoefficientSet,
    xi: &DVector<f64>,
    eps: f64,
    path: &NoisePath,
    phi: &Control,
    rho: f64,
    options: EvolverOptions,
) -> Result<(SpaceTimeField, SolveDiagnostics)> {
    Evolver::new(op, c, path.grid(), rho, options)?.integrate_controlled(xi, eps, path, phi)
}

pub fn solve_skeleton(
    op: &KernelOperator,
    c: &CoefficientSet,
    xi: &DVector<f64>,
    phi: &Control,
    rho: f64,
    options: EvolverOptions,
) -> Result<(SpaceTimeField, SolveDiagnostics)> {
    Evolver::new(op, c, phi.grid(), rho, options)?.solve_skeleton(xi, phi)
}

pub fn decompose_terms(
    op: &KernelOperator,
    c: &CoefficientSet,
    xi: &DVector<f64>,
    eps: f64,
    path: &NoisePath,
    phi: &Control,
    rho: f64,
    options: EvolverOptions,
) -> Result<TermDecomposition> {
    Evolver::new(op, c, path.grid(), rho, options)?.decompose_terms(xi, eps, path, phi)
}
