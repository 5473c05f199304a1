//! Wiener increments on counter-based streams, piecewise-constant controls,
//! and the Girsanov density of the shifted noise.

use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Increasing times `0 = t_0 < … < t_M = T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::domain("time grid needs at least two points"));
        }
        if times[0] != 0.0 {
            return Err(Error::domain(format!("time grid must start at 0, got {}", times[0])));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) || times.iter().any(|t| !t.is_finite()) {
            return Err(Error::domain("time grid must be strictly increasing"));
        }
        Ok(Self { times })
    }

    /// `M` equal steps on `[0, T]`.
    pub fn uniform(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || steps == 0 {
            return Err(Error::domain(format!(
                "uniform grid needs T > 0 and M >= 1, got T = {horizon}, M = {steps}"
            )));
        }
        let dt = horizon / steps as f64;
        let mut times: Vec<f64> = (0..=steps).map(|m| m as f64 * dt).collect();
        times[steps] = horizon;
        Ok(Self { times })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        self.times[self.steps()]
    }

    pub fn dt(&self, m: usize) -> f64 {
        self.times[m + 1] - self.times[m]
    }

    /// Common step if the grid is uniform to relative `1e-9`.
    pub fn uniform_step(&self) -> Option<f64> {
        let dt = self.horizon() / self.steps() as f64;
        (0..self.steps())
            .all(|m| (self.dt(m) - dt).abs() <= 1e-9 * dt)
            .then_some(dt)
    }

    /// Splits every step into `factor` equal sub-steps.
    pub fn refine(&self, factor: usize) -> Self {
        let mut times = Vec::with_capacity(self.steps() * factor + 1);
        for m in 0..self.steps() {
            let (a, b) = (self.times[m], self.times[m + 1]);
            for s in 0..factor {
                times.push(a + (b - a) * s as f64 / factor as f64);
            }
        }
        times.push(self.horizon());
        Self { times }
    }
}

/// Gaussian increments of a `k`-dimensional Wiener process on a time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisePath {
    grid: TimeGrid,
    k: usize,
    /// Row-major `M × k`.
    increments: Vec<f64>,
    seed: u64,
    stream: u64,
}

impl NoisePath {
    pub fn from_increments(grid: TimeGrid, k: usize, increments: Vec<f64>) -> Result<Self> {
        if k == 0 || increments.len() != grid.steps() * k {
            return Err(Error::domain(format!(
                "increments must be {} x {k}, got {} values",
                grid.steps(),
                increments.len()
            )));
        }
        Ok(Self {
            grid,
            k,
            increments,
            seed: 0,
            stream: 0,
        })
    }

    pub fn zeros(grid: TimeGrid, k: usize) -> Self {
        let increments = vec![0.0; grid.steps() * k];
        Self {
            grid,
            k,
            increments,
            seed: 0,
            stream: 0,
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// `ΔB^j_m`.
    pub fn increment(&self, m: usize, j: usize) -> f64 {
        self.increments[m * self.k + j]
    }

    /// `B(t_m)` for `m = 0..=M`, row-major `(M+1) × k`.
    pub fn values(&self) -> Vec<f64> {
        let mut out = vec![0.0; (self.grid.steps() + 1) * self.k];
        for m in 0..self.grid.steps() {
            for j in 0..self.k {
                out[(m + 1) * self.k + j] = out[m * self.k + j] + self.increment(m, j);
            }
        }
        out
    }
}

/// One stream per `(seed, path_index)`: path `i` does not depend on how
/// many paths are drawn or on which worker draws it.
pub fn path_rng(seed: u64, path_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path_index);
    rng
}

pub fn sample_brownian(k: usize, grid: &TimeGrid, seed: u64) -> Result<NoisePath> {
    sample_brownian_stream(k, grid, seed, 0)
}

pub fn sample_brownian_stream(k: usize, grid: &TimeGrid, seed: u64, path_index: u64) -> Result<NoisePath> {
    if k == 0 {
        return Err(Error::domain("noise dimension k must be >= 1"));
    }
    let mut rng = path_rng(seed, path_index);
    let mut increments = Vec::with_capacity(grid.steps() * k);
    for m in 0..grid.steps() {
        let sd = grid.dt(m).sqrt();
        for _ in 0..k {
            let z: f64 = StandardNormal.sample(&mut rng);
            increments.push(sd * z);
        }
    }
    Ok(NoisePath {
        grid: grid.clone(),
        k,
        increments,
        seed,
        stream: path_index,
    })
}

/// Piecewise-constant `ℝ^k`-valued function of time, constant on each
/// `[t_m, t_{m+1})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Control {
    grid: TimeGrid,
    k: usize,
    /// Row-major `M × k`.
    values: Vec<f64>,
    bound: Option<f64>,
}

impl Control {
    pub fn new(grid: TimeGrid, k: usize, values: Vec<f64>, bound: Option<f64>) -> Result<Self> {
        if k == 0 || values.len() != grid.steps() * k {
            return Err(Error::domain(format!(
                "control values must be {} x {k}, got {}",
                grid.steps(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("control values must be finite"));
        }
        let control = Self {
            grid,
            k,
            values,
            bound: None,
        };
        control.with_bound(bound)
    }

    pub fn zero(grid: &TimeGrid, k: usize) -> Self {
        Self {
            grid: grid.clone(),
            k,
            values: vec![0.0; grid.steps() * k],
            bound: None,
        }
    }

    /// The same vector `value` on every step.
    pub fn constant(grid: &TimeGrid, value: &[f64]) -> Self {
        let values = (0..grid.steps()).flat_map(|_| value.iter().copied()).collect();
        Self {
            grid: grid.clone(),
            k: value.len(),
            values,
            bound: None,
        }
    }

    pub fn from_fn(grid: &TimeGrid, k: usize, f: impl Fn(f64, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.steps() * k);
        for m in 0..grid.steps() {
            for j in 0..k {
                values.push(f(grid.times()[m], j));
            }
        }
        Self {
            grid: grid.clone(),
            k,
            values,
            bound: None,
        }
    }

    /// Attaches an `L²` budget `N`; fails if the control exceeds it.
    pub fn with_bound(mut self, bound: Option<f64>) -> Result<Self> {
        if let Some(n) = bound {
            let norm = control_l2_norm(&self);
            if norm > n * (1.0 + 1e-12) {
                return Err(Error::domain(format!(
                    "control has squared L2 norm {norm}, exceeding the budget {n}"
                )));
            }
        }
        self.bound = bound;
        Ok(self)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn bound(&self) -> Option<f64> {
        self.bound
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, m: usize, j: usize) -> f64 {
        self.values[m * self.k + j]
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            grid: self.grid.clone(),
            k: self.k,
            values: self.values.iter().map(|v| v * s).collect(),
            bound: None,
        }
    }

    /// Same function on the grid refined by `factor`.
    pub fn refine(&self, factor: usize) -> Self {
        let mut values = Vec::with_capacity(self.values.len() * factor);
        for m in 0..self.grid.steps() {
            for _ in 0..factor {
                values.extend_from_slice(&self.values[m * self.k..(m + 1) * self.k]);
            }
        }
        Self {
            grid: self.grid.refine(factor),
            k: self.k,
            values,
            bound: self.bound,
        }
    }

    /// Rows `t,phi_1,…,phi_k`, one per step start, then a closing row at `T`
    /// repeating the last value.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        let header: Vec<String> = (1..=self.k).map(|j| format!("phi_{j}")).collect();
        writeln!(out, "t,{}", header.join(","))?;
        let steps = self.grid.steps();
        for m in 0..=steps {
            let row = m.min(steps - 1);
            let vals: Vec<String> = (0..self.k)
                .map(|j| format!("{:.17e}", self.value(row, j)))
                .collect();
            writeln!(out, "{:.17e},{}", self.grid.times()[m], vals.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv(input: impl BufRead) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty control file".into()))??;
        let k = header.split(',').count().saturating_sub(1);
        if k == 0 || !header.starts_with('t') {
            return Err(Error::Parse(format!("bad control header `{header}`")));
        }
        let mut times = Vec::new();
        let mut values = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse(format!("control line {}: {e}", lineno + 2)))?;
            if fields.len() != k + 1 {
                return Err(Error::Parse(format!(
                    "control line {}: expected {} fields, got {}",
                    lineno + 2,
                    k + 1,
                    fields.len()
                )));
            }
            times.push(fields[0]);
            values.extend_from_slice(&fields[1..]);
        }
        // the closing row only carries T
        values.truncate(values.len().saturating_sub(k));
        let grid = TimeGrid::new(times)?;
        Control::new(grid, k, values, None)
    }
}

/// `∫₀ᵀ |φ(s)|² ds`, exact for piecewise-constant controls.
pub fn control_l2_norm(c: &Control) -> f64 {
    (0..c.grid.steps())
        .map(|m| {
            let sq: f64 = c.values[m * c.k..(m + 1) * c.k].iter().map(|v| v * v).sum();
            sq * c.grid.dt(m)
        })
        .sum()
}

fn check_compatible(c: &Control, path: &NoisePath) -> Result<()> {
    if c.k != path.k {
        return Err(Error::domain(format!(
            "control is {}-dimensional, noise is {}-dimensional",
            c.k, path.k
        )));
    }
    if c.grid != path.grid {
        return Err(Error::domain("control and noise path use different time grids"));
    }
    Ok(())
}

/// `log dQ/dP = −ε^{-1/2} Σ_m ⟨φ(t_m), ΔB_m⟩ − (2ε)^{-1} ∫|φ|² ds`
/// with left-point evaluation of the stochastic integral.
pub fn girsanov_log_weight(c: &Control, path: &NoisePath, eps: f64) -> Result<f64> {
    check_compatible(c, path)?;
    if !(eps > 0.0) {
        return Err(Error::domain(format!("Girsanov weight needs eps > 0, got {eps}")));
    }
    let stochastic: f64 = c.values.iter().zip(&path.increments).map(|(p, db)| p * db).sum();
    Ok(-stochastic / eps.sqrt() - control_l2_norm(c) / (2.0 * eps))
}

/// Increments of `B̄(t) = B(t) + ε^{-1/2} ∫₀ᵗ φ(s) ds`.
pub fn shift_path(path: &NoisePath, c: &Control, eps: f64) -> Result<NoisePath> {
    check_compatible(c, path)?;
    if !(eps > 0.0) {
        return Err(Error::domain(format!("path shift needs eps > 0, got {eps}")));
    }
    let scale = 1.0 / eps.sqrt();
    let mut increments = path.increments.clone();
    for m in 0..path.grid.steps() {
        let dt = path.grid.dt(m);
        for j in 0..path.k {
            increments[m * path.k + j] += scale * c.value(m, j) * dt;
        }
    }
    Ok(NoisePath {
        increments,
        ..path.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn brownian_is_deterministic_in_seed() {
        let grid = TimeGrid::uniform(1.0, 50).unwrap();
        let a = sample_brownian(3, &grid, 17).unwrap();
        let b = sample_brownian(3, &grid, 17).unwrap();
        assert_eq!(a, b);
        let c = sample_brownian_stream(3, &grid, 17, 1).unwrap();
        assert_ne!(a.increments(), c.increments());
        let values = a.values();
        let total: f64 = (0..50).map(|m| a.increment(m, 2)).sum();
        assert_eq!(values[50 * 3 + 2], total);
    }

    #[test]
    fn rejects_bad_inputs() {
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        assert!(matches!(sample_brownian(0, &grid, 1), Err(Error::Domain(_))));
        assert!(TimeGrid::new(vec![0.0, 0.5, 0.5, 1.0]).is_err());
        assert!(TimeGrid::new(vec![0.0, 0.6, 0.4]).is_err());
    }

    #[test]
    fn pooled_increment_variance() {
        let dt = 0.01;
        let grid = TimeGrid::uniform(1.0, 100).unwrap();
        let paths = 10_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut count = 0usize;
        for i in 0..paths {
            let p = sample_brownian_stream(1, &grid, 2024, i).unwrap();
            for &db in p.increments() {
                sum += db;
                sum_sq += db * db;
                count += 1;
            }
        }
        let mean = sum / count as f64;
        let var = sum_sq / count as f64 - mean * mean;
        // stderr of the sample variance of N(0, dt) is dt * sqrt(2 / n)
        let band = 5.0 * dt * (2.0 / count as f64).sqrt();
        assert!((var - dt).abs() < band, "var {var}, band {band}");
    }

    #[test]
    fn control_norms() {
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        assert_eq!(control_l2_norm(&Control::zero(&grid, 2)), 0.0);
        assert!((control_l2_norm(&Control::constant(&grid, &[1.0])) - 1.0).abs() < 1e-15);
        let half = Control::from_fn(&grid, 2, |t, _| if t < 0.5 { 1.0 } else { 0.0 });
        assert!((control_l2_norm(&half) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn control_budget_enforced() {
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let c = Control::constant(&grid, &[2.0]);
        assert!(c.clone().with_bound(Some(4.0)).is_ok());
        assert!(c.with_bound(Some(3.9)).is_err());
    }

    #[test]
    fn girsanov_zero_control() {
        let grid = TimeGrid::uniform(1.0, 16).unwrap();
        let path = sample_brownian(2, &grid, 5).unwrap();
        for eps in [0.01, 0.5, 3.0] {
            assert_eq!(girsanov_log_weight(&Control::zero(&grid, 2), &path, eps).unwrap(), 0.0);
        }
    }

    #[test]
    fn girsanov_hand_evaluation() {
        // M = 4 steps of 0.25, k = 2, φ = (1, -2), increments chosen by hand.
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let inc = vec![0.1, 0.2, -0.3, 0.0, 0.5, -0.1, 0.0, 0.4];
        let path = NoisePath::from_increments(grid.clone(), 2, inc).unwrap();
        let phi = Control::constant(&grid, &[1.0, -2.0]);
        // Σ⟨φ, ΔB⟩ = 1·(0.1 − 0.3 + 0.5 + 0.0) − 2·(0.2 + 0.0 − 0.1 + 0.4) = 0.3 − 1.0 = −0.7
        // ∫|φ|² = 5
        let eps: f64 = 0.25;
        let expected = 0.7 / eps.sqrt() - 5.0 / (2.0 * eps);
        let got = girsanov_log_weight(&phi, &path, eps).unwrap();
        assert!((got - expected).abs() < 1e-14, "{got} vs {expected}");
    }

    #[test]
    fn grid_mismatch_is_domain_error() {
        let g1 = TimeGrid::uniform(1.0, 4).unwrap();
        let g2 = TimeGrid::uniform(1.0, 5).unwrap();
        let path = sample_brownian(1, &g1, 0).unwrap();
        let c = Control::zero(&g2, 1);
        assert!(matches!(girsanov_log_weight(&c, &path, 1.0), Err(Error::Domain(_))));
        assert!(matches!(shift_path(&path, &c, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn shift_examples() {
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let zero = NoisePath::zeros(grid.clone(), 1);
        let shifted = shift_path(&zero, &Control::constant(&grid, &[1.0]), 1.0).unwrap();
        assert!(shifted.increments().iter().all(|v| *v == 0.25));
        let path = sample_brownian(1, &grid, 9).unwrap();
        let same = shift_path(&path, &Control::zero(&grid, 1), 0.3).unwrap();
        assert_eq!(same.increments(), path.increments());
    }

    #[test]
    fn control_csv_round_trip() {
        let grid = TimeGrid::uniform(0.5, 5).unwrap();
        let c = Control::from_fn(&grid, 2, |t, j| t * (j as f64 + 1.0) - 0.1);
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        let back = Control::read_csv(&buf[..]).unwrap();
        assert_eq!(back.values(), c.values());
        assert_eq!(back.grid(), c.grid());
    }

    proptest! {
        #[test]
        fn shift_inverse_is_identity(seed in 0u64..1000, eps in 0.01f64..4.0, a in -3.0f64..3.0) {
            let grid = TimeGrid::uniform(1.0, 12).unwrap();
            let path = sample_brownian(2, &grid, seed).unwrap();
            let phi = Control::from_fn(&grid, 2, |t, j| a * (t + j as f64).sin());
            let there = shift_path(&path, &phi, eps).unwrap();
            let back = shift_path(&there, &phi.scaled(-1.0), eps).unwrap();
            for (x, y) in back.increments().iter().zip(path.increments()) {
                prop_assert!((x - y).abs() < 1e-14);
            }
        }

        #[test]
        fn l2_norm_invariant_under_refinement(vals in proptest::collection::vec(-5.0f64..5.0, 8), factor in 1usize..5) {
            let grid = TimeGrid::uniform(2.0, 4).unwrap();
            let c = Control::new(grid, 2, vals, None).unwrap();
            let fine = c.refine(factor);
            let a = control_l2_norm(&c);
            let b = control_l2_norm(&fine);
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a));
        }
    }
}
