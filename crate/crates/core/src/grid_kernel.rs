//! Box grids, the divergence-form elliptic operator and its heat semigroup.
//!
//! The operator `A = ∂ᵢ(b_ij ∂ⱼ)` is discretized from the energy form
//! `Σ_cells ¼ Σ_corners ∇ᵤ·b ∇ᵤ`, where each cell corner uses the one x-edge
//! and one y-edge meeting there. This gives a symmetric matrix for any
//! symmetric `b`, reduces to the 3-point / 5-point stencils when `b` is
//! diagonal, and keeps the ellipticity sandwich exact at the discrete level.
//! `G_t = e^{tA}` is applied through the eigen-decomposition of that matrix.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix2, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform Dirichlet grid on a box in one or two dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    dim: usize,
    lower: Vec<f64>,
    upper: Vec<f64>,
    /// Number of intervals per axis; interior nodes per axis are `n - 1`.
    n: Vec<usize>,
    h: Vec<f64>,
}

/// Box extents plus resolution (intervals per axis).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub extents: Vec<(f64, f64)>,
    pub resolution: Vec<usize>,
}

impl DomainSpec {
    pub fn unit_interval(n: usize) -> Self {
        Self {
            extents: vec![(0.0, 1.0)],
            resolution: vec![n],
        }
    }

    pub fn unit_square(n: usize) -> Self {
        Self {
            extents: vec![(0.0, 1.0), (0.0, 1.0)],
            resolution: vec![n, n],
        }
    }
}

pub fn build_grid(spec: &DomainSpec) -> Result<Grid> {
    let dim = spec.extents.len();
    if !(1..=2).contains(&dim) {
        return Err(Error::InvalidGrid(format!(
            "dimension must be 1 or 2, got {dim}"
        )));
    }
    if spec.resolution.len() != dim {
        return Err(Error::InvalidGrid(format!(
            "{} resolutions given for a {dim}-dimensional box",
            spec.resolution.len()
        )));
    }
    let mut lower = Vec::with_capacity(dim);
    let mut upper = Vec::with_capacity(dim);
    let mut h = Vec::with_capacity(dim);
    for (axis, (&(a, b), &n)) in spec.extents.iter().zip(&spec.resolution).enumerate() {
        if !(a.is_finite() && b.is_finite()) || b <= a {
            return Err(Error::InvalidGrid(format!(
                "axis {axis}: degenerate extent ({a}, {b})"
            )));
        }
        if n < 2 {
            return Err(Error::InvalidGrid(format!(
                "axis {axis}: resolution {n} leaves no interior node"
            )));
        }
        lower.push(a);
        upper.push(b);
        h.push((b - a) / n as f64);
    }
    Ok(Grid {
        dim,
        lower,
        upper,
        n: spec.resolution.clone(),
        h,
    })
}

impl Grid {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn spacing(&self) -> &[f64] {
        &self.h
    }

    pub fn min_spacing(&self) -> f64 {
        self.h.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn resolution(&self) -> &[usize] {
        &self.n
    }

    pub fn extents(&self) -> Vec<(f64, f64)> {
        self.lower.iter().copied().zip(self.upper.iter().copied()).collect()
    }

    pub fn interior_per_axis(&self) -> Vec<usize> {
        self.n.iter().map(|n| n - 1).collect()
    }

    /// Number of interior nodes.
    pub fn len(&self) -> usize {
        self.n.iter().map(|n| n - 1).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Volume element `Π h_i` of the nodal quadrature.
    pub fn cell_volume(&self) -> f64 {
        self.h.iter().product()
    }

    /// Full-grid multi-index (including boundary, `0..=n`) of an interior node.
    pub fn node_of(&self, idx: usize) -> [usize; 2] {
        let m0 = self.n[0] - 1;
        if self.dim == 1 {
            [idx + 1, 0]
        } else {
            [idx % m0 + 1, idx / m0 + 1]
        }
    }

    /// Interior index of a full-grid node, `None` on the boundary.
    pub fn interior_index(&self, node: [usize; 2]) -> Option<usize> {
        for axis in 0..self.dim {
            if node[axis] == 0 || node[axis] >= self.n[axis] {
                return None;
            }
        }
        if self.dim == 1 {
            Some(node[0] - 1)
        } else {
            Some((node[1] - 1) * (self.n[0] - 1) + node[0] - 1)
        }
    }

    /// Physical coordinates of a full-grid node.
    pub fn node_coords(&self, node: [usize; 2]) -> [f64; 2] {
        let mut x = [0.0; 2];
        for axis in 0..self.dim {
            x[axis] = self.lower[axis] + node[axis] as f64 * self.h[axis];
        }
        x
    }

    pub fn coords(&self, idx: usize) -> [f64; 2] {
        self.node_coords(self.node_of(idx))
    }

    /// Samples a function on the interior nodes.
    pub fn sample(&self, f: impl Fn(&[f64]) -> f64) -> DVector<f64> {
        DVector::from_iterator(
            self.len(),
            (0..self.len()).map(|i| {
                let x = self.coords(i);
                f(&x[..self.dim])
            }),
        )
    }

    pub fn nearest_interior(&self, x: &[f64]) -> usize {
        let mut node = [0usize; 2];
        for axis in 0..self.dim {
            let pos = ((x[axis] - self.lower[axis]) / self.h[axis]).round();
            node[axis] = (pos.max(1.0) as usize).min(self.n[axis] - 1);
        }
        self.interior_index(node).expect("clamped to interior")
    }

    /// Discrete `L^p(D)` norm of an interior field (boundary values are zero).
    pub fn lp_norm(&self, field: &DVector<f64>, p: f64) -> f64 {
        let vol = self.cell_volume();
        if p.is_infinite() {
            return field.amax();
        }
        let s: f64 = field.iter().map(|v| v.abs().powf(p)).sum();
        (vol * s).powf(1.0 / p)
    }

    /// Applies `φ ↦ (φ(y - e_i) - φ(y + e_i)) / 2h_i` with zero extension,
    /// the transpose of the central difference along `axis`.
    pub fn central_difference_transpose(&self, axis: usize, field: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.len());
        let inv = 0.5 / self.h[axis];
        for (idx, o) in out.iter_mut().enumerate() {
            let node = self.node_of(idx);
            let mut minus = node;
            minus[axis] -= 1;
            let mut plus = node;
            plus[axis] += 1;
            let a = self.interior_index(minus).map_or(0.0, |j| field[j]);
            let b = self.interior_index(plus).map_or(0.0, |j| field[j]);
            *o = (a - b) * inv;
        }
        out
    }

    /// Central difference along `axis` with zero Dirichlet extension.
    pub fn central_difference(&self, axis: usize, field: &DVector<f64>) -> DVector<f64> {
        -self.central_difference_transpose(axis, field)
    }
}

type TensorFn = dyn Fn(&[f64]) -> Matrix2<f64> + Send + Sync;

/// The diffusion matrix `b(x)` with its declared ellipticity constant.
#[derive(Clone)]
pub struct EllipticCoefficients {
    dim: usize,
    b: Arc<TensorFn>,
    kappa: f64,
}

impl std::fmt::Debug for EllipticCoefficients {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EllipticCoefficients")
            .field("dim", &self.dim)
            .field("kappa", &self.kappa)
            .finish_non_exhaustive()
    }
}

impl EllipticCoefficients {
    pub fn identity(dim: usize) -> Self {
        Self::constant(dim, Matrix2::identity(), 1.0)
    }

    /// Constant matrix; only the leading `dim × dim` block is used.
    pub fn constant(dim: usize, b: Matrix2<f64>, kappa: f64) -> Self {
        Self::from_fn(dim, kappa, move |_| b)
    }

    pub fn from_fn(
        dim: usize,
        kappa: f64,
        b: impl Fn(&[f64]) -> Matrix2<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim,
            b: Arc::new(b),
            kappa,
        }
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn eval(&self, x: &[f64]) -> Matrix2<f64> {
        let mut m = (self.b)(x);
        if self.dim == 1 {
            m[(0, 1)] = 0.0;
            m[(1, 0)] = 0.0;
            m[(1, 1)] = 1.0;
        }
        m
    }

    /// Symmetry and `κ|γ|² ≤ γ·bγ ≤ κ⁻¹|γ|²` at one point.
    fn check_at(&self, x: &[f64]) -> Result<()> {
        let b = self.eval(x);
        let scale = b.amax().max(1.0);
        if self.dim == 2 && (b[(0, 1)] - b[(1, 0)]).abs() > 1e-12 * scale {
            return Err(Error::AssumptionViolation(format!(
                "b is not symmetric at x = {x:?}: b12 = {}, b21 = {}",
                b[(0, 1)],
                b[(1, 0)]
            )));
        }
        let (lo, hi) = if self.dim == 1 {
            (b[(0, 0)], b[(0, 0)])
        } else {
            let eig = SymmetricEigen::new(b).eigenvalues;
            (eig.min(), eig.max())
        };
        let tol = 1e-12 * scale;
        if !(self.kappa > 0.0) || lo < self.kappa - tol || hi > 1.0 / self.kappa + tol {
            return Err(Error::AssumptionViolation(format!(
                "ellipticity with kappa = {} fails at x = {x:?}: spectrum [{lo}, {hi}]",
                self.kappa
            )));
        }
        Ok(())
    }
}

/// Discrete elliptic operator together with its eigen-decomposition.
#[derive(Debug, Clone)]
pub struct KernelOperator {
    grid: Grid,
    matrix: DMatrix<f64>,
    /// Eigenvalues `μ_1 ≥ μ_2 ≥ …`, all negative.
    eigenvalues: DVector<f64>,
    /// Orthonormal eigenvectors (Euclidean), column `n` pairs with `μ_n`.
    eigenvectors: DMatrix<f64>,
}

pub fn assemble_operator(grid: &Grid, coeffs: &EllipticCoefficients) -> Result<KernelOperator> {
    if coeffs.dim != grid.dim {
        return Err(Error::domain(format!(
            "coefficients are {}-dimensional, grid is {}-dimensional",
            coeffs.dim, grid.dim
        )));
    }
    let size = grid.len();
    let mut stiffness = DMatrix::<f64>::zeros(size, size);
    let h = grid.spacing();

    if grid.dim == 1 {
        for edge in 0..grid.n[0] {
            let x = [grid.lower[0] + (edge as f64 + 0.5) * h[0]];
            coeffs.check_at(&x)?;
            for node in [edge, edge + 1] {
                coeffs.check_at(&grid.node_coords([node, 0])[..1])?;
            }
            let w = coeffs.eval(&x)[(0, 0)] / (h[0] * h[0]);
            let a = grid.interior_index([edge, 0]);
            let b = grid.interior_index([edge + 1, 0]);
            add_outer(&mut stiffness, &[(a, -1.0), (b, 1.0)], w);
        }
    } else {
        for node in 0..(grid.n[0] + 1) * (grid.n[1] + 1) {
            let node = [node % (grid.n[0] + 1), node / (grid.n[0] + 1)];
            coeffs.check_at(&grid.node_coords(node))?;
        }
        for j in 0..grid.n[1] {
            for i in 0..grid.n[0] {
                let xc = [
                    grid.lower[0] + (i as f64 + 0.5) * h[0],
                    grid.lower[1] + (j as f64 + 0.5) * h[1],
                ];
                coeffs.check_at(&xc)?;
                let b = coeffs.eval(&xc);
                let p00 = grid.interior_index([i, j]);
                let p10 = grid.interior_index([i + 1, j]);
                let p01 = grid.interior_index([i, j + 1]);
                let p11 = grid.interior_index([i + 1, j + 1]);
                let bottom = [(p00, -1.0 / h[0]), (p10, 1.0 / h[0])];
                let top = [(p01, -1.0 / h[0]), (p11, 1.0 / h[0])];
                let left = [(p00, -1.0 / h[1]), (p01, 1.0 / h[1])];
                let right = [(p10, -1.0 / h[1]), (p11, 1.0 / h[1])];
                for (gx, gy) in [(&bottom, &left), (&bottom, &right), (&top, &left), (&top, &right)] {
                    add_outer(&mut stiffness, gx, 0.25 * b[(0, 0)]);
                    add_outer(&mut stiffness, gy, 0.25 * b[(1, 1)]);
                    add_cross(&mut stiffness, gx, gy, 0.25 * b[(0, 1)]);
                    add_cross(&mut stiffness, gy, gx, 0.25 * b[(1, 0)]);
                }
            }
        }
    }

    let matrix = -stiffness;
    let eig = SymmetricEigen::new(matrix.clone());
    let mut order: Vec<usize> = (0..size).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues = DVector::from_iterator(size, order.iter().map(|&i| eig.eigenvalues[i]));
    let eigenvectors = DMatrix::from_fn(size, size, |r, c| eig.eigenvectors[(r, order[c])]);
    if eigenvalues[0] >= 0.0 {
        return Err(Error::AssumptionViolation(format!(
            "discrete operator is not negative definite: top eigenvalue {}",
            eigenvalues[0]
        )));
    }
    Ok(KernelOperator {
        grid: grid.clone(),
        matrix,
        eigenvalues,
        eigenvectors,
    })
}

/// `S += w · gᵀg` for a sparse linear functional `g` (boundary entries skipped).
fn add_outer(s: &mut DMatrix<f64>, g: &[(Option<usize>, f64)], w: f64) {
    add_cross(s, g, g, w)
}

/// `S += w · gᵀq`, symmetrized by the caller pairing `(g, q)` with `(q, g)`.
fn add_cross(s: &mut DMatrix<f64>, g: &[(Option<usize>, f64)], q: &[(Option<usize>, f64)], w: f64) {
    if w == 0.0 {
        return;
    }
    for &(a, ga) in g {
        let Some(a) = a else { continue };
        for &(b, qb) in q {
            let Some(b) = b else { continue };
            s[(a, b)] += w * ga * qb;
        }
    }
}

impl KernelOperator {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    fn check_field(&self, field: &DVector<f64>) -> Result<()> {
        if field.len() != self.grid.len() {
            return Err(Error::domain(format!(
                "field has {} entries, grid has {} interior nodes",
                field.len(),
                self.grid.len()
            )));
        }
        Ok(())
    }

    /// `e^{tA}·field` via the spectral expansion.
    pub fn kernel_apply(&self, t: f64, field: &DVector<f64>) -> Result<DVector<f64>> {
        if !(t >= 0.0) {
            return Err(Error::domain(format!("kernel time must be >= 0, got {t}")));
        }
        self.check_field(field)?;
        let mut coeffs = self.eigenvectors.tr_mul(field);
        for (c, mu) in coeffs.iter_mut().zip(self.eigenvalues.iter()) {
            *c *= (mu * t).exp();
        }
        Ok(&self.eigenvectors * coeffs)
    }

    /// `x ↦ ∫ ∂_{y_i} G_t(x, y) field(y) dy` for each axis, by discrete
    /// integration by parts against the central-difference flux.
    pub fn kernel_grad_apply(&self, t: f64, field: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
        if !(t > 0.0) {
            return Err(Error::SingularKernel(t));
        }
        self.check_field(field)?;
        (0..self.grid.dim)
            .map(|axis| {
                let flux = self.grid.central_difference_transpose(axis, field);
                self.kernel_apply(t, &flux)
            })
            .collect()
    }

    /// Dense `e^{tA}`; one step of the exponential integrators.
    pub fn propagator(&self, t: f64) -> Result<DMatrix<f64>> {
        Ok(self.kernel_matrix(t)? * self.grid.cell_volume())
    }

    /// Dense kernel `G_t(x, y)` on interior nodes, i.e. `e^{tA} / vol`.
    /// Filled symmetrically so `G_t(x, y) == G_t(y, x)` bitwise.
    pub fn kernel_matrix(&self, t: f64) -> Result<DMatrix<f64>> {
        if !(t >= 0.0) {
            return Err(Error::domain(format!("kernel time must be >= 0, got {t}")));
        }
        let size = self.grid.len();
        let decay: Vec<f64> = self.eigenvalues.iter().map(|mu| (mu * t).exp()).collect();
        let inv_vol = 1.0 / self.grid.cell_volume();
        let scaled = DMatrix::from_fn(size, size, |r, c| self.eigenvectors[(r, c)] * decay[c]);
        let mut out = DMatrix::zeros(size, size);
        for i in 0..size {
            for j in i..size {
                let mut s = 0.0;
                for k in 0..size {
                    s += scaled[(i, k)] * self.eigenvectors[(j, k)];
                }
                out[(i, j)] = s * inv_vol;
                out[(j, i)] = s * inv_vol;
            }
        }
        Ok(out)
    }

    /// `∂_t G_t(x, y) = (A e^{tA})(x, y) / vol`.
    fn kernel_time_derivative(&self, t: f64) -> DMatrix<f64> {
        let size = self.grid.len();
        let scaled = DMatrix::from_fn(size, size, |r, c| {
            let mu = self.eigenvalues[c];
            self.eigenvectors[(r, c)] * mu * (mu * t).exp()
        });
        scaled * self.eigenvectors.transpose() / self.grid.cell_volume()
    }

    /// Writes `index,eigenvalue` rows.
    pub fn write_eigen_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "index,eigenvalue")?;
        for (i, mu) in self.eigenvalues.iter().enumerate() {
            writeln!(out, "{},{:.17e}", i + 1, mu)?;
        }
        Ok(())
    }

    /// Fits the integrability exponents of the kernel and its derivatives and
    /// checks the pointwise Gaussian bound on random `(t, x, y)` samples.
    pub fn fit_kernel_estimates(
        &self,
        p: f64,
        time_samples: &[f64],
        gaussian: &GaussianSampling,
    ) -> Result<KernelEstimateReport> {
        if time_samples.is_empty() {
            return Err(Error::domain("no time samples for the kernel fit"));
        }
        if !(p >= 1.0) {
            return Err(Error::domain(format!("integrability exponent must be >= 1, got {p}")));
        }
        if let Some(bad) = time_samples.iter().find(|t| !(**t > 0.0)) {
            return Err(Error::domain(format!("time samples must be positive, got {bad}")));
        }
        let grid = &self.grid;
        let mut log_t = Vec::new();
        let mut norms: [Vec<f64>; 3] = Default::default();
        for &t in time_samples {
            let g = self.kernel_matrix(t)?;
            let dt = self.kernel_time_derivative(t);
            let mut sup = [0.0f64; 3];
            for x in 0..grid.len() {
                let row = g.row(x).transpose();
                sup[0] = sup[0].max(grid.lp_norm(&row, p));
                for axis in 0..grid.dim {
                    // ∂_{x_i} G by symmetry equals ∂_{y_i} G with the roles swapped.
                    let d = grid.central_difference(axis, &row);
                    sup[1] = sup[1].max(grid.lp_norm(&d, p));
                }
                sup[2] = sup[2].max(grid.lp_norm(&dt.row(x).transpose(), p));
            }
            log_t.push(t.ln());
            for (n, s) in norms.iter_mut().zip(sup) {
                n.push(s);
            }
        }

        let slope_of = |vals: &[f64]| -> f64 {
            if log_t.len() < 2 {
                return 0.0;
            }
            let logs: Vec<f64> = vals.iter().map(|v| v.max(f64::MIN_POSITIVE).ln()).collect();
            least_squares_line(&log_t, &logs).1
        };
        let lambda = 1.0 + slope_of(&norms[0]);
        let upsilon = (lambda - 1.0 - slope_of(&norms[1])).max(0.0);
        let eps_p = (lambda - 1.0 - slope_of(&norms[2])).max(0.0);
        let exponents = [-1.0 + lambda, -1.0 - upsilon + lambda, -1.0 - eps_p + lambda];

        let mut k_p = 0.0f64;
        for (series, expo) in norms.iter().zip(exponents) {
            for (&t, &v) in time_samples.iter().zip(series) {
                k_p = k_p.max(v / t.powf(expo));
            }
        }
        let holds = |series: &[f64], expo: f64| {
            time_samples
                .iter()
                .zip(series)
                .all(|(&t, &v)| v <= k_p * t.powf(expo) * (1.0 + 1e-12))
        };
        let finite = [lambda, upsilon, eps_p, k_p].iter().all(|v| v.is_finite() && *v >= 0.0);
        let lambda_ok = lambda <= 1.0 + LAMBDA_TOLERANCE;

        let t_max = time_samples.iter().copied().fold(0.0, f64::max);
        let t_min = time_samples.iter().copied().fold(f64::INFINITY, f64::min);
        let (gaussian_k, gaussian_c, e4_value) = self.gaussian_bound(t_min, t_max, gaussian, false);
        let (gaussian_grad_k, gaussian_grad_c, e4_grad) =
            self.gaussian_bound(t_min, t_max, gaussian, true);

        Ok(KernelEstimateReport {
            p,
            k_p,
            lambda_p: lambda,
            upsilon_p: upsilon,
            epsilon_p: eps_p,
            gaussian_c,
            gaussian_k,
            gaussian_grad_c,
            gaussian_grad_k,
            gaussian_samples: gaussian.samples,
            pass_e1: finite && lambda_ok && holds(&norms[0], exponents[0]),
            pass_e2: finite && lambda_ok && holds(&norms[1], exponents[1]),
            pass_e3: finite && lambda_ok && holds(&norms[2], exponents[2]),
            pass_e4: e4_value && e4_grad,
        })
    }

    /// Fits `K, C > 0` with `|D_x^γ G_t(x,y)| ≤ K t^{-(d+|γ|)/2} exp(-C|x-y|²/t)`
    /// on sampled triples and reports whether every sample satisfies it.
    fn gaussian_bound(
        &self,
        t_min: f64,
        t_max: f64,
        sampling: &GaussianSampling,
        gradient: bool,
    ) -> (f64, f64, bool) {
        let grid = &self.grid;
        let d = grid.dim as f64;
        let order = if gradient { 1.0 } else { 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
        let (lo, hi) = (t_min.ln(), t_max.ln());
        let mut samples = Vec::with_capacity(sampling.samples);
        for _ in 0..sampling.samples {
            let t = if hi > lo { rng.random_range(lo..=hi).exp() } else { t_min };
            let x = rng.random_range(0..grid.len());
            let y = rng.random_range(0..grid.len());
            samples.push((t, x, y));
        }
        samples.sort_by(|a, b| a.0.total_cmp(&b.0));

        let mut obs = Vec::with_capacity(samples.len());
        let mut cache: Option<(f64, DMatrix<f64>)> = None;
        for &(t, x, y) in &samples {
            if cache.as_ref().is_none_or(|(ct, _)| *ct != t) {
                cache = Some((t, self.kernel_matrix(t).expect("t > 0")));
            }
            let g = &cache.as_ref().unwrap().1;
            let value = if gradient {
                let row = g.row(x).transpose();
                (0..grid.dim)
                    .map(|axis| grid.central_difference(axis, &row)[y].abs())
                    .fold(0.0, f64::max)
            } else {
                g[(x, y)].abs()
            };
            let px = grid.coords(x);
            let py = grid.coords(y);
            let r2: f64 = (0..grid.dim).map(|a| (px[a] - py[a]).powi(2)).sum();
            obs.push((t, r2, value));
        }

        let scale = |t: f64| t.powf(-(d + order) / 2.0);
        let k = 2.0 * obs.iter().map(|&(t, _, v)| v / scale(t)).fold(0.0, f64::max);
        let mut c = f64::INFINITY;
        for &(t, r2, v) in &obs {
            if r2 > 0.0 && v > 0.0 {
                c = c.min(t / r2 * (k * scale(t) / v).ln());
            }
        }
        if !c.is_finite() {
            c = 1.0;
        }
        let k = k.max(f64::MIN_POSITIVE);
        let pass = c > 0.0
            && obs
                .iter()
                .all(|&(t, r2, v)| v <= k * scale(t) * (-c * r2 / t).exp() * (1.0 + 1e-12));
        (k, c, pass)
    }
}

const LAMBDA_TOLERANCE: f64 = 0.05;

/// Geometric time samples on `[1e-4, 1e-2]`, the short-time window in which
/// the kernel estimates are fitted before boundary absorption dominates.
pub fn default_time_samples(count: usize) -> Vec<f64> {
    let count = count.max(2);
    (0..count)
        .map(|i| 1e-4 * 100f64.powf(i as f64 / (count - 1) as f64))
        .collect()
}

/// Sampling controls for the pointwise Gaussian kernel bound.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GaussianSampling {
    pub samples: usize,
    pub seed: u64,
}

impl Default for GaussianSampling {
    fn default() -> Self {
        Self { samples: 1000, seed: 0x6b65726e }
    }
}

/// Fitted heat-kernel constants for one integrability exponent `p`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelEstimateReport {
    pub p: f64,
    pub k_p: f64,
    pub lambda_p: f64,
    pub upsilon_p: f64,
    pub epsilon_p: f64,
    pub gaussian_c: f64,
    pub gaussian_k: f64,
    pub gaussian_grad_c: f64,
    pub gaussian_grad_k: f64,
    pub gaussian_samples: usize,
    pub pass_e1: bool,
    pub pass_e2: bool,
    pub pass_e3: bool,
    pub pass_e4: bool,
}

impl KernelEstimateReport {
    pub fn all_pass(&self) -> bool {
        self.pass_e1 && self.pass_e2 && self.pass_e3 && self.pass_e4
    }
}

/// Ordinary least squares `y = a + b x`, returns `(a, b)`.
pub(crate) fn least_squares_line(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (my - slope * mx, slope)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn laplacian_1d(n: usize) -> KernelOperator {
        let grid = build_grid(&DomainSpec::unit_interval(n)).unwrap();
        assemble_operator(&grid, &EllipticCoefficients::identity(1)).unwrap()
    }

    #[test]
    fn uniform_grids() {
        let g = build_grid(&DomainSpec::unit_interval(64)).unwrap();
        assert_eq!(g.len(), 63);
        assert_eq!(g.spacing()[0], 1.0 / 64.0);
        let g = build_grid(&DomainSpec::unit_square(16)).unwrap();
        assert_eq!(g.interior_per_axis(), vec![15, 15]);
        assert_eq!(g.len(), 225);
        for idx in 0..g.len() {
            assert_eq!(g.interior_index(g.node_of(idx)), Some(idx));
        }
        assert_eq!(g.interior_index([0, 3]), None);
        assert_eq!(g.interior_index([16, 3]), None);
    }

    #[test]
    fn invalid_grids() {
        assert!(matches!(
            build_grid(&DomainSpec::unit_interval(1)),
            Err(Error::InvalidGrid(_))
        ));
        let spec = DomainSpec {
            extents: vec![(1.0, 1.0)],
            resolution: vec![8],
        };
        assert!(matches!(build_grid(&spec), Err(Error::InvalidGrid(_))));
    }

    #[test]
    fn laplacian_stencil_1d() {
        let op = laplacian_1d(8);
        let h2 = (1.0f64 / 8.0).powi(2);
        let a = op.matrix();
        for i in 0..7 {
            assert_relative_eq!(a[(i, i)] * h2, -2.0, epsilon = 1e-12);
            if i + 1 < 7 {
                assert_relative_eq!(a[(i, i + 1)] * h2, 1.0, epsilon = 1e-12);
                assert_relative_eq!(a[(i + 1, i)] * h2, 1.0, epsilon = 1e-12);
            }
            if i + 2 < 7 {
                assert_eq!(a[(i, i + 2)], 0.0);
            }
        }
        assert!(op.eigenvalues().iter().all(|mu| *mu < 0.0));
    }

    #[test]
    fn five_point_stencil_2d() {
        let grid = build_grid(&DomainSpec::unit_square(6)).unwrap();
        let op = assemble_operator(&grid, &EllipticCoefficients::identity(2)).unwrap();
        let h2 = (1.0f64 / 6.0).powi(2);
        let c = grid.interior_index([3, 3]).unwrap();
        let a = op.matrix();
        assert_relative_eq!(a[(c, c)] * h2, -4.0, epsilon = 1e-12);
        for nb in [[2, 3], [4, 3], [3, 2], [3, 4]] {
            assert_relative_eq!(a[(c, grid.interior_index(nb).unwrap())] * h2, 1.0, epsilon = 1e-12);
        }
        for diag in [[2, 2], [4, 4], [2, 4], [4, 2]] {
            assert_eq!(a[(c, grid.interior_index(diag).unwrap())], 0.0);
        }
    }

    #[test]
    fn asymmetric_tensor_rejected() {
        let grid = build_grid(&DomainSpec::unit_square(4)).unwrap();
        let b = Matrix2::new(1.0, 0.2, 0.1, 1.0);
        let coeffs = EllipticCoefficients::constant(2, b, 0.5);
        assert!(matches!(
            assemble_operator(&grid, &coeffs),
            Err(Error::AssumptionViolation(_))
        ));
    }

    #[test]
    fn ellipticity_violation_rejected() {
        let grid = build_grid(&DomainSpec::unit_interval(8)).unwrap();
        let coeffs = EllipticCoefficients::from_fn(1, 0.5, |x| {
            Matrix2::new(if x[0] > 0.7 { 3.0 } else { 1.0 }, 0.0, 0.0, 1.0)
        });
        assert!(matches!(
            assemble_operator(&grid, &coeffs),
            Err(Error::AssumptionViolation(_))
        ));
    }

    #[test]
    fn kernel_time_zero_is_identity() {
        let op = laplacian_1d(16);
        let f = op.grid().sample(|x| x[0] * (1.0 - x[0]) + 0.3);
        let g = op.kernel_apply(0.0, &f).unwrap();
        assert!((g - &f).amax() < 1e-13);
        assert!(matches!(op.kernel_apply(-1e-3, &f), Err(Error::Domain(_))));
    }

    #[test]
    fn first_eigenfunction_decays() {
        let op = laplacian_1d(64);
        let s = op.grid().sample(|x| (std::f64::consts::PI * x[0]).sin());
        let mu1 = op.eigenvalues()[0];
        let h = 1.0 / 64.0;
        let discrete = -4.0 / (h * h) * (std::f64::consts::PI * h / 2.0).sin().powi(2);
        assert_relative_eq!(mu1, discrete, max_relative = 1e-12);
        let t = 0.05;
        let out = op.kernel_apply(t, &s).unwrap();
        assert!((out - s * (mu1 * t).exp()).amax() < 1e-12);
    }

    #[test]
    fn kernel_grad_rejects_t_zero() {
        let op = laplacian_1d(8);
        let f = DVector::from_element(7, 1.0);
        assert!(matches!(op.kernel_grad_apply(0.0, &f), Err(Error::SingularKernel(_))));
        let zero = op.kernel_grad_apply(0.1, &DVector::zeros(7)).unwrap();
        assert_eq!(zero.len(), 1);
        assert!(zero[0].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn fit_rejects_empty_samples() {
        let op = laplacian_1d(8);
        assert!(matches!(
            op.fit_kernel_estimates(1.0, &[], &GaussianSampling::default()),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn eigen_csv_has_header_and_rows() {
        let op = laplacian_1d(4);
        let mut buf = Vec::new();
        op.write_eigen_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "index,eigenvalue");
        assert_eq!(lines.len(), 4);
    }
}
