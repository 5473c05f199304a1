//! Nonlinear coefficients `f`, `g_i = g_i1 + g_i2`, `σ_j`, the sampled
//! growth/Lipschitz checks, and the preset equation families.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

type PointFn = dyn Fn(f64, &[f64], f64) -> f64 + Send + Sync;

/// A user-supplied closure `(t, x, r) ↦ value`, optionally with `∂/∂r`.
#[derive(Clone)]
pub struct CustomFn {
    value: Arc<PointFn>,
    derivative: Option<Arc<PointFn>>,
}

impl fmt::Debug for CustomFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomFn")
            .field("has_derivative", &self.derivative.is_some())
            .finish()
    }
}

/// Scalar coefficient of `(t, x, r)`. Table-driven variants depend on `r` only
/// so that they can be read from config files.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScalarFn {
    Zero,
    Constant { value: f64 },
    /// `Σ c_i r^i`.
    Polynomial { coeffs: Vec<f64> },
    /// `scale · r / sqrt(1 + eps0 r²)`.
    Saturating { scale: f64, eps0: f64 },
    /// `a · r / (1 + r²) + b · r`.
    Reaction { a: f64, b: f64 },
    /// Polynomial pieces in `r` separated by increasing breakpoints;
    /// `pieces.len() == breaks.len() + 1`.
    Piecewise { breaks: Vec<f64>, pieces: Vec<Vec<f64>> },
    #[serde(skip)]
    Custom(CustomFn),
}

impl ScalarFn {
    pub fn custom(f: impl Fn(f64, &[f64], f64) -> f64 + Send + Sync + 'static) -> Self {
        ScalarFn::Custom(CustomFn {
            value: Arc::new(f),
            derivative: None,
        })
    }

    pub fn custom_with_derivative(
        f: impl Fn(f64, &[f64], f64) -> f64 + Send + Sync + 'static,
        df: impl Fn(f64, &[f64], f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        ScalarFn::Custom(CustomFn {
            value: Arc::new(f),
            derivative: Some(Arc::new(df)),
        })
    }

    pub fn is_zero(&self) -> bool {
        match self {
            ScalarFn::Zero => true,
            ScalarFn::Constant { value } => *value == 0.0,
            ScalarFn::Polynomial { coeffs } => coeffs.iter().all(|c| *c == 0.0),
            ScalarFn::Saturating { scale, .. } => *scale == 0.0,
            ScalarFn::Reaction { a, b } => *a == 0.0 && *b == 0.0,
            ScalarFn::Piecewise { pieces, .. } => pieces.iter().flatten().all(|c| *c == 0.0),
            ScalarFn::Custom(_) => false,
        }
    }

    fn check(&self) -> Result<()> {
        if let ScalarFn::Piecewise { breaks, pieces } = self {
            if pieces.len() != breaks.len() + 1 {
                return Err(Error::domain(format!(
                    "piecewise table has {} breaks but {} pieces",
                    breaks.len(),
                    pieces.len()
                )));
            }
            if breaks.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::domain("piecewise breakpoints must increase"));
            }
        }
        if let ScalarFn::Saturating { eps0, .. } = self {
            if *eps0 < 0.0 {
                return Err(Error::domain("saturating eps0 must be >= 0"));
            }
        }
        Ok(())
    }

    pub fn eval(&self, t: f64, x: &[f64], r: f64) -> f64 {
        match self {
            ScalarFn::Zero => 0.0,
            ScalarFn::Constant { value } => *value,
            ScalarFn::Polynomial { coeffs } => horner(coeffs, r),
            ScalarFn::Saturating { scale, eps0 } => scale * r / (1.0 + eps0 * r * r).sqrt(),
            ScalarFn::Reaction { a, b } => a * r / (1.0 + r * r) + b * r,
            ScalarFn::Piecewise { breaks, pieces } => horner(&pieces[piece_index(breaks, r)], r),
            ScalarFn::Custom(c) => (c.value)(t, x, r),
        }
    }

    /// `∂/∂r`.
    pub fn deriv(&self, t: f64, x: &[f64], r: f64) -> f64 {
        match self {
            ScalarFn::Zero | ScalarFn::Constant { .. } => 0.0,
            ScalarFn::Polynomial { coeffs } => horner_deriv(coeffs, r),
            ScalarFn::Saturating { scale, eps0 } => scale * (1.0 + eps0 * r * r).powf(-1.5),
            ScalarFn::Reaction { a, b } => {
                let q = 1.0 + r * r;
                a * (1.0 - r * r) / (q * q) + b
            }
            ScalarFn::Piecewise { breaks, pieces } => {
                horner_deriv(&pieces[piece_index(breaks, r)], r)
            }
            ScalarFn::Custom(c) => match &c.derivative {
                Some(df) => df(t, x, r),
                None => {
                    let step = 1e-6 * (1.0 + r.abs());
                    ((c.value)(t, x, r + step) - (c.value)(t, x, r - step)) / (2.0 * step)
                }
            },
        }
    }
}

fn horner(coeffs: &[f64], r: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * r + c)
}

fn horner_deriv(coeffs: &[f64], r: f64) -> f64 {
    coeffs
        .iter()
        .enumerate()
        .skip(1)
        .rev()
        .fold(0.0, |acc, (i, c)| acc * r + i as f64 * c)
}

fn piece_index(breaks: &[f64], r: f64) -> usize {
    breaks.partition_point(|b| *b <= r)
}

/// Smooth clamp: identity on `|r| ≤ n`, `C¹` blend on `[n, n+1]`,
/// constant `±(n + 1/2)` beyond. Returns `(value, derivative)`.
fn smooth_clamp(r: f64, n: f64) -> (f64, f64) {
    let a = r.abs();
    if a <= n {
        return (r, 1.0);
    }
    let s = (a - n).min(1.0);
    (r.signum() * (n + s - 0.5 * s * s), 1.0 - s)
}

/// Which coefficient to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    F,
    G1(usize),
    G2(usize),
    /// `g_i = g_i1 + g_i2`.
    G(usize),
    Sigma(usize),
}

/// The nonlinearities of the equation with their declared constants.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoefficientSet {
    pub d: usize,
    pub k: usize,
    pub nu: f64,
    /// Growth constant of (A3).
    pub big_k: f64,
    /// Growth/Lipschitz constant of (A4)/(A5).
    pub big_l: f64,
    pub f: ScalarFn,
    pub g1: Vec<ScalarFn>,
    /// `g_i2(t, r)`, evaluated without a space argument.
    pub g2: Vec<ScalarFn>,
    pub sigma: Vec<ScalarFn>,
    /// Truncation level `n` of the approximating equation, off when `None`.
    #[serde(default)]
    pub truncation: Option<f64>,
}

impl CoefficientSet {
    pub fn new(
        d: usize,
        k: usize,
        nu: f64,
        big_k: f64,
        big_l: f64,
        f: ScalarFn,
        g1: Vec<ScalarFn>,
        g2: Vec<ScalarFn>,
        sigma: Vec<ScalarFn>,
    ) -> Result<Self> {
        let set = Self {
            d,
            k,
            nu,
            big_k,
            big_l,
            f,
            g1,
            g2,
            sigma,
            truncation: None,
        };
        set.check()?;
        Ok(set)
    }

    pub fn check(&self) -> Result<()> {
        if !(1..=2).contains(&self.d) {
            return Err(Error::domain(format!("space dimension must be 1 or 2, got {}", self.d)));
        }
        if self.k == 0 {
            return Err(Error::domain("noise dimension k must be >= 1"));
        }
        if !(self.nu >= 1.0) {
            return Err(Error::domain(format!("nu must be >= 1, got {}", self.nu)));
        }
        if !(self.big_k > 0.0 && self.big_l > 0.0) {
            return Err(Error::domain("growth constants K and L must be > 0"));
        }
        if self.g1.len() != self.d || self.g2.len() != self.d {
            return Err(Error::domain(format!(
                "need {} flux components, got g1: {}, g2: {}",
                self.d,
                self.g1.len(),
                self.g2.len()
            )));
        }
        if self.sigma.len() != self.k {
            return Err(Error::domain(format!(
                "need {} noise coefficients, got {}",
                self.k,
                self.sigma.len()
            )));
        }
        if let Some(n) = self.truncation {
            if !(n > 0.0) {
                return Err(Error::domain("truncation level must be > 0"));
            }
        }
        std::iter::once(&self.f)
            .chain(&self.g1)
            .chain(&self.g2)
            .chain(&self.sigma)
            .try_for_each(ScalarFn::check)
    }

    pub fn with_truncation(mut self, level: Option<f64>) -> Self {
        self.truncation = level;
        self
    }

    pub fn has_flux(&self) -> bool {
        self.g1.iter().chain(&self.g2).any(|g| !g.is_zero())
    }

    pub fn has_drift(&self) -> bool {
        !self.f.is_zero()
    }

    fn clamp(&self, r: f64) -> (f64, f64) {
        match self.truncation {
            Some(n) => smooth_clamp(r, n),
            None => (r, 1.0),
        }
    }

    fn raw(&self, which: Term) -> Result<(&ScalarFn, Option<&ScalarFn>, bool)> {
        let out_of_range = |what: &str, i: usize, len: usize| {
            Error::domain(format!("{what} index {i} out of range (have {len})"))
        };
        Ok(match which {
            Term::F => (&self.f, None, true),
            Term::G1(i) => (self.g1.get(i).ok_or_else(|| out_of_range("g1", i, self.d))?, None, true),
            Term::G2(i) => (self.g2.get(i).ok_or_else(|| out_of_range("g2", i, self.d))?, None, false),
            Term::G(i) => (
                self.g1.get(i).ok_or_else(|| out_of_range("g", i, self.d))?,
                Some(&self.g2[i]),
                true,
            ),
            Term::Sigma(j) => (
                self.sigma.get(j).ok_or_else(|| out_of_range("sigma", j, self.k))?,
                None,
                true,
            ),
        })
    }

    /// Pointwise evaluation of one coefficient (truncation applied if set).
    pub fn evaluate(&self, which: Term, t: f64, x: &[f64], r: f64) -> Result<f64> {
        let (first, second, uses_x) = self.raw(which)?;
        let (r, _) = self.clamp(r);
        let x_arg: &[f64] = if uses_x { x } else { &[] };
        let mut v = first.eval(t, x_arg, r);
        if let Some(g2) = second {
            v += g2.eval(t, &[], r);
        }
        Ok(v)
    }

    /// `∂/∂r` of one coefficient (truncation applied if set).
    pub fn evaluate_deriv(&self, which: Term, t: f64, x: &[f64], r: f64) -> Result<f64> {
        let (first, second, uses_x) = self.raw(which)?;
        let (r, dr) = self.clamp(r);
        let x_arg: &[f64] = if uses_x { x } else { &[] };
        let mut v = first.deriv(t, x_arg, r);
        if let Some(g2) = second {
            v += g2.deriv(t, &[], r);
        }
        Ok(v * dr)
    }

    pub(crate) fn f_at(&self, t: f64, x: &[f64], r: f64) -> f64 {
        self.f.eval(t, x, self.clamp(r).0)
    }

    pub(crate) fn f_deriv_at(&self, t: f64, x: &[f64], r: f64) -> f64 {
        let (r, dr) = self.clamp(r);
        self.f.deriv(t, x, r) * dr
    }

    pub(crate) fn g_at(&self, i: usize, t: f64, x: &[f64], r: f64) -> f64 {
        let r = self.clamp(r).0;
        self.g1[i].eval(t, x, r) + self.g2[i].eval(t, &[], r)
    }

    pub(crate) fn g_deriv_at(&self, i: usize, t: f64, x: &[f64], r: f64) -> f64 {
        let (r, dr) = self.clamp(r);
        (self.g1[i].deriv(t, x, r) + self.g2[i].deriv(t, &[], r)) * dr
    }

    pub(crate) fn sigma_at(&self, j: usize, t: f64, x: &[f64], r: f64) -> f64 {
        self.sigma[j].eval(t, x, self.clamp(r).0)
    }

    pub(crate) fn sigma_deriv_at(&self, j: usize, t: f64, x: &[f64], r: f64) -> f64 {
        let (r, dr) = self.clamp(r);
        self.sigma[j].deriv(t, x, r) * dr
    }
}

/// The preset families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Burgers,
    ReactionDiffusion,
    LinearGaussian,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "burgers" => Ok(Preset::Burgers),
            "reaction_diffusion" => Ok(Preset::ReactionDiffusion),
            "linear_gaussian" => Ok(Preset::LinearGaussian),
            other => Err(Error::NotFound {
                kind: "preset",
                name: other.to_string(),
            }),
        }
    }
}

/// Bounded multiplicative noise `r / sqrt(k (1 + r²))` per component, so
/// `Σ_j σ_j² ≤ r²` and each `σ_j` is Lipschitz with constant `1/√k`.
fn multiplicative_sigma(k: usize) -> Vec<ScalarFn> {
    vec![
        ScalarFn::Saturating {
            scale: 1.0 / (k as f64).sqrt(),
            eps0: 1.0,
        };
        k
    ]
}

pub fn make_preset(name: &str, d: usize, k: usize) -> Result<CoefficientSet> {
    let preset: Preset = name.parse()?;
    preset_coefficients(preset, d, k)
}

pub fn preset_coefficients(preset: Preset, d: usize, k: usize) -> Result<CoefficientSet> {
    let zeros = vec![ScalarFn::Zero; d];
    match preset {
        Preset::Burgers => CoefficientSet::new(
            d,
            k,
            2.0,
            0.5,
            1.0,
            ScalarFn::Zero,
            zeros,
            vec![ScalarFn::Polynomial { coeffs: vec![0.0, 0.0, 0.5] }; d],
            multiplicative_sigma(k),
        ),
        Preset::ReactionDiffusion => CoefficientSet::new(
            d,
            k,
            1.0,
            1.0,
            1.5,
            ScalarFn::Reaction { a: 1.0, b: -0.5 },
            zeros.clone(),
            zeros,
            multiplicative_sigma(k),
        ),
        Preset::LinearGaussian => CoefficientSet::new(
            d,
            k,
            1.0,
            1.0,
            k as f64,
            ScalarFn::Zero,
            zeros.clone(),
            zeros,
            vec![ScalarFn::Constant { value: 1.0 }; k],
        ),
    }
}

/// Sample box for the assumption checks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleSpec {
    pub x_extents: Vec<(f64, f64)>,
    pub x_count: usize,
    pub t_count: usize,
    pub r_range: (f64, f64),
    pub r_count: usize,
}

impl SampleSpec {
    pub fn default_for(extents: Vec<(f64, f64)>) -> Self {
        Self {
            x_extents: extents,
            x_count: 5,
            t_count: 5,
            r_range: (-10.0, 10.0),
            r_count: 201,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub t: f64,
    pub x: Vec<f64>,
    pub r: f64,
    pub s: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssumptionCheck {
    pub name: String,
    pub pass: bool,
    /// Largest sampled `lhs / rhs`; the bound holds where this is ≤ 1.
    pub worst_ratio: f64,
    pub witness: Option<Witness>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationReport {
    pub nu: f64,
    pub big_k: f64,
    pub big_l: f64,
    pub checks: Vec<AssumptionCheck>,
}

impl ValidationReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn check(&self, name: &str) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

const RATIO_SLACK: f64 = 1e-9;

struct Tracker {
    name: String,
    worst: f64,
    witness: Option<Witness>,
}

impl Tracker {
    fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            worst: 0.0,
            witness: None,
        }
    }

    fn record(&mut self, lhs: f64, rhs: f64, t: f64, x: &[f64], r: f64, s: Option<f64>) {
        let ratio = if rhs > 0.0 {
            lhs / rhs
        } else if lhs > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        let ratio = if ratio.is_nan() { f64::INFINITY } else { ratio };
        if ratio > self.worst || self.witness.is_none() {
            self.worst = ratio;
            self.witness = Some(Witness {
                t,
                x: x.to_vec(),
                r,
                s,
            });
        }
    }

    fn finish(self) -> AssumptionCheck {
        AssumptionCheck {
            pass: self.worst <= 1.0 + RATIO_SLACK,
            name: self.name,
            worst_ratio: self.worst,
            witness: self.witness,
        }
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Samples the growth and Lipschitz bounds on a tensor grid of
/// `(t, x, r)` and `(t, x, r, s)` and reports the worst ratio of each.
pub fn validate_assumptions(c: &CoefficientSet, horizon: f64, spec: &SampleSpec) -> Result<ValidationReport> {
    if !(horizon >= 0.0) {
        return Err(Error::domain("horizon must be >= 0"));
    }
    if spec.x_extents.len() != c.d {
        return Err(Error::domain("sample box dimension differs from the coefficient dimension"));
    }
    if spec.r_range.1 <= spec.r_range.0 || spec.r_count < 2 || spec.x_count == 0 || spec.t_count == 0 {
        return Err(Error::domain("degenerate sample ranges"));
    }
    let ts = linspace(0.0, horizon, spec.t_count);
    let axes: Vec<Vec<f64>> = spec
        .x_extents
        .iter()
        .map(|&(a, b)| linspace(a, b, spec.x_count))
        .collect();
    let xs: Vec<Vec<f64>> = if c.d == 1 {
        axes[0].iter().map(|&x| vec![x]).collect()
    } else {
        axes[1]
            .iter()
            .flat_map(|&y| axes[0].iter().map(move |&x| vec![x, y]))
            .collect()
    };
    let rs = linspace(spec.r_range.0, spec.r_range.1, spec.r_count);
    let (big_k, big_l, nu) = (c.big_k, c.big_l, c.nu);

    let mut g1_growth: Vec<Tracker> = (0..c.d).map(|i| Tracker::new(format!("A3_g1_{}", i + 1))).collect();
    let mut g2_growth: Vec<Tracker> = (0..c.d).map(|i| Tracker::new(format!("A3_g2_{}", i + 1))).collect();
    let mut sigma_growth = Tracker::new("A4_sigma");
    let mut f_growth = Tracker::new("A4_f");
    let mut sigma_lip = Tracker::new("A5_sigma");
    let mut f_lip = Tracker::new("A5_f");
    let mut g_lip: Vec<Tracker> = (0..c.d).map(|i| Tracker::new(format!("A5_g_{}", i + 1))).collect();

    for &t in &ts {
        for x in &xs {
            let mut sig_r = vec![0.0; c.k];
            let mut sig_s = vec![0.0; c.k];
            for &r in &rs {
                for i in 0..c.d {
                    let g1 = c.evaluate(Term::G1(i), t, x, r)?;
                    g1_growth[i].record(g1.abs(), big_k * (1.0 + r.abs()), t, x, r, None);
                    let g2 = c.evaluate(Term::G2(i), t, x, r)?;
                    g2_growth[i].record(g2.abs(), big_k * (1.0 + r.abs().powf(nu)), t, x, r, None);
                }
                let s2: f64 = (0..c.k)
                    .map(|j| c.evaluate(Term::Sigma(j), t, x, r).map(|v| v * v))
                    .sum::<Result<f64>>()?;
                sigma_growth.record(s2, big_l * (r * r + 1.0), t, x, r, None);
                let fv = c.evaluate(Term::F, t, x, r)?;
                f_growth.record(fv.abs(), big_l * (r.abs() + 1.0), t, x, r, None);

                for j in 0..c.k {
                    sig_r[j] = c.evaluate(Term::Sigma(j), t, x, r)?;
                }
                for &s in &rs {
                    if s == r {
                        continue;
                    }
                    let diff = (r - s).abs();
                    for j in 0..c.k {
                        sig_s[j] = c.evaluate(Term::Sigma(j), t, x, s)?;
                    }
                    let ds: f64 = sig_r.iter().zip(&sig_s).map(|(a, b)| (a - b).powi(2)).sum();
                    sigma_lip.record(ds, big_l * diff * diff, t, x, r, Some(s));
                    let df = (fv - c.evaluate(Term::F, t, x, s)?).abs();
                    f_lip.record(df, big_l * diff, t, x, r, Some(s));
                    for i in 0..c.d {
                        let dg = (c.evaluate(Term::G(i), t, x, r)? - c.evaluate(Term::G(i), t, x, s)?).abs();
                        let rhs = big_l
                            * (1.0 + r.abs().powf(nu - 1.0) + s.abs().powf(nu - 1.0))
                            * diff;
                        g_lip[i].record(dg, rhs, t, x, r, Some(s));
                    }
                }
            }
        }
    }

    let mut checks = Vec::new();
    checks.extend(g1_growth.into_iter().map(Tracker::finish));
    checks.extend(g2_growth.into_iter().map(Tracker::finish));
    checks.push(sigma_growth.finish());
    checks.push(f_growth.finish());
    checks.push(sigma_lip.finish());
    checks.push(f_lip.finish());
    checks.extend(g_lip.into_iter().map(Tracker::finish));
    Ok(ValidationReport {
        nu,
        big_k,
        big_l,
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_box() -> SampleSpec {
        SampleSpec::default_for(vec![(0.0, 1.0)])
    }

    #[test]
    fn preset_point_values() {
        let b = make_preset("burgers", 1, 1).unwrap();
        assert_eq!(b.evaluate(Term::G2(0), 0.0, &[0.3], 2.0).unwrap(), 2.0);
        assert_eq!(b.evaluate(Term::G(0), 0.0, &[0.3], 2.0).unwrap(), 2.0);
        let lg = make_preset("linear_gaussian", 1, 1).unwrap();
        assert_eq!(lg.evaluate(Term::Sigma(0), 0.7, &[0.1], -5.0).unwrap(), 1.0);
        let rd = make_preset("reaction_diffusion", 1, 1).unwrap();
        assert_eq!(rd.evaluate(Term::F, 0.0, &[0.5], 0.0).unwrap(), 0.0);
    }

    #[test]
    fn unknown_preset() {
        assert!(matches!(make_preset("kpz", 1, 1), Err(Error::NotFound { .. })));
    }

    #[test]
    fn index_out_of_range() {
        let b = make_preset("burgers", 1, 2).unwrap();
        assert!(matches!(b.evaluate(Term::Sigma(2), 0.0, &[0.5], 1.0), Err(Error::Domain(_))));
        assert!(matches!(b.evaluate(Term::G1(1), 0.0, &[0.5], 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn presets_validate_on_default_box() {
        for name in ["burgers", "reaction_diffusion", "linear_gaussian"] {
            for k in [1, 3] {
                let c = make_preset(name, 1, k).unwrap();
                let report = validate_assumptions(&c, 1.0, &unit_box()).unwrap();
                assert!(report.all_pass(), "{name} k={k}: {report:#?}");
            }
        }
        let c = make_preset("burgers", 2, 1).unwrap();
        let spec = SampleSpec {
            x_count: 3,
            r_count: 41,
            ..SampleSpec::default_for(vec![(0.0, 1.0), (0.0, 1.0)])
        };
        assert!(validate_assumptions(&c, 1.0, &spec).unwrap().all_pass());
    }

    #[test]
    fn burgers_flux_bounds() {
        let c = make_preset("burgers", 1, 1).unwrap();
        let report = validate_assumptions(&c, 1.0, &unit_box()).unwrap();
        assert_eq!(report.nu, 2.0);
        let g = report.check("A5_g_1").unwrap();
        assert!(g.worst_ratio <= 0.5 + 1e-12, "{g:?}");
        assert!(g.witness.is_some());
        let g2 = report.check("A3_g2_1").unwrap();
        assert!(g2.worst_ratio <= 1.0);
    }

    #[test]
    fn quadratic_reaction_fails_linear_growth() {
        let mut c = make_preset("linear_gaussian", 1, 1).unwrap();
        c.f = ScalarFn::Polynomial { coeffs: vec![0.0, 0.0, 1.0] };
        c.big_l = 1.0;
        let report = validate_assumptions(&c, 1.0, &unit_box()).unwrap();
        let a4 = report.check("A4_f").unwrap();
        assert!(!a4.pass);
        assert!(a4.witness.as_ref().unwrap().r.abs() >= 9.0);
    }

    #[test]
    fn sign_noise_fails_lipschitz_near_zero() {
        let mut c = make_preset("linear_gaussian", 1, 1).unwrap();
        c.sigma = vec![ScalarFn::custom(|_, _, r: f64| if r > 0.0 { 1.0 } else if r < 0.0 { -1.0 } else { 0.0 })];
        let report = validate_assumptions(&c, 1.0, &unit_box()).unwrap();
        let a5 = report.check("A5_sigma").unwrap();
        assert!(!a5.pass);
        let w = a5.witness.as_ref().unwrap();
        let s = w.s.unwrap();
        assert!(w.r * s <= 0.0 && w.r != s && w.r.abs() < 0.2 && s.abs() < 0.2, "{w:?}");
    }

    #[test]
    fn reaction_lipschitz_oracle() {
        // Brute-force max of |d/dr (r / (1 + r²))| on a fine grid.
        let max_slope = (0..=400_000)
            .map(|i| -20.0 + 1e-4 * i as f64)
            .map(|r: f64| ((1.0 - r * r) / (1.0 + r * r).powi(2)).abs())
            .fold(0.0, f64::max);
        assert!((max_slope - 1.0).abs() < 1e-12);
        let a = 0.8;
        let f = ScalarFn::Reaction { a, b: 0.0 };
        let rs: Vec<f64> = (0..=200).map(|i| -10.0 + 0.1 * i as f64).collect();
        for &r in &rs {
            for &s in &rs {
                let lhs = (f.eval(0.0, &[], r) - f.eval(0.0, &[], s)).abs();
                assert!(lhs <= a * max_slope * (r - s).abs() + 1e-14);
            }
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let fns = [
            ScalarFn::Polynomial { coeffs: vec![0.3, -1.0, 0.5, 0.25] },
            ScalarFn::Saturating { scale: 0.7, eps0: 1.0 },
            ScalarFn::Reaction { a: 1.0, b: -0.5 },
            ScalarFn::Piecewise { breaks: vec![0.0], pieces: vec![vec![0.0, 1.0], vec![0.0, 1.0, 1.0]] },
        ];
        for f in &fns {
            for r in [-2.3, -0.4, 0.6, 1.7] {
                let h = 1e-6;
                let fd = (f.eval(0.0, &[], r + h) - f.eval(0.0, &[], r - h)) / (2.0 * h);
                assert!((fd - f.deriv(0.0, &[], r)).abs() < 1e-7, "{f:?} at {r}");
            }
        }
    }

    #[test]
    fn truncation_clamps_argument() {
        let c = make_preset("burgers", 1, 1).unwrap().with_truncation(Some(2.0));
        let inside = c.evaluate(Term::G(0), 0.0, &[0.5], 1.5).unwrap();
        assert_eq!(inside, 1.125);
        let far = c.evaluate(Term::G(0), 0.0, &[0.5], 50.0).unwrap();
        assert_eq!(far, 0.5 * 2.5 * 2.5);
        let d = c.evaluate_deriv(Term::G(0), 0.0, &[0.5], 50.0).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn piecewise_table_must_be_consistent() {
        let bad = ScalarFn::Piecewise { breaks: vec![0.0, 1.0], pieces: vec![vec![1.0]] };
        let c = CoefficientSet::new(1, 1, 1.0, 1.0, 1.0, bad, vec![ScalarFn::Zero], vec![ScalarFn::Zero], vec![ScalarFn::Zero]);
        assert!(c.is_err());
    }

    proptest::proptest! {
        #[test]
        fn evaluate_is_pure(r in -50.0f64..50.0, t in 0.0f64..1.0, x in 0.0f64..1.0) {
            for name in ["burgers", "reaction_diffusion", "linear_gaussian"] {
                let c = make_preset(name, 1, 2).unwrap();
                for which in [Term::F, Term::G(0), Term::Sigma(1)] {
                    let a = c.evaluate(which, t, &[x], r).unwrap();
                    let b = c.evaluate(which, t, &[x], r).unwrap();
                    proptest::prop_assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }
}
