//! Small-noise large-deviation laboratory for semilinear parabolic SPDEs
//! with multiplicative noise on bounded domains of dimension one or two.
//!
//! - [`grid_kernel`]: grids, the divergence-form operator and its Dirichlet semigroup.
//! - [`coefficients`]: drift, flux and noise coefficients with assumption checks.
//! - [`stochastics`]: Brownian paths, piecewise-constant controls, Girsanov weights.
//! - [`evolvers`]: exponential-Euler integrators for the SPDE, controlled process and skeleton.
//! - [`action`]: the rate function and the minimum action method.
//! - [`ldp_lab`]: rare-event Monte Carlo, rate fits, convergence and tightness experiments.

// Negated comparisons such as `!(x > 0.0)` are used on purpose so that NaN
// inputs are rejected together with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::too_many_arguments, clippy::needless_range_loop)]

pub mod action;
pub mod coefficients;
pub mod error;
pub mod evolvers;
pub mod grid_kernel;
pub mod ldp_lab;
pub mod stochastics;

pub use error::{Error, Result};
