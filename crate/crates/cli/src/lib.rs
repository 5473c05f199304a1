//! Command-line driver: reads a TOML run configuration, runs one pipeline
//! stage and writes CSV/JSON artifacts plus a `manifest.json` carrying the
//! canonical configuration hash.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure (a
//! `diagnostics.json` is written next to the manifest).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod manifest;
pub mod svg;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use config::{load_table, RunConfig};
use manifest::Manifest;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("numerical failure: {0}")]
    Numerical(#[from] spde_ldp::Error),

    #[error("checks failed: {0}")]
    ChecksFailed(String),

    #[error("cannot write to the output directory (field `out`): {0}")]
    Output(std::io::Error),
}

impl CliError {
    pub fn output(e: std::io::Error) -> Self {
        CliError::Output(e)
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Output(_) => 2,
            CliError::Numerical(_) | CliError::ChecksFailed(_) => 3,
        }
    }

    /// Machine-readable details for `diagnostics.json`.
    pub fn diagnostics(&self) -> Value {
        use spde_ldp::Error as E;
        let details = match self {
            CliError::Numerical(E::Convergence(d)) => json!({ "kind": "convergence", "solver": d }),
            CliError::Numerical(E::NonConvergence(av)) => json!({
                "kind": "optimizer_non_convergence",
                "residual": av.residual,
                "iterations": av.iterations,
                "trace": av.trace,
            }),
            CliError::Numerical(E::BlowUp { t, norm }) => json!({ "kind": "blow_up", "t": t, "norm": norm }),
            CliError::Numerical(E::StepGuard { t, dt, limit }) => {
                json!({ "kind": "step_guard", "t": t, "dt": dt, "limit": limit })
            }
            CliError::Numerical(E::InsufficientData { eps }) => json!({ "kind": "insufficient_data", "eps": eps }),
            CliError::Numerical(E::DegenerateEstimate(m)) => json!({ "kind": "degenerate_estimate", "detail": m }),
            CliError::Numerical(_) => json!({ "kind": "numerical" }),
            CliError::ChecksFailed(_) => json!({ "kind": "checks_failed" }),
            CliError::Config { field, .. } => json!({ "kind": "config", "field": field }),
            CliError::Output(_) => json!({ "kind": "output" }),
        };
        json!({ "error": self.to_string(), "details": details })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Ensemble of stochastic runs; writes path 0 and per-path norms.
    Simulate,
    /// Skeleton equation for the configured control.
    Skeleton,
    /// Controlled stochastic run on path 0.
    Controlled,
    /// Minimum action for the configured event.
    MinimizeAction,
    /// Monte Carlo probability of the configured event at `eps`.
    McEstimate,
    /// Probabilities over `eps_grid` and the affine rate fit.
    FitRate,
    /// Distance of controlled runs to the skeleton over `eps_grid`.
    Converge,
    /// Tail probabilities of `sup_t |u|_rho` over `eps_grid` and `levels`.
    Tightness,
    /// Heat-kernel estimate fit on the configured grid.
    VerifyKernel,
    /// Growth and Lipschitz checks of the coefficients.
    ValidateCoeffs,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Skeleton => "skeleton",
            Command::Controlled => "controlled",
            Command::MinimizeAction => "minimize-action",
            Command::McEstimate => "mc-estimate",
            Command::FitRate => "fit-rate",
            Command::Converge => "converge",
            Command::Tightness => "tightness",
            Command::VerifyKernel => "verify-kernel",
            Command::ValidateCoeffs => "validate-coeffs",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "spde-ldp", version, about = "Small-noise large-deviation lab for semilinear parabolic SPDEs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// TOML run configuration; defaults are used when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Overrides the `seed` field.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Overrides the `out` field.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Worker threads for path ensembles; results do not depend on it.
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    /// `key.path=value`, applied after the file; repeatable.
    #[arg(long = "override", global = true)]
    pub overrides: Vec<String>,
}

/// Loads, overrides and resolves the configuration of an invocation.
pub fn resolve_config(
    path: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<RunConfig, CliError> {
    let mut overrides = overrides.to_vec();
    if let Some(s) = seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(o) = out {
        overrides.push(format!("out={}", toml::Value::String(o.display().to_string())));
    }
    RunConfig::from_table(load_table(path, &overrides)?)?.resolve()
}

/// Collects artifact names as they are written.
pub struct RunDir {
    dir: PathBuf,
    written: Vec<String>,
}

impl RunDir {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(CliError::output)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        std::fs::write(self.dir.join(name), bytes).map_err(CliError::output)?;
        self.written.push(name.to_string());
        Ok(())
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(value).expect("artifact serializes") + "\n";
        self.write_bytes(name, text.as_bytes())
    }

    /// Buffers a writer-based export and stores it.
    pub fn write_with(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut Vec<u8>) -> spde_ldp::Result<()>,
    ) -> Result<(), CliError> {
        let mut buf = Vec::new();
        f(&mut buf).map_err(|e| match e {
            spde_ldp::Error::Io(io) => CliError::Output(io),
            other => CliError::Numerical(other),
        })?;
        self.write_bytes(name, &buf)
    }

    pub fn written(&self) -> &[String] {
        &self.written
    }
}

/// Runs one subcommand and writes the manifest; on numerical failure the
/// diagnostics file and a manifest with status `failed` are written too.
pub fn execute(command: Command, config: &RunConfig, workers: Option<usize>) -> Result<String, CliError> {
    let mut dir = RunDir::create(&config.out)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        if n == 0 {
            return Err(CliError::Config {
                field: "workers".to_string(),
                message: "must be at least 1".to_string(),
            });
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| CliError::Config {
        field: "workers".to_string(),
        message: e.to_string(),
    })?;
    let result = pool.install(|| commands::dispatch(command, config, &mut dir));
    let manifest = Manifest::new(command.name(), config);
    match result {
        Ok(summary) => {
            manifest.write(dir.path(), dir.written(), "ok")?;
            Ok(summary)
        }
        Err(e) => {
            if e.exit_code() == 3 {
                dir.write_json("diagnostics.json", &e.diagnostics())?;
                manifest.write(dir.path(), dir.written(), "failed")?;
            }
            Err(e)
        }
    }
}

/// Entry point of the binary; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let outcome = resolve_config(cli.config.as_deref(), &cli.overrides, cli.seed, cli.out.as_deref())
        .and_then(|config| execute(cli.command, &config, cli.workers));
    match outcome {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
