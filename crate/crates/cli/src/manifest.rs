//! Canonical configuration hash and the per-run manifest.

use std::path::Path;

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::CliError;

/// Resolved configuration as JSON with keys sorted at every level.
/// The output directory is dropped because it does not affect any artifact.
pub fn canonical_echo(config: &RunConfig) -> Value {
    let mut value = serde_json::to_value(config).expect("configuration serializes to JSON");
    if let Value::Object(map) = &mut value {
        map.remove("out");
    }
    sort_keys(value)
}

fn sort_keys(value: Value) -> Value {
    match value {
        Value::Object(map) => {
            let mut entries: Vec<(String, Value)> = map.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            Value::Object(entries.into_iter().map(|(k, v)| (k, sort_keys(v))).collect())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(sort_keys).collect()),
        other => other,
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Canonical hash and echo of a resolved configuration.
pub fn manifest(config: &RunConfig) -> (String, Value) {
    let echo = canonical_echo(config);
    let text = serde_json::to_string(&echo).expect("JSON value serializes");
    (sha256_hex(text.as_bytes()), echo)
}

#[derive(Debug, Serialize)]
pub struct ArtifactEntry {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: String,
    pub status: &'static str,
    pub config_hash: String,
    pub config: Value,
    pub artifacts: Vec<ArtifactEntry>,
}

impl Manifest {
    pub fn new(subcommand: &str, config: &RunConfig) -> Self {
        let (config_hash, config) = manifest(config);
        Self {
            tool: "spde-ldp",
            version: env!("CARGO_PKG_VERSION"),
            subcommand: subcommand.to_string(),
            status: "ok",
            config_hash,
            config,
            artifacts: Vec::new(),
        }
    }

    /// Hashes the named artifacts in `dir` and writes `manifest.json`.
    pub fn write(mut self, dir: &Path, artifacts: &[String], status: &'static str) -> Result<(), CliError> {
        self.status = status;
        let mut names = artifacts.to_vec();
        names.sort();
        names.dedup();
        for name in names {
            let bytes = std::fs::read(dir.join(&name)).map_err(CliError::output)?;
            self.artifacts.push(ArtifactEntry {
                sha256: sha256_hex(&bytes),
                name,
            });
        }
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        std::fs::write(dir.join("manifest.json"), text + "\n").map_err(CliError::output)
    }
}
