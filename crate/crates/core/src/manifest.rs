//! Run manifests: every command writes one next to its outputs, carrying
//! everything needed to reproduce the run (resolved config, seed,
//! checkpoint and output paths).

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use crate::error::{Error, Result};

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Fully resolved configuration (defaults applied, flags folded in).
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    pub checkpoints: Vec<String>,
    pub outputs: Vec<String>,
    pub wall_clock_secs: f64,
    pub artifact_version: String,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> RunManifest {
        RunManifest {
            command: command.to_string(),
            config: BTreeMap::new(),
            seed,
            checkpoints: Vec::new(),
            outputs: Vec::new(),
            wall_clock_secs: 0.0,
            artifact_version: ARTIFACT_VERSION.to_string(),
        }
    }

    pub fn with_config(mut self, config: &crate::config::Config) -> RunManifest {
        self.config = config.values().clone();
        self
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.config.insert(key.to_string(), value.to_string());
    }

    pub fn finish(mut self, started: Instant) -> RunManifest {
        self.wall_clock_secs = started.elapsed().as_secs_f64();
        self
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<RunManifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_manifest(&text)
    }
}

/// Parses and validates manifest JSON.
pub fn parse_manifest(text: &str) -> Result<RunManifest> {
    let m: RunManifest = serde_json::from_str(text)?;
    if m.command.is_empty() {
        return Err(Error::BadValue {
            key: "command".into(),
            message: "manifest command must not be empty".into(),
        });
    }
    if !m.wall_clock_secs.is_finite() || m.wall_clock_secs < 0.0 {
        return Err(Error::BadValue {
            key: "wall_clock_secs".into(),
            message: format!("invalid wall clock {}", m.wall_clock_secs),
        });
    }
    Ok(m)
}
