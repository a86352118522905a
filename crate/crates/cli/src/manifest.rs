use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use ltr_core::artifact::sha256_hex;
use ltr_core::io_util::write_atomic;

use crate::config::RunConfig;

/// Everything needed to audit and repeat a run. Passing the manifest back
/// as `--config` with the same subcommand repeats it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    pub config: RunConfig,
    /// SHA-256 of every file read, keyed by path.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of every file written, keyed by path.
    pub outputs: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, Value>,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
}

pub fn manifest_path(out: &Path, command: &str) -> PathBuf {
    out.join(format!("{command}-manifest.json"))
}

pub fn file_checksum(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

/// Accumulates a manifest while a command runs.
pub struct Recorder {
    manifest: RunManifest,
    started: Instant,
    phase: Option<(String, Instant)>,
}

impl Recorder {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            manifest: RunManifest {
                command: command.to_string(),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                seed: config.seed,
                config: config.clone(),
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                metrics: BTreeMap::new(),
                timings: BTreeMap::new(),
            },
            started: Instant::now(),
            phase: None,
        }
    }

    /// Closes the running phase, if any, and opens `name`.
    pub fn phase(&mut self, name: &str) {
        self.end_phase();
        self.phase = Some((name.to_string(), Instant::now()));
    }

    fn end_phase(&mut self) {
        if let Some((name, t)) = self.phase.take() {
            self.manifest.timings.insert(name, t.elapsed().as_secs_f64());
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let sum = file_checksum(path)?;
        self.manifest.inputs.insert(path.display().to_string(), sum);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        let sum = file_checksum(path)?;
        self.manifest.outputs.insert(path.display().to_string(), sum);
        Ok(())
    }

    pub fn metric(&mut self, key: impl Into<String>, value: impl Serialize) -> Result<()> {
        self.manifest.metrics.insert(key.into(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn finish(mut self) -> Result<RunManifest> {
        self.end_phase();
        self.manifest.timings.insert("total".into(), self.started.elapsed().as_secs_f64());
        let path = manifest_path(&self.manifest.config.out, &self.manifest.command);
        write_atomic(&path, serde_json::to_string_pretty(&self.manifest)?.as_bytes())?;
        Ok(self.manifest)
    }
}
